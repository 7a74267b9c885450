//! Forward and backward kernels over row-major buffers. Every reduction runs
//! in a fixed sequential order with an f64 accumulator, so results are
//! bit-identical across runs.

/// [batch, channels, height, width]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Shape4 {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn numel(&self) -> usize {
        self.b * self.c * self.h * self.w
    }
}

pub(crate) fn conv2d_out_dims(
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let oh = (in_h + 2 * pad - kh) / stride + 1;
    let ow = (in_w + 2 * pad - kw) / stride + 1;
    (oh, ow)
}

pub(crate) fn conv2d_forward(
    x: &[f32],
    xs: Shape4,
    w: &[f32],
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let (oh, ow) = conv2d_out_dims(xs.h, xs.w, kh, kw, stride, pad);
    let mut out = vec![0.0f32; xs.b * o * oh * ow];
    let mut plane = vec![0.0f64; oh * ow];
    for b in 0..xs.b {
        for oc in 0..o {
            plane.iter_mut().for_each(|v| *v = 0.0);
            for ic in 0..xs.c {
                let xbase = (b * xs.c + ic) * xs.h * xs.w;
                let wbase = (oc * xs.c + ic) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w[wbase + ky * kw + kx] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= xs.h {
                                continue;
                            }
                            let iy = iy - pad;
                            let xrow = xbase + iy * xs.w;
                            let prow = oy * ow;
                            for ox in 0..ow {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= xs.w {
                                    continue;
                                }
                                plane[prow + ox] += x[xrow + ix - pad] as f64 * wv;
                            }
                        }
                    }
                }
            }
            let obase = (b * o + oc) * oh * ow;
            for (i, v) in plane.iter().enumerate() {
                out[obase + i] = *v as f32;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f32],
    xs: Shape4,
    w: &[f32],
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dout: &[f32],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let (oh, ow) = conv2d_out_dims(xs.h, xs.w, kh, kw, stride, pad);
    let dx = if want_dx {
        let mut dx = vec![0.0f32; xs.numel()];
        let mut plane = vec![0.0f64; xs.h * xs.w];
        for b in 0..xs.b {
            for ic in 0..xs.c {
                plane.iter_mut().for_each(|v| *v = 0.0);
                for oc in 0..o {
                    let dbase = (b * o + oc) * oh * ow;
                    let wbase = (oc * xs.c + ic) * kh * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = w[wbase + ky * kw + kx] as f64;
                            if wv == 0.0 {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = oy * stride + ky;
                                if iy < pad || iy - pad >= xs.h {
                                    continue;
                                }
                                let prow = (iy - pad) * xs.w;
                                let drow = dbase + oy * ow;
                                for ox in 0..ow {
                                    let ix = ox * stride + kx;
                                    if ix < pad || ix - pad >= xs.w {
                                        continue;
                                    }
                                    plane[prow + ix - pad] += dout[drow + ox] as f64 * wv;
                                }
                            }
                        }
                    }
                }
                let xbase = (b * xs.c + ic) * xs.h * xs.w;
                for (i, v) in plane.iter().enumerate() {
                    dx[xbase + i] = *v as f32;
                }
            }
        }
        Some(dx)
    } else {
        None
    };

    let dw = if want_dw {
        let mut dw = vec![0.0f32; o * xs.c * kh * kw];
        for oc in 0..o {
            for ic in 0..xs.c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0f64;
                        for b in 0..xs.b {
                            let dbase = (b * o + oc) * oh * ow;
                            let xbase = (b * xs.c + ic) * xs.h * xs.w;
                            for oy in 0..oh {
                                let iy = oy * stride + ky;
                                if iy < pad || iy - pad >= xs.h {
                                    continue;
                                }
                                let xrow = xbase + (iy - pad) * xs.w;
                                let drow = dbase + oy * ow;
                                for ox in 0..ow {
                                    let ix = ox * stride + kx;
                                    if ix < pad || ix - pad >= xs.w {
                                        continue;
                                    }
                                    acc += dout[drow + ox] as f64 * x[xrow + ix - pad] as f64;
                                }
                            }
                        }
                        dw[((oc * xs.c + ic) * kh + ky) * kw + kx] = acc as f32;
                    }
                }
            }
        }
        Some(dw)
    } else {
        None
    };

    (dx, dw)
}

/// 2x2/stride-2 max pooling. Returns the pooled values and, per output cell,
/// the flat spatial index of the winning input cell. Ties go to the first
/// cell in row-major window order.
pub(crate) fn maxpool2_forward(x: &[f32], xs: Shape4) -> (Vec<f32>, Vec<u32>) {
    let oh = xs.h / 2;
    let ow = xs.w / 2;
    let mut out = vec![0.0f32; xs.b * xs.c * oh * ow];
    let mut argmax = vec![0u32; out.len()];
    for bc in 0..xs.b * xs.c {
        let xbase = bc * xs.h * xs.w;
        let obase = bc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0u32;
                for ky in 0..2 {
                    for kx in 0..2 {
                        let iy = oy * 2 + ky;
                        let ix = ox * 2 + kx;
                        let v = x[xbase + iy * xs.w + ix];
                        if v > best {
                            best = v;
                            best_idx = (iy * xs.w + ix) as u32;
                        }
                    }
                }
                out[obase + oy * ow + ox] = best;
                argmax[obase + oy * ow + ox] = best_idx;
            }
        }
    }
    (out, argmax)
}

pub(crate) fn maxpool2_backward(xs: Shape4, argmax: &[u32], dout: &[f32]) -> Vec<f32> {
    let oh = xs.h / 2;
    let ow = xs.w / 2;
    let mut dx = vec![0.0f32; xs.numel()];
    for bc in 0..xs.b * xs.c {
        let xbase = bc * xs.h * xs.w;
        let obase = bc * oh * ow;
        for i in 0..oh * ow {
            dx[xbase + argmax[obase + i] as usize] += dout[obase + i];
        }
    }
    dx
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Per-row softmax cross-entropy against integer labels. Returns one loss per
/// row; numerically stabilized by the row max.
pub(crate) fn softmax_ce_forward(z: &[f32], rows: usize, cols: usize, labels: &[usize]) -> Vec<f32> {
    debug_assert_eq!(labels.len(), rows);
    let mut out = vec![0.0f32; rows];
    for r in 0..rows {
        let row = &z[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for &v in row {
            sum += ((v - m) as f64).exp();
        }
        let lse = m as f64 + sum.ln();
        out[r] = (lse - row[labels[r]] as f64) as f32;
    }
    out
}

pub(crate) fn softmax_ce_backward(
    z: &[f32],
    rows: usize,
    cols: usize,
    labels: &[usize],
    dout: &[f32],
) -> Vec<f32> {
    let mut dz = vec![0.0f32; rows * cols];
    for r in 0..rows {
        let row = &z[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for &v in row {
            sum += ((v - m) as f64).exp();
        }
        let g = dout[r] as f64;
        for c in 0..cols {
            let p = ((row[c] - m) as f64).exp() / sum;
            let y = if c == labels[r] { 1.0 } else { 0.0 };
            dz[r * cols + c] = ((p - y) * g) as f32;
        }
    }
    dz
}

pub(crate) fn huber(v: f32) -> f64 {
    let a = v.abs() as f64;
    if a <= 1.0 {
        0.5 * a * a
    } else {
        a - 0.5
    }
}

pub(crate) fn huber_grad(v: f32) -> f32 {
    if v.abs() <= 1.0 {
        v
    } else {
        v.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        x: &[f32],
        xs: Shape4,
        w: &[f32],
        o: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f32> {
        let (oh, ow) = conv2d_out_dims(xs.h, xs.w, kh, kw, stride, pad);
        let mut out = vec![0.0f32; xs.b * o * oh * ow];
        for b in 0..xs.b {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for ic in 0..xs.c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize
                                    {
                                        continue;
                                    }
                                    let xv = x[((b * xs.c + ic) * xs.h + iy as usize) * xs.w
                                        + ix as usize];
                                    let wv = w[((oc * xs.c + ic) * kh + ky) * kw + kx];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out[((b * o + oc) * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_seven_loop_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let xs = Shape4 { b: 2, c: 3, h: 8, w: 8 };
        let x: Vec<f32> = (0..xs.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f32> = (0..4 * 3 * 3 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let fast = conv2d_forward(&x, xs, &w, 4, 3, 3, stride, pad);
            let slow = naive_conv(&x, xs, &w, 4, 3, 3, stride, pad);
            for (a, b) in fast.iter().zip(&slow) {
                let denom = b.abs().max(1.0);
                assert!((a - b).abs() / denom < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn maxpool_tie_break_takes_first_in_row_major_order() {
        let xs = Shape4 { b: 1, c: 1, h: 2, w: 2 };
        let (out, argmax) = maxpool2_forward(&[7.0, 7.0, 7.0, 7.0], xs);
        assert_eq!(out, vec![7.0]);
        assert_eq!(argmax, vec![0]);
    }
}
