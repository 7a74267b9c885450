//! Shared test support: a central finite-difference oracle for gradients and
//! the per-op check suites built on it. The oracle only drives the public
//! forward API, so it stays independent of the backward implementation it
//! verifies.

use fogfuse::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f32 = 1e-3;
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug, Default, Clone, Copy)]
pub struct FdReport {
    pub instances: usize,
    pub coords: usize,
    pub max_rel_err: f64,
}

impl FdReport {
    fn merge(&mut self, other: FdReport) {
        self.instances += other.instances;
        self.coords += other.coords;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }

    pub fn ok(&self) -> bool {
        self.max_rel_err <= FD_TOL
    }
}

/// Checks analytic gradients of a scalar-valued graph against central finite
/// differences, coordinate by coordinate. Error metric: |a - n| / max(|a|,
/// |n|, 1), i.e. relative error with an absolute floor of one, evaluated at
/// FD_TOL. Loss builders should keep the loss magnitude around O(1) so the
/// f32 forward noise stays well under the tolerance.
pub fn gradcheck(
    leaves: &[(Vec<usize>, Vec<f32>)],
    f: &dyn Fn(&mut Tape, &[Tensor]) -> Tensor,
) -> FdReport {
    let params: Vec<Tensor> = leaves
        .iter()
        .map(|(shape, data)| Tensor::param(shape.clone(), data.clone()).unwrap())
        .collect();

    let mut tape = Tape::new();
    let loss = f(&mut tape, &params);
    assert_eq!(loss.numel(), 1, "gradcheck needs a scalar loss");
    tape.backward(&loss).unwrap();
    let analytic: Vec<Vec<f32>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = |leaves: &[(Vec<usize>, Vec<f32>)]| -> f64 {
        let params: Vec<Tensor> = leaves
            .iter()
            .map(|(shape, data)| Tensor::from_vec(shape.clone(), data.clone()).unwrap())
            .collect();
        let mut tape = Tape::inference();
        f(&mut tape, &params).item() as f64
    };

    let mut report = FdReport { instances: 1, coords: 0, max_rel_err: 0.0 };
    let mut work: Vec<(Vec<usize>, Vec<f32>)> = leaves.to_vec();
    for (pi, (_, base)) in leaves.iter().enumerate() {
        for ci in 0..base.len() {
            let x = base[ci];
            let xp = x + FD_EPS;
            let xm = x - FD_EPS;
            // Use the f32-representable step actually applied.
            let eps_eff = (xp - xm) as f64;

            work[pi].1[ci] = xp;
            let lp = eval(&work);
            work[pi].1[ci] = xm;
            let lm = eval(&work);
            work[pi].1[ci] = x;

            let numeric = (lp - lm) / eps_eff;
            let a = analytic[pi][ci] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.coords += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
        }
    }
    report
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f32, hi: f32) -> (Vec<usize>, Vec<f32>) {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    (shape, data)
}

/// Draws until no value sits within `margin` of any kink location.
fn away_from(rng: &mut ChaCha8Rng, shape: Vec<usize>, kinks: &[f32], margin: f32) -> (Vec<usize>, Vec<f32>) {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f32 = rng.random_range(-2.0..2.0);
            if kinks.iter().all(|k| (v - k).abs() > margin) {
                break v;
            }
        })
        .collect();
    (shape, data)
}

pub fn check_conv2d(instances: usize) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0417);
    let mut report = FdReport::default();
    for i in 0..instances {
        let (stride, pad) = [(1, 0), (1, 1), (2, 1)][i % 3];
        let x = uniform(&mut rng, vec![1, 2, 5, 6], -1.0, 1.0);
        let k = uniform(&mut rng, vec![2, 2, 3, 3], -0.7, 0.7);
        let b = uniform(&mut rng, vec![2], -0.3, 0.3);
        report.merge(gradcheck(&[x, k, b], &move |tape, p| {
            let c = tape.conv2d(&p[0], &p[1], stride, pad).unwrap();
            let c = tape.bias_add(&c, &p[2]).unwrap();
            let s = tape.sum_all(&c);
            tape.scale(&s, 0.02)
        }));
    }
    report
}

pub fn check_maxpool(instances: usize) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0x90011);
    let mut report = FdReport::default();
    for _ in 0..instances {
        // Separate window occupants by more than 2*eps so the argmax is stable
        // under perturbation.
        let shape = vec![1, 2, 4, 4];
        let mut base: Vec<f32> = (0..32).map(|j| (j % 17) as f32 * 0.05).collect();
        for v in base.iter_mut() {
            *v += rng.random_range(-0.02f32..0.02);
        }
        report.merge(gradcheck(&[(shape, base)], &|tape, p| {
            let y = tape.maxpool2(&p[0]).unwrap();
            let s = tape.sum_all(&y);
            tape.scale(&s, 0.125)
        }));
    }
    report
}

pub fn check_sigmoid(instances: usize) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0x519);
    let mut report = FdReport::default();
    for _ in 0..instances {
        let x = uniform(&mut rng, vec![2, 3, 4], -3.0, 3.0);
        report.merge(gradcheck(&[x], &|tape, p| {
            let y = tape.sigmoid(&p[0]);
            let s = tape.sum_all(&y);
            tape.scale(&s, 0.05)
        }));
    }
    report
}

pub fn check_relu(instances: usize) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7E1);
    let mut report = FdReport::default();
    for _ in 0..instances {
        let x = away_from(&mut rng, vec![3, 5], &[0.0], 0.01);
        report.merge(gradcheck(&[x], &|tape, p| {
            let y = tape.relu(&p[0]);
            let s = tape.sum_all(&y);
            tape.scale(&s, 0.05)
        }));
    }
    report
}

/// The entropy gate path: 1x1 conv over stacked entropy channels, sigmoid,
/// channel-block multiply into the concatenated features.
pub fn check_gating(instances: usize) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6A7E);
    let mut report = FdReport::default();
    for _ in 0..instances {
        let feats = uniform(&mut rng, vec![1, 8, 3, 4], -1.0, 1.0);
        let entropy = uniform(&mut rng, vec![1, 4, 3, 4], 0.0, 1.0);
        let gate_w = uniform(&mut rng, vec![4, 4, 1, 1], -0.8, 0.8);
        report.merge(gradcheck(&[feats, entropy, gate_w], &|tape, p| {
            let pre = tape.conv2d(&p[1], &p[2], 1, 0).unwrap();
            let gate = tape.sigmoid(&pre);
            let fused = tape.group_scale(&p[0], &gate, &[2, 2, 2, 2]).unwrap();
            let s = tape.sum_all(&fused);
            tape.scale(&s, 0.05)
        }));
    }
    report
}

pub fn check_classification_loss(instances: usize) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0xCE77);
    let mut report = FdReport::default();
    for _ in 0..instances {
        let logits = uniform(&mut rng, vec![6, 2], -2.0, 2.0);
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..2usize)).collect();
        report.merge(gradcheck(&[logits], &move |tape, p| {
            let l = tape.softmax_ce(&p[0], &labels).unwrap();
            let s = tape.sum_all(&l);
            tape.scale(&s, 1.0 / 12.0)
        }));
    }
    report
}

pub fn check_huber_loss(instances: usize) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4B3);
    let mut report = FdReport::default();
    for _ in 0..instances {
        // The penalty switches branch at |x| = 1; keep samples clear of it.
        let x = away_from(&mut rng, vec![8], &[-1.0, 1.0], 0.01);
        report.merge(gradcheck(&[x], &|tape, p| {
            let h = tape.huber_sum(&p[0]);
            tape.scale(&h, 0.125)
        }));
    }
    report
}

/// True when every 2x2 window of the padded sigmoid map has its top two
/// values separated by more than `margin`; near-ties make the pooled graph
/// non-differentiable, so such draws are rejected.
fn pool_windows_are_tie_free(x: &(Vec<usize>, Vec<f32>), k: &(Vec<usize>, Vec<f32>), margin: f32) -> bool {
    let xt = Tensor::from_vec(x.0.clone(), x.1.clone()).unwrap();
    let kt = Tensor::from_vec(k.0.clone(), k.1.clone()).unwrap();
    let mut tape = Tape::inference();
    let c = tape.conv2d(&xt, &kt, 1, 1).unwrap();
    let s = tape.sigmoid(&c);
    let padded = tape.pad_spatial(&s, 1, 0).unwrap();
    let (ch, h, w) = (padded.shape()[1], padded.shape()[2], padded.shape()[3]);
    for c in 0..ch {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let mut vals = [0.0f32; 4];
                for (i, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    vals[i] = padded.data()[(c * h + oy * 2 + dy) * w + ox * 2 + dx];
                }
                vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if vals[0] - vals[1] <= margin {
                    return false;
                }
            }
        }
    }
    true
}

/// A composite graph exercising conv, bias, sigmoid, pad, pooling, gating,
/// concat, row selection and both losses in one backward pass.
pub fn check_composite(instances: usize) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC03B);
    let mut report = FdReport::default();
    for _ in 0..instances {
        let (x, k) = loop {
            let x = uniform(&mut rng, vec![1, 2, 5, 6], -1.0, 1.0);
            let k = uniform(&mut rng, vec![4, 2, 3, 3], -0.6, 0.6);
            if pool_windows_are_tie_free(&x, &k, 5e-3) {
                break (x, k);
            }
        };
        let e = uniform(&mut rng, vec![1, 2, 3, 3], 0.0, 1.0);
        let gw = uniform(&mut rng, vec![2, 2, 1, 1], -0.8, 0.8);
        let labels = vec![1usize, 0, 1];
        let targets: Vec<f32> = (0..6).map(|_| rng.random_range(-0.5..0.5)).collect();
        report.merge(gradcheck(&[x, k, e, gw], &move |tape, p| {
            let c = tape.conv2d(&p[0], &p[1], 1, 1).unwrap(); // [1,4,5,6]
            let s = tape.sigmoid(&c);
            let padded = tape.pad_spatial(&s, 1, 0).unwrap(); // [1,4,6,6]
            let pooled = tape.maxpool2(&padded).unwrap(); // [1,4,3,3]
            let pre = tape.conv2d(&p[2], &p[3], 1, 0).unwrap();
            let gate = tape.sigmoid(&pre);
            let fused = tape.group_scale(&pooled, &gate, &[2, 2]).unwrap();
            let both = tape.concat(&[&fused, &p[2]], 1).unwrap(); // [1,6,3,3]
            let rows = tape.flatten_anchors(&both, 2).unwrap(); // [27,2]
            let sel = tape.select_rows(&rows, &[0, 5, 11]).unwrap();
            let ce = tape.softmax_ce(&sel, &labels).unwrap();
            let ce_sum = tape.sum_all(&ce);
            let reg = tape.select_rows(&rows, &[2, 7, 13]).unwrap();
            let res = tape.sub_const(&reg, &targets).unwrap();
            let hub = tape.huber_sum(&res);
            let total = tape.add(&ce_sum, &hub).unwrap();
            tape.scale(&total, 1.0 / 8.0)
        }));
    }
    report
}

pub fn all_gradient_checks(instances: usize) -> Vec<(&'static str, FdReport)> {
    vec![
        ("conv2d", check_conv2d(instances)),
        ("maxpool2", check_maxpool(instances)),
        ("sigmoid", check_sigmoid(instances)),
        ("relu", check_relu(instances)),
        ("gating", check_gating(instances)),
        ("classification_loss", check_classification_loss(instances)),
        ("huber_loss", check_huber_loss(instances)),
        ("composite", check_composite(instances)),
    ]
}
