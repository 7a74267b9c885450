//! Operation tape for reverse-mode differentiation. Ops validate shapes,
//! compute forward values, and (when recording) push one record each; a
//! backward pass replays the records exactly once in reverse execution order.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::ops::{self, Shape4};
use crate::tensor::{Tensor, TensorId};

enum Op {
    Leaf,
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    BiasAdd { x: usize, b: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    MaxPool2 { x: usize, argmax: Vec<u32> },
    PadSpatial { x: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f32 },
    GroupScale { x: usize, gate: usize, groups: Vec<usize> },
    SumAll { x: usize },
    SelectRows { x: usize, idx: Vec<usize>, cols: usize },
    FlattenAnchors { x: usize, classes: usize },
    SoftmaxCe { x: usize, labels: Vec<usize> },
    HuberSum { x: usize },
    SubConst { x: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations, confined to one logical thread.
pub struct Tape {
    nodes: Vec<Node>,
    index: HashMap<TensorId, usize>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), index: HashMap::new(), recording: true }
    }

    /// Forward-only tape: ops compute values without recording anything.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), index: HashMap::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node_of(&mut self, t: &Tensor) -> usize {
        if let Some(&i) = self.index.get(&t.id()) {
            return i;
        }
        self.push(t.clone(), Op::Leaf, t.requires_grad())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> usize {
        let idx = self.nodes.len();
        self.index.insert(value.id(), idx);
        self.nodes.push(Node { value, op, needs_grad });
        idx
    }

    fn record1(&mut self, input: &Tensor, out: Tensor, op: impl FnOnce(usize) -> Op) -> Tensor {
        if self.recording {
            let xi = self.node_of(input);
            let needs = self.nodes[xi].needs_grad;
            self.push(out.clone(), op(xi), needs);
        }
        out
    }

    fn record2(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        out: Tensor,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Tensor {
        if self.recording {
            let ai = self.node_of(a);
            let bi = self.node_of(b);
            let needs = self.nodes[ai].needs_grad || self.nodes[bi].needs_grad;
            self.push(out.clone(), op(ai, bi), needs);
        }
        out
    }

    fn shape4(t: &Tensor, op: &'static str) -> Result<Shape4> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::shape(op, format!("expected rank-4 tensor, got shape {s:?}")));
        }
        Ok(Shape4 { b: s[0], c: s[1], h: s[2], w: s[3] })
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// 2-D convolution of [B,C,H,W] with kernels [O,C,kH,kW].
    pub fn conv2d(&mut self, x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let xs = Self::shape4(x, "conv2d")?;
        let ws = Self::shape4(w, "conv2d")?;
        if ws.c != xs.c {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel channel dim 1 is {}, input channel dim 1 is {}",
                    ws.c, xs.c
                ),
            ));
        }
        if stride < 1 {
            return Err(Error::shape("conv2d", "stride must be >= 1".to_string()));
        }
        if ws.h > xs.h + 2 * padding || ws.w > xs.w + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {}x{} exceeds padded input {}x{} (dims 2,3)",
                    ws.h,
                    ws.w,
                    xs.h + 2 * padding,
                    xs.w + 2 * padding
                ),
            ));
        }
        let (oh, ow) = ops::conv2d_out_dims(xs.h, xs.w, ws.h, ws.w, stride, padding);
        let data = ops::conv2d_forward(x.data(), xs, w.data(), ws.b, ws.h, ws.w, stride, padding);
        let out = Tensor::from_vec(vec![xs.b, ws.b, oh, ow], data)?;
        Ok(self.record2(x, w, out, |xi, wi| Op::Conv2d { x: xi, w: wi, stride, pad: padding }))
    }

    /// Adds a per-channel bias [C] to a [B,C,H,W] tensor.
    pub fn bias_add(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let xs = Self::shape4(x, "bias_add")?;
        if b.shape() != [xs.c] {
            return Err(Error::shape(
                "bias_add",
                format!("bias shape {:?} does not match channel dim 1 = {}", b.shape(), xs.c),
            ));
        }
        let mut data = x.data().to_vec();
        let hw = xs.h * xs.w;
        for bi in 0..xs.b {
            for c in 0..xs.c {
                let base = (bi * xs.c + c) * hw;
                let bv = b.data()[c];
                for v in &mut data[base..base + hw] {
                    *v += bv;
                }
            }
        }
        let out = Tensor::from_vec(x.shape().to_vec(), data)?;
        Ok(self.record2(x, b, out, |xi, bi| Op::BiasAdd { x: xi, b: bi }))
    }

    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::from_vec(x.shape().to_vec(), data).expect("relu keeps shape");
        self.record1(x, out, |xi| Op::Relu { x: xi })
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|&v| ops::sigmoid(v)).collect();
        let out = Tensor::from_vec(x.shape().to_vec(), data).expect("sigmoid keeps shape");
        self.record1(x, out, |xi| Op::Sigmoid { x: xi })
    }

    /// 2x2 stride-2 max pooling; both spatial extents must be even.
    pub fn maxpool2(&mut self, x: &Tensor) -> Result<Tensor> {
        let xs = Self::shape4(x, "maxpool2")?;
        if xs.h % 2 != 0 || xs.w % 2 != 0 {
            return Err(Error::shape(
                "maxpool2",
                format!("spatial extents must be even, got {}x{} (dims 2,3)", xs.h, xs.w),
            ));
        }
        let (data, argmax) = ops::maxpool2_forward(x.data(), xs);
        let out = Tensor::from_vec(vec![xs.b, xs.c, xs.h / 2, xs.w / 2], data)?;
        if self.recording {
            let xi = self.node_of(x);
            let needs = self.nodes[xi].needs_grad;
            self.push(out.clone(), Op::MaxPool2 { x: xi, argmax }, needs);
        }
        Ok(out)
    }

    /// Zero-pads the bottom/right spatial edges. Combined with `maxpool2`
    /// this realizes ceil-mode pooling for odd extents.
    pub fn pad_spatial(&mut self, x: &Tensor, extra_h: usize, extra_w: usize) -> Result<Tensor> {
        let xs = Self::shape4(x, "pad_spatial")?;
        if extra_h == 0 && extra_w == 0 {
            return Ok(x.clone());
        }
        let nh = xs.h + extra_h;
        let nw = xs.w + extra_w;
        let mut data = vec![0.0f32; xs.b * xs.c * nh * nw];
        for bc in 0..xs.b * xs.c {
            for y in 0..xs.h {
                let src = (bc * xs.h + y) * xs.w;
                let dst = (bc * nh + y) * nw;
                data[dst..dst + xs.w].copy_from_slice(&x.data()[src..src + xs.w]);
            }
        }
        let out = Tensor::from_vec(vec![xs.b, xs.c, nh, nw], data)?;
        Ok(self.record1(x, out, |xi| Op::PadSpatial { x: xi }))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
        if inputs.is_empty() {
            return Err(Error::shape("concat", "no inputs".to_string()));
        }
        let rank = inputs[0].shape().len();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} out of range for rank {rank}")));
        }
        let mut out_shape = inputs[0].shape().to_vec();
        for (i, t) in inputs.iter().enumerate().skip(1) {
            if t.shape().len() != rank {
                return Err(Error::shape("concat", format!("input {i} has rank {}", t.shape().len())));
            }
            for d in 0..rank {
                if d != axis && t.shape()[d] != out_shape[d] {
                    return Err(Error::shape(
                        "concat",
                        format!(
                            "input {i} extent {} at dim {d} does not match {}",
                            t.shape()[d],
                            out_shape[d]
                        ),
                    ));
                }
            }
        }
        out_shape[axis] = inputs.iter().map(|t| t.shape()[axis]).sum();

        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total: usize = out_shape.iter().product();
        let mut data = vec![0.0f32; total];
        let out_axis = out_shape[axis];
        let mut offset = 0usize;
        for t in inputs {
            let t_axis = t.shape()[axis];
            for oi in 0..outer {
                let src = oi * t_axis * inner;
                let dst = (oi * out_axis + offset) * inner;
                data[dst..dst + t_axis * inner]
                    .copy_from_slice(&t.data()[src..src + t_axis * inner]);
            }
            offset += t_axis;
        }
        let out = Tensor::from_vec(out_shape, data)?;
        if self.recording {
            let xs: Vec<usize> = inputs.iter().map(|t| self.node_of(t)).collect();
            let needs = xs.iter().any(|&i| self.nodes[i].needs_grad);
            self.push(out.clone(), Op::Concat { xs, axis }, needs);
        }
        Ok(out)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "add",
                format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
            ));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        Ok(self.record2(a, b, out, |ai, bi| Op::Add { a: ai, b: bi }))
    }

    pub fn elementwise_mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "elementwise_mul",
                format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
            ));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        Ok(self.record2(a, b, out, |ai, bi| Op::Mul { a: ai, b: bi }))
    }

    pub fn scale(&mut self, x: &Tensor, c: f32) -> Tensor {
        let data = x.data().iter().map(|&v| v * c).collect();
        let out = Tensor::from_vec(x.shape().to_vec(), data).expect("scale keeps shape");
        self.record1(x, out, |xi| Op::Scale { x: xi, c })
    }

    /// Scales channel blocks of `x` [B,ΣC,H,W] by gate channels [B,S,H,W]:
    /// block `s` (of `groups[s]` channels) is multiplied by gate channel `s`
    /// at every location.
    pub fn group_scale(&mut self, x: &Tensor, gate: &Tensor, groups: &[usize]) -> Result<Tensor> {
        let xs = Self::shape4(x, "group_scale")?;
        let gs = Self::shape4(gate, "group_scale")?;
        let total: usize = groups.iter().sum();
        if total != xs.c {
            return Err(Error::shape(
                "group_scale",
                format!("groups sum to {total}, input channel dim 1 is {}", xs.c),
            ));
        }
        if gs.c != groups.len() || gs.b != xs.b || gs.h != xs.h || gs.w != xs.w {
            return Err(Error::shape(
                "group_scale",
                format!(
                    "gate shape {:?} does not match {} groups over [{},_,{},{}]",
                    gate.shape(),
                    groups.len(),
                    xs.b,
                    xs.h,
                    xs.w
                ),
            ));
        }
        let hw = xs.h * xs.w;
        let mut data = vec![0.0f32; xs.numel()];
        let mut c0 = 0usize;
        for (s, &gsz) in groups.iter().enumerate() {
            for b in 0..xs.b {
                let gbase = (b * gs.c + s) * hw;
                for c in c0..c0 + gsz {
                    let base = (b * xs.c + c) * hw;
                    for i in 0..hw {
                        data[base + i] = x.data()[base + i] * gate.data()[gbase + i];
                    }
                }
            }
            c0 += gsz;
        }
        let out = Tensor::from_vec(x.shape().to_vec(), data)?;
        let groups = groups.to_vec();
        Ok(self.record2(x, gate, out, |xi, gi| Op::GroupScale { x: xi, gate: gi, groups }))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&mut self, x: &Tensor) -> Tensor {
        let mut acc = 0.0f64;
        for &v in x.data() {
            acc += v as f64;
        }
        let out = Tensor::scalar(acc as f32);
        self.record1(x, out, |xi| Op::SumAll { x: xi })
    }

    /// Gathers rows of a [N,K] matrix.
    pub fn select_rows(&mut self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::shape("select_rows", format!("expected rank-2, got {s:?}")));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("select_rows", format!("row {bad} out of range {n}")));
        }
        let mut data = vec![0.0f32; idx.len() * k];
        for (r, &i) in idx.iter().enumerate() {
            data[r * k..(r + 1) * k].copy_from_slice(&x.data()[i * k..(i + 1) * k]);
        }
        let out = Tensor::from_vec(vec![idx.len(), k], data)?;
        let idx = idx.to_vec();
        Ok(self.record1(x, out, |xi| Op::SelectRows { x: xi, idx, cols: k }))
    }

    /// Reorders a head output [B,A*K,H,W] into per-anchor rows [B*H*W*A, K].
    pub fn flatten_anchors(&mut self, x: &Tensor, classes: usize) -> Result<Tensor> {
        let xs = Self::shape4(x, "flatten_anchors")?;
        if classes == 0 || xs.c % classes != 0 {
            return Err(Error::shape(
                "flatten_anchors",
                format!("channel dim 1 = {} is not a multiple of {classes}", xs.c),
            ));
        }
        let anchors = xs.c / classes;
        let rows = xs.b * xs.h * xs.w * anchors;
        let mut data = vec![0.0f32; rows * classes];
        for b in 0..xs.b {
            for a in 0..anchors {
                for k in 0..classes {
                    let cbase = ((b * xs.c) + a * classes + k) * xs.h * xs.w;
                    for y in 0..xs.h {
                        for xw in 0..xs.w {
                            let row = ((b * xs.h + y) * xs.w + xw) * anchors + a;
                            data[row * classes + k] = x.data()[cbase + y * xs.w + xw];
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(vec![rows, classes], data)?;
        Ok(self.record1(x, out, |xi| Op::FlattenAnchors { x: xi, classes }))
    }

    /// Per-row softmax cross-entropy of [N,K] logits against integer labels.
    pub fn softmax_ce(&mut self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let s = logits.shape();
        if s.len() != 2 {
            return Err(Error::shape("softmax_ce", format!("expected rank-2, got {s:?}")));
        }
        let (n, k) = (s[0], s[1]);
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_ce",
                format!("{} labels for {} rows (dim 0)", labels.len(), n),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape("softmax_ce", format!("label {bad} out of range {k}")));
        }
        let data = ops::softmax_ce_forward(logits.data(), n, k, labels);
        let out = Tensor::from_vec(vec![n], data)?;
        let labels = labels.to_vec();
        Ok(self.record1(logits, out, |xi| Op::SoftmaxCe { x: xi, labels }))
    }

    /// Sum of the Huber penalty over all elements: x²/2 inside |x| <= 1,
    /// |x| - 1/2 outside.
    pub fn huber_sum(&mut self, x: &Tensor) -> Tensor {
        let mut acc = 0.0f64;
        for &v in x.data() {
            acc += ops::huber(v);
        }
        let out = Tensor::scalar(acc as f32);
        self.record1(x, out, |xi| Op::HuberSum { x: xi })
    }

    /// Elementwise `x - c` against a constant buffer (no gradient for `c`).
    pub fn sub_const(&mut self, x: &Tensor, c: &[f32]) -> Result<Tensor> {
        if c.len() != x.numel() {
            return Err(Error::shape(
                "sub_const",
                format!("constant has {} elements, tensor has {}", c.len(), x.numel()),
            ));
        }
        let data = x.data().iter().zip(c).map(|(a, b)| a - b).collect();
        let out = Tensor::from_vec(x.shape().to_vec(), data)?;
        Ok(self.record1(x, out, |xi| Op::SubConst { x: xi }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Populates `grad` on every `requires_grad` leaf reachable from `loss`.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: loss.shape().to_vec() });
        }
        let &root = self.index.get(&loss.id()).ok_or(Error::NotOnTape)?;

        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if let Op::Leaf = self.nodes[i].op {
                if self.nodes[i].value.requires_grad() {
                    self.nodes[i].value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Vec<f32>>], target: usize, delta: Vec<f32>| {
            match grads[target].as_mut() {
                Some(buf) => {
                    for (b, d) in buf.iter_mut().zip(&delta) {
                        *b += d;
                    }
                }
                None => grads[target] = Some(delta),
            }
        };
        let wants = |idx: usize| self.nodes[idx].needs_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, stride, pad } => {
                let xt = &self.nodes[*x].value;
                let wt = &self.nodes[*w].value;
                let xs = Shape4 {
                    b: xt.shape()[0],
                    c: xt.shape()[1],
                    h: xt.shape()[2],
                    w: xt.shape()[3],
                };
                let (o, kh, kw) = (wt.shape()[0], wt.shape()[2], wt.shape()[3]);
                let (dx, dw) = ops::conv2d_backward(
                    xt.data(),
                    xs,
                    wt.data(),
                    o,
                    kh,
                    kw,
                    *stride,
                    *pad,
                    g,
                    wants(*x),
                    wants(*w),
                );
                if let Some(dx) = dx {
                    acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    acc(grads, *w, dw);
                }
            }
            Op::BiasAdd { x, b } => {
                if wants(*x) {
                    acc(grads, *x, g.to_vec());
                }
                if wants(*b) {
                    let xt = &self.nodes[*x].value;
                    let (bsz, c, h, w) =
                        (xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]);
                    let hw = h * w;
                    let mut db = vec![0.0f32; c];
                    for ci in 0..c {
                        let mut accum = 0.0f64;
                        for bi in 0..bsz {
                            let base = (bi * c + ci) * hw;
                            for &v in &g[base..base + hw] {
                                accum += v as f64;
                            }
                        }
                        db[ci] = accum as f32;
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Relu { x } => {
                if wants(*x) {
                    let xv = self.nodes[*x].value.data();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &vi)| if vi > 0.0 { gi } else { 0.0 })
                        .collect();
                    acc(grads, *x, dx);
                }
            }
            Op::Sigmoid { x } => {
                if wants(*x) {
                    let yv = node.value.data();
                    let dx = g.iter().zip(yv).map(|(&gi, &s)| gi * s * (1.0 - s)).collect();
                    acc(grads, *x, dx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if wants(*x) {
                    let xt = &self.nodes[*x].value;
                    let xs = Shape4 {
                        b: xt.shape()[0],
                        c: xt.shape()[1],
                        h: xt.shape()[2],
                        w: xt.shape()[3],
                    };
                    acc(grads, *x, ops::maxpool2_backward(xs, argmax, g));
                }
            }
            Op::PadSpatial { x } => {
                if wants(*x) {
                    let xt = &self.nodes[*x].value;
                    let (b, c, h, w) =
                        (xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]);
                    let yt = &node.value;
                    let (nh, nw) = (yt.shape()[2], yt.shape()[3]);
                    let mut dx = vec![0.0f32; b * c * h * w];
                    for bc in 0..b * c {
                        for y in 0..h {
                            let src = (bc * nh + y) * nw;
                            let dst = (bc * h + y) * w;
                            dx[dst..dst + w].copy_from_slice(&g[src..src + w]);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Concat { xs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let out_axis = out_shape[*axis];
                let mut offset = 0usize;
                for &xi in xs {
                    let t_axis = self.nodes[xi].value.shape()[*axis];
                    if wants(xi) {
                        let mut dx = vec![0.0f32; self.nodes[xi].value.numel()];
                        for oi in 0..outer {
                            let dst = oi * t_axis * inner;
                            let src = (oi * out_axis + offset) * inner;
                            dx[dst..dst + t_axis * inner]
                                .copy_from_slice(&g[src..src + t_axis * inner]);
                        }
                        acc(grads, xi, dx);
                    }
                    offset += t_axis;
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let bv = self.nodes[*b].value.data();
                    acc(grads, *a, g.iter().zip(bv).map(|(&gi, &v)| gi * v).collect());
                }
                if wants(*b) {
                    let av = self.nodes[*a].value.data();
                    acc(grads, *b, g.iter().zip(av).map(|(&gi, &v)| gi * v).collect());
                }
            }
            Op::Scale { x, c } => {
                if wants(*x) {
                    acc(grads, *x, g.iter().map(|&gi| gi * c).collect());
                }
            }
            Op::GroupScale { x, gate, groups } => {
                let xt = &self.nodes[*x].value;
                let gt = &self.nodes[*gate].value;
                let (bsz, c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]);
                let s_count = groups.len();
                let hw = h * w;
                if wants(*x) {
                    let mut dx = vec![0.0f32; xt.numel()];
                    let mut c0 = 0usize;
                    for (s, &gsz) in groups.iter().enumerate() {
                        for b in 0..bsz {
                            let gbase = (b * s_count + s) * hw;
                            for ci in c0..c0 + gsz {
                                let base = (b * c + ci) * hw;
                                for i in 0..hw {
                                    dx[base + i] = g[base + i] * gt.data()[gbase + i];
                                }
                            }
                        }
                        c0 += gsz;
                    }
                    acc(grads, *x, dx);
                }
                if wants(*gate) {
                    let mut dg = vec![0.0f32; gt.numel()];
                    let mut c0 = 0usize;
                    for (s, &gsz) in groups.iter().enumerate() {
                        for b in 0..bsz {
                            let gbase = (b * s_count + s) * hw;
                            for i in 0..hw {
                                let mut accum = 0.0f64;
                                for ci in c0..c0 + gsz {
                                    let base = (b * c + ci) * hw;
                                    accum += g[base + i] as f64 * xt.data()[base + i] as f64;
                                }
                                dg[gbase + i] = accum as f32;
                            }
                        }
                        c0 += gsz;
                    }
                    acc(grads, *gate, dg);
                }
            }
            Op::SumAll { x } => {
                if wants(*x) {
                    let n = self.nodes[*x].value.numel();
                    acc(grads, *x, vec![g[0]; n]);
                }
            }
            Op::SelectRows { x, idx, cols } => {
                if wants(*x) {
                    let mut dx = vec![0.0f32; self.nodes[*x].value.numel()];
                    for (r, &i) in idx.iter().enumerate() {
                        for k in 0..*cols {
                            dx[i * cols + k] += g[r * cols + k];
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::FlattenAnchors { x, classes } => {
                if wants(*x) {
                    let xt = &self.nodes[*x].value;
                    let (b, c, h, w) =
                        (xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]);
                    let anchors = c / classes;
                    let mut dx = vec![0.0f32; xt.numel()];
                    for bi in 0..b {
                        for a in 0..anchors {
                            for k in 0..*classes {
                                let cbase = ((bi * c) + a * classes + k) * h * w;
                                for y in 0..h {
                                    for xw in 0..w {
                                        let row = ((bi * h + y) * w + xw) * anchors + a;
                                        dx[cbase + y * w + xw] = g[row * classes + k];
                                    }
                                }
                            }
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::SoftmaxCe { x, labels } => {
                if wants(*x) {
                    let xt = &self.nodes[*x].value;
                    let (n, k) = (xt.shape()[0], xt.shape()[1]);
                    acc(grads, *x, ops::softmax_ce_backward(xt.data(), n, k, labels, g));
                }
            }
            Op::HuberSum { x } => {
                if wants(*x) {
                    let xv = self.nodes[*x].value.data();
                    let dx = xv.iter().map(|&v| ops::huber_grad(v) * g[0]).collect();
                    acc(grads, *x, dx);
                }
            }
            Op::SubConst { x } => {
                if wants(*x) {
                    acc(grads, *x, g.to_vec());
                }
            }
        }
    }
}
