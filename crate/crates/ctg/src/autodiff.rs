//! A small reverse-mode tape over `ndarray` tensors.
//!
//! Covers exactly the ops the denoiser needs: dense/conv layers in
//! channels-first layout (`[B, C, L]` / `[B, C, H, W]`), SiLU, channel
//! concatenation, nearest upsampling with cropping, per-channel affine
//! maps, the unicycle rollout (so training can supervise states), and MSE
//! losses. Forward values live on the tape; `backward` walks nodes in
//! reverse creation order.

use crate::dynamics::{self, AgentState};
use ndarray::{Array2, ArrayD, Axis, IxDyn, Slice};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("non-finite activation in `{0}`")]
    NonFinite(String),
    #[error("dynamics failure inside rollout op: {0}")]
    Rollout(#[from] dynamics::DynamicsError),
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `bias` has shape `[C]`; broadcast over all other axes of `x`, whose
    /// channel axis is axis 1 (or axis 1 of a 2-D `[B, C]`).
    AddBias(Var, Var),
    /// `cond` has shape `[B, C]`, added to `[B, C, L]` across L.
    AddChannelBias(Var, Var),
    /// `[B, F] . [F, G]`.
    Matmul(Var, Var),
    Conv1d { x: Var, w: Var, stride: usize, pad: usize },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Silu(Var),
    /// Concatenate along axis 1.
    ConcatC(Var, Var, usize),
    /// Keep the first `len` entries of the last axis.
    CropLast(Var),
    /// Repeat each entry of the last axis twice.
    UpsampleNearest(Var),
    /// Flatten to `[B, rest]`.
    FlattenBatch(Var, Vec<usize>),
    /// `x * scale[c] + shift[c]` per channel (axis 1); only the scale
    /// matters for the backward pass.
    AffineChannels { x: Var, scale: Vec<f64> },
    /// Unicycle rollout of physical actions `[B, 2, T]` from per-item
    /// initial states, producing `[B, 4, T]`.
    Rollout { actions: Var, s0: Vec<AgentState>, dt: f64 },
    /// Scalar mean of `(a - b)^2`.
    MeanSqDiff(Var, Var),
    /// Scalar `a + c * b`.
    AddScaled(Var, Var, f64),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input that gradients are not propagated into.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; `backward` produces a gradient for it.
    pub fn param(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn check_finite(&self, v: Var, name: &str) -> Result<(), TapeError> {
        if self.nodes[v.0].value.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(TapeError::NonFinite(name.to_string()))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let g = self.needs(a);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        let c_axis = if xv.ndim() == 2 { 1 } else { 1 };
        let c = xv.shape()[c_axis];
        assert_eq!(bv.len(), c, "bias length must match channel count");
        let mut out = xv.clone();
        for (ci, mut lane) in out.axis_iter_mut(Axis(c_axis)).enumerate() {
            lane += bv[[ci]];
        }
        let g = self.needs(x) || self.needs(bias);
        self.push(out, Op::AddBias(x, bias), g)
    }

    pub fn add_channel_bias(&mut self, x: Var, cond: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let cv = &self.nodes[cond.0].value;
        let (b, c, l) = dim3(xv);
        assert_eq!(cv.shape(), &[b, c]);
        let mut out = xv.clone();
        for bi in 0..b {
            for ci in 0..c {
                let add = cv[[bi, ci]];
                for li in 0..l {
                    out[[bi, ci, li]] += add;
                }
            }
        }
        let g = self.needs(x) || self.needs(cond);
        self.push(out, Op::AddChannelBias(x, cond), g)
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let wv = as2(&self.nodes[w.0].value);
        let out = xv.dot(&wv).into_dyn();
        let g = self.needs(x) || self.needs(w);
        self.push(out, Op::Matmul(x, w), g)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|t| t * sigmoid(t));
        let g = self.needs(x);
        self.push(v, Op::Silu(x), g)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let split = av.shape()[1];
        let v = ndarray::concatenate(Axis(1), &[av.view(), bv.view()]).expect("concat shapes");
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatC(a, b, split), g)
    }

    pub fn crop_last(&mut self, x: Var, len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let last = xv.ndim() - 1;
        let v = xv
            .slice_axis(Axis(last), Slice::from(0..len))
            .to_owned();
        let g = self.needs(x);
        self.push(v, Op::CropLast(x), g)
    }

    pub fn upsample_nearest(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (b, c, l) = dim3(xv);
        let mut out = ArrayD::zeros(IxDyn(&[b, c, 2 * l]));
        for bi in 0..b {
            for ci in 0..c {
                for li in 0..l {
                    let v = xv[[bi, ci, li]];
                    out[[bi, ci, 2 * li]] = v;
                    out[[bi, ci, 2 * li + 1]] = v;
                }
            }
        }
        let g = self.needs(x);
        self.push(out, Op::UpsampleNearest(x), g)
    }

    pub fn flatten_batch(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let shape: Vec<usize> = xv.shape().to_vec();
        let b = shape[0];
        let rest: usize = shape[1..].iter().product();
        let v = xv
            .to_owned()
            .into_shape_with_order(IxDyn(&[b, rest]))
            .expect("flatten");
        let g = self.needs(x);
        self.push(v, Op::FlattenBatch(x, shape), g)
    }

    pub fn affine_channels(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Var {
        let xv = &self.nodes[x.0].value;
        let c = xv.shape()[1];
        assert_eq!(scale.len(), c);
        assert_eq!(shift.len(), c);
        let mut out = xv.clone();
        for (ci, mut lane) in out.axis_iter_mut(Axis(1)).enumerate() {
            lane.mapv_inplace(|t| t * scale[ci] + shift[ci]);
        }
        let g = self.needs(x);
        self.push(out, Op::AffineChannels { x, scale: scale.to_vec() }, g)
    }

    /// Physical actions `[B, 2, T]` to physical states `[B, 4, T]` through
    /// the unicycle rollout; backward uses the exact rollout VJP.
    pub fn rollout_unicycle(
        &mut self,
        actions: Var,
        s0: Vec<AgentState>,
        dt: f64,
    ) -> Result<Var, TapeError> {
        let av = &self.nodes[actions.0].value;
        let (b, two, t_len) = dim3(av);
        assert_eq!(two, 2);
        assert_eq!(s0.len(), b);
        let mut out = ArrayD::zeros(IxDyn(&[b, 4, t_len]));
        for bi in 0..b {
            let mut acts = Array2::zeros((t_len, 2));
            for t in 0..t_len {
                acts[[t, 0]] = av[[bi, 0, t]];
                acts[[t, 1]] = av[[bi, 1, t]];
            }
            let states = dynamics::rollout(s0[bi], acts.view(), dt)?;
            for t in 0..t_len {
                for c in 0..4 {
                    out[[bi, c, t]] = states[[t, c]];
                }
            }
        }
        let g = self.needs(actions);
        Ok(self.push(out, Op::Rollout { actions, s0, dt }, g))
    }

    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let n = av.len() as f64;
        let v: f64 = av.iter().zip(bv.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let g = self.needs(a) || self.needs(b);
        self.push(ArrayD::from_elem(IxDyn(&[]), v), Op::MeanSqDiff(a, b), g)
    }

    pub fn add_scaled(&mut self, a: Var, b: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value[[]] + c * self.nodes[b.0].value[[]];
        let g = self.needs(a) || self.needs(b);
        self.push(ArrayD::from_elem(IxDyn(&[]), v), Op::AddScaled(a, b, c), g)
    }

    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (b, cin, l) = dim3(xv);
        let (cout, wcin, k) = dim3(wv);
        assert_eq!(cin, wcin, "conv1d channel mismatch");
        let lout = conv_out(l, k, stride, pad);
        let cols = im2col_1d(xv, k, stride, pad); // [cin*k, b*lout]
        let w2 = wv
            .view()
            .into_shape_with_order((cout, cin * k))
            .expect("weight reshape");
        let out2 = w2.dot(&as2(&cols)); // [cout, b*lout]
        let mut out = ArrayD::zeros(IxDyn(&[b, cout, lout]));
        for co in 0..cout {
            for bi in 0..b {
                for li in 0..lout {
                    out[[bi, co, li]] = out2[[co, bi * lout + li]];
                }
            }
        }
        let g = self.needs(x) || self.needs(w);
        self.push(out, Op::Conv1d { x, w, stride, pad }, g)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (b, cin, h, wd) = dim4(xv);
        let (cout, wcin, kh, kw) = dim4(wv);
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        let hout = conv_out(h, kh, stride, pad);
        let wout = conv_out(wd, kw, stride, pad);
        let cols = im2col_2d(xv, kh, kw, stride, pad); // [cin*kh*kw, b*hout*wout]
        let w2 = wv
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .expect("weight reshape");
        let out2 = w2.dot(&as2(&cols));
        let mut out = ArrayD::zeros(IxDyn(&[b, cout, hout, wout]));
        for co in 0..cout {
            for bi in 0..b {
                for p in 0..hout * wout {
                    out[[bi, co, p / wout, p % wout]] = out2[[co, bi * hout * wout + p]];
                }
            }
        }
        let g = self.needs(x) || self.needs(w);
        self.push(out, Op::Conv2d { x, w, stride, pad }, g)
    }

    /// Reverse pass from a scalar `loss`; returns per-node gradients (only
    /// nodes on a grad-requiring path are populated).
    pub fn backward(&self, loss: Var) -> Vec<Option<ArrayD<f64>>> {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        assert_eq!(self.nodes[loss.0].value.ndim(), 0, "backward needs a scalar loss");
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g.mapv(|t| -t));
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => {
                    self.accumulate(&mut grads, *a, g.mapv(|t| t * c));
                }
                Op::AddBias(x, bias) => {
                    if self.needs(*bias) {
                        let c = self.nodes[bias.0].value.len();
                        let mut gb = ArrayD::zeros(IxDyn(&[c]));
                        for (ci, lane) in g.axis_iter(Axis(1)).enumerate() {
                            gb[[ci]] = lane.sum();
                        }
                        self.accumulate(&mut grads, *bias, gb);
                    }
                    self.accumulate(&mut grads, *x, g.clone());
                }
                Op::AddChannelBias(x, cond) => {
                    if self.needs(*cond) {
                        let (b, c, _l) = dim3(&g);
                        let mut gc = ArrayD::zeros(IxDyn(&[b, c]));
                        for bi in 0..b {
                            for ci in 0..c {
                                gc[[bi, ci]] = g
                                    .slice_axis(Axis(0), Slice::from(bi..bi + 1))
                                    .slice_axis(Axis(1), Slice::from(ci..ci + 1))
                                    .sum();
                            }
                        }
                        self.accumulate(&mut grads, *cond, gc);
                    }
                    self.accumulate(&mut grads, *x, g.clone());
                }
                Op::Matmul(x, w) => {
                    let g2 = as2(&g);
                    if self.needs(*x) {
                        let wv = as2(&self.nodes[w.0].value);
                        self.accumulate(&mut grads, *x, g2.dot(&wv.t()).into_dyn());
                    }
                    if self.needs(*w) {
                        let xv = as2(&self.nodes[x.0].value);
                        self.accumulate(&mut grads, *w, xv.t().dot(&g2).into_dyn());
                    }
                }
                Op::Conv1d { x, w, stride, pad } => {
                    self.conv1d_backward(&mut grads, *x, *w, *stride, *pad, &g);
                }
                Op::Conv2d { x, w, stride, pad } => {
                    self.conv2d_backward(&mut grads, *x, *w, *stride, *pad, &g);
                }
                Op::Silu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = ndarray::Zip::from(&g).and(xv).map_collect(|gi, &t| {
                        let s = sigmoid(t);
                        gi * s * (1.0 + t * (1.0 - s))
                    });
                    self.accumulate(&mut grads, *x, gx);
                }
                Op::ConcatC(a, b, split) => {
                    let ga = g.slice_axis(Axis(1), Slice::from(0..*split)).to_owned();
                    let gb = g.slice_axis(Axis(1), Slice::from(*split..)).to_owned();
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::CropLast(x) => {
                    let xv = &self.nodes[x.0].value;
                    let mut gx = ArrayD::zeros(xv.raw_dim());
                    let last = xv.ndim() - 1;
                    let len = g.shape()[last];
                    gx.slice_axis_mut(Axis(last), Slice::from(0..len)).assign(&g);
                    self.accumulate(&mut grads, *x, gx);
                }
                Op::UpsampleNearest(x) => {
                    let xv = &self.nodes[x.0].value;
                    let (b, c, l) = dim3(xv);
                    let mut gx = ArrayD::zeros(IxDyn(&[b, c, l]));
                    for bi in 0..b {
                        for ci in 0..c {
                            for li in 0..l {
                                gx[[bi, ci, li]] =
                                    g[[bi, ci, 2 * li]] + g[[bi, ci, 2 * li + 1]];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, gx);
                }
                Op::FlattenBatch(x, shape) => {
                    let gx = g
                        .to_owned()
                        .into_shape_with_order(IxDyn(shape))
                        .expect("unflatten");
                    self.accumulate(&mut grads, *x, gx);
                }
                Op::AffineChannels { x, scale } => {
                    let mut gx = g.clone();
                    for (ci, mut lane) in gx.axis_iter_mut(Axis(1)).enumerate() {
                        lane.mapv_inplace(|t| t * scale[ci]);
                    }
                    self.accumulate(&mut grads, *x, gx);
                }
                Op::Rollout { actions, s0, dt } => {
                    let av = &self.nodes[actions.0].value;
                    let (b, _, t_len) = dim3(av);
                    let mut ga = ArrayD::zeros(av.raw_dim());
                    for bi in 0..b {
                        let mut acts = Array2::zeros((t_len, 2));
                        let mut cot = Array2::zeros((t_len, 4));
                        for t in 0..t_len {
                            acts[[t, 0]] = av[[bi, 0, t]];
                            acts[[t, 1]] = av[[bi, 1, t]];
                            for c in 0..4 {
                                cot[[t, c]] = g[[bi, c, t]];
                            }
                        }
                        let da = dynamics::rollout_vjp(s0[bi], acts.view(), *dt, cot.view())
                            .expect("rollout vjp on values that already rolled out");
                        for t in 0..t_len {
                            ga[[bi, 0, t]] += da[[t, 0]];
                            ga[[bi, 1, t]] += da[[t, 1]];
                        }
                    }
                    self.accumulate(&mut grads, *actions, ga);
                }
                Op::MeanSqDiff(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let coeff = 2.0 * g[[]] / av.len() as f64;
                    if self.needs(*a) {
                        let ga = ndarray::Zip::from(av)
                            .and(bv)
                            .map_collect(|&x, &y| coeff * (x - y));
                        self.accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = ndarray::Zip::from(av)
                            .and(bv)
                            .map_collect(|&x, &y| -coeff * (x - y));
                        self.accumulate(&mut grads, *b, gb);
                    }
                }
                Op::AddScaled(a, b, c) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g.mapv(|t| t * c));
                }
            }
            grads[id] = Some(g);
        }
        grads
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<f64>>], v: Var, g: ArrayD<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn conv1d_backward(
        &self,
        grads: &mut [Option<ArrayD<f64>>],
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        g: &ArrayD<f64>,
    ) {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (b, cin, l) = dim3(xv);
        let (cout, _, k) = dim3(wv);
        let (_, _, lout) = dim3(g);
        // Rearrange the output gradient as [cout, b*lout].
        let mut g2 = Array2::zeros((cout, b * lout));
        for bi in 0..b {
            for co in 0..cout {
                for li in 0..lout {
                    g2[[co, bi * lout + li]] = g[[bi, co, li]];
                }
            }
        }
        if self.needs(w) {
            let cols = im2col_1d(xv, k, stride, pad);
            let gw2 = g2.dot(&as2(&cols).t()); // [cout, cin*k]
            let gw = gw2.into_dyn().into_shape_with_order(IxDyn(&[cout, cin, k])).unwrap();
            self.accumulate(grads, w, gw);
        }
        if self.needs(x) {
            let w2 = wv.view().into_shape_with_order((cout, cin * k)).unwrap();
            let gcols = w2.t().dot(&g2); // [cin*k, b*lout]
            let mut gx = ArrayD::zeros(IxDyn(&[b, cin, l]));
            for bi in 0..b {
                for ci in 0..cin {
                    for ki in 0..k {
                        let row = ci * k + ki;
                        for li in 0..lout {
                            let src = (li * stride + ki) as isize - pad as isize;
                            if src >= 0 && (src as usize) < l {
                                gx[[bi, ci, src as usize]] += gcols[[row, bi * lout + li]];
                            }
                        }
                    }
                }
            }
            self.accumulate(grads, x, gx);
        }
    }

    fn conv2d_backward(
        &self,
        grads: &mut [Option<ArrayD<f64>>],
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        g: &ArrayD<f64>,
    ) {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (b, cin, h, wd) = dim4(xv);
        let (cout, _, kh, kw) = dim4(wv);
        let (_, _, hout, wout) = dim4(g);
        let area = hout * wout;
        let mut g2 = Array2::zeros((cout, b * area));
        for bi in 0..b {
            for co in 0..cout {
                for p in 0..area {
                    g2[[co, bi * area + p]] = g[[bi, co, p / wout, p % wout]];
                }
            }
        }
        if self.needs(w) {
            let cols = im2col_2d(xv, kh, kw, stride, pad);
            let gw2 = g2.dot(&as2(&cols).t());
            let gw = gw2
                .into_dyn()
                .into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                .unwrap();
            self.accumulate(grads, w, gw);
        }
        if self.needs(x) {
            let w2 = wv.view().into_shape_with_order((cout, cin * kh * kw)).unwrap();
            let gcols = w2.t().dot(&g2);
            let mut gx = ArrayD::zeros(IxDyn(&[b, cin, h, wd]));
            for bi in 0..b {
                for ci in 0..cin {
                    for khi in 0..kh {
                        for kwi in 0..kw {
                            let row = ci * kh * kw + khi * kw + kwi;
                            for p in 0..area {
                                let hi = (p / wout * stride + khi) as isize - pad as isize;
                                let wi = (p % wout * stride + kwi) as isize - pad as isize;
                                if hi >= 0
                                    && wi >= 0
                                    && (hi as usize) < h
                                    && (wi as usize) < wd
                                {
                                    gx[[bi, ci, hi as usize, wi as usize]] +=
                                        gcols[[row, bi * area + p]];
                                }
                            }
                        }
                    }
                }
            }
            self.accumulate(grads, x, gx);
        }
    }
}

/// Move a variable's gradient out of a `backward` result.
pub fn take_grad(grads: &mut [Option<ArrayD<f64>>], v: Var) -> Option<ArrayD<f64>> {
    grads[v.0].take()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn conv_out(l: usize, k: usize, stride: usize, pad: usize) -> usize {
    (l + 2 * pad - k) / stride + 1
}

fn dim3(a: &ArrayD<f64>) -> (usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 3, "expected 3-D tensor, got {s:?}");
    (s[0], s[1], s[2])
}

fn dim4(a: &ArrayD<f64>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected 4-D tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality().expect("2-D view")
}

fn im2col_1d(x: &ArrayD<f64>, k: usize, stride: usize, pad: usize) -> ArrayD<f64> {
    let (b, cin, l) = dim3(x);
    let lout = conv_out(l, k, stride, pad);
    let mut cols = ArrayD::zeros(IxDyn(&[cin * k, b * lout]));
    for bi in 0..b {
        for ci in 0..cin {
            for ki in 0..k {
                let row = ci * k + ki;
                for li in 0..lout {
                    let src = (li * stride + ki) as isize - pad as isize;
                    if src >= 0 && (src as usize) < l {
                        cols[[row, bi * lout + li]] = x[[bi, ci, src as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn im2col_2d(x: &ArrayD<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> ArrayD<f64> {
    let (b, cin, h, w) = dim4(x);
    let hout = conv_out(h, kh, stride, pad);
    let wout = conv_out(w, kw, stride, pad);
    let area = hout * wout;
    let mut cols = ArrayD::zeros(IxDyn(&[cin * kh * kw, b * area]));
    for bi in 0..b {
        for ci in 0..cin {
            for khi in 0..kh {
                for kwi in 0..kw {
                    let row = ci * kh * kw + khi * kw + kwi;
                    for p in 0..area {
                        let hi = (p / wout * stride + khi) as isize - pad as isize;
                        let wi = (p % wout * stride + kwi) as isize - pad as isize;
                        if hi >= 0 && wi >= 0 && (hi as usize) < h && (wi as usize) < w {
                            cols[[row, bi * area + p]] = x[[bi, ci, hi as usize, wi as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}
