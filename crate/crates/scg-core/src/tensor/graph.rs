//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every forward op in creation order (which is a
//! topological order by construction — ops can only reference earlier
//! vars), then replays the tape backwards to accumulate vector-Jacobian
//! products. Leaf grads persist across `backward` calls; interior grads
//! are ephemeral per call.
//!
//! Convolution lowers to im2col + matmul. Dot products accumulate over
//! the (channel, kernel-row, kernel-col) index in ascending order with no
//! FMA contraction, so two code paths that reduce in this order produce
//! bit-identical doubles — the patch-matching engine relies on this.

use super::{conv_out_dim, Tensor};
use crate::error::{Result, ScgError};
use rayon::prelude::*;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf { requires_grad: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    BiasAddChan { x: Var, b: Var },
    AvgPool2d { x: Var, k: usize, stride: usize },
    UpsampleNearest2(Var),
    InstanceNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Im2colPatches { x: Var, k: usize },
    Reshape(Var),
    Slice0 { x: Var, start: usize },
    Concat0(Vec<Var>),
}

/// Tape of recorded operations plus their forward values.
pub struct Graph {
    ops: Vec<Op>,
    vals: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    requires: Vec<bool>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            vals: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Toggle the per-op NaN/Inf scan (on by default in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    fn push(&mut self, op: Op, val: Tensor, requires: bool) -> Result<Var> {
        if self.check_finite {
            val.check_finite("graph op output")?;
        }
        let id = self.vals.len();
        self.ops.push(op);
        self.vals.push(val);
        self.grads.push(None);
        self.requires.push(requires);
        Ok(Var(id))
    }

    /// Record a non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf { requires_grad: false }, t, false)
            .expect("leaf push cannot fail once finite")
    }

    /// Record a differentiable leaf; its grad accumulates across backward calls.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf { requires_grad: true }, t, true)
            .expect("leaf push cannot fail once finite")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    /// Accumulated gradient of a `requires_grad` leaf; `None` if backward has
    /// not reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self, v: Var) {
        self.grads[v.0] = None;
    }

    fn req(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.requires[v.0])
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let val = self.vals[a.0].add(&self.vals[b.0])?;
        let r = self.req(&[a, b]);
        self.push(Op::Add(a, b), val, r)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let val = self.vals[a.0].sub(&self.vals[b.0])?;
        let r = self.req(&[a, b]);
        self.push(Op::Sub(a, b), val, r)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let val = self.vals[a.0].zip_map(&self.vals[b.0], |x, y| x * y)?;
        let r = self.req(&[a, b]);
        self.push(Op::Mul(a, b), val, r)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let val = self.vals[a.0].map(|x| x + s);
        let r = self.requires[a.0];
        self.push(Op::AddScalar(a), val, r).expect("finite")
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let val = self.vals[a.0].map(|x| x * s);
        let r = self.requires[a.0];
        self.push(Op::MulScalar(a, s), val, r).expect("finite")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].map(|x| if x > 0.0 { x } else { 0.0 });
        let r = self.requires[a.0];
        self.push(Op::Relu(a), val, r).expect("finite")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let val = self.vals[a.0].map(|x| if x > 0.0 { x } else { slope * x });
        let r = self.requires[a.0];
        self.push(Op::LeakyRelu(a, slope), val, r).expect("finite")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].map(f64::tanh);
        let r = self.requires[a.0];
        self.push(Op::Tanh(a), val, r).expect("finite")
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].map(f64::abs);
        let r = self.requires[a.0];
        self.push(Op::Abs(a), val, r).expect("finite")
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let val = Tensor::scalar(self.vals[a.0].sum());
        let r = self.requires[a.0];
        self.push(Op::Sum(a), val, r).expect("finite")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.vals[a.0].numel();
        if n == 0 {
            return Err(ScgError::Contract("mean of empty tensor".into()));
        }
        let val = Tensor::scalar(self.vals[a.0].sum() / n as f64);
        let r = self.requires[a.0];
        self.push(Op::Mean(a), val, r)
    }

    /// Σ xᵢ² as a scalar — the squared-L2 building block of every loss.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let val = Tensor::scalar(self.vals[a.0].sum_squares());
        let r = self.requires[a.0];
        self.push(Op::SumSquares(a), val, r).expect("finite")
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// 2-D matrix product with optional transposes applied to the operands.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = dims2(&self.vals[a.0])?;
        let (br, bc) = dims2(&self.vals[b.0])?;
        let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if ka != kb {
            return Err(ScgError::Dimension(format!(
                "matmul inner dims {ka} vs {kb} (shapes {:?} ta={ta}, {:?} tb={tb})",
                self.vals[a.0].shape(),
                self.vals[b.0].shape()
            )));
        }
        let a_eff = materialize(&self.vals[a.0], ta);
        let b_eff = materialize(&self.vals[b.0], tb);
        let y = matmul_raw(&a_eff, &b_eff, m, ka, n);
        let val = Tensor::new(vec![m, n], y)?;
        let r = self.req(&[a, b]);
        self.push(Op::Matmul { a, b, ta, tb }, val, r)
    }

    // ── convolution and friends ─────────────────────────────────────

    /// 2-D convolution (cross-correlation): x [B,C,H,W] ⋆ w [O,C,k,k].
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let val = conv2d_raw(&self.vals[x.0], &self.vals[w.0], stride, pad)?;
        let r = self.req(&[x, w]);
        self.push(Op::Conv2d { x, w, stride, pad }, val, r)
    }

    /// Per-channel bias: x [B,C,H,W] + b [C].
    pub fn bias_add_chan(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.vals[x.0].shape().to_vec();
        if xs.len() != 4 || self.vals[b.0].shape() != [xs[1]] {
            return Err(ScgError::Dimension(format!(
                "bias_add_chan: x {:?} b {:?}",
                xs,
                self.vals[b.0].shape()
            )));
        }
        let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let mut out = self.vals[x.0].clone();
        let bias = self.vals[b.0].data();
        for bi in 0..bn {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let bv = bias[ci];
                for v in &mut out.data_mut()[base..base + hw] {
                    *v += bv;
                }
            }
        }
        let r = self.req(&[x, b]);
        self.push(Op::BiasAddChan { x, b }, out, r)
    }

    /// Average pooling over k×k windows. Overlapping windows (stride < k)
    /// are allowed; style pooling uses stride 1.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.vals[x.0].shape().to_vec();
        if xs.len() != 4 {
            return Err(ScgError::Dimension(format!("avg_pool2d expects 4-D, got {xs:?}")));
        }
        let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if k > h || k > w || stride == 0 {
            return Err(ScgError::Dimension(format!(
                "avg_pool2d k={k} stride={stride} on {h}x{w}"
            )));
        }
        let oh = conv_out_dim(h, k, stride, 0);
        let ow = conv_out_dim(w, k, stride, 0);
        let xd = self.vals[x.0].data();
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; bn * c * oh * ow];
        for bi in 0..bn {
            for ci in 0..c {
                let ibase = (bi * c + ci) * h * w;
                let obase = (bi * c + ci) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            let row = ibase + (oy * stride + ky) * w + ox * stride;
                            for kx in 0..k {
                                acc += xd[row + kx];
                            }
                        }
                        out[obase + oy * ow + ox] = acc * inv;
                    }
                }
            }
        }
        let val = Tensor::new(vec![bn, c, oh, ow], out)?;
        let r = self.requires[x.0];
        self.push(Op::AvgPool2d { x, k, stride }, val, r)
    }

    /// Nearest-neighbor 2x upsampling of [B,C,H,W].
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let xs = self.vals[x.0].shape().to_vec();
        if xs.len() != 4 {
            return Err(ScgError::Dimension(format!("upsample expects 4-D, got {xs:?}")));
        }
        let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xd = self.vals[x.0].data();
        let mut out = vec![0.0; bn * c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for bc in 0..bn * c {
            let ibase = bc * h * w;
            let obase = bc * oh * ow;
            for y in 0..oh {
                let iy = y / 2;
                for x2 in 0..ow {
                    out[obase + y * ow + x2] = xd[ibase + iy * w + x2 / 2];
                }
            }
        }
        let val = Tensor::new(vec![bn, c, oh, ow], out)?;
        let r = self.requires[x.0];
        self.push(Op::UpsampleNearest2(x), val, r)
    }

    /// Instance normalization with affine params: per (sample, channel)
    /// statistics over the spatial extent.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.vals[x.0].shape().to_vec();
        if xs.len() != 4 {
            return Err(ScgError::Dimension(format!("instance_norm expects 4-D, got {xs:?}")));
        }
        let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if self.vals[gamma.0].shape() != [c] || self.vals[beta.0].shape() != [c] {
            return Err(ScgError::Dimension("instance_norm affine params must be [C]".into()));
        }
        let hw = h * w;
        let xd = self.vals[x.0].data();
        let gd = self.vals[gamma.0].data();
        let bd = self.vals[beta.0].data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..bn {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let seg = &xd[base..base + hw];
                let mu = seg.iter().sum::<f64>() / hw as f64;
                let var = seg.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / hw as f64;
                let inv_s = 1.0 / (var + eps).sqrt();
                for (o, &v) in out[base..base + hw].iter_mut().zip(seg) {
                    *o = gd[ci] * ((v - mu) * inv_s) + bd[ci];
                }
            }
        }
        let val = Tensor::new(xs, out)?;
        let r = self.req(&[x, gamma, beta]);
        self.push(Op::InstanceNorm { x, gamma, beta, eps }, val, r)
    }

    /// Dense k×k patch extraction of a [C,H,W] map into rows of a
    /// [(H−k+1)·(W−k+1), C·k·k] matrix. Row j is the patch whose origin is
    /// the j-th grid point in row-major order; each row is vectorized in
    /// (channel, row, col) order.
    pub fn im2col_patches(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.vals[x.0].shape().to_vec();
        if xs.len() != 3 {
            return Err(ScgError::Dimension(format!("im2col_patches expects 3-D, got {xs:?}")));
        }
        let (h, w) = (xs[1], xs[2]);
        if k > h || k > w {
            return Err(ScgError::Dimension(format!("patch size {k} exceeds map {h}x{w}")));
        }
        let val = im2col_patch_rows(&self.vals[x.0], k)?;
        let r = self.requires[x.0];
        self.push(Op::Im2colPatches { x, k }, val, r)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let val = self.vals[x.0].reshaped(shape)?;
        let r = self.requires[x.0];
        self.push(Op::Reshape(x), val, r)
    }

    /// Slice along the leading axis.
    pub fn slice0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.vals[x.0].shape().to_vec();
        if xs.is_empty() || start + len > xs[0] {
            return Err(ScgError::Dimension(format!(
                "slice0 [{start}, {start}+{len}) of leading dim {:?}",
                xs.first()
            )));
        }
        let chunk = self.vals[x.0].numel() / xs[0];
        let data = self.vals[x.0].data()[start * chunk..(start + len) * chunk].to_vec();
        let mut shape = xs.clone();
        shape[0] = len;
        let val = Tensor::new(shape, data)?;
        let r = self.requires[x.0];
        self.push(Op::Slice0 { x, start }, val, r)
    }

    /// Concatenate along the leading axis.
    pub fn concat0(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| ScgError::Contract("concat0 of empty list".into()))?;
        let tail_shape = self.vals[first.0].shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for v in xs {
            let s = self.vals[v.0].shape();
            if s.is_empty() || s[1..] != tail_shape[..] {
                return Err(ScgError::Dimension(format!(
                    "concat0 shape mismatch: {:?} vs leading {:?}",
                    s, tail_shape
                )));
            }
            lead += s[0];
            data.extend_from_slice(self.vals[v.0].data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail_shape);
        let val = Tensor::new(shape, data)?;
        let r = self.req(xs);
        self.push(Op::Concat0(xs.to_vec()), val, r)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Leaf grads accumulate across
    /// calls; interior grads are recomputed fresh each call.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.vals[root.0].is_scalar() {
            return Err(ScgError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.vals[root.0].shape()
            )));
        }
        if !self.requires[root.0] {
            return Err(ScgError::Contract(
                "backward root does not depend on any requires_grad leaf".into(),
            ));
        }
        let n = self.vals.len();
        let mut d: Vec<Option<Tensor>> = vec![None; n];
        d[root.0] = Some(Tensor::new(
            self.vals[root.0].shape().to_vec(),
            vec![1.0],
        )?);

        for i in (0..n).rev() {
            let Some(dy) = d[i].take() else { continue };
            if !self.requires[i] {
                continue;
            }
            match &self.ops[i] {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        match &mut self.grads[i] {
                            Some(g) => {
                                for (gv, dv) in g.data_mut().iter_mut().zip(dy.data()) {
                                    *gv += dv;
                                }
                            }
                            None => self.grads[i] = Some(dy),
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accum(&mut d, &self.requires, a, dy.clone());
                    accum(&mut d, &self.requires, b, dy);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    accum(&mut d, &self.requires, a, dy.clone());
                    accum(&mut d, &self.requires, b, dy.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.requires[a.0] {
                        let da = dy.zip_map(&self.vals[b.0], |g, v| g * v)?;
                        accum(&mut d, &self.requires, a, da);
                    }
                    if self.requires[b.0] {
                        let db = dy.zip_map(&self.vals[a.0], |g, v| g * v)?;
                        accum(&mut d, &self.requires, b, db);
                    }
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    accum(&mut d, &self.requires, a, dy);
                }
                Op::MulScalar(a, s) => {
                    let (a, s) = (*a, *s);
                    accum(&mut d, &self.requires, a, dy.map(|v| v * s));
                }
                Op::Relu(a) => {
                    let a = *a;
                    let da = dy.zip_map(&self.vals[a.0], |g, x| if x > 0.0 { g } else { 0.0 })?;
                    accum(&mut d, &self.requires, a, da);
                }
                Op::LeakyRelu(a, slope) => {
                    let (a, slope) = (*a, *slope);
                    let da =
                        dy.zip_map(&self.vals[a.0], |g, x| if x > 0.0 { g } else { slope * g })?;
                    accum(&mut d, &self.requires, a, da);
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let da = dy.zip_map(&self.vals[i], |g, y| g * (1.0 - y * y))?;
                    accum(&mut d, &self.requires, a, da);
                }
                Op::Abs(a) => {
                    let a = *a;
                    let da = dy.zip_map(&self.vals[a.0], |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })?;
                    accum(&mut d, &self.requires, a, da);
                }
                Op::Sum(a) => {
                    let a = *a;
                    let g = dy.item()?;
                    let da = Tensor::full(self.vals[a.0].shape(), g);
                    accum(&mut d, &self.requires, a, da);
                }
                Op::Mean(a) => {
                    let a = *a;
                    let g = dy.item()? / self.vals[a.0].numel() as f64;
                    let da = Tensor::full(self.vals[a.0].shape(), g);
                    accum(&mut d, &self.requires, a, da);
                }
                Op::SumSquares(a) => {
                    let a = *a;
                    let g = dy.item()?;
                    let da = self.vals[a.0].map(|x| 2.0 * x * g);
                    accum(&mut d, &self.requires, a, da);
                }
                Op::Matmul { a, b, ta, tb } => {
                    let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                    self.backward_matmul(&mut d, &dy, a, b, ta, tb)?;
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let (x, w, stride, pad) = (*x, *w, *stride, *pad);
                    self.backward_conv2d(&mut d, &dy, x, w, stride, pad)?;
                }
                Op::BiasAddChan { x, b } => {
                    let (x, b) = (*x, *b);
                    if self.requires[b.0] {
                        let xs = self.vals[x.0].shape();
                        let (bn, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                        let mut db = vec![0.0; c];
                        let dyd = dy.data();
                        for bi in 0..bn {
                            for ci in 0..c {
                                let base = (bi * c + ci) * hw;
                                db[ci] += dyd[base..base + hw].iter().sum::<f64>();
                            }
                        }
                        accum(&mut d, &self.requires, b, Tensor::new(vec![c], db)?);
                    }
                    accum(&mut d, &self.requires, x, dy);
                }
                Op::AvgPool2d { x, k, stride } => {
                    let (x, k, stride) = (*x, *k, *stride);
                    let da = backward_avg_pool(&self.vals[x.0], &dy, k, stride)?;
                    accum(&mut d, &self.requires, x, da);
                }
                Op::UpsampleNearest2(x) => {
                    let x = *x;
                    let xs = self.vals[x.0].shape();
                    let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let dyd = dy.data();
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut da = vec![0.0; bn * c * h * w];
                    for bc in 0..bn * c {
                        let ibase = bc * h * w;
                        let obase = bc * oh * ow;
                        for y in 0..oh {
                            for x2 in 0..ow {
                                da[ibase + (y / 2) * w + x2 / 2] += dyd[obase + y * ow + x2];
                            }
                        }
                    }
                    accum(&mut d, &self.requires, x, Tensor::new(xs.to_vec(), da)?);
                }
                Op::InstanceNorm { x, gamma, beta, eps } => {
                    let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                    self.backward_instance_norm(&mut d, &dy, x, gamma, beta, eps)?;
                }
                Op::Im2colPatches { x, k } => {
                    let (x, k) = (*x, *k);
                    let da = col2im_patch_rows(&dy, self.vals[x.0].shape(), k)?;
                    accum(&mut d, &self.requires, x, da);
                }
                Op::Reshape(x) => {
                    let x = *x;
                    let da = dy.reshaped(self.vals[x.0].shape())?;
                    accum(&mut d, &self.requires, x, da);
                }
                Op::Slice0 { x, start } => {
                    let (x, start) = (*x, *start);
                    let xs = self.vals[x.0].shape().to_vec();
                    let chunk = self.vals[x.0].numel() / xs[0];
                    let mut da = Tensor::zeros(&xs);
                    let off = start * chunk;
                    da.data_mut()[off..off + dy.numel()].copy_from_slice(dy.data());
                    accum(&mut d, &self.requires, x, da);
                }
                Op::Concat0(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let n = self.vals[p.0].numel();
                        let shape = self.vals[p.0].shape().to_vec();
                        let da = Tensor::new(shape, dy.data()[off..off + n].to_vec())?;
                        off += n;
                        accum(&mut d, &self.requires, p, da);
                    }
                }
            }
        }
        Ok(())
    }

    fn backward_matmul(
        &self,
        d: &mut [Option<Tensor>],
        dy: &Tensor,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    ) -> Result<()> {
        // y = A° B° with ° the optional transpose. dA° = dY (B°)ᵀ, dB° = (A°)ᵀ dY,
        // then undo the operand transpose.
        let (m, n) = dims2(dy)?;
        let a_eff = materialize(&self.vals[a.0], ta); // m×k
        let b_eff = materialize(&self.vals[b.0], tb); // k×n
        let k = a_eff.len() / m;
        if self.requires[a.0] {
            let bt = transpose_raw(&b_eff, k, n); // n×k
            let da_eff = matmul_raw(dy.data(), &bt, m, n, k); // m×k
            let da = if ta { transpose_raw(&da_eff, m, k) } else { da_eff };
            let shape = self.vals[a.0].shape().to_vec();
            accum_slice(d, &self.requires, a, Tensor::new(shape, da)?);
        }
        if self.requires[b.0] {
            let at = transpose_raw(&a_eff, m, k); // k×m
            let db_eff = matmul_raw(&at, dy.data(), k, m, n); // k×n
            let db = if tb { transpose_raw(&db_eff, k, n) } else { db_eff };
            let shape = self.vals[b.0].shape().to_vec();
            accum_slice(d, &self.requires, b, Tensor::new(shape, db)?);
        }
        Ok(())
    }

    fn backward_conv2d(
        &self,
        d: &mut [Option<Tensor>],
        dy: &Tensor,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    ) -> Result<()> {
        let xs = self.vals[x.0].shape().to_vec();
        let ws = self.vals[w.0].shape().to_vec();
        let (bn, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let oh = conv_out_dim(h, k, stride, pad);
        let ow = conv_out_dim(wd, k, stride, pad);
        let m = oh * ow;
        let dkk = c * k * k;
        let dyd = dy.data();
        let wmat = self.vals[w.0].data(); // O × dkk, row-major already

        let mut dw = vec![0.0; o * dkk];
        let mut dx = vec![0.0; bn * c * h * wd];
        for bi in 0..bn {
            let xoff = bi * c * h * wd;
            let yoff = bi * o * m;
            let dyb = &dyd[yoff..yoff + o * m];
            if self.requires[w.0] {
                // dW += dY_b · colsᵀ
                let cols = im2col_cols(&self.vals[x.0].data()[xoff..xoff + c * h * wd], c, h, wd, k, stride, pad);
                let colst = transpose_raw(&cols, dkk, m); // m × dkk
                let contrib = matmul_raw(dyb, &colst, o, m, dkk);
                for (acc, v) in dw.iter_mut().zip(&contrib) {
                    *acc += v;
                }
            }
            if self.requires[x.0] {
                // dCols = Wᵀ · dY_b, then scatter back.
                let wt = transpose_raw(wmat, o, dkk); // dkk × o
                let dcols = matmul_raw(&wt, dyb, dkk, o, m);
                col2im_cols(&dcols, &mut dx[xoff..xoff + c * h * wd], c, h, wd, k, stride, pad);
            }
        }
        if self.requires[w.0] {
            accum_slice(d, &self.requires, w, Tensor::new(ws, dw)?);
        }
        if self.requires[x.0] {
            accum_slice(d, &self.requires, x, Tensor::new(xs, dx)?);
        }
        Ok(())
    }

    fn backward_instance_norm(
        &self,
        d: &mut [Option<Tensor>],
        dy: &Tensor,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<()> {
        let xs = self.vals[x.0].shape().to_vec();
        let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let xd = self.vals[x.0].data();
        let gd = self.vals[gamma.0].data();
        let dyd = dy.data();

        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = vec![0.0; xd.len()];
        for bi in 0..bn {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let seg = &xd[base..base + hw];
                let dseg = &dyd[base..base + hw];
                let n = hw as f64;
                let mu = seg.iter().sum::<f64>() / n;
                let var = seg.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let inv_s = 1.0 / (var + eps).sqrt();
                // yhat_i = (x_i − μ)/s; dβ += Σdy; dγ += Σ dy·yhat;
                // dx = (γ/s)(dy − mean(dy) − yhat·mean(dy∘yhat))
                let mut sum_dy = 0.0;
                let mut sum_dy_yh = 0.0;
                for (&dv, &xv) in dseg.iter().zip(seg) {
                    let yh = (xv - mu) * inv_s;
                    sum_dy += dv;
                    sum_dy_yh += dv * yh;
                }
                dbeta[ci] += sum_dy;
                dgamma[ci] += sum_dy_yh;
                if self.requires[x.0] {
                    let mdy = sum_dy / n;
                    let mdyyh = sum_dy_yh / n;
                    let g = gd[ci] * inv_s;
                    for j in 0..hw {
                        let yh = (seg[j] - mu) * inv_s;
                        dx[base + j] = g * (dseg[j] - mdy - yh * mdyyh);
                    }
                }
            }
        }
        if self.requires[gamma.0] {
            accum_slice(d, &self.requires, gamma, Tensor::new(vec![c], dgamma)?);
        }
        if self.requires[beta.0] {
            accum_slice(d, &self.requires, beta, Tensor::new(vec![c], dbeta)?);
        }
        if self.requires[x.0] {
            accum_slice(d, &self.requires, x, Tensor::new(xs, dx)?);
        }
        Ok(())
    }
}

fn accum(d: &mut [Option<Tensor>], requires: &[bool], v: Var, g: Tensor) {
    accum_slice(d, requires, v, g);
}

fn accum_slice(d: &mut [Option<Tensor>], requires: &[bool], v: Var, g: Tensor) {
    if !requires[v.0] {
        return;
    }
    match &mut d[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => d[v.0] = Some(g),
    }
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(ScgError::Dimension(format!("expected 2-D matrix, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

fn materialize(t: &Tensor, transpose: bool) -> Vec<f64> {
    if transpose {
        let (r, c) = (t.shape()[0], t.shape()[1]);
        transpose_raw(t.data(), r, c)
    } else {
        t.data().to_vec()
    }
}

pub(crate) fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Row-major matrix product. Each output element accumulates over k in
/// ascending order regardless of parallelism, so results are deterministic
/// and independent of thread count.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; m * n];
    let body = |i: usize, row: &mut [f64]| {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..kk * n + n];
            for (yv, &bv) in row.iter_mut().zip(brow) {
                *yv += aik * bv;
            }
        }
    };
    if m * n * k >= 1 << 18 {
        y.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in y.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    y
}

/// Unrolled convolution windows: one column per output location, rows
/// ordered (channel, kernel-row, kernel-col). Out-of-bounds reads are zero.
pub(crate) fn im2col_cols(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let m = oh * ow;
    let mut cols = vec![0.0; c * k * k * m];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * m;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let ibase = (ci * h + iy as usize) * w;
                    let obase = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[obase + ox] = x[ibase + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im_cols(
    cols: &[f64],
    x: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let m = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * m;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let ibase = (ci * h + iy as usize) * w;
                    let obase = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[ibase + ix as usize] += cols[obase + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Shared forward convolution used by the graph op and no-grad paths.
pub fn conv2d_raw(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(ScgError::Dimension(format!(
            "conv2d expects 4-D input and kernel, got {xs:?} and {ws:?}"
        )));
    }
    let (bn, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if kc != c {
        return Err(ScgError::Dimension(format!(
            "conv2d channel mismatch: input C={c}, kernel C={kc}"
        )));
    }
    if kh != kw {
        return Err(ScgError::Dimension(format!("conv2d kernel must be square, got {kh}x{kw}")));
    }
    let k = kh;
    if stride == 0 {
        return Err(ScgError::Contract("conv2d stride must be >= 1".into()));
    }
    if k > h + 2 * pad || k > wd + 2 * pad {
        return Err(ScgError::Dimension(format!(
            "conv2d kernel {k} exceeds padded input {}x{}",
            h + 2 * pad,
            wd + 2 * pad
        )));
    }
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(wd, k, stride, pad);
    let m = oh * ow;
    let dkk = c * k * k;
    let mut out = vec![0.0; bn * o * m];
    for bi in 0..bn {
        let cols = im2col_cols(&x.data()[bi * c * h * wd..(bi + 1) * c * h * wd], c, h, wd, k, stride, pad);
        let y = matmul_raw(w.data(), &cols, o, dkk, m);
        out[bi * o * m..(bi + 1) * o * m].copy_from_slice(&y);
    }
    Tensor::new(vec![bn, o, oh, ow], out)
}

/// Patch rows layout of [`Graph::im2col_patches`], shared with the
/// no-grad patch extraction path.
pub fn im2col_patch_rows(x: &Tensor, k: usize) -> Result<Tensor> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (gh, gw) = (h - k + 1, w - k + 1);
    let m = gh * gw;
    let d = c * k * k;
    let xd = x.data();
    let mut out = vec![0.0; m * d];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = (gy * gw + gx) * d;
            let mut idx = row;
            for ci in 0..c {
                for ky in 0..k {
                    let ibase = (ci * h + gy + ky) * w + gx;
                    for kx in 0..k {
                        out[idx] = xd[ibase + kx];
                        idx += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![m, d], out)
}

fn col2im_patch_rows(dy: &Tensor, xshape: &[usize], k: usize) -> Result<Tensor> {
    let (c, h, w) = (xshape[0], xshape[1], xshape[2]);
    let (gh, gw) = (h - k + 1, w - k + 1);
    let d = c * k * k;
    let dyd = dy.data();
    let mut dx = vec![0.0; c * h * w];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = (gy * gw + gx) * d;
            let mut idx = row;
            for ci in 0..c {
                for ky in 0..k {
                    let ibase = (ci * h + gy + ky) * w + gx;
                    for kx in 0..k {
                        dx[ibase + kx] += dyd[idx];
                        idx += 1;
                    }
                }
            }
        }
    }
    Tensor::new(xshape.to_vec(), dx)
}

fn backward_avg_pool(x: &Tensor, dy: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let xs = x.shape();
    let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let oh = conv_out_dim(h, k, stride, 0);
    let ow = conv_out_dim(w, k, stride, 0);
    let inv = 1.0 / (k * k) as f64;
    let dyd = dy.data();
    let mut dx = vec![0.0; x.numel()];
    for bc in 0..bn * c {
        let ibase = bc * h * w;
        let obase = bc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dyd[obase + oy * ow + ox] * inv;
                for ky in 0..k {
                    let row = ibase + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..k {
                        dx[row + kx] += g;
                    }
                }
            }
        }
    }
    Tensor::new(xs.to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        // Independent 6-loop reference used as the in-repo conv oracle.
        let (bn, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let oh = conv_out_dim(h, k, stride, pad);
        let ow = conv_out_dim(wd, k, stride, pad);
        let mut out = Tensor::zeros(&[bn, o, oh, ow]);
        for bi in 0..bn {
            for oi in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        acc += x.at4(bi, ci, iy as usize, ix as usize)
                                            * w.at4(oi, ci, ky, kx);
                                    }
                                }
                            }
                        }
                        let idx = ((bi * o + oi) * oh + oy) * ow + ox;
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel_scales() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap());
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_single_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(42);
        for &(bn, c, h, w, o, k, stride, pad) in &[
            (2usize, 3usize, 8usize, 8usize, 4usize, 3usize, 1usize, 0usize),
            (1, 2, 7, 9, 3, 3, 2, 1),
            (2, 4, 12, 12, 2, 5, 1, 2),
            (1, 1, 5, 5, 1, 1, 1, 0),
        ] {
            let x = Tensor::randn(&[bn, c, h, w], &mut rng);
            let wt = Tensor::randn(&[o, c, k, k], &mut rng);
            let expect = naive_conv(&x, &wt, stride, pad);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let wv = g.constant(wt);
            let y = g.conv2d(xv, wv, stride, pad).unwrap();
            assert!(
                g.value(y).max_abs_diff(&expect) < 1e-10,
                "conv mismatch at shape ({bn},{c},{h},{w}) k={k}"
            );
        }
    }

    #[test]
    fn conv_channel_mismatch_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
        assert!(g.conv2d(x, w, 1, 0).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_sum_squares_gives_2x() {
        let mut g = Graph::new();
        let t = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let x = g.param(t.clone());
        let s = g.sum_squares(x);
        g.backward(s).unwrap();
        let expect = t.scale(2.0);
        assert!(g.grad(x).unwrap().max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[3]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[3]));
        let y = g.mul_scalar(x, 2.0);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn matmul_transpose_flags() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 3], vec![1., 0., 1., 0., 1., 0.]).unwrap());
        // aᵀ (3×2) · b (2×3) → 3×3
        let y = g.matmul(a, b, true, false).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 3]);
        // a (2×3) · bᵀ (3×2) → 2×2
        let y2 = g.matmul(a, b, false, true).unwrap();
        assert_eq!(g.value(y2).data(), &[4.0, 2.0, 10.0, 5.0]);
    }

    #[test]
    fn im2col_patches_hand_example() {
        // 1×4×4 map of 0..15, k=3: first patch is rows of the top-left 3×3 block.
        let x = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let p = g.im2col_patches(xv, 3).unwrap();
        assert_eq!(g.value(p).shape(), &[4, 9]);
        assert_eq!(
            &g.value(p).data()[0..9],
            &[0.0, 1.0, 2.0, 4.0, 5.0, 6.0, 8.0, 9.0, 10.0]
        );
    }

    #[test]
    fn replay_is_bit_deterministic() {
        use rand::SeedableRng;
        let run = || {
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
            let x = Tensor::randn(&[1, 2, 6, 6], &mut rng);
            let w = Tensor::randn(&[3, 2, 3, 3], &mut rng);
            let mut g = Graph::new();
            let xv = g.param(x);
            let wv = g.param(w);
            let y = g.conv2d(xv, wv, 1, 1).unwrap();
            let t = g.tanh(y);
            let loss = g.sum_squares(t);
            g.backward(loss).unwrap();
            (g.grad(xv).unwrap().clone(), g.grad(wv).unwrap().clone())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(b1.data(), b2.data());
    }

    #[test]
    fn slice_concat_round_trip() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let a = g.slice0(x, 0, 1).unwrap();
        let b = g.slice0(x, 1, 2).unwrap();
        let back = g.concat0(&[a, b]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
        let s = g.sum(back);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
