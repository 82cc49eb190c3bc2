//! Recording tape for reverse-mode differentiation.
//!
//! Every op appends a node whose inputs have strictly smaller indices, so the
//! node vector is already topologically sorted and [`Graph::backward`] is a
//! single reverse sweep that visits each node once.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use super::{Parameter, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Probability clamp applied inside binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceScope {
    /// Over `H×W`, yielding `N×C×1×1`.
    Spatial,
    /// Over channels, yielding `N×1×H×W`.
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Full,
    /// `b` is `N×C×1×1`.
    Channel,
    /// `b` is `N×1×H×W`.
    Spatial,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
        /// im2col buffer laid out `[Cin·K·K, N·Ho·Wo]`.
        cols: Vec<T>,
    },
    Pool {
        input: Var,
        mode: PoolMode,
        argmax: Vec<u32>,
    },
    Reduce {
        input: Var,
        scope: ReduceScope,
        mode: PoolMode,
        argmax: Vec<u32>,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Add {
        a: Var,
        b: Var,
    },
    Reshape(Var),
    Sum(Var),
    Bce {
        probs: Var,
        labels: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<usize>,
}

/// The tape. Build a forward pass with the op methods, then call
/// [`backward`](Graph::backward) on a scalar.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn conv_out(size: usize, k: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad + 1).checked_sub(k)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf; gradients are kept only when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Loads parameter `index` of a parameter list as a differentiable leaf.
    pub fn param(&mut self, p: &Parameter<T>, index: usize) -> Var {
        let v = self.leaf(p.value.clone(), true);
        self.nodes[v.0].param = Some(index);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last [`backward`](Graph::backward) target w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Adds the gradients of parameter leaves into `params[index].grad`.
    pub fn accumulate_param_grads(&self, params: &mut [Parameter<T>]) {
        for node in &self.nodes {
            if let (Some(i), Some(g)) = (node.param, node.grad.as_ref()) {
                for (acc, &x) in params[i].grad.data_mut().iter_mut().zip(g) {
                    *acc += x;
                }
            }
        }
    }

    // ---------------------------------------------------------------- ops

    /// Cross-correlation of `N×Cin×H×W` with `Cout×Cin×K×K`, zero padding on
    /// every side. `K` must be odd.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, cin, h, w] = self.value(input).dims4(OP)?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4(OP)?;
        if wcin != cin {
            return Err(Error::shape(OP, "input channels", wcin, cin));
        }
        if kh != kw {
            return Err(Error::shape(OP, "kernel width", kh, kw));
        }
        if kh % 2 == 0 {
            return Err(Error::invalid(format!("{OP}: kernel size {kh} must be odd")));
        }
        if let Some(b) = bias {
            let bd = self.value(b).dims();
            if bd != [cout] {
                return Err(Error::shape(OP, "bias length", cout, format!("{bd:?}")));
            }
        }
        let k = kh;
        let ho = conv_out(h, k, padding).filter(|&x| x > 0);
        let wo = conv_out(w, k, padding).filter(|&x| x > 0);
        let (ho, wo) = match (ho, wo) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape(OP, "spatial size", format!(">= {k}"), format!("{h}x{w}"))),
        };
        let p = ho * wo;
        let np = n * p;
        let kdim = cin * k * k;

        let x = self.value(input).data();
        let mut cols = vec![T::zero(); kdim * np];
        par::for_each_chunk_mut(&mut cols, np.max(1), |row, dst| {
            let ci = row / (k * k);
            let ky = (row / k) % k;
            let kx = row % k;
            for s in 0..n {
                let plane = &x[(s * cin + ci) * h * w..][..h * w];
                let out = &mut dst[s * p..][..p];
                for oy in 0..ho {
                    let iy = (oy + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            out[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        });

        let mut tmp = vec![T::zero(); cout * np];
        let wd = self.value(weight).data();
        T::gemm(cout, kdim, np, (wd, kdim, 1), (&cols, np, 1), T::zero(), (&mut tmp, np, 1));

        let bias_vals: Option<Vec<T>> = bias.map(|b| self.value(b).data().to_vec());
        let mut out = vec![T::zero(); n * cout * p];
        par::for_each_chunk_mut(&mut out, (cout * p).max(1), |s, dst| {
            for o in 0..cout {
                let b = bias_vals.as_ref().map_or(T::zero(), |b| b[o]);
                let src = &tmp[o * np + s * p..][..p];
                for (d, &v) in dst[o * p..][..p].iter_mut().zip(src) {
                    *d = v + b;
                }
            }
        });

        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, cout, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
                cols,
            },
            rg,
        ))
    }

    /// 2×2 pooling with stride 2. Spatial dims must be even.
    pub fn pool2d(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        const OP: &str = "pool2d";
        let [n, c, h, w] = self.value(input).dims4(OP)?;
        if h % 2 != 0 {
            return Err(Error::shape(OP, "height (must be even)", h + 1, h));
        }
        if w % 2 != 0 {
            return Err(Error::shape(OP, "width (must be even)", w + 1, w));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut argmax = Vec::new();
        if mode == PoolMode::Max {
            argmax = vec![0u32; out.len()];
        }
        let quarter = T::of(0.25);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = plane * ho * wo + oy * wo + ox;
                    let idx = [
                        base + 2 * oy * w + 2 * ox,
                        base + 2 * oy * w + 2 * ox + 1,
                        base + (2 * oy + 1) * w + 2 * ox,
                        base + (2 * oy + 1) * w + 2 * ox + 1,
                    ];
                    match mode {
                        PoolMode::Max => {
                            let mut best = idx[0];
                            for &i in &idx[1..] {
                                if x[i] > x[best] {
                                    best = i;
                                }
                            }
                            out[o] = x[best];
                            argmax[o] = best as u32;
                        }
                        PoolMode::Avg => {
                            out[o] = (x[idx[0]] + x[idx[1]] + x[idx[2]] + x[idx[3]]) * quarter;
                        }
                    }
                }
            }
        }
        let rg = self.rg(input);
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(value, Op::Pool { input, mode, argmax }, rg))
    }

    /// Max or mean over the spatial plane (`N×C×1×1`) or across channels
    /// (`N×1×H×W`).
    pub fn reduce(&mut self, input: Var, scope: ReduceScope, mode: PoolMode) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("reduce")?;
        if c == 0 || h * w == 0 {
            return Err(Error::Empty("reduce"));
        }
        let x = self.value(input).data();
        let hw = h * w;
        let (dims, out, argmax) = match scope {
            ReduceScope::Spatial => {
                let mut out = vec![T::zero(); n * c];
                let mut am = vec![0u32; if mode == PoolMode::Max { n * c } else { 0 }];
                let inv = T::one() / T::of(hw as f64);
                for plane in 0..n * c {
                    let src = &x[plane * hw..][..hw];
                    match mode {
                        PoolMode::Avg => out[plane] = src.iter().copied().sum::<T>() * inv,
                        PoolMode::Max => {
                            let mut best = 0;
                            for (i, &v) in src.iter().enumerate() {
                                if v > src[best] {
                                    best = i;
                                }
                            }
                            out[plane] = src[best];
                            am[plane] = (plane * hw + best) as u32;
                        }
                    }
                }
                (vec![n, c, 1, 1], out, am)
            }
            ReduceScope::Channel => {
                let mut out = vec![T::zero(); n * hw];
                let mut am = vec![0u32; if mode == PoolMode::Max { n * hw } else { 0 }];
                let inv = T::one() / T::of(c as f64);
                for s in 0..n {
                    for pix in 0..hw {
                        let at = |ch: usize| (s * c + ch) * hw + pix;
                        match mode {
                            PoolMode::Avg => {
                                let mut acc = T::zero();
                                for ch in 0..c {
                                    acc += x[at(ch)];
                                }
                                out[s * hw + pix] = acc * inv;
                            }
                            PoolMode::Max => {
                                let mut best = at(0);
                                for ch in 1..c {
                                    if x[at(ch)] > x[best] {
                                        best = at(ch);
                                    }
                                }
                                out[s * hw + pix] = x[best];
                                am[s * hw + pix] = best as u32;
                            }
                        }
                    }
                }
                (vec![n, 1, h, w], out, am)
            }
        };
        let rg = self.rg(input);
        let value = Tensor::new(dims, out)?;
        Ok(self.push(
            value,
            Op::Reduce {
                input,
                scope,
                mode,
                argmax,
            },
            rg,
        ))
    }

    /// `N×In` times `(M×In)ᵀ`, plus an optional length-`M` bias.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "affine";
        let xd = self.value(input).dims();
        let (n, fan_in) = match xd[..] {
            [n, i] => (n, i),
            _ => return Err(Error::shape(OP, "input rank", 2, xd.len())),
        };
        let (m, wi) = match self.value(weight).dims()[..] {
            [m, i] => (m, i),
            ref d => return Err(Error::shape(OP, "weight rank", 2, d.len())),
        };
        if wi != fan_in {
            return Err(Error::shape(OP, "input features", wi, fan_in));
        }
        if let Some(b) = bias {
            if self.value(b).dims() != [m] {
                return Err(Error::shape(OP, "bias length", m, format!("{:?}", self.value(b).dims())));
            }
        }
        let mut out = vec![T::zero(); n * m];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(m.max(1)) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            n,
            fan_in,
            m,
            (self.value(input).data(), fan_in, 1),
            (self.value(weight).data(), 1, fan_in),
            beta,
            (&mut out, m, 1),
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Affine { input, weight, bias }, rg))
    }

    fn bn_dims(&self, input: Var) -> Result<(usize, usize, usize)> {
        match self.value(input).dims()[..] {
            [n, c] => Ok((n, c, 1)),
            [n, c, h, w] => Ok((n, c, h * w)),
            ref d => Err(Error::shape("batch_norm", "rank", "2 or 4", d.len())),
        }
    }

    fn bn_check_affine(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        for v in [gamma, beta] {
            if self.value(v).dims() != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    "channel parameters",
                    c,
                    format!("{:?}", self.value(v).dims()),
                ));
            }
        }
        Ok(())
    }

    /// Batch normalization with batch statistics. Returns the output and the
    /// per-channel batch mean and biased variance.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, hw) = self.bn_dims(input)?;
        if n < 2 {
            return Err(Error::invalid(format!(
                "batch_norm: batch size {n} in train mode; at least 2 required"
            )));
        }
        self.bn_check_affine(c, gamma, beta)?;
        let x = self.value(input).data();
        let m = T::of((n * hw) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                mean[ch] += x[(s * c + ch) * hw..][..hw].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / m);
        for s in 0..n {
            for ch in 0..c {
                let mu = mean[ch];
                var[ch] += x[(s * c + ch) * hw..][..hw]
                    .iter()
                    .map(|&v| (v - mu) * (v - mu))
                    .sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v = *v / m);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let out = self.bn_apply(input, gamma, beta, &mean, &inv_std, true, c, hw);
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, hw) = self.bn_dims(input)?;
        self.bn_check_affine(c, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics", c, mean.len().min(var.len())));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        Ok(self.bn_apply(input, gamma, beta, mean, &inv_std, false, c, hw))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        batch_stats: bool,
        c: usize,
        hw: usize,
    ) -> Var {
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for (i, ((xh, o), &v)) in xhat.iter_mut().zip(out.iter_mut()).zip(x).enumerate() {
            let ch = (i / hw) % c;
            *xh = (v - mean[ch]) * inv_std[ch];
            *o = g[ch] * *xh + b[ch];
        }
        let dims = self.value(input).dims().to_vec();
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor { dims, data: out },
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                batch_stats,
            },
            rg,
        )
    }

    /// Hash of every data-dependent branch the forward pass took: relu
    /// signs, max-pooling winners and BCE clamp hits. Passes with equal
    /// signatures evaluate the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(_) => node.value.data().iter().for_each(|v| (*v > T::zero()).hash(&mut h)),
                Op::Pool { argmax, .. } | Op::Reduce { argmax, .. } => argmax.hash(&mut h),
                Op::Bce { probs, .. } => {
                    let lo = T::of(BCE_CLAMP);
                    let hi = T::one() - lo;
                    for &p in self.nodes[probs.0].value.data() {
                        (p < lo, p > hi).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(T::zero()));
        let rg = self.rg(input);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(sigmoid);
        let rg = self.rg(input);
        self.push(value, Op::Sigmoid(input), rg)
    }

    /// Inverted dropout. Outside training, or at rate 0, returns `input`
    /// unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, rng: &mut R, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(input);
        }
        let scale = T::of(1.0 / (1.0 - rate));
        let n = self.value(input).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { scale })
            .collect();
        let x = self.value(input);
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor {
            dims: x.dims().to_vec(),
            data,
        };
        let rg = self.rg(input);
        Ok(self.push(value, Op::Dropout { input, mask }, rg))
    }

    /// Channel-axis concatenation; `a` occupies the leading channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let [n, ca, h, w] = self.value(a).dims4(OP)?;
        let [nb, cb, hb, wb] = self.value(b).dims4(OP)?;
        if nb != n {
            return Err(Error::shape(OP, "batch", n, nb));
        }
        if hb != h {
            return Err(Error::shape(OP, "height", h, hb));
        }
        if wb != w {
            return Err(Error::shape(OP, "width", w, wb));
        }
        let hw = h * w;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&ad[s * ca * hw..][..ca * hw]);
            out.extend_from_slice(&bd[s * cb * hw..][..cb * hw]);
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    /// Elementwise product. `b` may equal `a`'s dims, or be `N×C×1×1`
    /// (broadcast over space) or `N×1×H×W` (broadcast over channels).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ad = self.value(a).dims().to_vec();
        let bd = self.value(b).dims().to_vec();
        let bcast = if ad == bd {
            Broadcast::Full
        } else {
            match (&ad[..], &bd[..]) {
                ([n, c, _, _], [n2, c2, 1, 1]) if n == n2 && c == c2 => Broadcast::Channel,
                ([n, _, h, w], [n2, 1, h2, w2]) if n == n2 && h == h2 && w == w2 => Broadcast::Spatial,
                _ => return Err(Error::shape("mul", "broadcast", format!("{ad:?}"), format!("{bd:?}"))),
            }
        };
        let x = self.value(a).data();
        let y = self.value(b).data();
        let out: Vec<T> = match bcast {
            Broadcast::Full => x.iter().zip(y).map(|(&p, &q)| p * q).collect(),
            Broadcast::Channel => {
                let hw = ad[2] * ad[3];
                x.iter().enumerate().map(|(i, &p)| p * y[i / hw]).collect()
            }
            Broadcast::Spatial => {
                let (c, hw) = (ad[1], ad[2] * ad[3]);
                x.iter()
                    .enumerate()
                    .map(|(i, &p)| p * y[(i / (c * hw)) * hw + i % hw])
                    .collect()
            }
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { dims: ad, data: out }, Op::Mul { a, b, bcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let ad = self.value(a).dims();
        if ad != self.value(b).dims() {
            return Err(Error::shape(
                "add",
                "dims",
                format!("{ad:?}"),
                format!("{:?}", self.value(b).dims()),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor { dims: ad.to_vec(), data };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn reshape(&mut self, input: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(dims)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    /// Mean binary cross-entropy of probabilities against `{0,1}` labels,
    /// with probabilities clamped to `[1e-7, 1-1e-7]`.
    pub fn bce(&mut self, probs: Var, labels: &[T]) -> Result<Var> {
        let p = self.value(probs).data();
        if p.is_empty() {
            return Err(Error::Empty("bce_loss"));
        }
        if p.len() != labels.len() {
            return Err(Error::shape("bce_loss", "labels", p.len(), labels.len()));
        }
        let (lo, hi) = (T::of(BCE_CLAMP), T::one() - T::of(BCE_CLAMP));
        let mut total = T::zero();
        for (&pi, &y) in p.iter().zip(labels) {
            let pc = pi.max(lo).min(hi);
            total -= y * pc.ln() + (T::one() - y) * (T::one() - pc).ln();
        }
        let loss = total / T::of(p.len() as f64);
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a one-element `loss`. Node gradients from any
    /// earlier sweep are discarded; parameter accumulators are untouched
    /// until [`accumulate_param_grads`](Graph::accumulate_param_grads).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got dims {:?}",
                self.value(loss).dims()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.take() else { continue };
            backprop(before, &node.op, &node.value, &g);
            node.grad = Some(g);
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` when `v` does not
/// require a gradient.
fn slot<T: Scalar>(nodes: &mut [Node<T>], v: Var) -> Option<&mut Vec<T>> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.len();
    Some(node.grad.get_or_insert_with(|| vec![T::zero(); n]))
}

fn wants<T>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backprop<T: Scalar>(nodes: &mut [Node<T>], op: &Op<T>, out: &Tensor<T>, g: &[T]) {
    match op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            padding,
            cols,
        } => {
            let [n, cin, h, w] = nodes[input.0].value.dims4("conv2d").expect("checked in forward");
            let [cout, _, k, _] = nodes[weight.0].value.dims4("conv2d").expect("checked in forward");
            let [_, _, ho, wo] = out.dims4("conv2d").expect("checked in forward");
            let p = ho * wo;
            let np = n * p;
            let kdim = cin * k * k;
            // dOut as [Cout, N·P]
            let mut gt = vec![T::zero(); cout * np];
            for s in 0..n {
                for o in 0..cout {
                    gt[o * np + s * p..][..p].copy_from_slice(&g[(s * cout + o) * p..][..p]);
                }
            }
            if let Some(b) = *bias {
                if let Some(db) = slot(nodes, b) {
                    for o in 0..cout {
                        db[o] += gt[o * np..][..np].iter().copied().sum::<T>();
                    }
                }
            }
            if let Some(dw) = slot(nodes, *weight) {
                T::gemm(cout, np, kdim, (&gt, np, 1), (cols, 1, np), T::one(), (dw, kdim, 1));
            }
            if wants(nodes, *input) {
                let mut dcols = vec![T::zero(); kdim * np];
                {
                    let wd = nodes[weight.0].value.data();
                    T::gemm(kdim, cout, np, (wd, 1, kdim), (&gt, np, 1), T::zero(), (&mut dcols, np, 1));
                }
                let pad = *padding;
                let dx = slot(nodes, *input).expect("requires grad");
                par::for_each_chunk_mut(dx, (cin * h * w).max(1), |s, dst| {
                    for row in 0..kdim {
                        let ci = row / (k * k);
                        let ky = (row / k) % k;
                        let kx = row % k;
                        let src = &dcols[row * np + s * p..][..p];
                        let plane = &mut dst[ci * h * w..][..h * w];
                        for oy in 0..ho {
                            let iy = (oy + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..wo {
                                let ix = (ox + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::Pool { input, mode, argmax } => {
            let [_, _, h, w] = nodes[input.0].value.dims4("pool2d").expect("checked");
            let Some(dx) = slot(nodes, *input) else { return };
            match mode {
                PoolMode::Max => {
                    for (&i, &gv) in argmax.iter().zip(g) {
                        dx[i as usize] += gv;
                    }
                }
                PoolMode::Avg => {
                    let (ho, wo) = (h / 2, w / 2);
                    let q = T::of(0.25);
                    for (o, &gv) in g.iter().enumerate() {
                        let plane = o / (ho * wo);
                        let oy = (o / wo) % ho;
                        let ox = o % wo;
                        let base = plane * h * w;
                        for (dy, dxx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            dx[base + (2 * oy + dy) * w + 2 * ox + dxx] += gv * q;
                        }
                    }
                }
            }
        }
        Op::Reduce {
            input,
            scope,
            mode,
            argmax,
        } => {
            let [_, c, h, w] = nodes[input.0].value.dims4("reduce").expect("checked");
            let hw = h * w;
            let Some(dx) = slot(nodes, *input) else { return };
            match (scope, mode) {
                (_, PoolMode::Max) => {
                    for (&i, &gv) in argmax.iter().zip(g) {
                        dx[i as usize] += gv;
                    }
                }
                (ReduceScope::Spatial, PoolMode::Avg) => {
                    let inv = T::one() / T::of(hw as f64);
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i / hw] * inv;
                    }
                }
                (ReduceScope::Channel, PoolMode::Avg) => {
                    let inv = T::one() / T::of(c as f64);
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[(i / (c * hw)) * hw + i % hw] * inv;
                    }
                }
            }
        }
        Op::Affine { input, weight, bias } => {
            let [n, fan_in] = [nodes[input.0].value.dims()[0], nodes[input.0].value.dims()[1]];
            let m = nodes[weight.0].value.dims()[0];
            if let Some(b) = *bias {
                if let Some(db) = slot(nodes, b) {
                    for row in g.chunks(m.max(1)) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            if wants(nodes, *weight) {
                let x = nodes[input.0].value.data().to_vec();
                let dw = slot(nodes, *weight).expect("requires grad");
                T::gemm(m, n, fan_in, (g, 1, m), (&x, fan_in, 1), T::one(), (dw, fan_in, 1));
            }
            if wants(nodes, *input) {
                let wd = nodes[weight.0].value.data().to_vec();
                let dx = slot(nodes, *input).expect("requires grad");
                T::gemm(n, m, fan_in, (g, m, 1), (&wd, fan_in, 1), T::one(), (dx, fan_in, 1));
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let c = inv_std.len();
            let dims = nodes[input.0].value.dims();
            let hw: usize = dims[2..].iter().product();
            let cnt = xhat.len() / c.max(1);
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for (i, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                let ch = (i / hw) % c;
                sum_g[ch] += gv;
                sum_gx[ch] += gv * xh;
            }
            if let Some(db) = slot(nodes, *beta) {
                for (d, &s) in db.iter_mut().zip(&sum_g) {
                    *d += s;
                }
            }
            if let Some(dg) = slot(nodes, *gamma) {
                for (d, &s) in dg.iter_mut().zip(&sum_gx) {
                    *d += s;
                }
            }
            if wants(nodes, *input) {
                let gam = nodes[gamma.0].value.data().to_vec();
                let m = T::of(cnt as f64);
                let dx = slot(nodes, *input).expect("requires grad");
                for (i, d) in dx.iter_mut().enumerate() {
                    let ch = (i / hw) % c;
                    let scale = gam[ch] * inv_std[ch];
                    if *batch_stats {
                        *d += scale * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m);
                    } else {
                        *d += scale * g[i];
                    }
                }
            }
        }
        Op::Relu(input) => {
            // y > 0 exactly where x > 0
            if let Some(dx) = slot(nodes, *input) {
                for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(out.data()) {
                    if yv > T::zero() {
                        *d += gv;
                    }
                }
            }
        }
        Op::Sigmoid(input) => {
            if let Some(dx) = slot(nodes, *input) {
                for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * y * (T::one() - y);
                }
            }
        }
        Op::Dropout { input, mask } => {
            if let Some(dx) = slot(nodes, *input) {
                for ((d, &gv), &m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }
        }
        Op::Concat { a, b } => {
            let [n, ca, h, w] = nodes[a.0].value.dims4("concat").expect("checked");
            let cb = nodes[b.0].value.dims()[1];
            let hw = h * w;
            let ct = ca + cb;
            if let Some(da) = slot(nodes, *a) {
                for s in 0..n {
                    for (d, &gv) in da[s * ca * hw..][..ca * hw].iter_mut().zip(&g[s * ct * hw..][..ca * hw]) {
                        *d += gv;
                    }
                }
            }
            if let Some(db) = slot(nodes, *b) {
                for s in 0..n {
                    for (d, &gv) in db[s * cb * hw..][..cb * hw]
                        .iter_mut()
                        .zip(&g[(s * ct + ca) * hw..][..cb * hw])
                    {
                        *d += gv;
                    }
                }
            }
        }
        Op::Mul { a, b, bcast } => {
            let ad = nodes[a.0].value.dims().to_vec();
            let bidx = |i: usize| -> usize {
                match bcast {
                    Broadcast::Full => i,
                    Broadcast::Channel => i / (ad[2] * ad[3]),
                    Broadcast::Spatial => {
                        let (c, hw) = (ad[1], ad[2] * ad[3]);
                        (i / (c * hw)) * hw + i % hw
                    }
                }
            };
            let da = wants(nodes, *a).then(|| {
                let y = nodes[b.0].value.data();
                g.iter().enumerate().map(|(i, &gv)| gv * y[bidx(i)]).collect::<Vec<T>>()
            });
            let db = wants(nodes, *b).then(|| {
                let x = nodes[a.0].value.data();
                let mut acc = vec![T::zero(); nodes[b.0].value.len()];
                for (i, &gv) in g.iter().enumerate() {
                    acc[bidx(i)] += gv * x[i];
                }
                acc
            });
            if let Some(da) = da {
                add_into(slot(nodes, *a).expect("requires grad"), &da);
            }
            if let Some(db) = db {
                add_into(slot(nodes, *b).expect("requires grad"), &db);
            }
        }
        Op::Add { a, b } => {
            if let Some(da) = slot(nodes, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, *b) {
                add_into(db, g);
            }
        }
        Op::Reshape(input) => {
            if let Some(dx) = slot(nodes, *input) {
                add_into(dx, g);
            }
        }
        Op::Sum(input) => {
            if let Some(dx) = slot(nodes, *input) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Bce { probs, labels } => {
            let p = nodes[probs.0].value.data().to_vec();
            let (lo, hi) = (T::of(BCE_CLAMP), T::one() - T::of(BCE_CLAMP));
            let scale = g[0] / T::of(p.len() as f64);
            if let Some(dp) = slot(nodes, *probs) {
                for ((d, &pi), &y) in dp.iter_mut().zip(&p).zip(labels) {
                    if pi > lo && pi < hi {
                        *d += scale * (-(y / pi) + (T::one() - y) / (T::one() - pi));
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
