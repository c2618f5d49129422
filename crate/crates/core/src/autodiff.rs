//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends one node to the [`Tape`]; inputs always precede
//! their consumers, so a single reverse sweep over the node list visits each
//! node exactly once. Operation outputs are checked for finiteness as they are
//! recorded.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic layers (dropout) are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        padding: usize,
    },
    AvgPool(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Leaf the gradient is tracked for.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant (inputs, fixed weights).
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        value.check_finite("leaf")?;
        Ok(self.push_raw(value, Op::Leaf, requires_grad))
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Collapse every dimension after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        let rows = shape[0];
        let cols = shape[1..].iter().product();
        self.reshape(a, vec![rows, cols])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, Op::Relu(x), &[x])
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push("dropout", out, Op::Dropout { x, mask }, &[x])
    }

    /// `x[b×in] · w[in×out] + bias[out]`
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws, bs) = (xv.shape(), wv.shape(), bv.shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::shape("dense", format!("x {xs:?}, w {ws:?}, bias {bs:?}")));
        }
        let (batch, n_in, n_out) = (xs[0], ws[0], ws[1]);
        let mut out = vec![T::zero(); batch * n_out];
        for row in out.chunks_mut(n_out) {
            row.copy_from_slice(bv.data());
        }
        matmul_acc(&mut out, xv.data(), wv.data(), batch, n_in, n_out);
        let out = Tensor::new(vec![batch, n_out], out)?;
        self.push("dense", out, Op::Dense { x, w, b }, &[x, w, b])
    }

    /// 2-D cross-correlation (no kernel flip) with zero padding and a
    /// per-output-channel bias. The kernel must be square with odd size.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(
            self.value(x).shape(),
            self.value(k).shape(),
            self.value(b).shape(),
            padding,
        )?;
        let (xv, kv, bv) = (self.value(x), self.value(k), self.value(b));
        let mut out = vec![T::zero(); geom.batch * geom.c_out * geom.out_area()];
        let mut cols = vec![T::zero(); geom.col_rows() * geom.out_area()];
        for n in 0..geom.batch {
            geom.im2col(&xv.data()[n * geom.in_len()..(n + 1) * geom.in_len()], &mut cols);
            let o = &mut out[n * geom.out_len()..(n + 1) * geom.out_len()];
            for (c, row) in o.chunks_mut(geom.out_area()).enumerate() {
                row.fill(bv.data()[c]);
            }
            matmul_acc(o, kv.data(), &cols, geom.c_out, geom.col_rows(), geom.out_area());
        }
        let out = Tensor::new(vec![geom.batch, geom.c_out, geom.out_h, geom.out_w], out)?;
        self.push("conv2d", out, Op::Conv2d { x, k, b, padding }, &[x, k, b])
    }

    /// Per-channel spatial mean: `[b×c×h×w] → [b×c]`.
    pub fn adaptive_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::shape(
                "adaptive_avg_pool",
                format!("expected 4-D input, got {s:?}"),
            ));
        }
        let area = s[2] * s[3];
        let inv = T::of(1.0 / area as f64);
        let data = xv
            .data()
            .chunks(area)
            .map(|cell| cell.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(vec![s[0], s[1]], data)?;
        self.push("adaptive_avg_pool", out, Op::AvgPool(x), &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, in nats.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let s = lv.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let log_probs = log_softmax_rows(lv.data(), k);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -log_probs[i * k + y])
            .sum::<T>()
            / T::of(labels.len() as f64);
        let probs = log_probs.iter().map(|lp| lp.exp()).collect();
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if !self.value(output).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got shape {:?}", self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::new(self.value(output).shape().to_vec(), vec![T::one()])?);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient at node {i}")));
            }
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.reshape(self.value(*a).shape().to_vec())?);
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                self.accumulate(grads, *x, gx);
            }
            Op::Dropout { x, mask } => {
                let mut gx = g.clone();
                for (v, &m) in gx.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, n_in, n_out) = (xv.shape()[0], wv.shape()[0], wv.shape()[1]);
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![T::zero(); batch * n_in];
                    matmul_nt_acc(&mut gx, g.data(), wv.data(), batch, n_out, n_in);
                    self.accumulate(grads, *x, Tensor::new(vec![batch, n_in], gx)?);
                }
                if self.nodes[w.0].requires_grad {
                    let mut gw = vec![T::zero(); n_in * n_out];
                    matmul_tn_acc(&mut gw, xv.data(), g.data(), n_in, batch, n_out);
                    self.accumulate(grads, *w, Tensor::new(vec![n_in, n_out], gw)?);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![T::zero(); n_out];
                    for row in g.data().chunks(n_out) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![n_out], gb)?);
                }
            }
            Op::Conv2d { x, k, b, padding } => {
                let geom = ConvGeom::new(
                    self.value(*x).shape(),
                    self.value(*k).shape(),
                    self.value(*b).shape(),
                    *padding,
                )?;
                let (xv, kv) = (self.value(*x), self.value(*k));
                let need_x = self.nodes[x.0].requires_grad;
                let need_k = self.nodes[k.0].requires_grad;
                let mut gx = vec![T::zero(); if need_x { xv.len() } else { 0 }];
                let mut gk = vec![T::zero(); kv.len()];
                let mut gb = vec![T::zero(); geom.c_out];
                let mut cols = vec![T::zero(); geom.col_rows() * geom.out_area()];
                let mut gcols = vec![T::zero(); cols.len()];
                for n in 0..geom.batch {
                    let gn = &g.data()[n * geom.out_len()..(n + 1) * geom.out_len()];
                    for (c, row) in gn.chunks(geom.out_area()).enumerate() {
                        gb[c] += row.iter().copied().sum::<T>();
                    }
                    if need_k {
                        geom.im2col(&xv.data()[n * geom.in_len()..(n + 1) * geom.in_len()], &mut cols);
                        matmul_nt_acc(&mut gk, gn, &cols, geom.c_out, geom.out_area(), geom.col_rows());
                    }
                    if need_x {
                        gcols.fill(T::zero());
                        matmul_tn_acc(&mut gcols, kv.data(), gn, geom.col_rows(), geom.c_out, geom.out_area());
                        geom.col2im_acc(&gcols, &mut gx[n * geom.in_len()..(n + 1) * geom.in_len()]);
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                }
                if need_k {
                    self.accumulate(grads, *k, Tensor::new(kv.shape().to_vec(), gk)?);
                }
                self.accumulate(grads, *b, Tensor::new(vec![geom.c_out], gb)?);
            }
            Op::AvgPool(x) => {
                let s = self.value(*x).shape();
                let area = s[2] * s[3];
                let inv = T::of(1.0 / area as f64);
                let mut gx = Vec::with_capacity(self.value(*x).len());
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv * inv, area));
                }
                self.accumulate(grads, *x, Tensor::new(s.to_vec(), gx)?);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).shape()[1];
                let scale = g.data()[0] / T::of(labels.len() as f64);
                let mut gl = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    gl[i * k + y] -= T::one();
                }
                for v in gl.iter_mut() {
                    *v *= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(self.value(*logits).shape().to_vec(), gl)?);
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` does not influence the output or is a constant.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for `vars` in order, with zeros for any that received none.
    pub fn collect(mut self, vars: &[Var], tape: &Tape<T>) -> Vec<Tensor<T>> {
        vars.iter()
            .map(|v| {
                self.grads[v.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape()))
            })
            .collect()
    }
}

/// Row-wise log-softmax of a `[rows×k]` buffer, stabilized by the row maximum.
pub fn log_softmax_rows<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let log_z = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        out.extend(row.iter().map(|&v| v - log_z));
    }
    out
}

/// Central finite-difference gradient of `loss` at `w`, one coordinate at a time.
pub fn finite_diff_grad<T, F>(mut loss: F, w: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if h <= T::zero() {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut probe = w.clone();
    let mut grad = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = loss(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = loss(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (h + h));
    }
    Tensor::new(w.shape().to_vec(), grad)
}

struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ks: &[usize], bs: &[usize], pad: usize) -> Result<Self> {
        if xs.len() != 4 || ks.len() != 4 || bs.len() != 1 {
            return Err(Error::shape("conv2d", format!("x {xs:?}, kernel {ks:?}, bias {bs:?}")));
        }
        if ks[1] != xs[1] || ks[0] != bs[0] || ks[2] != ks[3] {
            return Err(Error::shape("conv2d", format!("x {xs:?}, kernel {ks:?}, bias {bs:?}")));
        }
        let k = ks[2];
        if k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("conv2d kernel size {k} must be odd")));
        }
        let (h, w) = (xs[2], xs[3]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{w}"),
            ));
        }
        Ok(Self {
            batch: xs[0],
            c_in: xs[1],
            h,
            w,
            c_out: ks[0],
            k,
            pad,
            out_h: h + 2 * pad - k + 1,
            out_w: w + 2 * pad - k + 1,
        })
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    fn out_len(&self) -> usize {
        self.c_out * self.out_area()
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Input pixel index read by column entry `(c, ki, kj)` at output `(oy, ox)`.
    #[inline]
    fn source(&self, c: usize, ki: usize, kj: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy + ki).checked_sub(self.pad)?;
        let x = (ox + kj).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then(|| (c * self.h + y) * self.w + x)
    }

    fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let area = self.out_area();
        for c in 0..self.c_in {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = ((c * self.k + ki) * self.k + kj) * area;
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            cols[row + oy * self.out_w + ox] = match self.source(c, ki, kj, oy, ox) {
                                Some(idx) => image[idx],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_acc<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let area = self.out_area();
        for c in 0..self.c_in {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = ((c * self.k + ki) * self.k + kj) * area;
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some(idx) = self.source(c, ki, kj, oy, ox) {
                                image[idx] += cols[row + oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
