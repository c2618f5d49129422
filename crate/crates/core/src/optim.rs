//! Bayesian SGD over the Gaussian hyper-parameter state, the SGD and Adam
//! baselines, and second-derivative diagnostics for the squared-gradient
//! curvature proxy.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::prior::GaussianParamState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Loss, gradients and optionally exact curvature at one weight sample.
#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    /// Minibatch loss normalized per sample.
    pub loss: T,
    pub grads: Vec<Tensor<T>>,
    /// Exact `∂²l/∂w_i²`; when `None` the optimizer substitutes `(∂l/∂w_i)²`.
    pub curvature: Option<Vec<Tensor<T>>>,
}

/// A differentiable per-sample-normalized minibatch loss.
pub trait Objective<T: Scalar> {
    fn evaluate(&mut self, weights: &[Tensor<T>], rng: &mut dyn RngCore) -> Result<Evaluation<T>>;
}

/// What a single optimizer step reports back.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport<T> {
    pub loss: T,
    /// Coordinates whose `s` failed to increase or stay equal. Always zero
    /// unless the curvature source can go negative.
    pub s_decreases: usize,
}

fn ensure_finite<T: Scalar>(grads: &[Tensor<T>], what: &str) -> Result<()> {
    if grads.iter().all(Tensor::all_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn ensure_aligned<T: Scalar>(params: &[Tensor<T>], grads: &[Tensor<T>], op: &'static str) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            op,
            format!("{} parameters, {} gradients", params.len(), grads.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        p.expect_same_shape(g, op)?;
    }
    Ok(())
}

/// Bayesian stochastic gradient descent.
///
/// One step: draw `w ~ N(μ, 1/sqrt(s b))`, evaluate the minibatch loss and its
/// gradient, then `μ ← μ - ε·grad/s` (with the pre-update `s`) and
/// `s ← s + ε·grad²`. The learning rate is `ε = 1/N_e` and cannot be set
/// independently.
#[derive(Clone, Debug)]
pub struct Bsgd<T> {
    n_epochs: usize,
    epsilon: T,
    grad_samples: usize,
}

impl<T: Scalar> Bsgd<T> {
    pub fn new(n_epochs: usize) -> Result<Self> {
        if n_epochs == 0 {
            return Err(Error::InvalidArgument("epoch count must be at least 1".into()));
        }
        Ok(Self {
            n_epochs,
            epsilon: T::of(1.0 / n_epochs as f64),
            grad_samples: 1,
        })
    }

    /// Average gradients over `k` weight samples per step.
    pub fn with_grad_samples(mut self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument(
                "need at least one weight sample per step".into(),
            ));
        }
        self.grad_samples = k;
        Ok(self)
    }

    pub fn epsilon(&self) -> T {
        self.epsilon
    }

    pub fn n_epochs(&self) -> usize {
        self.n_epochs
    }

    pub fn grad_samples(&self) -> usize {
        self.grad_samples
    }

    /// Total step count `N_e · N_b` for `batches_per_epoch` minibatches.
    pub fn total_steps(&self, batches_per_epoch: usize) -> usize {
        self.n_epochs * batches_per_epoch
    }

    /// Apply the mean and `s` updates for given gradients.
    pub fn apply(
        &self,
        state: &mut GaussianParamState<T>,
        grads: &[Tensor<T>],
        curvature: Option<&[Tensor<T>]>,
    ) -> Result<usize> {
        let means = state.means();
        ensure_aligned(&means, grads, "bsgd")?;
        ensure_finite(grads, "bsgd gradient")?;
        if let Some(c) = curvature {
            ensure_aligned(&means, c, "bsgd curvature")?;
            ensure_finite(c, "bsgd curvature")?;
        }
        if state.n_epochs() != self.n_epochs {
            return Err(Error::InvalidArgument(format!(
                "optimizer built for {} epochs, state for {}",
                self.n_epochs,
                state.n_epochs()
            )));
        }
        let eps = self.epsilon;
        let mut decreases = 0;
        for (i, p) in state.params_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let curv = curvature.map(|c| c[i].data());
            let (mu, s) = (p.mu.data_mut(), p.s.data_mut());
            for j in 0..g.len() {
                let old_s = s[j];
                mu[j] -= eps * g[j] / old_s;
                let c = curv.map_or(g[j] * g[j], |c| c[j]);
                let new_s = old_s + eps * c;
                if !(new_s > T::zero()) || !new_s.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "scaled inverse variance of {} would become {new_s}",
                        p.name
                    )));
                }
                if new_s < old_s {
                    decreases += 1;
                }
                s[j] = new_s;
            }
        }
        Ok(decreases)
    }

    /// One full step: sample weights, evaluate, update.
    pub fn step(
        &self,
        state: &mut GaussianParamState<T>,
        objective: &mut dyn Objective<T>,
        rng: &mut dyn RngCore,
    ) -> Result<StepReport<T>> {
        let mut loss = T::zero();
        let mut grad_sum: Option<Vec<Tensor<T>>> = None;
        let mut curv_sum: Option<Vec<Tensor<T>>> = None;
        for _ in 0..self.grad_samples {
            let w = state.sample_weights(rng);
            let eval = objective.evaluate(&w, rng)?;
            if !eval.loss.is_finite() {
                return Err(Error::NonFinite("bsgd minibatch loss".into()));
            }
            ensure_finite(&eval.grads, "bsgd gradient")?;
            loss += eval.loss;
            let curv = match eval.curvature {
                Some(c) => c,
                None => eval.grads.iter().map(|g| g.map(|v| v * v)).collect(),
            };
            accumulate(&mut grad_sum, eval.grads);
            accumulate(&mut curv_sum, curv);
        }
        let k = T::of(self.grad_samples as f64);
        let grads: Vec<_> = grad_sum.unwrap_or_default().iter().map(|g| g.map(|v| v / k)).collect();
        let curv: Vec<_> = curv_sum.unwrap_or_default().iter().map(|c| c.map(|v| v / k)).collect();
        let s_decreases = self.apply(state, &grads, Some(&curv))?;
        Ok(StepReport {
            loss: loss / k,
            s_decreases,
        })
    }
}

fn accumulate<T: Scalar>(acc: &mut Option<Vec<Tensor<T>>>, add: Vec<Tensor<T>>) {
    match acc {
        None => *acc = Some(add),
        Some(a) => {
            for (x, y) in a.iter_mut().zip(add) {
                for (u, v) in x.data_mut().iter_mut().zip(y.data()) {
                    *u += *v;
                }
            }
        }
    }
}

/// Plain stochastic gradient descent with a constant learning rate.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    lr: T,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T) -> Result<Self> {
        if !(lr > T::zero()) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
        }
        Ok(Self { lr })
    }

    pub fn step(&self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        ensure_aligned(params, grads, "sgd")?;
        ensure_finite(grads, "sgd gradient")?;
        for (p, g) in params.iter_mut().zip(grads) {
            for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= self.lr * d;
            }
        }
        Ok(())
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    t: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    /// Defaults: `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
    pub fn new(lr: T) -> Result<Self> {
        Self::with_params(lr, T::of(0.9), T::of(0.999), T::of(1e-8))
    }

    pub fn with_params(lr: T, beta1: T, beta2: T, eps: T) -> Result<Self> {
        if !(lr > T::zero()) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
        }
        let unit = |b: T| b >= T::zero() && b < T::one();
        if !unit(beta1) || !unit(beta2) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        ensure_aligned(params, grads, "adam")?;
        ensure_finite(grads, "adam gradient")?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        ensure_aligned(&self.m, grads, "adam state")?;
        self.t += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.t);
        let bc2 = one - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                md[j] = self.beta1 * md[j] + (one - self.beta1) * gj;
                vd[j] = self.beta2 * vd[j] + (one - self.beta2) * gj * gj;
                let m_hat = md[j] / bc1;
                let v_hat = vd[j] / bc2;
                pd[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Central second difference `(f(w+h e_i) - 2f(w) + f(w-h e_i))/h²` per coordinate.
pub fn hessian_diag_fd<T, F>(mut loss: F, w: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let center = loss(w)?;
    let mut probe = w.clone();
    let mut out = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = loss(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = loss(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - center - center + down) / (h * h));
    }
    Tensor::new(w.shape().to_vec(), out)
}

/// A model that can draw data from its own predictive distribution and
/// score it with a negative log-likelihood.
pub trait SelfSampling {
    type Sample;
    fn sample(&self, params: &[f64], rng: &mut dyn RngCore) -> Self::Sample;
    fn loss(&self, params: &[f64], x: &Self::Sample) -> f64;
    fn grad(&self, params: &[f64], x: &Self::Sample) -> Vec<f64>;
}

/// Categorical distribution over `K` classes parametrized by logits.
///
/// With `label_shift > 0` the observed label is `(y + shift) mod K`, which
/// breaks the match between model and data.
#[derive(Clone, Copy, Debug, Default)]
pub struct CategoricalLogits {
    pub label_shift: usize,
}

impl CategoricalLogits {
    fn probs(params: &[f64]) -> Vec<f64> {
        crate::autodiff::log_softmax_rows(params, params.len())
            .into_iter()
            .map(f64::exp)
            .collect()
    }
}

impl SelfSampling for CategoricalLogits {
    type Sample = usize;

    fn sample(&self, params: &[f64], rng: &mut dyn RngCore) -> usize {
        let p = Self::probs(params);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut y = p.len() - 1;
        for (k, pk) in p.iter().enumerate() {
            acc += pk;
            if u < acc {
                y = k;
                break;
            }
        }
        (y + self.label_shift) % p.len()
    }

    fn loss(&self, params: &[f64], y: &usize) -> f64 {
        -crate::autodiff::log_softmax_rows(params, params.len())[*y]
    }

    fn grad(&self, params: &[f64], y: &usize) -> Vec<f64> {
        let mut g = Self::probs(params);
        g[*y] -= 1.0;
        g
    }
}

/// Per-coordinate Monte Carlo comparison of `⟨(∂l/∂w)²⟩` and `⟨∂²l/∂w²⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherReport {
    pub mean_grad_sq: Vec<f64>,
    pub mean_hessian_diag: Vec<f64>,
    /// `mean_grad_sq - mean_hessian_diag`.
    pub discrepancy: Vec<f64>,
    /// Standard error of the per-sample difference.
    pub std_err: Vec<f64>,
    /// `|discrepancy| / std_err` (zero when both vanish).
    pub gap_in_std_errs: Vec<f64>,
}

/// Draw `n_samples` data points from the model itself and average the
/// squared gradient and finite-difference Hessian diagonal of the loss.
pub fn fisher_identity_check<M: SelfSampling>(
    model: &M,
    params: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<FisherReport> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let d = params.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(vec![d], params.to_vec())?;
    let (mut sum_g, mut sum_h, mut sum_d, mut sum_d2) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for _ in 0..n_samples {
        let x = model.sample(params, &mut rng);
        let g = model.grad(params, &x);
        let h = hessian_diag_fd(|p: &Tensor<f64>| Ok(model.loss(p.data(), &x)), &w, 1e-4)?;
        for i in 0..d {
            let g2 = g[i] * g[i];
            let diff = g2 - h.data()[i];
            sum_g[i] += g2;
            sum_h[i] += h.data()[i];
            sum_d[i] += diff;
            sum_d2[i] += diff * diff;
        }
    }
    let n = n_samples as f64;
    let mut report = FisherReport {
        mean_grad_sq: Vec::with_capacity(d),
        mean_hessian_diag: Vec::with_capacity(d),
        discrepancy: Vec::with_capacity(d),
        std_err: Vec::with_capacity(d),
        gap_in_std_errs: Vec::with_capacity(d),
    };
    for i in 0..d {
        let mean_d = sum_d[i] / n;
        let var_d = ((sum_d2[i] - n * mean_d * mean_d) / (n - 1.0)).max(0.0);
        let se = (var_d / n).sqrt();
        report.mean_grad_sq.push(sum_g[i] / n);
        report.mean_hessian_diag.push(sum_h[i] / n);
        report.discrepancy.push(mean_d);
        report.std_err.push(se);
        report.gap_in_std_errs.push(if se > 0.0 {
            mean_d.abs() / se
        } else if mean_d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        });
    }
    Ok(report)
}
