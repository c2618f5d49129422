//! One-dimensional laboratory for the sequential variational approximation
//! of Bayesian evidence integrals.
//!
//! A Gaussian `N(μ, σ²)` over a scalar weight absorbs the likelihood one
//! `ε`-fraction of a minibatch loss at a time. Each step contributes the
//! factor `∫ N(w; μ_t, σ_t²) e^{-ε L_b(w)} dw`; the product of factors
//! estimates the evidence and the final Gaussian approximates the posterior.
//! Models here have closed-form derivatives, so every quantity can be
//! checked against adaptive quadrature or, for the Gaussian-mean model, exact
//! formulas.
//!
//! `L_b` is the summed negative log-likelihood of the batch.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{integrate_adaptive, GaussHermite};

const HERMITE_ORDER: usize = 64;
const EVIDENCE_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Likelihood {
    /// `x ~ N(w, 1)`.
    GaussianMean,
    /// `x ∈ {0, 1}` with `P(x = 1) = 1/(1 + e^{-w})`.
    BernoulliLogit,
}

impl Likelihood {
    pub fn loss(self, x: f64, w: f64) -> f64 {
        match self {
            Likelihood::GaussianMean => 0.5 * (x - w).powi(2) + 0.5 * (2.0 * PI).ln(),
            Likelihood::BernoulliLogit => softplus(w) - x * w,
        }
    }

    pub fn d_loss(self, x: f64, w: f64) -> f64 {
        match self {
            Likelihood::GaussianMean => w - x,
            Likelihood::BernoulliLogit => sigmoid(w) - x,
        }
    }

    pub fn d2_loss(self, _x: f64, w: f64) -> f64 {
        match self {
            Likelihood::GaussianMean => 1.0,
            Likelihood::BernoulliLogit => {
                let p = sigmoid(w);
                p * (1.0 - p)
            }
        }
    }
}

fn sigmoid(w: f64) -> f64 {
    if w >= 0.0 {
        1.0 / (1.0 + (-w).exp())
    } else {
        let e = w.exp();
        e / (1.0 + e)
    }
}

fn softplus(w: f64) -> f64 {
    w.max(0.0) + (-w.abs()).exp().ln_1p()
}

/// Scalar weight with a Gaussian prior and an i.i.d. likelihood.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarModel {
    prior_mean: f64,
    prior_var: f64,
    likelihood: Likelihood,
    data: Vec<f64>,
}

impl ScalarModel {
    pub fn new(prior_mean: f64, prior_var: f64, likelihood: Likelihood, data: Vec<f64>) -> Result<Self> {
        if !(prior_var > 0.0) || !prior_var.is_finite() || !prior_mean.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "prior N({prior_mean}, {prior_var}) is degenerate"
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("data contain non-finite values".into()));
        }
        if likelihood == Likelihood::BernoulliLogit && data.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::InvalidArgument("Bernoulli data must be 0 or 1".into()));
        }
        Ok(Self {
            prior_mean,
            prior_var,
            likelihood,
            data,
        })
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn prior_var(&self) -> f64 {
        self.prior_var
    }

    pub fn likelihood(&self) -> Likelihood {
        self.likelihood
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn with_datum(&self, x: f64) -> Result<Self> {
        let mut data = self.data.clone();
        data.push(x);
        Self::new(self.prior_mean, self.prior_var, self.likelihood, data)
    }

    pub fn batch_loss(&self, batch: &[f64], w: f64) -> f64 {
        batch.iter().map(|&x| self.likelihood.loss(x, w)).sum()
    }

    fn batch_d1(&self, batch: &[f64], w: f64) -> f64 {
        batch.iter().map(|&x| self.likelihood.d_loss(x, w)).sum()
    }

    fn batch_d2(&self, batch: &[f64], w: f64) -> f64 {
        batch.iter().map(|&x| self.likelihood.d2_loss(x, w)).sum()
    }

    /// Log of prior density times likelihood, with derivatives.
    fn log_integrand(&self, w: f64) -> (f64, f64, f64) {
        let z = w - self.prior_mean;
        let v = self.prior_var;
        let f = -0.5 * z * z / v - 0.5 * (2.0 * PI * v).ln() - self.batch_loss(&self.data, w);
        let d1 = -z / v - self.batch_d1(&self.data, w);
        let d2 = -1.0 / v - self.batch_d2(&self.data, w);
        (f, d1, d2)
    }

    /// Closed-form posterior `(mean, variance)`; Gaussian-mean model only.
    pub fn conjugate_posterior(&self) -> Option<(f64, f64)> {
        (self.likelihood == Likelihood::GaussianMean).then(|| {
            let precision = 1.0 / self.prior_var + self.data.len() as f64;
            let mean = (self.prior_mean / self.prior_var + self.data.iter().sum::<f64>()) / precision;
            (mean, 1.0 / precision)
        })
    }

    /// Closed-form log evidence; Gaussian-mean model only.
    pub fn conjugate_log_evidence(&self) -> Option<f64> {
        (self.likelihood == Likelihood::GaussianMean).then(|| {
            let n = self.data.len() as f64;
            let v = self.prior_var;
            let (s1, s2) = self.data.iter().fold((0.0, 0.0), |(a, b), &x| {
                let d = x - self.prior_mean;
                (a + d, b + d * d)
            });
            -0.5 * n * (2.0 * PI).ln() - 0.5 * (1.0 + n * v).ln() - 0.5 * (s2 - v * s1 * s1 / (1.0 + n * v))
        })
    }
}

/// `ln ∫ N(w; μ0, σ0²) Π_n P(x_n | w) dw` by adaptive quadrature.
pub fn log_exact_evidence(model: &ScalarModel) -> Result<f64> {
    if model.data.is_empty() {
        return Ok(0.0);
    }
    let mode = find_mode(model)?;
    let (f_mode, _, d2) = model.log_integrand(mode);
    let local_sd = (-1.0 / d2).sqrt();
    let prior_sd = model.prior_var.sqrt();
    let lo = (mode - 40.0 * prior_sd).min(model.prior_mean - 12.0 * prior_sd);
    let hi = (mode + 40.0 * prior_sd).max(model.prior_mean + 12.0 * prior_sd);
    let mut breaks = vec![mode];
    let mut step = local_sd;
    while mode - step > lo || mode + step < hi {
        if mode - step > lo {
            breaks.push(mode - step);
        }
        if mode + step < hi {
            breaks.push(mode + step);
        }
        step *= 2.0;
    }
    breaks.push(lo);
    breaks.push(hi);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let integral = integrate_adaptive(|w| (model.log_integrand(w).0 - f_mode).exp(), &breaks, EVIDENCE_TOL)?;
    if !(integral > 0.0) {
        return Err(Error::Quadrature("evidence integral vanished".into()));
    }
    Ok(f_mode + integral.ln())
}

/// Evidence as a probability (density) value.
pub fn exact_evidence(model: &ScalarModel) -> Result<f64> {
    log_exact_evidence(model).map(f64::exp)
}

/// Maximizer of the (strictly concave) log integrand by damped Newton.
fn find_mode(model: &ScalarModel) -> Result<f64> {
    let mut w = model.prior_mean;
    let (mut f, mut d1, mut d2) = model.log_integrand(w);
    for _ in 0..200 {
        let mut step = -d1 / d2;
        let mut accepted = false;
        for _ in 0..60 {
            let (nf, nd1, nd2) = model.log_integrand(w + step);
            if nf >= f {
                w += step;
                (f, d1, d2) = (nf, nd1, nd2);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.abs() <= 1e-14 * w.abs().max(1.0) {
            return Ok(w);
        }
    }
    Err(Error::Quadrature("mode search did not converge".into()))
}

/// Density of a new observation given the model's data:
/// `I(data ∪ {x0}) / I(data)`.
pub fn predictive_ratio(model: &ScalarModel, x0: f64) -> Result<f64> {
    let num = log_exact_evidence(&model.with_datum(x0)?)?;
    let den = log_exact_evidence(model)?;
    if den == f64::NEG_INFINITY {
        return Err(Error::Quadrature("evidence of the data is zero".into()));
    }
    Ok((num - den).exp())
}

/// A point `(μ, σ)` in hyper-parameter space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub mu: f64,
    pub sigma: f64,
}

/// Prior-averaged loss derivatives with respect to the hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossStats {
    /// `∂⟨L⟩/∂μ = ⟨L'⟩`.
    pub grad_mu: f64,
    /// `∂⟨L⟩/∂σ = σ⟨L''⟩`.
    pub grad_sigma: f64,
}

/// How the width of the Gaussian is advanced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaUpdate {
    /// `1/σ'² = 1/σ² + ε⟨L''⟩`, the additive form BSGD applies to `s`.
    #[default]
    Precision,
    /// `σ' = σ - ε(σ²/2)∂⟨L⟩/∂σ`.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowStep {
    pub next: Hyper,
    /// The literal update overshot to `σ ≤ 0` and was held at `σ/2`.
    pub clamped: bool,
}

/// One gradient step in hyper-parameter space. The mean moves with the
/// pre-update variance: `Δμ = -ε σ² ∂⟨L⟩/∂μ`.
pub fn hyper_flow_step(h: Hyper, stats: LossStats, eps: f64, update: SigmaUpdate) -> Result<FlowStep> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::InvalidArgument(format!("step size {eps} outside (0, 1]")));
    }
    if !(h.sigma > 0.0) || !h.sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma {} must be positive", h.sigma)));
    }
    if !stats.grad_mu.is_finite() || !stats.grad_sigma.is_finite() {
        return Err(Error::NonFinite("hyper-parameter loss gradient".into()));
    }
    let var = h.sigma * h.sigma;
    let mu = h.mu - eps * var * stats.grad_mu;
    let (sigma, clamped) = match update {
        SigmaUpdate::Precision => {
            let precision = 1.0 / var + eps * stats.grad_sigma / h.sigma;
            if !(precision > 0.0) {
                (0.5 * h.sigma, true)
            } else {
                (precision.sqrt().recip(), false)
            }
        }
        SigmaUpdate::Literal => {
            let s = h.sigma - eps * 0.5 * var * stats.grad_sigma;
            if s > 0.0 {
                (s, false)
            } else {
                (0.5 * h.sigma, true)
            }
        }
    };
    Ok(FlowStep {
        next: Hyper { mu, sigma },
        clamped,
    })
}

/// Source of the loss derivatives fed to each flow step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowMode {
    /// Prior averages `⟨L'⟩`, `⟨L''⟩` by Gauss-Hermite quadrature.
    Exact,
    /// One weight sample per step; curvature from `(L')²`.
    StochasticGradSquared,
    /// One weight sample per step; curvature from `L''`.
    StochasticSecondDerivative,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowConfig {
    pub n_epochs: usize,
    /// `None` processes the full dataset in every step.
    pub batch_size: Option<usize>,
    pub mode: FlowMode,
    pub sigma_update: SigmaUpdate,
    pub seed: u64,
}

impl FlowConfig {
    pub fn exact(n_epochs: usize, batch_size: Option<usize>) -> Self {
        Self {
            n_epochs,
            batch_size,
            mode: FlowMode::Exact,
            sigma_update: SigmaUpdate::Precision,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrace {
    /// `T + 1` points, starting at the prior.
    pub points: Vec<Hyper>,
    /// `ln` of each per-step factor.
    pub log_factors: Vec<f64>,
    pub log_evidence: f64,
    pub sigma_clamps: usize,
}

impl FlowTrace {
    pub fn steps(&self) -> usize {
        self.log_factors.len()
    }

    pub fn last(&self) -> Hyper {
        *self.points.last().expect("trace starts at the prior")
    }
}

/// Run `T = N_e · N_b` flow steps with `ε = 1/N_e`, visiting batches in data
/// order every epoch.
pub fn run_flow(model: &ScalarModel, cfg: &FlowConfig) -> Result<FlowTrace> {
    if cfg.n_epochs == 0 {
        return Err(Error::InvalidArgument("epoch count must be at least 1".into()));
    }
    let n = model.data.len();
    let b = cfg.batch_size.unwrap_or(n.max(1));
    if b == 0 || (n > 0 && !n.is_multiple_of(b)) {
        return Err(Error::InvalidArgument(format!(
            "batch size {b} must divide the dataset size {n}"
        )));
    }
    let n_batches = n / b;
    let eps = 1.0 / cfg.n_epochs as f64;
    let gh = GaussHermite::new(HERMITE_ORDER)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut h = Hyper {
        mu: model.prior_mean,
        sigma: model.prior_var.sqrt(),
    };
    let mut trace = FlowTrace {
        points: vec![h],
        log_factors: Vec::with_capacity(cfg.n_epochs * n_batches),
        log_evidence: 0.0,
        sigma_clamps: 0,
    };
    for _ in 0..cfg.n_epochs {
        for batch in model.data.chunks(b) {
            let log_factor = gh.log_expect_exp(h.mu, h.sigma, |w| -eps * model.batch_loss(batch, w));
            let stats = match cfg.mode {
                FlowMode::Exact => LossStats {
                    grad_mu: gh.expect(h.mu, h.sigma, |w| model.batch_d1(batch, w)),
                    grad_sigma: h.sigma * gh.expect(h.mu, h.sigma, |w| model.batch_d2(batch, w)),
                },
                FlowMode::StochasticGradSquared | FlowMode::StochasticSecondDerivative => {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let w = h.mu + h.sigma * z;
                    let g = model.batch_d1(batch, w);
                    let curv = if cfg.mode == FlowMode::StochasticGradSquared {
                        g * g
                    } else {
                        model.batch_d2(batch, w)
                    };
                    LossStats {
                        grad_mu: g,
                        grad_sigma: h.sigma * curv,
                    }
                }
            };
            let step = hyper_flow_step(h, stats, eps, cfg.sigma_update)?;
            h = step.next;
            trace.sigma_clamps += usize::from(step.clamped);
            trace.log_factors.push(log_factor);
            trace.log_evidence += log_factor;
            trace.points.push(h);
        }
    }
    if !trace.log_evidence.is_finite() {
        return Err(Error::NonFinite("flow log-evidence".into()));
    }
    Ok(trace)
}

/// One cell of the error-scaling table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub eps: f64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub log_err: f64,
    pub sigma_clamps: usize,
}

/// Synthetic data for the error-scaling study: `N(0.5, 1)` draws for the
/// Gaussian-mean model, `Bernoulli(0.7)` for the logistic one.
pub fn synthetic_data(family: Likelihood, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| match family {
            Likelihood::GaussianMean => {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.5 + z
            }
            Likelihood::BernoulliLogit => f64::from(u8::from(rng.random::<f64>() < 0.7)),
        })
        .collect()
}

/// `|ln I_flow - ln I_exact|` for every `(ε, N)` pair, full-batch exact-mode
/// flows under a standard normal prior.
pub fn error_scaling_report(
    family: Likelihood,
    eps_list: &[f64],
    n_list: &[usize],
    seed: u64,
) -> Result<Vec<ScalingRow>> {
    if eps_list.is_empty() || n_list.is_empty() {
        return Err(Error::InvalidArgument("error-scaling grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(eps_list.len() * n_list.len());
    for &n in n_list {
        let model = ScalarModel::new(0.0, 1.0, family, synthetic_data(family, n, seed))?;
        let exact = log_exact_evidence(&model)?;
        for &eps in eps_list {
            let n_epochs = epochs_for(eps)?;
            let trace = run_flow(
                &model,
                &FlowConfig {
                    seed,
                    ..FlowConfig::exact(n_epochs, None)
                },
            )?;
            rows.push(ScalingRow {
                eps,
                n,
                t: trace.steps(),
                log_err: (trace.log_evidence - exact).abs(),
                sigma_clamps: trace.sigma_clamps,
            });
        }
    }
    Ok(rows)
}

/// `N_e = 1/ε`, which must be a whole number.
pub fn epochs_for(eps: f64) -> Result<usize> {
    let n = (1.0 / eps).round();
    if !(eps > 0.0 && eps <= 1.0) || ((1.0 / eps) - n).abs() > 1e-9 * n {
        return Err(Error::InvalidArgument(format!(
            "step size {eps} is not 1/N_e for an integer N_e"
        )));
    }
    Ok(n as usize)
}

pub fn write_scaling_csv<W: std::io::Write>(rows: &[ScalingRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["eps", "N", "T", "log_err", "sigma_clamps"])?;
    for r in rows {
        w.write_record([
            format!("{:.9e}", r.eps),
            r.n.to_string(),
            r.t.to_string(),
            format!("{:.9e}", r.log_err),
            r.sigma_clamps.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))
}
