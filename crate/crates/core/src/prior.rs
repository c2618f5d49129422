//! Mean-field Gaussian hyper-parameter state over network weights.
//!
//! Each trainable coordinate `i` carries a mean `μ_i` and a scaled inverse
//! variance `s_i = 1/(σ_i² b)`, with `b` the minibatch size fixed for the run.
//! `s` is stored rather than `σ` because BSGD updates it additively.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Shape and initialization metadata for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Number of inputs feeding each output unit; sets the init scale.
    pub fan_in: usize,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParam<T> {
    pub name: String,
    pub mu: Tensor<T>,
    pub s: Tensor<T>,
}

/// Per-weight means and scaled inverse variances for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParamState<T> {
    params: Vec<GaussianParam<T>>,
    batch_size: usize,
    n_epochs: usize,
}

impl<T: Scalar> GaussianParamState<T> {
    /// `s ← 1` everywhere; weight means drawn from `N(0, 2/fan_in)`, bias means zero.
    pub fn init(specs: &[ParamSpec], batch_size: usize, n_epochs: usize, seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidArgument("no parameter shapes given".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(specs.len());
        for spec in specs {
            if spec.shape.is_empty() || spec.numel() == 0 {
                return Err(Error::InvalidArgument(format!(
                    "parameter {} has zero-sized shape {:?}",
                    spec.name, spec.shape
                )));
            }
            let mu = match spec.kind {
                ParamKind::Bias => Tensor::zeros(&spec.shape),
                ParamKind::Weight => {
                    if spec.fan_in == 0 {
                        return Err(Error::InvalidArgument(format!(
                            "parameter {} has zero fan-in",
                            spec.name
                        )));
                    }
                    let std = (2.0 / spec.fan_in as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        T::of(std * z)
                    })
                }
            };
            params.push(GaussianParam {
                name: spec.name.clone(),
                s: Tensor::ones(&spec.shape),
                mu,
            });
        }
        Self::from_params(params, batch_size, n_epochs)
    }

    pub fn from_params(params: Vec<GaussianParam<T>>, batch_size: usize, n_epochs: usize) -> Result<Self> {
        if batch_size == 0 || n_epochs == 0 {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch_size} and epoch count {n_epochs} must be positive"
            )));
        }
        for p in &params {
            p.mu.expect_same_shape(&p.s, "gaussian state")?;
            if p.s.data().iter().any(|&s| !(s > T::zero()) || !s.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "parameter {} has a non-positive scaled inverse variance",
                    p.name
                )));
            }
        }
        Ok(Self {
            params,
            batch_size,
            n_epochs,
        })
    }

    pub fn params(&self) -> &[GaussianParam<T>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [GaussianParam<T>] {
        &mut self.params
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn n_epochs(&self) -> usize {
        self.n_epochs
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.mu.len()).sum()
    }

    pub fn means(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.mu.clone()).collect()
    }

    /// `σ_i = 1/sqrt(s_i b)` for parameter tensor `index`.
    pub fn sigma(&self, index: usize) -> Tensor<T> {
        let b = T::of(self.batch_size as f64);
        self.params[index].s.map(|s| (s * b).sqrt().recip())
    }

    pub fn min_s(&self) -> T {
        self.params
            .iter()
            .flat_map(|p| p.s.data().iter().copied())
            .fold(T::infinity(), T::min)
    }

    pub fn max_s(&self) -> T {
        self.params
            .iter()
            .flat_map(|p| p.s.data().iter().copied())
            .fold(T::neg_infinity(), T::max)
    }

    /// Independent draws `w_i ~ N(μ_i, 1/sqrt(s_i b))`.
    pub fn sample_weights(&self, rng: &mut dyn RngCore) -> Vec<Tensor<T>> {
        let b = self.batch_size as f64;
        self.params
            .iter()
            .map(|p| {
                let data =
                    p.mu.data()
                        .iter()
                        .zip(p.s.data())
                        .map(|(&mu, &s)| {
                            let z: f64 = StandardNormal.sample(rng);
                            mu + T::of(z / (s.as_f64() * b).sqrt())
                        })
                        .collect();
                Tensor::new(p.mu.shape().to_vec(), data).expect("shape copied from mean")
            })
            .collect()
    }

    /// `log P(w | μ, σ)` summed over every coordinate.
    pub fn log_density(&self, weights: &[Tensor<T>]) -> Result<T> {
        if weights.len() != self.params.len() {
            return Err(Error::shape(
                "log_density",
                format!("{} weight tensors for {} parameters", weights.len(), self.params.len()),
            ));
        }
        let mut total = T::zero();
        for (i, (p, w)) in self.params.iter().zip(weights).enumerate() {
            p.mu.expect_same_shape(w, "log_density")?;
            total += log_prior_density(p.mu.data(), self.sigma(i).data(), w.data())?;
        }
        Ok(total)
    }
}

/// `Σ_i [ -(w_i-μ_i)²/(2σ_i²) - ½ ln(2πσ_i²) ]`
pub fn log_prior_density<T: Scalar>(mu: &[T], sigma: &[T], w: &[T]) -> Result<T> {
    if mu.len() != sigma.len() || mu.len() != w.len() {
        return Err(Error::shape(
            "log_prior_density",
            format!("lengths {} / {} / {}", mu.len(), sigma.len(), w.len()),
        ));
    }
    let half = T::of(0.5);
    let two_pi = T::of(2.0 * std::f64::consts::PI);
    let mut total = T::zero();
    for ((&m, &sd), &x) in mu.iter().zip(sigma).zip(w) {
        if !(sd > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "standard deviation {sd} is not positive"
            )));
        }
        let var = sd * sd;
        let d = x - m;
        total -= d * d / (var + var) + half * (two_pi * var).ln();
    }
    Ok(total)
}

/// `KL(N(μ,σ²) ‖ N(μ_ref,σ_ref²))` summed over coordinates, from variances.
pub fn kl_diag_gaussian<T: Scalar>(mu: &[T], var: &[T], mu_ref: &[T], var_ref: &[T]) -> Result<T> {
    let n = mu.len();
    if var.len() != n || mu_ref.len() != n || var_ref.len() != n {
        return Err(Error::shape("kl", "mismatched coordinate counts"));
    }
    let half = T::of(0.5);
    let mut total = T::zero();
    for i in 0..n {
        if !(var[i] > T::zero()) || !(var_ref[i] > T::zero()) {
            return Err(Error::InvalidArgument("variances must be positive".into()));
        }
        let d = mu[i] - mu_ref[i];
        total += half * (var_ref[i] / var[i]).ln() + (var[i] + d * d) / (var_ref[i] + var_ref[i]) - half;
    }
    Ok(total)
}

/// KL divergence from `state`'s Gaussians to `reference`'s, in nats.
pub fn kl_to_reference<T: Scalar>(state: &GaussianParamState<T>, reference: &GaussianParamState<T>) -> Result<T> {
    if state.params.len() != reference.params.len() {
        return Err(Error::shape("kl_to_reference", "parameter counts differ"));
    }
    let mut total = T::zero();
    for i in 0..state.params.len() {
        let (p, r) = (&state.params[i], &reference.params[i]);
        p.mu.expect_same_shape(&r.mu, "kl_to_reference")?;
        let var = state.sigma(i).map(|s| s * s);
        let var_ref = reference.sigma(i).map(|s| s * s);
        total += kl_diag_gaussian(p.mu.data(), var.data(), r.mu.data(), var_ref.data())?;
    }
    Ok(total)
}

/// Score of a 1-D Gaussian with respect to its mean, `(w-μ)/σ²`.
pub fn score_mu(w: f64, mu: f64, sigma: f64) -> f64 {
    (w - mu) / (sigma * sigma)
}

/// Score of a 1-D Gaussian with respect to its standard deviation,
/// `-1/σ + (w-μ)²/σ³`.
pub fn score_sigma(w: f64, mu: f64, sigma: f64) -> f64 {
    let d = w - mu;
    -1.0 / sigma + d * d / (sigma * sigma * sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: &str, shape: &[usize], fan_in: usize, kind: ParamKind) -> ParamSpec {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            fan_in,
            kind,
        }
    }

    fn one_coord(mu: f64, s: f64, b: usize) -> GaussianParamState<f64> {
        GaussianParamState::from_params(
            vec![GaussianParam {
                name: "w".into(),
                mu: Tensor::scalar(mu),
                s: Tensor::scalar(s),
            }],
            b,
            1,
        )
        .unwrap()
    }

    #[test]
    fn init_sets_unit_s_and_seeded_means() {
        let specs = [
            spec("w", &[100, 100], 100, ParamKind::Weight),
            spec("b", &[100], 100, ParamKind::Bias),
        ];
        let a = GaussianParamState::<f64>::init(&specs, 60, 10, 3).unwrap();
        let b = GaussianParamState::<f64>::init(&specs, 60, 10, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.min_s(), 1.0);
        assert_eq!(a.max_s(), 1.0);
        assert!(a.params()[1].mu.data().iter().all(|&v| v == 0.0));

        let w = a.params()[0].mu.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = (2.0f64 / 100.0).sqrt();
        assert!((std / target - 1.0).abs() < 0.1, "std {std} vs {target}");
    }

    #[test]
    fn init_rejects_zero_sized_shapes() {
        let specs = [spec("w", &[0, 3], 1, ParamKind::Weight)];
        assert!(GaussianParamState::<f64>::init(&specs, 1, 1, 0).is_err());
        assert!(GaussianParamState::<f64>::init(&[], 1, 1, 0).is_err());
    }

    #[test]
    fn sigma_from_scaled_inverse_variance() {
        assert_eq!(one_coord(0.0, 1.0, 1).sigma(0).data(), &[1.0]);
        assert!((one_coord(0.0, 4.0, 25).sigma(0).data()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn sample_weights_moments() {
        let state = one_coord(0.5, 1.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| state.sample_weights(&mut rng)[0].data()[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.004, "mean {mean}");
        assert!((var - 1.0).abs() < 0.006, "var {var}");
    }

    #[test]
    fn log_density_examples() {
        let at_mean = log_prior_density::<f64>(&[0.3], &[1.0], &[0.3]).unwrap();
        assert!((at_mean + 0.918_938_533_204_672_8).abs() < 1e-12);
        let one_sd = log_prior_density::<f64>(&[0.3], &[2.0], &[2.3]).unwrap();
        let at_mean2 = log_prior_density::<f64>(&[0.3], &[2.0], &[0.3]).unwrap();
        assert!((one_sd - at_mean2 + 0.5).abs() < 1e-12);
        let pair = log_prior_density::<f64>(&[0.0, 1.0], &[1.0, 0.5], &[0.2, 0.4]).unwrap();
        let split = log_prior_density::<f64>(&[0.0], &[1.0], &[0.2]).unwrap()
            + log_prior_density::<f64>(&[1.0], &[0.5], &[0.4]).unwrap();
        assert!((pair - split).abs() < 1e-14);
        assert!(log_prior_density::<f64>(&[0.0], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn density_integrates_to_one() {
        // composite Simpson over ±10σ
        let (mu, sd) = (0.7, 1.3);
        let n = 20_000;
        let (a, b) = (mu - 10.0 * sd, mu + 10.0 * sd);
        let h = (b - a) / n as f64;
        let f = |x: f64| log_prior_density::<f64>(&[mu], &[sd], &[x]).unwrap().exp();
        let mut acc = f(a) + f(b);
        for i in 1..n {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        assert!((acc * h / 3.0 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn kl_examples() {
        let s = one_coord(1.0, 1.0, 1);
        assert_eq!(kl_to_reference(&s, &s).unwrap(), 0.0);
        let r = one_coord(0.0, 1.0, 1);
        assert!((kl_to_reference(&s, &r).unwrap() - 0.5).abs() < 1e-15);
        // N(0, 1/4): s = 4 with b = 1
        let narrow = one_coord(0.0, 4.0, 1);
        let expected = 2f64.ln() + 0.125 - 0.5;
        assert!((kl_to_reference(&narrow, &r).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn fisher_diagonal_of_gaussian_prior() {
        let (mu, sigma) = (0.4, 0.7);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut sm, mut sm2, mut ss, mut ss2) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let w = mu + sigma * z;
            let a = score_mu(w, mu, sigma).powi(2);
            let b = score_sigma(w, mu, sigma).powi(2);
            sm += a;
            sm2 += a * a;
            ss += b;
            ss2 += b * b;
        }
        let nf = n as f64;
        let check = |sum: f64, sum2: f64, expected: f64| {
            let mean = sum / nf;
            let se = ((sum2 / nf - mean * mean) / nf).sqrt();
            assert!((mean - expected).abs() < 4.0 * se, "{mean} vs {expected} (se {se})");
        };
        check(sm, sm2, 1.0 / (sigma * sigma));
        check(ss, ss2, 2.0 / (sigma * sigma));
    }
}
