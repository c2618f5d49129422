//! Message-length accounting: the cost of the data given the weights plus the
//! cost of describing the weights themselves.
//!
//! The weight cost is reported two ways. `weight_kl_nats` is the KL divergence
//! from the trained Gaussians to the initialization-time reference, which is
//! the default weight term of the total. `weight_point_nats` is the negative
//! log density of the trained means under the reference; a density is not a
//! code length without a discretization step, so it is reported alongside
//! rather than summed.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::autodiff::log_softmax_rows;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::prior::{kl_to_reference, log_prior_density, GaussianParamState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Summed (not averaged) cross-entropy of `labels` under row-wise logits.
pub fn cross_entropy_sum<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy_sum",
            format!("logits {s:?} with {} labels", labels.len()),
        ));
    }
    let k = s[1];
    let lp = log_softmax_rows(logits.data(), k);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        total -= lp[i * k + y].as_f64();
    }
    Ok(total)
}

/// Nats needed to transmit the labels of `dataset` given `weights`.
pub fn data_message_length<T: Scalar>(net: &Network, weights: &[Tensor<T>], dataset: &Dataset<T>) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    if dataset.sample_shape() != net.input_shape() {
        return Err(Error::shape(
            "data_message_length",
            format!(
                "network input {:?}, data {:?}",
                net.input_shape(),
                dataset.sample_shape()
            ),
        ));
    }
    let logits = net.logits(weights, dataset.images())?;
    cross_entropy_sum(&logits, dataset.labels())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightLength {
    pub point_nats: f64,
    pub kl_nats: f64,
}

pub fn weight_message_length<T: Scalar>(
    state: &GaussianParamState<T>,
    reference: &GaussianParamState<T>,
) -> Result<WeightLength> {
    if state.params().len() != reference.params().len() {
        return Err(Error::shape("weight_message_length", "parameter counts differ"));
    }
    let mut point = 0.0;
    for (i, (p, r)) in state.params().iter().zip(reference.params()).enumerate() {
        p.mu.expect_same_shape(&r.mu, "weight_message_length")?;
        point -= log_prior_density(r.mu.data(), reference.sigma(i).data(), p.mu.data())?.as_f64();
    }
    Ok(WeightLength {
        point_nats: point,
        kl_nats: kl_to_reference(state, reference)?.as_f64(),
    })
}

/// Length in nats of a structural description of `bytes` bytes, as a flat
/// code of `8·bytes` bits.
pub fn structural_nats(bytes: usize) -> f64 {
    8.0 * bytes as f64 * LN_2
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightTerm {
    #[default]
    Kl,
    Point,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthReport {
    pub n_samples: usize,
    pub data_nats: f64,
    pub weight_point_nats: f64,
    pub weight_kl_nats: f64,
    pub weight_term: WeightTerm,
    /// `data_nats` plus the chosen weight term.
    pub total_nats: f64,
    /// Placeholder for architecture and hyper-prior terms; not in the total.
    pub structural_nats: f64,
}

impl LengthReport {
    pub fn new(n_samples: usize, data_nats: f64, weights: WeightLength, term: WeightTerm, structural: f64) -> Self {
        let w = match term {
            WeightTerm::Kl => weights.kl_nats,
            WeightTerm::Point => weights.point_nats,
        };
        Self {
            n_samples,
            data_nats,
            weight_point_nats: weights.point_nats,
            weight_kl_nats: weights.kl_nats,
            weight_term: term,
            total_nats: data_nats + w,
            structural_nats: structural,
        }
    }

    /// The same report with every length divided by `ln 2`.
    pub fn in_bits(&self) -> LengthReport {
        LengthReport {
            data_nats: self.data_nats / LN_2,
            weight_point_nats: self.weight_point_nats / LN_2,
            weight_kl_nats: self.weight_kl_nats / LN_2,
            total_nats: self.total_nats / LN_2,
            structural_nats: self.structural_nats / LN_2,
            ..*self
        }
    }

    pub fn render(&self) -> String {
        let bits = self.in_bits();
        let mut out = String::from("# architecture and hyper-prior lengths are placeholders\n");
        out.push_str(&format!("{:<20} {:>18} {:>18}\n", "term", "nats", "bits"));
        let mut row = |name: &str, n: f64, b: f64| out.push_str(&format!("{name:<20} {n:>18.6} {b:>18.6}\n"));
        row("data", self.data_nats, bits.data_nats);
        row("weight_kl", self.weight_kl_nats, bits.weight_kl_nats);
        row("weight_point", self.weight_point_nats, bits.weight_point_nats);
        row("total", self.total_nats, bits.total_nats);
        row("structural", self.structural_nats, bits.structural_nats);
        out.push_str(&format!(
            "samples {}  weight term {:?}\n",
            self.n_samples, self.weight_term
        ));
        out
    }
}

/// Data term at `w = μ` plus the weight terms relative to `reference`.
pub fn total_length_report<T: Scalar>(
    net: &Network,
    state: &GaussianParamState<T>,
    reference: &GaussianParamState<T>,
    dataset: &Dataset<T>,
    structural: f64,
) -> Result<LengthReport> {
    let data = data_message_length(net, &state.means(), dataset)?;
    let weights = weight_message_length(state, reference)?;
    Ok(LengthReport::new(
        dataset.len(),
        data,
        weights,
        WeightTerm::Kl,
        structural,
    ))
}
