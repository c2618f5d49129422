//! Dropout read as a noisy binary channel on ReLU activity bits.
//!
//! A feature bit `X` that is on with probability `p1` passes through dropout
//! at rate `r` and arrives as `Y`; a dropped bit always reads zero. The
//! surviving mutual information, relative to the clean channel at
//! `p1 = 1/2`, is the reduction factor `R(r)` applied to effective weight
//! counts.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_rate(r: f64) -> Result<()> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("dropout rate {r} outside [0, 1)")))
    }
}

/// `x log2 x` with the continuous extension `0 log 0 = 0`.
fn xlog2x(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.log2()
    }
}

/// Mutual information in bits between a feature bit and its dropped-out copy.
pub fn mutual_info_bit(r: f64, p1: f64) -> Result<f64> {
    check_rate(r)?;
    if !(0.0..=1.0).contains(&p1) {
        return Err(Error::InvalidArgument(format!("probability {p1} outside [0, 1]")));
    }
    let p0 = 1.0 - p1;
    let info = -xlog2x(p0 + r * p1) - p1 * (-xlog2x(r) + (1.0 - r) * if p1 > 0.0 { p1.log2() } else { 0.0 });
    Ok(info.clamp(0.0, 1.0))
}

/// `R(r) = 1 - ½{r log2(1/r) + (1+r) log2(1+r)}`, the fraction of one
/// balanced bit that survives dropout at rate `r`.
pub fn reduction_factor(r: f64) -> Result<f64> {
    check_rate(r)?;
    Ok(1.0 - 0.5 * (-xlog2x(r) + xlog2x(1.0 + r)))
}

/// How per-layer factors combine into a weight-count multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    /// Weights scale by `R(r_in)·R(r_out)`; biases by `R(r_out)`.
    TwoSided,
    /// Weights scale by `R(r)²` with `r` the larger of the layer's two rates;
    /// biases by `R(r_out)`.
    OneSided,
}

impl Convention {
    pub const ALL: [Convention; 2] = [Convention::TwoSided, Convention::OneSided];

    pub fn name(self) -> &'static str {
        match self {
            Convention::TwoSided => "two-sided",
            Convention::OneSided => "one-sided",
        }
    }
}

/// One weight layer with the dropout rates on its input and output sides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerChannel {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub r_in: f64,
    pub r_out: f64,
    pub weight_count: usize,
    pub bias_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerFactor {
    pub name: String,
    pub nominal: usize,
    pub weight_factor: f64,
    pub bias_factor: f64,
    pub effective: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveCount {
    pub convention: Convention,
    pub nominal: usize,
    pub effective: f64,
    pub layers: Vec<LayerFactor>,
}

impl EffectiveCount {
    pub fn ratio(&self) -> f64 {
        if self.nominal == 0 {
            1.0
        } else {
            self.effective / self.nominal as f64
        }
    }

    /// Aligned text table, one row per layer plus a total row.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<18} {:>10} {:>10} {:>10} {:>14}",
            "layer", "nominal", "w_factor", "b_factor", "effective"
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:<18} {:>10} {:>10.6} {:>10.6} {:>14.3}",
                l.name, l.nominal, l.weight_factor, l.bias_factor, l.effective
            );
        }
        let _ = writeln!(
            out,
            "{:<18} {:>10} {:>10} {:>10} {:>14.3}",
            "total", self.nominal, "", "", self.effective
        );
        let _ = writeln!(out, "ratio ({}) = {:.6}", self.convention.name(), self.ratio());
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        self.write_records(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        self.write_records(&mut w)?;
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    fn write_records<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        w.write_record(["layer", "nominal", "weight_factor", "bias_factor", "effective"])?;
        for l in &self.layers {
            w.write_record([
                l.name.clone(),
                l.nominal.to_string(),
                format!("{:.9e}", l.weight_factor),
                format!("{:.9e}", l.bias_factor),
                format!("{:.9e}", l.effective),
            ])?;
        }
        w.write_record([
            "total".to_string(),
            self.nominal.to_string(),
            String::new(),
            String::new(),
            format!("{:.9e}", self.effective),
        ])?;
        Ok(())
    }
}

/// Scale each layer's parameter count by its reduction factors and sum.
pub fn effective_param_count(layers: &[LayerChannel], convention: Convention) -> Result<EffectiveCount> {
    let mut out = Vec::with_capacity(layers.len());
    let (mut nominal, mut effective) = (0, 0.0);
    for l in layers {
        let (f_in, f_out) = (reduction_factor(l.r_in)?, reduction_factor(l.r_out)?);
        let weight_factor = match convention {
            Convention::TwoSided => f_in * f_out,
            Convention::OneSided => reduction_factor(l.r_in.max(l.r_out))?.powi(2),
        };
        let bias_factor = f_out;
        let n = l.weight_count + l.bias_count;
        let eff = l.weight_count as f64 * weight_factor + l.bias_count as f64 * bias_factor;
        nominal += n;
        effective += eff;
        out.push(LayerFactor {
            name: l.name.clone(),
            nominal: n,
            weight_factor,
            bias_factor,
            effective: eff,
        });
    }
    Ok(EffectiveCount {
        convention,
        nominal,
        effective,
        layers: out,
    })
}
