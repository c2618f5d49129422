//! Versioned binary container for a Gaussian hyper-parameter state.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, a JSON
//! manifest, then for every tensor in manifest order its `mu` values followed
//! by its `s` values as little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::{GaussianParam, GaussianParamState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BSGDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub batch_size: usize,
    pub n_epochs: usize,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    /// Free-form run description (architecture, optimizer, dropout).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub state: GaussianParamState<T>,
    pub seed: u64,
    pub meta: serde_json::Value,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            batch_size: self.state.batch_size(),
            n_epochs: self.state.n_epochs(),
            seed: self.seed,
            tensors: self
                .state
                .params()
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    shape: p.mu.shape().to_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + manifest.len() + 16 * self.state.num_weights());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for p in self.state.params() {
            for t in [&p.mu, &p.s] {
                for v in t.data() {
                    out.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::format(path, detail);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < mlen {
            return Err(bad("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen]).map_err(|e| bad(format!("manifest: {e}")))?;
        let mut floats = body[mlen..].chunks_exact(8);
        let expected: usize = manifest
            .tensors
            .iter()
            .map(|t| 2 * t.shape.iter().product::<usize>())
            .sum();
        if floats.len() != expected || !floats.remainder().is_empty() {
            return Err(bad(format!(
                "expected {expected} values, found {} bytes",
                body.len() - mlen
            )));
        }
        let mut take = |shape: &[usize]| -> Result<Tensor<T>> {
            let n = shape.iter().product();
            let data = (&mut floats)
                .take(n)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            Tensor::new(shape.to_vec(), data).map_err(|e| bad(e.to_string()))
        };
        let mut params = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            let mu = take(&entry.shape)?;
            let s = take(&entry.shape)?;
            params.push(GaussianParam {
                name: entry.name.clone(),
                mu,
                s,
            });
        }
        let state = GaussianParamState::from_params(params, manifest.batch_size, manifest.n_epochs)
            .map_err(|e| bad(e.to_string()))?;
        Ok(Self {
            state,
            seed: manifest.seed,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{ParamKind, ParamSpec};

    fn sample() -> Checkpoint<f64> {
        let specs = [
            ParamSpec {
                name: "fc0.w".into(),
                shape: vec![3, 2],
                fan_in: 3,
                kind: ParamKind::Weight,
            },
            ParamSpec {
                name: "fc0.b".into(),
                shape: vec![2],
                fan_in: 3,
                kind: ParamKind::Bias,
            },
        ];
        let mut state = GaussianParamState::init(&specs, 60, 10, 4).unwrap();
        state.params_mut()[0].s.data_mut()[1] = 1.0 + 1e-13;
        Checkpoint {
            state,
            seed: 4,
            meta: serde_json::json!({"optimizer": "bsgd"}),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::<f64>::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn rejects_corrupt_files() {
        let bytes = sample().to_bytes();
        let p = Path::new("x");
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::<f64>::from_bytes(&wrong, p).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&version, p),
            Err(Error::Format { .. })
        ));
    }
}
