//! Network builders: a plain multilayer perceptron and a residual
//! convolutional network (input conv, residual conv blocks, global average
//! pool, residual fully connected blocks, final linear layer).
//!
//! Dropout follows every ReLU. Residual blocks compute
//! `relu(x + f(x))` where `f` is two shape-preserving layers with a ReLU
//! between them.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape, Var};
use crate::data::Batch;
use crate::dropout_info::LayerChannel;
use crate::error::{Error, Result};
use crate::prior::{ParamKind, ParamSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetSpec {
    pub in_channels: usize,
    pub width: usize,
    pub input_kernel: usize,
    pub conv_blocks: usize,
    pub fc_blocks: usize,
    pub classes: usize,
}

impl ResNetSpec {
    /// The full-size network: width 100, nine conv blocks, three fc blocks.
    pub fn paper() -> Self {
        Self {
            in_channels: 1,
            width: 100,
            input_kernel: 5,
            conv_blocks: 9,
            fc_blocks: 3,
            classes: 10,
        }
    }

    /// Same shape at tractable cost.
    pub fn desk() -> Self {
        Self {
            width: 32,
            conv_blocks: 2,
            fc_blocks: 1,
            ..Self::paper()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArchSpec {
    /// Layer widths including input and output, e.g. `[784, 100, 10]`.
    Mlp {
        layers: Vec<usize>,
    },
    ResNet(ResNetSpec),
}

/// An architecture bound to an input shape and a dropout rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: ArchSpec,
    dropout: f64,
    input: [usize; 3],
}

impl Network {
    /// `input_shape` is `[channels, height, width]` of one sample.
    pub fn new(arch: ArchSpec, dropout: f64, input_shape: &[usize]) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidArgument(format!("dropout rate {dropout} outside [0, 1)")));
        }
        let input: [usize; 3] = input_shape
            .try_into()
            .map_err(|_| Error::InvalidArgument(format!("input shape {input_shape:?} is not [c, h, w]")))?;
        match &arch {
            ArchSpec::Mlp { layers } => {
                if layers.len() < 2 || layers.contains(&0) {
                    return Err(Error::InvalidArgument(format!("invalid layer list {layers:?}")));
                }
                if layers[0] != input.iter().product::<usize>() {
                    return Err(Error::InvalidArgument(format!(
                        "first layer {} does not match input {input:?}",
                        layers[0]
                    )));
                }
            }
            ArchSpec::ResNet(r) => {
                if r.width == 0 || r.classes == 0 || r.input_kernel % 2 == 0 {
                    return Err(Error::InvalidArgument(format!("invalid residual network spec {r:?}")));
                }
                if r.in_channels != input[0] {
                    return Err(Error::InvalidArgument(format!(
                        "network expects {} input channels, data has {}",
                        r.in_channels, input[0]
                    )));
                }
            }
        }
        Ok(Self { arch, dropout, input })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn classes(&self) -> usize {
        match &self.arch {
            ArchSpec::Mlp { layers } => *layers.last().unwrap(),
            ArchSpec::ResNet(r) => r.classes,
        }
    }

    /// Weight layers (conv and linear); pooling and activations do not count.
    pub fn layer_count(&self) -> usize {
        match &self.arch {
            ArchSpec::Mlp { layers } => layers.len() - 1,
            ArchSpec::ResNet(r) => 1 + 2 * r.conv_blocks + 2 * r.fc_blocks + 1,
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.layers()
            .into_iter()
            .flat_map(|l| {
                let fan_in = l.weight_shape[1..].iter().product::<usize>();
                let fan_in = if l.conv { fan_in } else { l.weight_shape[0] };
                [
                    ParamSpec {
                        name: format!("{}.w", l.name),
                        shape: l.weight_shape.clone(),
                        fan_in,
                        kind: ParamKind::Weight,
                    },
                    ParamSpec {
                        name: format!("{}.b", l.name),
                        shape: vec![l.bias_len],
                        fan_in,
                        kind: ParamKind::Bias,
                    },
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    /// Per-layer dropout exposure, for the information analysis.
    pub fn layer_channels(&self) -> Vec<LayerChannel> {
        self.layers()
            .into_iter()
            .map(|l| LayerChannel {
                in_dim: l.in_dim,
                out_dim: l.out_dim,
                r_in: if l.dropout_in { self.dropout } else { 0.0 },
                r_out: if l.dropout_out { self.dropout } else { 0.0 },
                weight_count: l.weight_shape.iter().product(),
                bias_count: l.bias_len,
                name: l.name,
            })
            .collect()
    }

    fn layers(&self) -> Vec<Layer> {
        match &self.arch {
            ArchSpec::Mlp { layers } => {
                let last = layers.len() - 2;
                layers
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| Layer {
                        name: format!("fc{i}"),
                        weight_shape: vec![w[0], w[1]],
                        bias_len: w[1],
                        in_dim: w[0],
                        out_dim: w[1],
                        conv: false,
                        dropout_in: i > 0,
                        dropout_out: i < last,
                    })
                    .collect()
            }
            ArchSpec::ResNet(r) => {
                let w = r.width;
                let conv = |name: String, c_in: usize, k: usize, dropout_in: bool| Layer {
                    name,
                    weight_shape: vec![w, c_in, k, k],
                    bias_len: w,
                    in_dim: c_in,
                    out_dim: w,
                    conv: true,
                    dropout_in,
                    dropout_out: true,
                };
                let fc = |name: String, n_out: usize, dropout_out: bool| Layer {
                    name,
                    weight_shape: vec![w, n_out],
                    bias_len: n_out,
                    in_dim: w,
                    out_dim: n_out,
                    conv: false,
                    dropout_in: true,
                    dropout_out,
                };
                let mut out = vec![conv("conv_in".into(), r.in_channels, r.input_kernel, false)];
                for j in 0..r.conv_blocks {
                    out.push(conv(format!("block{j}.conv1"), w, 3, true));
                    out.push(conv(format!("block{j}.conv2"), w, 3, true));
                }
                for j in 0..r.fc_blocks {
                    out.push(fc(format!("fcblock{j}.fc1"), w, true));
                    out.push(fc(format!("fcblock{j}.fc2"), w, true));
                }
                out.push(fc("out".into(), r.classes, false));
                out
            }
        }
    }

    /// Record the forward pass on `tape`, returning the logits `[b×classes]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let n_expected = 2 * self.layer_count();
        if params.len() != n_expected {
            return Err(Error::shape(
                "network",
                format!("expected {n_expected} parameter tensors, got {}", params.len()),
            ));
        }
        let r = self.dropout;
        let mut act = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
            let h = tape.relu(v)?;
            tape.dropout(h, r, mode, rng)
        };
        let mut p = params.chunks(2);
        let mut next = || {
            let pair = p.next().expect("parameter count checked");
            (pair[0], pair[1])
        };
        match &self.arch {
            ArchSpec::Mlp { layers } => {
                let mut h = tape.flatten(x)?;
                for i in 0..layers.len() - 1 {
                    let (w, b) = next();
                    h = tape.dense(h, w, b)?;
                    if i + 2 < layers.len() {
                        h = act(tape, h)?;
                    }
                }
                Ok(h)
            }
            ArchSpec::ResNet(spec) => {
                let (w, b) = next();
                let mut h = tape.conv2d(x, w, b, spec.input_kernel / 2)?;
                h = act(tape, h)?;
                for _ in 0..spec.conv_blocks {
                    let (w1, b1) = next();
                    let (w2, b2) = next();
                    let mut f = tape.conv2d(h, w1, b1, 1)?;
                    f = act(tape, f)?;
                    f = tape.conv2d(f, w2, b2, 1)?;
                    let sum = tape.add(h, f)?;
                    h = act(tape, sum)?;
                }
                h = tape.adaptive_avg_pool(h)?;
                for _ in 0..spec.fc_blocks {
                    let (w1, b1) = next();
                    let (w2, b2) = next();
                    let mut f = tape.dense(h, w1, b1)?;
                    f = act(tape, f)?;
                    f = tape.dense(f, w2, b2)?;
                    let sum = tape.add(h, f)?;
                    h = act(tape, sum)?;
                }
                let (w, b) = next();
                tape.dense(h, w, b)
            }
        }
    }

    /// Mean cross-entropy of a batch and its gradient with respect to `weights`.
    pub fn loss_and_grad<T: Scalar>(
        &self,
        weights: &[Tensor<T>],
        batch: &Batch<T>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(T, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let vars = weights
            .iter()
            .map(|w| tape.param(w.clone()))
            .collect::<Result<Vec<_>>>()?;
        let x = tape.constant(batch.images.clone())?;
        let logits = self.forward(&mut tape, &vars, x, mode, rng)?;
        let loss = tape.cross_entropy(logits, &batch.labels)?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?.collect(&vars, &tape);
        Ok((value, grads))
    }

    /// Eval-mode logits for `images`, computed in chunks.
    pub fn logits<T: Scalar>(&self, weights: &[Tensor<T>], images: &Tensor<T>) -> Result<Tensor<T>> {
        let n = images.shape()[0];
        let chunk = match self.arch {
            ArchSpec::Mlp { .. } => 1000,
            ArchSpec::ResNet(_) => 100,
        };
        let k = self.classes();
        let mut out = Vec::with_capacity(n * k);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let mut tape = Tape::new();
            let vars = weights
                .iter()
                .map(|w| tape.constant(w.clone()))
                .collect::<Result<Vec<_>>>()?;
            let x = tape.constant(images.slice_rows(start, end)?)?;
            let logits = self.forward(&mut tape, &vars, x, Mode::Eval, &mut rng)?;
            out.extend_from_slice(tape.value(logits).data());
            start = end;
        }
        Tensor::new(vec![n, k], out)
    }
}

struct Layer {
    name: String,
    weight_shape: Vec<usize>,
    bias_len: usize,
    in_dim: usize,
    out_dim: usize,
    conv: bool,
    dropout_in: bool,
    dropout_out: bool,
}
