//! Training harness: configuration, the training loop for BSGD and the SGD
//! and Adam baselines, evaluation, dropout sweeps and the metrics file.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_rows, Mode};
use crate::checkpoint::Checkpoint;
use crate::data::{make_synthetic_blobs, Batch, BatchPlan, BlobSpec, Dataset, MnistFiles};
use crate::dropout_info::{effective_param_count, Convention};
use crate::error::{Error, Result};
use crate::ledger::{data_message_length, weight_message_length, LengthReport, WeightTerm};
use crate::nn::{ArchSpec, Network, ResNetSpec};
use crate::optim::{Adam, Bsgd, Evaluation, Objective, Sgd};
use crate::prior::{GaussianParam, GaussianParamState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const METRICS_HEADER: [&str; 10] = [
    "step",
    "epoch",
    "train_loss",
    "val_loss",
    "test_acc",
    "data_nats",
    "weight_kl_nats",
    "weight_point_nats",
    "total_nats",
    "wall_ms",
];

/// Metric rows written per epoch.
pub const ROWS_PER_EPOCH: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum OptimizerKind {
    Bsgd,
    Sgd { lr: f64 },
    Adam { lr: f64 },
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Bsgd => "bsgd",
            OptimizerKind::Sgd { .. } => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Mnist {
        dir: PathBuf,
        /// Use only the first `n` training images.
        train_size: Option<usize>,
        test_size: Option<usize>,
        /// Hold out the last `n` training images for validation; zero
        /// validates on the test set.
        val_holdout: usize,
    },
    Synthetic(BlobSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub n_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub arch: ArchSpec,
    pub dropout: f64,
    pub data: DataSpec,
    pub output_dir: Option<PathBuf>,
    /// Posterior weight samples averaged at evaluation; zero evaluates at `μ`.
    pub eval_samples: usize,
    /// Weight samples averaged per BSGD step.
    pub grad_samples: usize,
    pub record_wall_ms: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    optimizer: String,
    epochs: usize,
    batch_size: usize,
    seed: Option<u64>,
    learning_rate: Option<f64>,
    arch: Option<String>,
    layers: Option<Vec<usize>>,
    width: Option<usize>,
    input_kernel: Option<usize>,
    conv_blocks: Option<usize>,
    fc_blocks: Option<usize>,
    dropout: Option<f64>,
    dataset: Option<String>,
    mnist_dir: Option<PathBuf>,
    train_size: Option<usize>,
    test_size: Option<usize>,
    val_holdout: Option<usize>,
    synthetic_per_class: Option<usize>,
    synthetic_classes: Option<usize>,
    synthetic_dim: Option<usize>,
    synthetic_spread: Option<f64>,
    data_seed: Option<u64>,
    output_dir: Option<PathBuf>,
    eval_samples: Option<usize>,
    grad_samples: Option<usize>,
    record_wall_ms: Option<bool>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl TrainConfig {
    /// Parse a flat TOML document. Relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base_dir.join(p) };

        let optimizer = match raw.optimizer.as_str() {
            "bsgd" => {
                if raw.learning_rate.is_some() {
                    return Err(config_err(
                        "bsgd takes no learning rate: its step size is fixed at 1/epochs",
                    ));
                }
                OptimizerKind::Bsgd
            }
            "sgd" => OptimizerKind::Sgd {
                lr: raw.learning_rate.unwrap_or(0.1),
            },
            "adam" => OptimizerKind::Adam {
                lr: raw.learning_rate.unwrap_or(1e-4),
            },
            other => return Err(config_err(format!("unknown optimizer {other:?}"))),
        };
        if raw.epochs == 0 || raw.batch_size == 0 {
            return Err(config_err("epochs and batch_size must be at least 1"));
        }

        let resnet_fields = [raw.width, raw.input_kernel, raw.conv_blocks, raw.fc_blocks];
        let arch_name = raw.arch.as_deref().unwrap_or("resnet");
        let arch = match arch_name {
            "mlp" => {
                if resnet_fields.iter().any(Option::is_some) {
                    return Err(config_err("convolutional keys are not used by the mlp architecture"));
                }
                ArchSpec::Mlp {
                    layers: raw
                        .layers
                        .ok_or_else(|| config_err("mlp architecture needs `layers`"))?,
                }
            }
            "resnet" | "paper" => {
                if raw.layers.is_some() {
                    return Err(config_err("`layers` applies only to the mlp architecture"));
                }
                let base = if arch_name == "paper" {
                    ResNetSpec::paper()
                } else {
                    ResNetSpec::desk()
                };
                ArchSpec::ResNet(ResNetSpec {
                    width: raw.width.unwrap_or(base.width),
                    input_kernel: raw.input_kernel.unwrap_or(base.input_kernel),
                    conv_blocks: raw.conv_blocks.unwrap_or(base.conv_blocks),
                    fc_blocks: raw.fc_blocks.unwrap_or(base.fc_blocks),
                    ..base
                })
            }
            other => return Err(config_err(format!("unknown architecture {other:?}"))),
        };

        let synthetic_fields = raw.synthetic_per_class.is_some()
            || raw.synthetic_classes.is_some()
            || raw.synthetic_dim.is_some()
            || raw.synthetic_spread.is_some()
            || raw.data_seed.is_some();
        let data = match raw.dataset.as_deref().unwrap_or("mnist") {
            "mnist" => {
                if synthetic_fields {
                    return Err(config_err("synthetic_* keys require dataset = \"synthetic\""));
                }
                DataSpec::Mnist {
                    dir: resolve(raw.mnist_dir.unwrap_or_else(|| PathBuf::from("data/mnist"))),
                    train_size: raw.train_size,
                    test_size: raw.test_size,
                    val_holdout: raw.val_holdout.unwrap_or(0),
                }
            }
            "synthetic" => {
                if raw.mnist_dir.is_some()
                    || raw.train_size.is_some()
                    || raw.test_size.is_some()
                    || raw.val_holdout.is_some()
                {
                    return Err(config_err("mnist keys require dataset = \"mnist\""));
                }
                DataSpec::Synthetic(BlobSpec {
                    n_per_class: raw.synthetic_per_class.unwrap_or(100),
                    classes: raw.synthetic_classes.unwrap_or(4),
                    dim: raw.synthetic_dim.unwrap_or(2),
                    spread: raw.synthetic_spread.unwrap_or(0.05),
                    seed: raw.data_seed.unwrap_or(0),
                })
            }
            other => return Err(config_err(format!("unknown dataset {other:?}"))),
        };

        let dropout = raw.dropout.unwrap_or(0.0);
        if !(0.0..1.0).contains(&dropout) {
            return Err(config_err(format!("dropout {dropout} outside [0, 1)")));
        }
        let grad_samples = raw.grad_samples.unwrap_or(1);
        if grad_samples == 0 {
            return Err(config_err("grad_samples must be at least 1"));
        }
        if grad_samples != 1 && optimizer != OptimizerKind::Bsgd {
            return Err(config_err("grad_samples applies only to bsgd"));
        }
        Ok(Self {
            optimizer,
            n_epochs: raw.epochs,
            batch_size: raw.batch_size,
            seed: raw.seed.unwrap_or(0),
            arch,
            dropout,
            data,
            output_dir: raw.output_dir.map(resolve),
            eval_samples: raw.eval_samples.unwrap_or(0),
            grad_samples,
            record_wall_ms: raw.record_wall_ms.unwrap_or(false),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }
}

/// Training, validation and test splits.
#[derive(Clone, Debug)]
pub struct DataSplits<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
}

pub fn load_data<T: Scalar>(spec: &DataSpec) -> Result<DataSplits<T>> {
    match spec {
        DataSpec::Mnist {
            dir,
            train_size,
            test_size,
            val_holdout,
        } => {
            let files = MnistFiles::in_dir(dir)?;
            let mut train = files.load_train::<T>()?;
            let mut test = files.load_test::<T>()?;
            if let Some(n) = *train_size {
                train = train.slice(0, n.min(train.len()))?;
            }
            if let Some(n) = *test_size {
                test = test.slice(0, n.min(test.len()))?;
            }
            let (train, val) = if *val_holdout > 0 {
                if *val_holdout >= train.len() {
                    return Err(Error::Config(format!(
                        "validation holdout {val_holdout} leaves no training data"
                    )));
                }
                train.split_at(train.len() - val_holdout)?
            } else {
                (train, test.clone())
            };
            Ok(DataSplits { train, val, test })
        }
        DataSpec::Synthetic(blobs) => {
            let train = make_synthetic_blobs(blobs)?;
            let test = make_synthetic_blobs(&BlobSpec {
                seed: blobs.seed.wrapping_add(1),
                ..blobs.clone()
            })?;
            Ok(DataSplits {
                train,
                val: test.clone(),
                test,
            })
        }
    }
}

/// One record of the metrics file. Epoch-level fields are present only on
/// the last row of each epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_acc: Option<f64>,
    pub data_nats: Option<f64>,
    pub weight_kl_nats: Option<f64>,
    pub weight_point_nats: Option<f64>,
    pub total_nats: Option<f64>,
    pub wall_ms: u64,
}

fn fmt_f(x: f64) -> String {
    format!("{x:.8e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f).unwrap_or_default()
}

/// Write `rows` as CSV with [`METRICS_HEADER`]; floats carry nine significant digits.
pub fn emit_metrics(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.epoch.to_string(),
            fmt_f(r.train_loss),
            fmt_f(r.val_loss),
            fmt_opt(r.test_acc),
            fmt_opt(r.data_nats),
            fmt_opt(r.weight_kl_nats),
            fmt_opt(r.weight_point_nats),
            fmt_opt(r.total_nats),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != METRICS_HEADER {
        return Err(Error::format(path, format!("unexpected header {header:?}")));
    }
    let bad = |detail: String| Error::format(path, detail);
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| bad(format!("bad number {s:?}"))) };
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    let int = |s: &str| -> Result<u64> { s.parse().map_err(|_| bad(format!("bad integer {s:?}"))) };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(MetricsRow {
            step: int(&rec[0])? as usize,
            epoch: int(&rec[1])? as usize,
            train_loss: num(&rec[2])?,
            val_loss: num(&rec[3])?,
            test_acc: opt(&rec[4])?,
            data_nats: opt(&rec[5])?,
            weight_kl_nats: opt(&rec[6])?,
            weight_point_nats: opt(&rec[7])?,
            total_nats: opt(&rec[8])?,
            wall_ms: int(&rec[9])?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub loss_per_sample: f64,
    pub accuracy: f64,
    pub error_count: usize,
}

/// Class probabilities for every sample: at `μ` when `samples == 0`,
/// otherwise averaged over `samples` posterior weight draws.
pub fn predict_probs<T: Scalar>(
    net: &Network,
    state: &GaussianParamState<T>,
    images: &Tensor<T>,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let k = net.classes();
    let probs_of = |weights: &[Tensor<T>]| -> Result<Vec<f64>> {
        let logits = net.logits(weights, images)?;
        Ok(log_softmax_rows(logits.data(), k)
            .into_iter()
            .map(|v| v.as_f64().exp())
            .collect())
    };
    if samples == 0 {
        return probs_of(&state.means());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut acc = vec![0.0; images.shape()[0] * k];
    for _ in 0..samples {
        let w = state.sample_weights(&mut rng);
        for (a, p) in acc.iter_mut().zip(probs_of(&w)?) {
            *a += p;
        }
    }
    let inv = 1.0 / samples as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

pub fn evaluate<T: Scalar>(
    net: &Network,
    state: &GaussianParamState<T>,
    dataset: &Dataset<T>,
    samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    if dataset.sample_shape() != net.input_shape() {
        return Err(Error::shape(
            "evaluate",
            format!(
                "network input {:?}, data {:?}",
                net.input_shape(),
                dataset.sample_shape()
            ),
        ));
    }
    let k = net.classes();
    let probs = predict_probs(net, state, dataset.images(), samples, seed)?;
    let mut loss = 0.0;
    let mut errors = 0;
    for (row, &y) in probs.chunks(k).zip(dataset.labels()) {
        if y >= k {
            return Err(Error::shape("evaluate", format!("label {y} with {k} network outputs")));
        }
        loss -= row[y].ln();
        let pred = row
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > row[best] { i } else { best });
        errors += usize::from(pred != y);
    }
    let n = dataset.len();
    Ok(EvalReport {
        n,
        loss_per_sample: loss / n as f64,
        accuracy: 1.0 - errors as f64 / n as f64,
        error_count: errors,
    })
}

/// Run description stored in a checkpoint's manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub optimizer: OptimizerKind,
    pub arch: ArchSpec,
    pub dropout: f64,
    pub input_shape: Vec<usize>,
}

impl RunMeta {
    pub fn from_checkpoint<T: Scalar>(ck: &Checkpoint<T>) -> Result<Self> {
        serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::format(PathBuf::from("<checkpoint>"), format!("run description: {e}")))
    }

    pub fn network(&self) -> Result<Network> {
        Network::new(self.arch.clone(), self.dropout, &self.input_shape)
    }
}

/// Initialization-time state of a checkpointed run, regenerated from its
/// seed and architecture.
pub fn reference_state<T: Scalar>(ck: &Checkpoint<T>) -> Result<GaussianParamState<T>> {
    let net = RunMeta::from_checkpoint(ck)?.network()?;
    GaussianParamState::init(&net.param_specs(), ck.state.batch_size(), ck.state.n_epochs(), ck.seed)
}

pub fn evaluate_checkpoint<T: Scalar>(ck: &Checkpoint<T>, dataset: &Dataset<T>, samples: usize) -> Result<EvalReport> {
    let net = RunMeta::from_checkpoint(ck)?.network()?;
    evaluate(&net, &ck.state, dataset, samples, ck.seed)
}

pub fn ledger_for_checkpoint<T: Scalar>(ck: &Checkpoint<T>, dataset: &Dataset<T>) -> Result<LengthReport> {
    let meta = RunMeta::from_checkpoint(ck)?;
    let net = meta.network()?;
    let reference = reference_state(ck)?;
    let structural = serde_json::to_vec(&meta.arch).map(|v| v.len()).unwrap_or(0);
    crate::ledger::total_length_report(
        &net,
        &ck.state,
        &reference,
        dataset,
        crate::ledger::structural_nats(structural),
    )
}

pub struct TrainOutcome<T> {
    pub rows: Vec<MetricsRow>,
    pub steps: usize,
    pub batches_per_epoch: usize,
    /// `1/N_e` for BSGD runs.
    pub epsilon: Option<f64>,
    /// Coordinates of `s` that shrank on some step; zero for a valid run.
    pub s_decreases: usize,
    pub final_eval: EvalReport,
    pub checkpoint: Checkpoint<T>,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

struct BatchObjective<'a, T> {
    net: &'a Network,
    batch: &'a Batch<T>,
}

impl<T: Scalar> Objective<T> for BatchObjective<'_, T> {
    fn evaluate(&mut self, weights: &[Tensor<T>], rng: &mut dyn rand::RngCore) -> Result<Evaluation<T>> {
        let (loss, grads) = self.net.loss_and_grad(weights, self.batch, Mode::Train, rng)?;
        Ok(Evaluation {
            loss,
            grads,
            curvature: None,
        })
    }
}

enum Learner<T> {
    Bsgd(Bsgd<T>),
    Sgd(Sgd<T>, Vec<Tensor<T>>),
    Adam(Adam<T>, Vec<Tensor<T>>),
}

/// Within-epoch step indices (1-based) that close a metrics row.
fn row_marks(n_batches: usize) -> Vec<usize> {
    let mut marks: Vec<usize> = (1..=ROWS_PER_EPOCH)
        .map(|k| (k * n_batches).div_ceil(ROWS_PER_EPOCH))
        .collect();
    marks.dedup();
    marks
}

fn mean_loss<T: Scalar>(net: &Network, weights: &[Tensor<T>], ds: &Dataset<T>) -> Result<f64> {
    Ok(data_message_length(net, weights, ds)? / ds.len() as f64)
}

pub fn run_training<T: Scalar>(cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let data = load_data::<T>(&cfg.data)?;
    run_training_on(cfg, &data)
}

/// Exactly `N_e · N_b` optimizer steps on `data.train`, with ten metric rows
/// per epoch and test evaluation plus message lengths at every epoch end.
pub fn run_training_on<T: Scalar>(cfg: &TrainConfig, data: &DataSplits<T>) -> Result<TrainOutcome<T>> {
    let started = Instant::now();
    let train = &data.train;
    let net = Network::new(cfg.arch.clone(), cfg.dropout, train.sample_shape())?;
    if net.classes() != train.num_classes() {
        return Err(Error::Config(format!(
            "network has {} outputs, dataset has {} classes",
            net.classes(),
            train.num_classes()
        )));
    }
    if cfg.batch_size > train.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training samples",
            cfg.batch_size,
            train.len()
        )));
    }
    let plan = BatchPlan::new(train.len(), cfg.batch_size, cfg.seed)?;
    let n_b = plan.batches_per_epoch();
    let total_steps = cfg.n_epochs * n_b;

    let mut state = GaussianParamState::<T>::init(&net.param_specs(), cfg.batch_size, cfg.n_epochs, cfg.seed)?;
    let reference = state.clone();
    let mut learner = match cfg.optimizer {
        OptimizerKind::Bsgd => {
            let opt = Bsgd::new(cfg.n_epochs)?.with_grad_samples(cfg.grad_samples)?;
            assert_eq!(opt.total_steps(n_b), total_steps);
            Learner::Bsgd(opt)
        }
        OptimizerKind::Sgd { lr } => Learner::Sgd(Sgd::new(T::of(lr))?, state.means()),
        OptimizerKind::Adam { lr } => Learner::Adam(Adam::new(T::of(lr))?, state.means()),
    };
    let epsilon = match &learner {
        Learner::Bsgd(opt) => Some(opt.epsilon().as_f64()),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let marks = row_marks(n_b);
    let mut rows = Vec::with_capacity(cfg.n_epochs * marks.len());
    let mut step = 0;
    let mut s_decreases = 0;
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);

    for epoch in 0..cfg.n_epochs {
        for (i, batch) in plan.epoch(train, epoch).enumerate() {
            let batch = batch?;
            let loss = match &mut learner {
                Learner::Bsgd(opt) => {
                    let mut obj = BatchObjective {
                        net: &net,
                        batch: &batch,
                    };
                    let report = opt
                        .step(&mut state, &mut obj, &mut rng)
                        .map_err(|e| at_step(e, step + 1))?;
                    s_decreases += report.s_decreases;
                    report.loss
                }
                Learner::Sgd(opt, params) => {
                    let (loss, grads) = net
                        .loss_and_grad(params, &batch, Mode::Train, &mut rng)
                        .map_err(|e| at_step(e, step + 1))?;
                    opt.step(params, &grads).map_err(|e| at_step(e, step + 1))?;
                    loss
                }
                Learner::Adam(opt, params) => {
                    let (loss, grads) = net
                        .loss_and_grad(params, &batch, Mode::Train, &mut rng)
                        .map_err(|e| at_step(e, step + 1))?;
                    opt.step(params, &grads).map_err(|e| at_step(e, step + 1))?;
                    loss
                }
            };
            step += 1;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {step}")));
            }
            loss_sum += loss;
            loss_count += 1;

            if marks.binary_search(&(i + 1)).is_err() {
                continue;
            }
            let current = current_state(&learner, &state)?;
            let weights = current.means();
            let mut row = MetricsRow {
                step,
                epoch: epoch + 1,
                train_loss: loss_sum / loss_count as f64,
                val_loss: mean_loss(&net, &weights, &data.val).map_err(|e| at_step(e, step))?,
                test_acc: None,
                data_nats: None,
                weight_kl_nats: None,
                weight_point_nats: None,
                total_nats: None,
                wall_ms: if cfg.record_wall_ms {
                    started.elapsed().as_millis() as u64
                } else {
                    0
                },
            };
            (loss_sum, loss_count) = (0.0, 0);
            if i + 1 == n_b {
                let eval =
                    evaluate(&net, &current, &data.test, cfg.eval_samples, cfg.seed).map_err(|e| at_step(e, step))?;
                let data_nats = data_message_length(&net, &weights, train).map_err(|e| at_step(e, step))?;
                let w = weight_message_length(&current, &reference)?;
                let report = LengthReport::new(train.len(), data_nats, w, WeightTerm::Kl, 0.0);
                row.test_acc = Some(eval.accuracy);
                row.data_nats = Some(report.data_nats);
                row.weight_kl_nats = Some(report.weight_kl_nats);
                row.weight_point_nats = Some(report.weight_point_nats);
                row.total_nats = Some(report.total_nats);
            }
            rows.push(row);
        }
    }
    assert_eq!(step, total_steps);

    let final_state = current_state(&learner, &state)?;
    let final_eval = evaluate(&net, &final_state, &data.test, cfg.eval_samples, cfg.seed)?;
    let meta = RunMeta {
        optimizer: cfg.optimizer,
        arch: cfg.arch.clone(),
        dropout: cfg.dropout,
        input_shape: net.input_shape().to_vec(),
    };
    let checkpoint = Checkpoint {
        state: final_state,
        seed: cfg.seed,
        meta: serde_json::to_value(&meta).expect("run description serializes"),
    };
    let (mut metrics_path, mut checkpoint_path) = (None, None);
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = dir.join("metrics.csv");
        emit_metrics(&rows, &m)?;
        let c = dir.join("checkpoint.bin");
        checkpoint.save(&c)?;
        metrics_path = Some(m);
        checkpoint_path = Some(c);
    }
    Ok(TrainOutcome {
        rows,
        steps: step,
        batches_per_epoch: n_b,
        epsilon,
        s_decreases,
        final_eval,
        checkpoint,
        metrics_path,
        checkpoint_path,
    })
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {step}")),
        other => other,
    }
}

/// The Gaussian state being trained, or the baseline's point weights with `s = 1`.
fn current_state<T: Scalar>(learner: &Learner<T>, state: &GaussianParamState<T>) -> Result<GaussianParamState<T>> {
    match learner {
        Learner::Bsgd(_) => Ok(state.clone()),
        Learner::Sgd(_, params) | Learner::Adam(_, params) => GaussianParamState::from_params(
            state
                .params()
                .iter()
                .zip(params)
                .map(|(p, w)| GaussianParam {
                    name: p.name.clone(),
                    mu: w.clone(),
                    s: Tensor::ones(w.shape()),
                })
                .collect(),
            state.batch_size(),
            state.n_epochs(),
        ),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rate: f64,
    pub replicas: usize,
    pub mean_errors: f64,
    pub std_errors: f64,
    pub nominal_params: usize,
    pub effective_params: f64,
}

/// Train `replicas` seeded copies of `cfg` at each dropout rate and report
/// test error statistics with the dropout-adjusted parameter count.
pub fn dropout_sweep<T: Scalar>(cfg: &TrainConfig, rates: &[f64], replicas: usize) -> Result<Vec<SweepRow>> {
    if rates.is_empty() || replicas == 0 {
        return Err(Error::Config("sweep needs at least one rate and one replica".into()));
    }
    if let Some(r) = rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Error::Config(format!("dropout rate {r} outside [0, 1)")));
    }
    let data = load_data::<T>(&cfg.data)?;
    let mut rows = Vec::with_capacity(rates.len());
    for &rate in rates {
        let mut errors = Vec::with_capacity(replicas);
        for r in 0..replicas {
            let seed = cfg.seed + r as u64;
            let run_cfg = TrainConfig {
                dropout: rate,
                seed,
                output_dir: cfg
                    .output_dir
                    .as_ref()
                    .map(|d| d.join(format!("rate-{rate}")).join(format!("seed-{seed}"))),
                ..cfg.clone()
            };
            errors.push(run_training_on(&run_cfg, &data)?.final_eval.error_count as f64);
        }
        let mean = errors.iter().sum::<f64>() / replicas as f64;
        let var = if replicas > 1 {
            errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (replicas - 1) as f64
        } else {
            0.0
        };
        let net = Network::new(cfg.arch.clone(), rate, data.train.sample_shape())?;
        let eff = effective_param_count(&net.layer_channels(), Convention::TwoSided)?;
        rows.push(SweepRow {
            rate,
            replicas,
            mean_errors: mean,
            std_errors: var.sqrt(),
            nominal_params: eff.nominal,
            effective_params: eff.effective,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "rate",
        "replicas",
        "mean_errors",
        "std_errors",
        "nominal_params",
        "effective_params",
    ])?;
    for r in rows {
        w.write_record([
            fmt_f(r.rate),
            r.replicas.to_string(),
            fmt_f(r.mean_errors),
            fmt_f(r.std_errors),
            r.nominal_params.to_string(),
            fmt_f(r.effective_params),
        ])?;
    }
    w.flush().map_err(|e| Error::io(PathBuf::from("<csv>"), e))
}
