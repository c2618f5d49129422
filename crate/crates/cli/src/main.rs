use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bsgd::bayes_lab::{
    error_scaling_report, log_exact_evidence, predictive_ratio, run_flow, synthetic_data, write_scaling_csv,
    FlowConfig, Likelihood, ScalarModel,
};
use bsgd::checkpoint::Checkpoint;
use bsgd::data::{Dataset, MnistFiles};
use bsgd::dropout_info::{effective_param_count, Convention};
use bsgd::nn::{ArchSpec, Network, ResNetSpec};
use bsgd::trainer::{
    dropout_sweep, evaluate_checkpoint, ledger_for_checkpoint, load_data, run_training, write_sweep_csv, TrainConfig,
};
use bsgd::{Error, ErrorKind, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "bsgd",
    version,
    about = "Bayesian SGD training, dropout analysis and evidence experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a TOML config; writes metrics.csv and checkpoint.bin.
    Train { config: PathBuf },
    /// Loss and accuracy of a checkpoint on a dataset.
    Eval {
        checkpoint: PathBuf,
        /// MNIST directory, or a training config whose dataset is used.
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Posterior weight samples to average; 0 evaluates at the mean.
        #[arg(long, default_value_t = 0)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train seeded replicas at each dropout rate and report test errors.
    SweepDropout {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        rates: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        replicas: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer effective parameter counts under dropout.
    DropoutInfo {
        /// `paper`, `desk`, `mlp:784,100,10`, or a training config.
        arch: String,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long, value_enum, default_value_t = ConventionArg::TwoSided)]
        convention: ConventionArg,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// One-dimensional evidence experiments with exact oracles.
    BayesLab {
        #[arg(value_enum)]
        scenario: Scenario,
        #[arg(long, value_enum, default_value_t = Family::GaussianMean)]
        family: Family,
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.2, 0.1, 0.02])]
        eps: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [10usize, 40, 160])]
        n: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Message-length breakdown of a checkpoint on a dataset.
    Ledger {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionArg {
    TwoSided,
    OneSided,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    /// Flow error against the exact evidence over an (ε, N) grid.
    ErrorScaling,
    /// Final flow Gaussian against the conjugate posterior for each factorization of T.
    Conjugate,
    /// Predictive density ratio against the closed-form Gaussian predictive.
    Predictive,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    GaussianMean,
    BernoulliLogit,
}

impl From<Family> for Likelihood {
    fn from(f: Family) -> Self {
        match f {
            Family::GaussianMean => Likelihood::GaussianMean,
            Family::BernoulliLogit => Likelihood::BernoulliLogit,
        }
    }
}

fn output(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(File::create(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_all(out: Option<&Path>, text: &str) -> Result<()> {
    let mut w = output(out)?;
    w.write_all(text.as_bytes())
        .and_then(|()| w.flush())
        .map_err(|e| Error::Io {
            path: out.map_or_else(|| PathBuf::from("<stdout>"), Path::to_path_buf),
            source: e,
        })
}

fn csv_string(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

fn fmt(x: f64) -> String {
    format!("{x:.9e}")
}

fn load_dataset(arg: &Path, split: Split) -> Result<Dataset<f64>> {
    if arg.is_dir() {
        let files = MnistFiles::in_dir(arg)?;
        return match split {
            Split::Test => files.load_test(),
            Split::Train => files.load_train(),
            Split::Val => Err(Error::Config("an MNIST directory has no validation split".into())),
        };
    }
    if arg.extension().is_some_and(|e| e == "toml") {
        let cfg = TrainConfig::load(arg)?;
        let data = load_data::<f64>(&cfg.data)?;
        return Ok(match split {
            Split::Train => data.train,
            Split::Val => data.val,
            Split::Test => data.test,
        });
    }
    Err(Error::Config(format!(
        "{} is neither an MNIST directory nor a .toml config",
        arg.display()
    )))
}

fn warn_if_paper_scale(arch: &ArchSpec) {
    if let ArchSpec::ResNet(spec) = arch {
        let paper = ResNetSpec::paper();
        if spec.width >= paper.width && spec.conv_blocks >= paper.conv_blocks {
            eprintln!("warning: full-size residual network; expect many hours per epoch on a CPU");
        }
    }
}

fn parse_arch(arg: &str) -> Result<(ArchSpec, f64, Vec<usize>)> {
    let mnist_shape = vec![1, 28, 28];
    if let Some(list) = arg.strip_prefix("mlp:") {
        let layers = list
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("bad layer list {list:?}: {e}")))?;
        let first = *layers.first().unwrap_or(&0);
        return Ok((ArchSpec::Mlp { layers }, 0.0, vec![1, 1, first]));
    }
    match arg {
        "paper" => Ok((ArchSpec::ResNet(ResNetSpec::paper()), 0.0, mnist_shape)),
        "desk" => Ok((ArchSpec::ResNet(ResNetSpec::desk()), 0.0, mnist_shape)),
        path if path.ends_with(".toml") => {
            let cfg = TrainConfig::load(path)?;
            let shape = match &cfg.arch {
                ArchSpec::Mlp { layers } if layers.first() != Some(&784) => vec![1, 1, layers[0]],
                _ => mnist_shape,
            };
            Ok((cfg.arch, cfg.dropout, shape))
        }
        other => Err(Error::Config(format!(
            "unknown architecture {other:?}; use paper, desk, mlp:<sizes> or a config path"
        ))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let mut cfg = TrainConfig::load(&config)?;
            if cfg.output_dir.is_none() {
                let stem = config
                    .file_stem()
                    .map_or("run".into(), |s| s.to_string_lossy().into_owned());
                cfg.output_dir = Some(PathBuf::from("runs").join(stem));
            }
            warn_if_paper_scale(&cfg.arch);
            let out = run_training::<f64>(&cfg)?;
            println!("optimizer      {}", cfg.optimizer.name());
            println!("steps          {}", out.steps);
            if let Some(eps) = out.epsilon {
                println!("epsilon        {eps}");
            }
            println!("test accuracy  {:.6}", out.final_eval.accuracy);
            println!("test errors    {}", out.final_eval.error_count);
            if let Some(p) = &out.metrics_path {
                println!("metrics        {}", p.display());
            }
            if let Some(p) = &out.checkpoint_path {
                println!("checkpoint     {}", p.display());
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            samples,
            out,
        } => {
            let ck = Checkpoint::<f64>::load(&checkpoint)?;
            let ds = load_dataset(&dataset, split)?;
            let r = evaluate_checkpoint(&ck, &ds, samples)?;
            let text = csv_string(
                &["n", "loss_per_sample", "accuracy", "error_count"],
                &[vec![
                    r.n.to_string(),
                    fmt(r.loss_per_sample),
                    fmt(r.accuracy),
                    r.error_count.to_string(),
                ]],
            );
            write_all(out.as_deref(), &text)
        }
        Command::SweepDropout {
            config,
            rates,
            replicas,
            out,
        } => {
            let cfg = TrainConfig::load(&config)?;
            warn_if_paper_scale(&cfg.arch);
            let rows = dropout_sweep::<f64>(&cfg, &rates, replicas)?;
            write_sweep_csv(&rows, output(out.as_deref())?)
        }
        Command::DropoutInfo {
            arch,
            dropout,
            convention,
            format,
        } => {
            let (spec, cfg_rate, shape) = parse_arch(&arch)?;
            let rate = dropout.unwrap_or(cfg_rate);
            let net = Network::new(spec, rate, &shape)?;
            let convention = match convention {
                ConventionArg::TwoSided => Convention::TwoSided,
                ConventionArg::OneSided => Convention::OneSided,
            };
            let eff = effective_param_count(&net.layer_channels(), convention)?;
            let text = match format {
                Format::Table => format!("layers {}  dropout {rate}\n{}", net.layer_count(), eff.render_table()),
                Format::Csv => eff.to_csv_string()?,
            };
            write_all(None, &text)
        }
        Command::BayesLab {
            scenario,
            family,
            eps,
            n,
            seed,
            out,
        } => {
            let family = Likelihood::from(family);
            let text = match scenario {
                Scenario::ErrorScaling => {
                    let rows = error_scaling_report(family, &eps, &n, seed)?;
                    return write_scaling_csv(&rows, output(out.as_deref())?);
                }
                Scenario::Conjugate => conjugate_table(seed)?,
                Scenario::Predictive => predictive_table(seed)?,
            };
            write_all(out.as_deref(), &text)
        }
        Command::Ledger {
            checkpoint,
            dataset,
            split,
            format,
        } => {
            let ck = Checkpoint::<f64>::load(&checkpoint)?;
            let ds = load_dataset(&dataset, split)?;
            let r = ledger_for_checkpoint(&ck, &ds)?;
            let text = match format {
                Format::Table => r.render(),
                Format::Csv => csv_string(
                    &[
                        "n_samples",
                        "data_nats",
                        "weight_kl_nats",
                        "weight_point_nats",
                        "total_nats",
                        "structural_nats",
                    ],
                    &[vec![
                        r.n_samples.to_string(),
                        fmt(r.data_nats),
                        fmt(r.weight_kl_nats),
                        fmt(r.weight_point_nats),
                        fmt(r.total_nats),
                        fmt(r.structural_nats),
                    ]],
                ),
            };
            write_all(None, &text)
        }
    }
}

fn conjugate_model(seed: u64) -> Result<ScalarModel> {
    ScalarModel::new(
        0.0,
        1.0,
        Likelihood::GaussianMean,
        synthetic_data(Likelihood::GaussianMean, 9, seed),
    )
}

fn conjugate_table(seed: u64) -> Result<String> {
    let model = conjugate_model(seed)?;
    let (post_mu, post_var) = model.conjugate_posterior().expect("gaussian-mean model is conjugate");
    let exact = model
        .conjugate_log_evidence()
        .expect("gaussian-mean model is conjugate");
    let mut rows = Vec::new();
    for (n_epochs, n_batches) in [(1usize, 9usize), (3, 3), (9, 1)] {
        let trace = run_flow(&model, &FlowConfig::exact(n_epochs, Some(9 / n_batches)))?;
        let last = trace.last();
        rows.push(vec![
            n_epochs.to_string(),
            n_batches.to_string(),
            trace.steps().to_string(),
            fmt(last.sigma * last.sigma),
            fmt(post_var),
            fmt(last.mu),
            fmt(post_mu),
            fmt(trace.log_evidence),
            fmt(exact),
        ]);
    }
    Ok(csv_string(
        &[
            "n_epochs",
            "n_batches",
            "T",
            "sigma_sq",
            "posterior_var",
            "mu",
            "posterior_mean",
            "log_evidence",
            "exact_log_evidence",
        ],
        &rows,
    ))
}

fn predictive_table(seed: u64) -> Result<String> {
    let model = conjugate_model(seed)?;
    let (m, v) = model.conjugate_posterior().expect("gaussian-mean model is conjugate");
    log_exact_evidence(&model)?;
    let mut rows = Vec::new();
    for i in 0..20 {
        let x0 = -3.0 + 7.0 * i as f64 / 19.0;
        let pv = v + 1.0;
        let closed = (-(x0 - m).powi(2) / (2.0 * pv)).exp() / (2.0 * std::f64::consts::PI * pv).sqrt();
        let ratio = predictive_ratio(&model, x0)?;
        rows.push(vec![fmt(x0), fmt(ratio), fmt(closed), fmt((ratio - closed).abs())]);
    }
    Ok(csv_string(&["x0", "ratio", "closed_form", "abs_diff"], &rows))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            })
        }
    }
}
