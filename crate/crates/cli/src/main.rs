use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use itsc_cli::{
    cmd_eval, cmd_export_features, cmd_mask, cmd_train, exit_code, resolve_output, DataOverrides, Split,
};
use itsc_core::data::synthetic;
use itsc_core::{Error, RunConfig};

#[derive(Parser)]
#[command(name = "itsc", version, about = "Incomplete time series classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create (or verify) the cached missingness mask for a dataset.
    Mask {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write checkpoint, loss history and reports.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Write the JSON report here (default: next to the checkpoint).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write pooled pre-logit features as CSV.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "all")]
        split: Split,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write a synthetic benchmark dataset in UCR layout.
    Generate {
        #[arg(value_enum)]
        kind: Synthetic,
        /// Parent directory; the dataset goes into `<out>/<Name>/`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Synthetic {
    Cbf,
    TwoPatterns,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory (default: the one the checkpoint was trained on).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    mask_seed: Option<u64>,
    /// Accept data settings that differ from the training run.
    #[arg(long)]
    allow_mismatch: bool,
}

impl DataArgs {
    fn overrides(&self) -> DataOverrides {
        DataOverrides {
            dataset: self.dataset.clone(),
            missing_ratio: self.ratio,
            mask_seed: self.mask_seed,
            allow_mismatch: self.allow_mismatch,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key=value configuration file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    missing_ratio: Option<f64>,
    #[arg(long)]
    mask_seed: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long)]
    branch_channels: Option<usize>,
    #[arg(long)]
    dilation: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Replace the imputer with zero filling.
    #[arg(long)]
    zero_fill: bool,
    /// Replace the feature learner with a linear head on the last hidden state.
    #[arg(long)]
    linear_head: bool,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Any other key, as key=value; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    extra: Vec<String>,
}

impl TrainArgs {
    fn to_config(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let flags: [(&str, Option<String>); 15] = [
            ("dataset", self.dataset.as_ref().map(|p| p.display().to_string())),
            ("missing_ratio", self.missing_ratio.map(|v| v.to_string())),
            ("mask_seed", self.mask_seed.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("hidden_size", self.hidden_size.map(|v| v.to_string())),
            ("num_layers", self.num_layers.map(|v| v.to_string())),
            ("scales", self.scales.map(|v| v.to_string())),
            ("branch_channels", self.branch_channels.map(|v| v.to_string())),
            ("dilation", self.dilation.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("beta", self.beta.map(|v| v.to_string())),
            ("learning_rate", self.lr.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("output_dir", self.output_dir.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        if self.zero_fill {
            cfg.zero_fill = true;
        }
        if self.linear_head {
            cfg.linear_head = true;
        }
        for kv in &self.extra {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        if cfg.dataset.as_os_str().is_empty() {
            return Err(Error::Config("no dataset given (--dataset or config file)".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Mask { dataset, ratio, seed } => {
            let out = cmd_mask(&dataset, ratio, seed)?;
            let verb = if out.written { "wrote" } else { "verified" };
            println!(
                "{verb} {} (missing fraction {:.4})",
                out.path.display(),
                out.missing_fraction
            );
        }
        Command::Train(args) => {
            let cfg = args.to_config()?;
            let outcome = cmd_train(&cfg, |e| {
                info!(
                    "epoch {:>4}  l_imp {:.5}  l_cls {:.5}  l_total {:.5}  train_acc {:.4}  {:.2}s",
                    e.epoch, e.l_imp, e.l_cls, e.l_total, e.train_acc, e.seconds
                );
            })?;
            print!("{}", outcome.report.table());
            println!("outputs in {}", outcome.output_dir.display());
        }
        Command::Eval {
            checkpoint,
            data,
            report,
        } => {
            let (metrics, hash) = cmd_eval(&checkpoint, &data.overrides())?;
            let path = report.map(|p| resolve_output(&p)).unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .unwrap_or(std::path::Path::new("."))
                    .join("eval.json")
            });
            let json = serde_json::json!({ "config_hash": hash, "metrics": metrics });
            std::fs::write(&path, serde_json::to_string_pretty(&json)?)?;
            std::fs::write(path.with_extension("txt"), metrics.table())?;
            print!("{}", metrics.table());
        }
        Command::ExportFeatures {
            checkpoint,
            data,
            split,
            output,
        } => {
            let csv = cmd_export_features(&checkpoint, &data.overrides(), split)?;
            let output = resolve_output(&output);
            if let Some(parent) = output.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&output, csv)?;
            println!("wrote {}", output.display());
        }
        Command::Generate {
            kind,
            out,
            seed,
            train,
            test,
        } => {
            let bundle = match kind {
                Synthetic::Cbf => synthetic::cbf(train.unwrap_or(30), test.unwrap_or(900), seed)?,
                Synthetic::TwoPatterns => {
                    synthetic::two_patterns(train.unwrap_or(1000), test.unwrap_or(4000), seed)?
                }
            };
            let dir = synthetic::write_ucr_dir(&bundle, &resolve_output(&out))?;
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
