//! Command implementations behind the `itsc` binary.
//!
//! Each command is a plain function so runs can also be driven in-process.
//! Training and evaluation use `f32`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use itsc_core::checkpoint;
use itsc_core::data::mask::{apply_masks, MaskSet};
use itsc_core::data::{load_ucr_dir, rng_for, znormalize, DatasetBundle, TimeSeriesSample};
use itsc_core::training::{history_csv, predict, EpochReport};
use itsc_core::{evaluate, train, Error, ItscModel, MetricsReport, ModelSpec, Result, RunConfig};

/// Environment variable naming the directory relative output paths resolve against.
pub const OUTPUT_ROOT_ENV: &str = "ITSC_OUTPUT_ROOT";

/// RNG stream used for weight initialization.
pub const INIT_STREAM: u64 = 0;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const CONFIG_FILE: &str = "config.txt";

/// Process exit code for an error: 2 for usage and validation problems,
/// 3 for runtime and numeric failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } | Error::DegenerateBatch { .. } | Error::MissingCache(_) => 3,
        Error::Io(e) if e.kind() != std::io::ErrorKind::NotFound => 3,
        _ => 2,
    }
}

/// Resolves a relative output path against `$ITSC_OUTPUT_ROOT` when set.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskOutcome {
    pub path: PathBuf,
    pub written: bool,
    pub missing_fraction: f64,
}

/// Creates the mask cache for `(dataset, ratio, seed)`, or verifies an
/// existing one byte for byte.
pub fn cmd_mask(dataset_dir: &Path, ratio: f64, seed: u64) -> Result<MaskOutcome> {
    itsc_core::data::mask::validate_ratio(ratio)?;
    let bundle = load_ucr_dir(dataset_dir)?;
    let masks = MaskSet::generate(&bundle, ratio, seed)?;
    let path = MaskSet::default_path(dataset_dir, &bundle.name, ratio, seed);
    let written = masks.write_or_verify(&path)?;
    Ok(MaskOutcome {
        path,
        written,
        missing_fraction: masks.missing_fraction(),
    })
}

/// Loads the dataset named by `cfg`, applies its cached mask (creating the
/// cache if absent) and normalizes when configured.
pub fn prepare_data(cfg: &RunConfig) -> Result<DatasetBundle> {
    let outcome = cmd_mask(&cfg.dataset, cfg.missing_ratio, cfg.mask_seed)?;
    if outcome.written {
        info!("wrote mask cache {}", outcome.path.display());
    }
    let bundle = load_ucr_dir(&cfg.dataset)?;
    let masks = MaskSet::read(&outcome.path, bundle.train.len())?;
    let bundle = apply_masks(bundle, &masks)?;
    Ok(if cfg.normalize { znormalize(bundle) } else { bundle })
}

/// Freshly initialized model for `spec`, seeded from the run seed.
pub fn init_model(spec: ModelSpec, seed: u64) -> Result<ItscModel<f32>> {
    ItscModel::new(spec, &mut rng_for(seed, INIT_STREAM))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub status: String,
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub dataset: String,
    pub num_train: usize,
    pub num_test: usize,
    pub missing_fraction: f64,
    pub batch_size: usize,
    pub final_train_accuracy: Option<f64>,
    pub metrics: Option<MetricsReport>,
    pub loss_history_path: PathBuf,
    pub checkpoint_path: Option<PathBuf>,
    pub epoch_seconds: Vec<f64>,
}

impl RunReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let rows = [
            ("status", self.status.clone()),
            ("dataset", self.dataset.clone()),
            ("config_hash", self.config_hash.clone()),
            ("train/test", format!("{}/{}", self.num_train, self.num_test)),
            ("missing", format!("{:.4}", self.missing_fraction)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs_run", self.epoch_seconds.len().to_string()),
            (
                "seconds",
                format!("{:.1}", self.epoch_seconds.iter().sum::<f64>()),
            ),
            (
                "train_acc",
                self.final_train_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
            ),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<16}{v}");
        }
        if let Some(m) = &self.metrics {
            out.push_str("\ntest metrics\n");
            out.push_str(&m.table());
        }
        out
    }
}

fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    std::fs::write(dir.join(REPORT_JSON), serde_json::to_string_pretty(report)?)?;
    std::fs::write(dir.join(REPORT_TEXT), report.table())?;
    Ok(())
}

/// Everything a finished training run produced.
pub struct TrainOutcome {
    pub report: RunReport,
    pub model: ItscModel<f32>,
    pub history: Vec<EpochReport>,
    pub output_dir: PathBuf,
}

/// Trains per `cfg`, then writes checkpoint, loss CSV, config and reports
/// into the resolved output directory. On a numeric failure the loss CSV
/// and a report covering the completed epochs are still written.
pub fn cmd_train(cfg: &RunConfig, mut on_epoch: impl FnMut(&EpochReport)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let bundle = prepare_data(cfg)?;
    let out_dir = resolve_output(&cfg.output_dir);
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join(CONFIG_FILE), cfg.to_text())?;

    let spec = cfg.model_spec(bundle.dims, bundle.num_classes);
    let mut model = init_model(spec, cfg.seed)?;
    let train_cfg = cfg.train_config(bundle.train.len());
    let config: BTreeMap<String, String> = cfg.pairs().into_iter().collect();
    let hash = cfg.hash();
    info!(
        "training {} ({} train, {} test, batch {}, config {})",
        bundle.name,
        bundle.train.len(),
        bundle.test.len(),
        train_cfg.batch_size,
        &hash[..12]
    );

    let mut history = Vec::new();
    let result = train(&mut model, &bundle.train, &train_cfg, |e| {
        history.push(e.clone());
        on_epoch(e);
    });
    let loss_path = out_dir.join(LOSS_FILE);
    std::fs::write(&loss_path, history_csv(&history))?;
    let mut report = RunReport {
        status: "completed".into(),
        config_hash: hash.clone(),
        config: config.clone(),
        dataset: bundle.name.clone(),
        num_train: bundle.train.len(),
        num_test: bundle.test.len(),
        missing_fraction: bundle.missing_fraction(),
        batch_size: train_cfg.batch_size,
        final_train_accuracy: history.last().map(|e| e.train_acc),
        metrics: None,
        loss_history_path: loss_path,
        checkpoint_path: None,
        epoch_seconds: history.iter().map(|e| e.seconds).collect(),
    };
    if let Err(e) = result {
        report.status = format!("failed: {e}");
        write_report(&out_dir, &report)?;
        return Err(e);
    }

    let ckpt = out_dir.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, &mut model, cfg.seed, &hash, config)?;
    report.checkpoint_path = Some(ckpt);
    report.metrics = Some(evaluate(&mut model, &bundle.test)?);
    write_report(&out_dir, &report)?;
    Ok(TrainOutcome {
        report,
        model,
        history,
        output_dir: out_dir,
    })
}

/// Overrides accepted by `eval` and `export-features`.
#[derive(Debug, Clone, Default)]
pub struct DataOverrides {
    pub dataset: Option<PathBuf>,
    pub missing_ratio: Option<f64>,
    pub mask_seed: Option<u64>,
    /// Permit data settings that differ from the training run.
    pub allow_mismatch: bool,
}

/// A checkpoint plus the run configuration recovered from its header.
pub struct LoadedRun {
    pub model: ItscModel<f32>,
    pub config: RunConfig,
    pub config_hash: String,
}

pub fn load_run(path: &Path) -> Result<LoadedRun> {
    let ckpt = checkpoint::load::<f32>(path)?;
    let mut config = RunConfig::default();
    for (k, v) in &ckpt.header.config {
        config.set(k, v)?;
    }
    if config.hash() != ckpt.header.config_hash {
        return Err(Error::Checkpoint(
            "embedded configuration does not match its recorded hash".into(),
        ));
    }
    Ok(LoadedRun {
        model: ckpt.model,
        config,
        config_hash: ckpt.header.config_hash,
    })
}

/// Data for evaluating `run`: the training configuration with overrides.
/// Differences from the training run are refused unless explicitly allowed.
pub fn data_for(run: &LoadedRun, overrides: &DataOverrides) -> Result<DatasetBundle> {
    let mut cfg = run.config.clone();
    if let Some(d) = &overrides.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(r) = overrides.missing_ratio {
        cfg.missing_ratio = r;
    }
    if let Some(s) = overrides.mask_seed {
        cfg.mask_seed = s;
    }
    let changed = cfg.missing_ratio != run.config.missing_ratio || cfg.mask_seed != run.config.mask_seed;
    if changed && !overrides.allow_mismatch {
        return Err(Error::Config(format!(
            "data settings differ from the training run (config {}); pass --allow-mismatch to evaluate anyway",
            &run.config_hash[..12]
        )));
    }
    let bundle = prepare_data(&cfg)?;
    let spec = &run.model.spec;
    if bundle.dims != spec.input_dims || bundle.num_classes != spec.num_classes {
        return Err(Error::Shape {
            context: "checkpoint vs dataset",
            expected: format!("{} dims, {} classes", spec.input_dims, spec.num_classes),
            actual: format!("{} dims, {} classes", bundle.dims, bundle.num_classes),
        });
    }
    Ok(bundle)
}

pub fn cmd_eval(checkpoint: &Path, overrides: &DataOverrides) -> Result<(MetricsReport, String)> {
    let mut run = load_run(checkpoint)?;
    let bundle = data_for(&run, overrides)?;
    let metrics = evaluate(&mut run.model, &bundle.test)?;
    Ok((metrics, run.config_hash))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            _ => Err(format!("unknown split {s:?} (train, test, all)")),
        }
    }
}

/// Pooled pre-logit features as CSV: `id,label,f0,...`.
pub fn cmd_export_features(checkpoint: &Path, overrides: &DataOverrides, split: Split) -> Result<String> {
    let mut run = load_run(checkpoint)?;
    let bundle = data_for(&run, overrides)?;
    let samples: Vec<TimeSeriesSample> = match split {
        Split::Train => bundle.train,
        Split::Test => bundle.test,
        Split::All => bundle.train.into_iter().chain(bundle.test).collect(),
    };
    let preds = predict(&mut run.model, &samples, 128)?;
    let dim = preds.features.ncols();
    let mut out = String::from("id,label");
    for j in 0..dim {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for (s, row) in samples.iter().zip(preds.features.rows()) {
        let _ = write!(out, "{},{}", s.id, s.label);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}
