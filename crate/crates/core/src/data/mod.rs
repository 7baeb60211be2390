//! Dataset ingestion, masking, normalization and batching.
//!
//! A series is stored as `[time, dims]` values plus a `{0, 1}` mask of the
//! same shape; 1 means observed. The mask is authoritative: values at masked
//! positions are stored as 0 and never read.

pub mod mask;
pub mod synthetic;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Real;

pub use mask::{apply_mcar, MaskSet};

/// Standard deviations below this are treated as constant series.
pub const MIN_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesSample {
    pub id: String,
    /// `[time, dims]`; 0 wherever the mask is 0.
    pub values: Array2<f64>,
    /// `[time, dims]` of {0, 1}.
    pub mask: Array2<u8>,
    pub label: usize,
}

impl TimeSeriesSample {
    /// Builds a sample from raw values, treating NaN as missing.
    pub fn from_raw(id: impl Into<String>, raw: Array2<f64>, label: usize) -> Self {
        let mask = raw.mapv(|v| u8::from(!v.is_nan()));
        let values = raw.mapv(|v| if v.is_nan() { 0.0 } else { v });
        Self {
            id: id.into(),
            values,
            mask,
            label,
        }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dims(&self) -> usize {
        self.values.ncols()
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// Mask/storage consistency: missing positions hold 0, masks are binary.
    pub fn is_consistent(&self) -> bool {
        self.values.dim() == self.mask.dim()
            && self
                .values
                .iter()
                .zip(self.mask.iter())
                .all(|(&v, &m)| m <= 1 && v.is_finite() && (m == 1 || v == 0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub train_path: String,
    pub test_path: String,
    /// SHA-256 over the train file bytes followed by the test file bytes.
    pub checksum: String,
}

/// Mean and standard deviation used to normalize one series, per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub train: Vec<SeriesStats>,
    pub test: Vec<SeriesStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub name: String,
    pub train: Vec<TimeSeriesSample>,
    pub test: Vec<TimeSeriesSample>,
    pub num_classes: usize,
    pub series_len: usize,
    pub dims: usize,
    /// Original label tokens, indexed by remapped class.
    pub class_names: Vec<String>,
    pub provenance: Option<Provenance>,
    pub normalization: Option<NormalizationStats>,
}

impl DatasetBundle {
    /// Assembles a bundle and checks shape and label consistency.
    pub fn new(
        name: impl Into<String>,
        train: Vec<TimeSeriesSample>,
        test: Vec<TimeSeriesSample>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let first = train
            .first()
            .or(test.first())
            .ok_or_else(|| Error::Empty("dataset has no samples".into()))?;
        let (series_len, dims) = first.values.dim();
        let num_classes = class_names.len();
        for s in train.iter().chain(&test) {
            if s.values.dim() != (series_len, dims) || s.mask.dim() != (series_len, dims) {
                return Err(crate::error::shape_err(
                    "dataset sample",
                    (series_len, dims),
                    s.values.dim(),
                ));
            }
            if s.label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    classes: num_classes,
                });
            }
        }
        Ok(Self {
            name: name.into(),
            train,
            test,
            num_classes,
            series_len,
            dims,
            class_names,
            provenance: None,
            normalization: None,
        })
    }

    pub fn masks_all_observed(&self) -> bool {
        self.train
            .iter()
            .chain(&self.test)
            .all(|s| s.mask.iter().all(|&m| m == 1))
    }

    /// Fraction of positions (train and test) that are missing.
    pub fn missing_fraction(&self) -> f64 {
        let total: usize = self.train.iter().chain(&self.test).map(|s| s.mask.len()).sum();
        let observed: usize = self.train.iter().chain(&self.test).map(|s| s.observed_count()).sum();
        if total == 0 {
            0.0
        } else {
            (total - observed) as f64 / total as f64
        }
    }
}

/// One parsed row of a UCR file.
#[derive(Debug, Clone, PartialEq)]
pub struct UcrRow {
    pub label: String,
    pub values: Vec<f64>,
}

fn split_fields(line: &str) -> Vec<&str> {
    if line.contains('\t') {
        line.split('\t').map(str::trim).collect()
    } else if line.contains(',') {
        line.split(',').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

fn parse_value(token: &str) -> Option<f64> {
    if token.eq_ignore_ascii_case("nan") {
        return Some(f64::NAN);
    }
    token.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Parses a label-first UCR file (tab, comma or whitespace delimited).
/// `NaN` tokens (any case) mark missing values.
pub fn load_ucr(path: &Path) -> Result<Vec<UcrRow>> {
    let text = std::fs::read_to_string(path)?;
    parse_ucr(&text, &path.display().to_string())
}

pub fn parse_ucr(text: &str, source: &str) -> Result<Vec<UcrRow>> {
    let mut rows = Vec::new();
    let mut width: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_fields(line);
        let row_no = i + 1;
        if fields.len() < 2 {
            return Err(Error::Parse {
                path: source.into(),
                row: row_no,
                column: fields.len() + 1,
                reason: "row needs a label and at least one value".into(),
            });
        }
        let values = fields[1..]
            .iter()
            .enumerate()
            .map(|(j, tok)| {
                parse_value(tok).ok_or_else(|| Error::Parse {
                    path: source.into(),
                    row: row_no,
                    column: j + 2,
                    reason: format!("unparseable value {tok:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        match width {
            Some(w) if w != values.len() => {
                return Err(Error::Parse {
                    path: source.into(),
                    row: row_no,
                    column: values.len() + 1,
                    reason: format!("ragged row: {} values, expected {w}", values.len()),
                })
            }
            _ => width = Some(values.len()),
        }
        let label = fields[0].to_string();
        if label.is_empty() {
            return Err(Error::Parse {
                path: source.into(),
                row: row_no,
                column: 1,
                reason: "empty label".into(),
            });
        }
        rows.push(UcrRow { label, values });
    }
    if rows.is_empty() {
        return Err(Error::Empty(format!("{source} has no data rows")));
    }
    Ok(rows)
}

/// Sorted distinct labels: numerically if every label parses as a number,
/// lexicographically otherwise.
fn sorted_labels<'a>(labels: impl Iterator<Item = &'a str>) -> Vec<String> {
    let set: BTreeSet<&str> = labels.collect();
    let mut out: Vec<String> = set.into_iter().map(String::from).collect();
    if out.iter().all(|l| l.parse::<f64>().is_ok()) {
        out.sort_by(|a, b| {
            let (x, y) = (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap());
            x.total_cmp(&y)
        });
        out.dedup_by(|a, b| a.parse::<f64>().unwrap() == b.parse::<f64>().unwrap());
    }
    out
}

fn class_index(classes: &[String], label: &str) -> usize {
    if let Ok(v) = label.parse::<f64>() {
        if let Some(i) = classes
            .iter()
            .position(|c| c.parse::<f64>().map(|x| x == v).unwrap_or(false))
        {
            return i;
        }
    }
    classes.iter().position(|c| c == label).expect("label was collected")
}

fn rows_to_samples(rows: &[UcrRow], classes: &[String], split: &str) -> Vec<TimeSeriesSample> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let raw = Array2::from_shape_vec((r.values.len(), 1), r.values.clone())
                .expect("row length matches");
            TimeSeriesSample::from_raw(format!("{split}-{i}"), raw, class_index(classes, &r.label))
        })
        .collect()
}

/// Loads a train/test pair, remapping labels to `0..C` over their union.
pub fn load_ucr_split(name: &str, train_path: &Path, test_path: &Path) -> Result<DatasetBundle> {
    let train_bytes = std::fs::read(train_path)?;
    let test_bytes = std::fs::read(test_path)?;
    let decode = |bytes: &[u8], path: &Path| {
        std::str::from_utf8(bytes)
            .map_err(|e| Error::Parse {
                path: path.display().to_string(),
                row: 0,
                column: 0,
                reason: e.to_string(),
            })
            .and_then(|t| parse_ucr(t, &path.display().to_string()))
    };
    let train_rows = decode(&train_bytes, train_path)?;
    let test_rows = decode(&test_bytes, test_path)?;
    if train_rows[0].values.len() != test_rows[0].values.len() {
        return Err(Error::Parse {
            path: test_path.display().to_string(),
            row: 1,
            column: test_rows[0].values.len() + 1,
            reason: format!(
                "series length {} differs from train length {}",
                test_rows[0].values.len(),
                train_rows[0].values.len()
            ),
        });
    }
    let classes = sorted_labels(
        train_rows
            .iter()
            .chain(&test_rows)
            .map(|r| r.label.as_str()),
    );
    let train = rows_to_samples(&train_rows, &classes, "train");
    let test = rows_to_samples(&test_rows, &classes, "test");
    let mut bundle = DatasetBundle::new(name, train, test, classes)?;
    let mut h = Sha256::new();
    h.update(&train_bytes);
    h.update(&test_bytes);
    bundle.provenance = Some(Provenance {
        train_path: train_path.display().to_string(),
        test_path: test_path.display().to_string(),
        checksum: hex::encode(h.finalize()),
    });
    Ok(bundle)
}

/// Locates `<Name>_TRAIN.{tsv,txt,csv}` and `<Name>_TEST.*` inside `dir`.
pub fn find_ucr_files(dir: &Path) -> Result<(String, PathBuf, PathBuf)> {
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("cannot derive dataset name from {}", dir.display())))?
        .to_string();
    let find = |split: &str| {
        ["tsv", "txt", "csv"]
            .iter()
            .map(|ext| dir.join(format!("{name}_{split}.{ext}")))
            .find(|p| p.is_file())
            .ok_or_else(|| {
                Error::Config(format!("no {name}_{split}.{{tsv,txt,csv}} in {}", dir.display()))
            })
    };
    Ok((name.clone(), find("TRAIN")?, find("TEST")?))
}

/// Loads a UCR-layout dataset directory.
pub fn load_ucr_dir(dir: &Path) -> Result<DatasetBundle> {
    let (name, train, test) = find_ucr_files(dir)?;
    load_ucr_split(&name, &train, &test)
}

/// Writes samples in UCR TSV layout (label first, NaN at masked positions).
pub fn write_ucr(path: &Path, samples: &[TimeSeriesSample], class_names: &[String]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        if s.dims() != 1 {
            return Err(Error::Config("UCR files hold univariate series only".into()));
        }
        out.push_str(&class_names[s.label]);
        for (v, m) in s.values.column(0).iter().zip(s.mask.column(0).iter()) {
            if *m == 1 {
                write!(out, "\t{v}").expect("string write");
            } else {
                out.push_str("\tNaN");
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn normalize_sample(s: &mut TimeSeriesSample) -> SeriesStats {
    let mut stats = SeriesStats {
        mean: Vec::with_capacity(s.dims()),
        std: Vec::with_capacity(s.dims()),
    };
    for j in 0..s.dims() {
        let mut col = s.values.column_mut(j);
        let mask = s.mask.column(j);
        let observed: Vec<f64> = col
            .iter()
            .zip(mask.iter())
            .filter(|(_, &m)| m == 1)
            .map(|(&v, _)| v)
            .collect();
        let n = observed.len();
        let (mean, std) = if n == 0 {
            (0.0, 1.0)
        } else {
            let mean = observed.iter().sum::<f64>() / n as f64;
            let var = observed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            (mean, if std < MIN_STD { 1.0 } else { std })
        };
        for (v, &m) in col.iter_mut().zip(mask.iter()) {
            *v = if m == 1 { (*v - mean) / std } else { 0.0 };
        }
        stats.mean.push(mean);
        stats.std.push(std);
    }
    stats
}

/// Per-series, per-dimension z-normalization over observed positions only.
/// Constant series (std below [`MIN_STD`]) are only centered.
pub fn znormalize(mut bundle: DatasetBundle) -> DatasetBundle {
    let train = bundle.train.iter_mut().map(normalize_sample).collect();
    let test = bundle.test.iter_mut().map(normalize_sample).collect();
    bundle.normalization = Some(NormalizationStats { train, test });
    bundle
}

/// Shuffled index batches for one epoch; the last partial batch is kept.
pub fn batch_iter(num_samples: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..num_samples).collect();
    let mut rng = rng_for(seed, SHUFFLE_STREAM_BASE + epoch);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub(crate) const SHUFFLE_STREAM_BASE: u64 = 1 << 32;

/// Independent deterministic generator for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stacks samples into `[batch, time, dims]` values and mask arrays.
pub fn stack_batch<F: Real>(samples: &[&TimeSeriesSample]) -> (Array3<F>, Array3<F>, Vec<usize>) {
    let (t, n) = samples[0].values.dim();
    let mut values = Array3::<F>::zeros((samples.len(), t, n));
    let mut mask = Array3::<F>::zeros((samples.len(), t, n));
    for (i, s) in samples.iter().enumerate() {
        values
            .index_axis_mut(Axis(0), i)
            .assign(&s.values.mapv(F::lit));
        mask.index_axis_mut(Axis(0), i)
            .assign(&s.mask.mapv(|m| F::lit(m as f64)));
    }
    let labels = samples.iter().map(|s| s.label).collect();
    (values, mask, labels)
}
