//! Missing-completely-at-random mask synthesis and the on-disk mask cache.
//!
//! Every `(sample, time, dim)` position is dropped independently with
//! probability `ratio`. Train and test masks come from separate streams of
//! the same seed. A sample whose mask came out fully missing is redrawn.
//!
//! Cache file layout (ASCII, `\n` line endings):
//!
//! ```text
//! <dataset>,<ratio>,<seed>,<T>,<n>,<N>
//! <row for sample 0>
//! ...
//! <row for sample N-1>
//! ```
//!
//! `N` counts train samples followed by test samples, in dataset order. Each
//! row lists the `T * n` mask bits as comma-separated `0`/`1`, dimension-major
//! (all time steps of dimension 0, then dimension 1, ...). `<ratio>` is the
//! shortest decimal that round-trips the `f64`.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;

use super::{rng_for, DatasetBundle, TimeSeriesSample};
use crate::error::{Error, Result};

const TRAIN_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub dataset: String,
    pub ratio: f64,
    pub seed: u64,
    pub series_len: usize,
    pub dims: usize,
    pub train: Vec<Array2<u8>>,
    pub test: Vec<Array2<u8>>,
    /// Number of per-sample redraws caused by fully-missing draws.
    pub resamples: usize,
}

pub fn validate_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!(
            "missing ratio must lie strictly between 0 and 1, got {ratio}"
        )));
    }
    Ok(())
}

fn draw_split<R: Rng>(
    count: usize,
    shape: (usize, usize),
    ratio: f64,
    rng: &mut R,
    resamples: &mut usize,
) -> Vec<Array2<u8>> {
    (0..count)
        .map(|_| loop {
            let m = Array2::from_shape_simple_fn(shape, || u8::from(!rng.gen_bool(ratio)));
            if m.iter().any(|&b| b == 1) {
                break m;
            }
            *resamples += 1;
        })
        .collect()
}

impl MaskSet {
    /// Draws masks for every train and test sample of `bundle`.
    pub fn generate(bundle: &DatasetBundle, ratio: f64, seed: u64) -> Result<Self> {
        validate_ratio(ratio)?;
        let shape = (bundle.series_len, bundle.dims);
        let mut resamples = 0;
        let train = draw_split(
            bundle.train.len(),
            shape,
            ratio,
            &mut rng_for(seed, TRAIN_STREAM),
            &mut resamples,
        );
        let test = draw_split(
            bundle.test.len(),
            shape,
            ratio,
            &mut rng_for(seed, TEST_STREAM),
            &mut resamples,
        );
        Ok(Self {
            dataset: bundle.name.clone(),
            ratio,
            seed,
            series_len: bundle.series_len,
            dims: bundle.dims,
            train,
            test,
            resamples,
        })
    }

    pub fn missing_fraction(&self) -> f64 {
        let (mut total, mut zeros) = (0usize, 0usize);
        for m in self.train.iter().chain(&self.test) {
            total += m.len();
            zeros += m.iter().filter(|&&b| b == 0).count();
        }
        zeros as f64 / total.max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let n_rows = self.train.len() + self.test.len();
        let mut out = format!(
            "{},{},{},{},{},{}\n",
            self.dataset, self.ratio, self.seed, self.series_len, self.dims, n_rows
        );
        let mut row = Vec::with_capacity(self.series_len * self.dims);
        for m in self.train.iter().chain(&self.test) {
            row.clear();
            for j in 0..self.dims {
                for t in 0..self.series_len {
                    row.push(if m[[t, j]] == 1 { "1" } else { "0" });
                }
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses a cache file. `train_count` splits the rows into train and test.
    pub fn parse(text: &str, train_count: usize) -> Result<Self> {
        let bad = |msg: String| Error::MaskCache(msg);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let fields: Vec<&str> = header.split(',').collect();
        if fields.len() != 6 {
            return Err(bad(format!("header needs 6 fields, found {}", fields.len())));
        }
        let num = |i: usize, what: &str| -> Result<usize> {
            fields[i]
                .parse()
                .map_err(|_| bad(format!("bad {what} {:?} in header", fields[i])))
        };
        let ratio: f64 = fields[1]
            .parse()
            .map_err(|_| bad(format!("bad ratio {:?}", fields[1])))?;
        let seed: u64 = fields[2]
            .parse()
            .map_err(|_| bad(format!("bad seed {:?}", fields[2])))?;
        let (t_len, dims, n_rows) = (num(3, "T")?, num(4, "n")?, num(5, "N")?);
        if train_count > n_rows {
            return Err(bad(format!("{train_count} train samples but only {n_rows} rows")));
        }
        let mut masks = Vec::with_capacity(n_rows);
        for (i, line) in lines.enumerate() {
            let bits: Vec<&str> = line.split(',').collect();
            if bits.len() != t_len * dims {
                return Err(bad(format!(
                    "row {} has {} entries, expected {}",
                    i + 2,
                    bits.len(),
                    t_len * dims
                )));
            }
            let mut m = Array2::<u8>::zeros((t_len, dims));
            for (k, b) in bits.iter().enumerate() {
                let v = match *b {
                    "0" => 0,
                    "1" => 1,
                    other => return Err(bad(format!("row {} has entry {other:?}", i + 2))),
                };
                m[[k % t_len, k / t_len]] = v;
            }
            masks.push(m);
        }
        if masks.len() != n_rows {
            return Err(bad(format!("header declares {n_rows} rows, found {}", masks.len())));
        }
        let test = masks.split_off(train_count);
        Ok(Self {
            dataset: fields[0].to_string(),
            ratio,
            seed,
            series_len: t_len,
            dims,
            train: masks,
            test,
            resamples: 0,
        })
    }

    pub fn read(path: &Path, train_count: usize) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, train_count)
    }

    /// Writes the cache unless an identical file already exists. Returns
    /// whether the file was written. A differing existing file is an error.
    pub fn write_or_verify(&self, path: &Path) -> Result<bool> {
        let text = self.to_text();
        if path.exists() {
            let existing = std::fs::read(path)?;
            if existing == text.as_bytes() {
                return Ok(false);
            }
            return Err(Error::MaskCache(format!(
                "{} exists with different contents",
                path.display()
            )));
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, text)?;
        Ok(true)
    }

    /// Conventional cache location next to the dataset.
    pub fn default_path(dataset_dir: &Path, dataset: &str, ratio: f64, seed: u64) -> PathBuf {
        dataset_dir
            .join("masks")
            .join(format!("{dataset}_r{ratio}_s{seed}.mask"))
    }
}

fn apply_to(samples: &mut [TimeSeriesSample], masks: &[Array2<u8>]) {
    for (s, m) in samples.iter_mut().zip(masks) {
        ndarray::Zip::from(&mut s.mask)
            .and(&mut s.values)
            .and(m)
            .for_each(|sm, v, &bit| {
                *sm &= bit;
                if *sm == 0 {
                    *v = 0.0;
                }
            });
    }
}

/// Intersects the bundle's masks with `masks` and zeroes newly hidden values.
pub fn apply_masks(mut bundle: DatasetBundle, masks: &MaskSet) -> Result<DatasetBundle> {
    if masks.train.len() != bundle.train.len()
        || masks.test.len() != bundle.test.len()
        || masks.series_len != bundle.series_len
        || masks.dims != bundle.dims
    {
        return Err(Error::MaskCache(format!(
            "mask set ({} train, {} test, T={}, n={}) does not fit dataset ({} train, {} test, T={}, n={})",
            masks.train.len(),
            masks.test.len(),
            masks.series_len,
            masks.dims,
            bundle.train.len(),
            bundle.test.len(),
            bundle.series_len,
            bundle.dims
        )));
    }
    apply_to(&mut bundle.train, &masks.train);
    apply_to(&mut bundle.test, &masks.test);
    Ok(bundle)
}

/// Applies freshly drawn MCAR masks. The bundle must be fully observed.
pub fn apply_mcar(bundle: DatasetBundle, ratio: f64, seed: u64) -> Result<DatasetBundle> {
    if !bundle.masks_all_observed() {
        return Err(Error::Config(
            "dataset already has missing values; synthetic masking applies to complete data only".into(),
        ));
    }
    let masks = MaskSet::generate(&bundle, ratio, seed)?;
    apply_masks(bundle, &masks)
}
