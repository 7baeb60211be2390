//! Generators for the two synthetic benchmark families CBF and TwoPatterns,
//! written in UCR layout so they go through the same loader as archive data.
//!
//! Cylinder-Bell-Funnel (length 128): with `a ~ U{16..32}`,
//! `b - a ~ U{32..96}`, `η, ε(t) ~ N(0, 1)` and `χ` the indicator of `[a, b]`:
//!
//! ```text
//! cylinder(t) = (6 + η) χ(t)                     + ε(t)
//! bell(t)     = (6 + η) χ(t) (t - a) / (b - a)   + ε(t)
//! funnel(t)   = (6 + η) χ(t) (b - t) / (b - a)   + ε(t)
//! ```
//!
//! TwoPatterns (length 128): unit Gaussian background with two step
//! patterns, an upward step (`-5` then `+5`) or a downward step (`+5` then
//! `-5`). Each pattern has length `l ~ U{T/8..T/4}`; the first lies in the
//! first half of the series, the second in the second half. The class is
//! the ordered pair (UU, UD, DU, DD).

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{rng_for, write_ucr, DatasetBundle, TimeSeriesSample};
use crate::error::Result;

pub const CBF_LEN: usize = 128;
pub const TWO_PATTERNS_LEN: usize = 128;

fn balanced_labels<R: Rng>(count: usize, classes: usize, rng: &mut R) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn cbf_series<R: Rng>(class: usize, rng: &mut R) -> Vec<f64> {
    let a = rng.gen_range(16..=32usize) as f64;
    let b = a + rng.gen_range(32..=96usize) as f64;
    let amp = 6.0 + rng.sample::<f64, _>(StandardNormal);
    (1..=CBF_LEN)
        .map(|t| {
            let t = t as f64;
            let inside = t >= a && t <= b;
            let shape = match (inside, class) {
                (false, _) => 0.0,
                (true, 0) => 1.0,
                (true, 1) => (t - a) / (b - a),
                (true, _) => (b - t) / (b - a),
            };
            amp * shape + rng.sample::<f64, _>(StandardNormal)
        })
        .collect()
}

fn two_patterns_series<R: Rng>(class: usize, rng: &mut R) -> Vec<f64> {
    let n = TWO_PATTERNS_LEN;
    let half = n / 2;
    let mut x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let ups = [class / 2 == 0, class.is_multiple_of(2)];
    for (k, up) in ups.into_iter().enumerate() {
        let len = rng.gen_range(n / 8..=n / 4);
        let (lo, hi) = if k == 0 { (0, half - len) } else { (half, n - len) };
        let start = rng.gen_range(lo..=hi);
        let sign = if up { 1.0 } else { -1.0 };
        for (i, v) in x[start..start + len].iter_mut().enumerate() {
            *v = if i < len / 2 { -5.0 * sign } else { 5.0 * sign };
        }
    }
    x
}

fn build<G>(name: &str, classes: usize, n_train: usize, n_test: usize, seed: u64, gen: G) -> Result<DatasetBundle>
where
    G: Fn(usize, &mut rand_chacha::ChaCha8Rng) -> Vec<f64>,
{
    let split = |count: usize, stream: u64, tag: &str| {
        let mut rng = rng_for(seed, stream);
        balanced_labels(count, classes, &mut rng)
            .into_iter()
            .enumerate()
            .map(|(i, label)| {
                let v = gen(label, &mut rng);
                let raw = Array2::from_shape_vec((v.len(), 1), v).expect("column vector");
                TimeSeriesSample::from_raw(format!("{tag}-{i}"), raw, label)
            })
            .collect::<Vec<_>>()
    };
    let train = split(n_train, 0, "train");
    let test = split(n_test, 1, "test");
    let names = (1..=classes).map(|c| c.to_string()).collect();
    DatasetBundle::new(name, train, test, names)
}

/// Cylinder-Bell-Funnel; the archive split is 30 train / 900 test.
pub fn cbf(n_train: usize, n_test: usize, seed: u64) -> Result<DatasetBundle> {
    build("CBF", 3, n_train, n_test, seed, cbf_series)
}

/// TwoPatterns; the archive split is 1000 train / 4000 test.
pub fn two_patterns(n_train: usize, n_test: usize, seed: u64) -> Result<DatasetBundle> {
    build("TwoPatterns", 4, n_train, n_test, seed, two_patterns_series)
}

/// Writes `<root>/<name>/<name>_TRAIN.tsv` and `_TEST.tsv`; returns the directory.
pub fn write_ucr_dir(bundle: &DatasetBundle, root: &Path) -> Result<PathBuf> {
    let dir = root.join(&bundle.name);
    std::fs::create_dir_all(&dir)?;
    write_ucr(
        &dir.join(format!("{}_TRAIN.tsv", bundle.name)),
        &bundle.train,
        &bundle.class_names,
    )?;
    write_ucr(
        &dir.join(format!("{}_TEST.tsv", bundle.name)),
        &bundle.test,
        &bundle.class_names,
    )?;
    Ok(dir)
}
