//! Dataset loading: LIBSVM text parsing, max-min feature scaling, and
//! synthetic ridge instances.
//!
//! Storage is dense — the target workloads have a few hundred features at
//! most, and the gradient-table optimizer needs dense per-sample rows anyway.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::Scalar;

/// Dense in-memory dataset: an `n × d` feature matrix plus `n` targets.
///
/// Immutable after construction and safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F> {
    features: Array2<F>,
    targets: Array1<F>,
    name: String,
}

impl<F: Scalar> Dataset<F> {
    /// Builds a dataset, rejecting empty shapes and non-finite entries.
    pub fn new(features: Array2<F>, targets: Array1<F>, name: impl Into<String>) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidArgument(format!(
                "dataset must have n >= 1 and d >= 1, got n={n}, d={d}"
            )));
        }
        if targets.len() != n {
            return Err(Error::InvalidArgument(format!(
                "targets length {} does not match n={n}",
                targets.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) || targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dataset contains non-finite values".into()));
        }
        Ok(Self {
            features,
            targets,
            name: name.into(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<F> {
        &self.features
    }

    pub fn targets(&self) -> &Array1<F> {
        &self.targets
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Serializes back to LIBSVM text, omitting zero entries.
    ///
    /// Values print in shortest round-trip form, so parsing the output with
    /// the original dimension reproduces the dataset exactly.
    pub fn to_libsvm(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n_samples() {
            let _ = write!(out, "{}", self.targets[i]);
            for (j, v) in self.features.row(i).iter().enumerate() {
                if *v != F::zero() {
                    let _ = write!(out, " {}:{}", j + 1, v);
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Parses LIBSVM text: one sample per line, `label idx:val idx:val ...` with
/// 1-based strictly increasing indices. Absent indices are zero.
///
/// `expected_dim` fixes the dimension up front; otherwise the maximum index
/// seen decides it. Blank lines are skipped; anything else malformed is an
/// error carrying the 1-based line number.
pub fn parse_libsvm<F: Scalar, R: BufRead>(
    reader: R,
    expected_dim: Option<usize>,
) -> Result<Dataset<F>> {
    let mut rows: Vec<(F, Vec<(usize, F)>)> = Vec::new();
    let mut max_index = 0usize;

    for (line_no, line) in reader.lines().enumerate() {
        let line_no = line_no + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a first token");
        let label = parse_real::<F>(label_tok)
            .ok_or_else(|| parse_err(line_no, format!("invalid label: {label_tok:?}")))?;

        let mut entries = Vec::new();
        let mut prev_index = 0usize;
        for tok in tokens {
            let (idx_str, val_str) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(line_no, format!("expected idx:val, got {tok:?}")))?;
            let index: usize = idx_str
                .parse()
                .map_err(|_| parse_err(line_no, format!("invalid feature index: {idx_str:?}")))?;
            if index == 0 {
                return Err(parse_err(line_no, "feature index must be >= 1".into()));
            }
            if index <= prev_index {
                return Err(parse_err(
                    line_no,
                    format!("non-increasing feature index {index} after {prev_index}"),
                ));
            }
            if let Some(dim) = expected_dim {
                if index > dim {
                    return Err(Error::Dimension {
                        line: line_no,
                        index,
                        expected: dim,
                    });
                }
            }
            let value = parse_real::<F>(val_str)
                .ok_or_else(|| parse_err(line_no, format!("invalid feature value: {val_str:?}")))?;
            prev_index = index;
            max_index = max_index.max(index);
            entries.push((index, value));
        }
        rows.push((label, entries));
    }

    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    let d = expected_dim.unwrap_or(max_index);
    if d == 0 {
        return Err(Error::Parse {
            line: 0,
            msg: "no feature indices found and no expected dimension given".into(),
        });
    }

    let n = rows.len();
    let mut features = Array2::zeros((n, d));
    let mut targets = Array1::zeros(n);
    for (i, (label, entries)) in rows.into_iter().enumerate() {
        targets[i] = label;
        for (index, value) in entries {
            features[(i, index - 1)] = value;
        }
    }
    Dataset::new(features, targets, "libsvm")
}

/// Loads a LIBSVM file from disk; the dataset is named after the file stem.
pub fn load_libsvm<F: Scalar>(path: &Path, expected_dim: Option<usize>) -> Result<Dataset<F>> {
    let file = File::open(path)?;
    let ds = parse_libsvm(BufReader::new(file), expected_dim)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "libsvm".to_string());
    Ok(ds.with_name(name))
}

fn parse_real<F: Scalar>(tok: &str) -> Option<F> {
    let v: f64 = tok.parse().ok()?;
    if !v.is_finite() {
        return None;
    }
    Some(F::from_f64(v))
}

fn parse_err(line: usize, msg: String) -> Error {
    Error::Parse { line, msg }
}

/// Max-min scaling: each feature column is mapped affinely onto [-1, 1].
/// Constant columns map to all zeros; targets are untouched.
pub fn maxmin_scale<F: Scalar>(ds: &Dataset<F>) -> Dataset<F> {
    let mut features = ds.features().clone();
    let two = F::from_f64(2.0);
    for mut col in features.columns_mut() {
        let mut lo = F::infinity();
        let mut hi = F::neg_infinity();
        for v in col.iter() {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        if hi > lo {
            let span = hi - lo;
            col.mapv_inplace(|v| two * (v - lo) / span - F::one());
        } else {
            col.fill(F::zero());
        }
    }
    Dataset {
        features,
        targets: ds.targets().clone(),
        name: ds.name().to_string(),
    }
}

/// Generates a synthetic ridge instance: features i.i.d. uniform on [-1, 1],
/// planted weights likewise, targets `y_i = x_i · w + noise` with Gaussian
/// noise of standard deviation `noise_sd`. Deterministic for equal seeds.
///
/// Returns the dataset together with the planted weight vector.
pub fn synth_ridge<F: Scalar>(
    n: usize,
    d: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<(Dataset<F>, Array1<F>)> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "synth_ridge needs n >= 1 and d >= 1, got n={n}, d={d}"
        )));
    }
    if noise_sd < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise_sd must be nonnegative, got {noise_sd}"
        )));
    }
    if n < d {
        log::warn!("synth_ridge: n={n} < d={d}, the instance is underdetermined");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Array1::from_iter((0..d).map(|_| F::from_f64(rng.random_range(-1.0..1.0))));
    let mut features = Array2::zeros((n, d));
    for i in 0..n {
        for j in 0..d {
            features[(i, j)] = F::from_f64(rng.random_range(-1.0..1.0));
        }
    }
    let mut targets = Array1::zeros(n);
    if noise_sd > 0.0 {
        let normal = Normal::new(0.0, noise_sd)
            .map_err(|e| Error::InvalidArgument(format!("bad noise_sd: {e}")))?;
        for i in 0..n {
            targets[i] = features.row(i).dot(&weights) + F::from_f64(normal.sample(&mut rng));
        }
    } else {
        for i in 0..n {
            targets[i] = features.row(i).dot(&weights);
        }
    }

    let name = format!("synth-n{n}-d{d}-seed{seed}");
    Ok((Dataset::new(features, targets, name)?, weights))
}
