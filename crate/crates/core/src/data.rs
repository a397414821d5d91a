//! Datasets, zero-mean normalization, CSV ingestion, bundled/generated data
//! and seeded train/validation/test splits.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::linalg::cholesky;

/// Offsets removed from the raw data: `stored = raw − mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Normalization {
    pub x_means: Vec<f64>,
    pub y_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// N×d inputs, one row per observation (normalized space).
    pub x: DMatrix<f64>,
    /// N targets (normalized space).
    pub y: DVector<f64>,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::dims(format!(
                "{} input rows but {} targets",
                x.nrows(),
                y.len()
            )));
        }
        let d = x.ncols();
        Ok(Dataset {
            name: name.into(),
            x,
            y,
            normalization: Normalization {
                x_means: vec![0.0; d],
                y_mean: 0.0,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Centers inputs (and targets when `center_y`), composing with any
    /// normalization already recorded.
    pub fn normalized(mut self, center_y: bool) -> Self {
        if self.is_empty() {
            return self;
        }
        for k in 0..self.dim() {
            let mean = self.x.column(k).mean();
            self.x.column_mut(k).add_scalar_mut(-mean);
            self.normalization.x_means[k] += mean;
        }
        if center_y {
            let mean = self.y.mean();
            self.y.add_scalar_mut(-mean);
            self.normalization.y_mean += mean;
        }
        self
    }

    /// Re-expresses `other` (same raw space as `self` before normalization)
    /// with `self`'s offsets; used to push test data through the training
    /// normalization.
    pub fn normalize_like(&self, other: &Dataset) -> Result<Dataset> {
        if other.dim() != self.dim() {
            return Err(Error::dims("normalize_like: input dimension differs"));
        }
        let raw_x = other.raw_x();
        let raw_y = other.raw_y();
        let n = &self.normalization;
        let x = DMatrix::from_fn(raw_x.nrows(), raw_x.ncols(), |i, k| {
            raw_x[(i, k)] - n.x_means[k]
        });
        let y = raw_y.add_scalar(-n.y_mean);
        Ok(Dataset {
            name: other.name.clone(),
            x,
            y,
            normalization: n.clone(),
        })
    }

    pub fn raw_x(&self) -> DMatrix<f64> {
        let n = &self.normalization;
        DMatrix::from_fn(self.x.nrows(), self.x.ncols(), |i, k| {
            self.x[(i, k)] + n.x_means[k]
        })
    }

    pub fn raw_y(&self) -> DVector<f64> {
        self.denormalize_y(&self.y)
    }

    pub fn denormalize_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.add_scalar(self.normalization.y_mean)
    }

    pub fn normalize_x(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if raw.ncols() != self.dim() {
            return Err(Error::dims(format!(
                "inputs have {} columns, dataset has {}",
                raw.ncols(),
                self.dim()
            )));
        }
        let n = &self.normalization;
        Ok(DMatrix::from_fn(raw.nrows(), raw.ncols(), |i, k| {
            raw[(i, k)] - n.x_means[k]
        }))
    }

    /// Rows at `indices`, in that order, sharing this dataset's normalization.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let x = DMatrix::from_fn(indices.len(), self.dim(), |i, k| self.x[(indices[i], k)]);
        let y = DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.y[i]));
        Dataset {
            name: self.name.clone(),
            x,
            y,
            normalization: self.normalization.clone(),
        }
    }
}

/// Which column of a CSV file holds the regression target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetColumn {
    Index(usize),
    Name(String),
}

impl Default for TargetColumn {
    fn default() -> Self {
        TargetColumn::Name("y".into())
    }
}

/// Result of reading a CSV file: the raw (unnormalized) dataset plus the
/// number of rows dropped for containing NaN/Inf.
#[derive(Debug, Clone)]
pub struct LoadedCsv {
    pub dataset: Dataset,
    pub rejected_rows: usize,
}

/// Loads a numeric CSV. Use `Dataset::normalized` afterwards (or
/// [`load_csv`]) to center it.
pub fn read_csv<R: Read>(
    reader: R,
    name: &str,
    target: &TargetColumn,
    has_header: bool,
) -> Result<LoadedCsv> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let target_idx = match target {
        TargetColumn::Index(i) => *i,
        TargetColumn::Name(col) => {
            if !has_header {
                return Err(Error::Config(format!(
                    "target column '{col}' given by name but the file has no header"
                )));
            }
            rdr.headers()?
                .iter()
                .position(|h| h == col)
                .ok_or_else(|| Error::Config(format!("no column named '{col}'")))?
        }
    };

    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut width: Option<usize> = None;
    let mut rejected = 0usize;
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let values: Vec<f64> = record
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("row {}: '{f}' is not a number", line + 1)))
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::Parse(format!(
                    "row {} has {} fields, expected {w}",
                    line + 1,
                    values.len()
                )))
            }
            _ => {}
        }
        if target_idx >= values.len() {
            return Err(Error::Config(format!(
                "target column {target_idx} out of range for {} columns",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            rejected += 1;
            continue;
        }
        for (k, v) in values.iter().enumerate() {
            if k == target_idx {
                ys.push(*v);
            } else {
                xs.push(*v);
            }
        }
    }
    if rejected > 0 {
        log::warn!("{name}: dropped {rejected} row(s) containing NaN/Inf");
    }
    if ys.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = width.unwrap_or(1) - 1;
    let x = DMatrix::from_row_slice(ys.len(), d, &xs);
    let y = DVector::from_vec(ys);
    Ok(LoadedCsv {
        dataset: Dataset::new(name, x, y)?,
        rejected_rows: rejected,
    })
}

/// Reads a CSV file and centers inputs and targets.
pub fn load_csv(path: &Path, target: &TargetColumn, has_header: bool) -> Result<LoadedCsv> {
    let file = std::fs::File::open(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    let mut loaded = read_csv(file, &name, target, has_header)?;
    loaded.dataset = loaded.dataset.normalized(true);
    Ok(loaded)
}

/// Writes raw (denormalized) data with header `x0,..,x{d-1},y`. Values use the
/// shortest representation that round-trips exactly.
pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..dataset.dim()).map(|k| format!("x{k}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    let x = dataset.raw_x();
    let y = dataset.raw_y();
    for i in 0..dataset.len() {
        let mut row: Vec<String> = (0..dataset.dim()).map(|k| x[(i, k)].to_string()).collect();
        row.push(y[i].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(dataset, std::io::BufWriter::new(file))
}

/// Bundled 200-point 1-D regression set used for the toy experiment. It is a
/// fixed draw from [`gp_prior_dataset`] with [`SNELSON_LIKE_SEED`]; see the
/// test that regenerates it.
pub const SNELSON_LIKE_CSV: &str = include_str!("../data/snelson_like.csv");
pub const SNELSON_LIKE_SEED: u64 = 1;
pub const SNELSON_LIKE_SIZE: usize = 200;

/// Generating process of the bundled toy set: SE kernel with σ_f² = 0.712,
/// ℓ² = 0.597, noise variance 0.0715, inputs uniform on [0, 6].
pub fn snelson_like_generator() -> (KernelSpec, f64, (f64, f64)) {
    (
        KernelSpec::sq_exp(0.712, 0.597f64.sqrt()),
        0.0715,
        (0.0, 6.0),
    )
}

/// The bundled toy set subsampled to `n` points by a seeded uniform choice
/// (no subsampling when `n` reaches the file size). Not normalized.
pub fn make_snelson_like(n: usize, seed: u64) -> Result<Dataset> {
    let full = read_csv(
        SNELSON_LIKE_CSV.as_bytes(),
        "snelson_like",
        &TargetColumn::Name("y".into()),
        true,
    )?
    .dataset;
    if n >= full.len() {
        return Ok(full);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, full.len(), n).into_vec();
    idx.sort_unstable();
    Ok(full.subset(&idx))
}

/// 1-D draw from a zero-mean GP prior plus Gaussian noise, inputs uniform on
/// `range` and sorted. Cost is cubic in `n`.
pub fn gp_prior_dataset(
    n: usize,
    kernel: &KernelSpec,
    noise_var: f64,
    range: (f64, f64),
    seed: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs: Vec<f64> = (0..n).map(|_| rng.gen_range(range.0..range.1)).collect();
    xs.sort_by(f64::total_cmp);
    let x = DMatrix::from_column_slice(n, 1, &xs);
    let k = kernel.cross_cov(&x, &x)?;
    let factor = cholesky(&k, crate::linalg::default_jitter(&k))?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let z = DVector::from_fn(n, |_, _| normal.sample(&mut rng));
    let f = factor.lower() * z;
    let noise =
        Normal::new(0.0, noise_var.sqrt()).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let y = DVector::from_fn(n, |i, _| f[i] + noise.sample(&mut rng));
    Dataset::new("gp_prior", x, y)
}

/// Intensity of the Poisson toy problem.
pub fn poisson_toy_intensity(x: f64) -> f64 {
    3.5 + 3.0 * x.sin()
}

/// 50 equispaced inputs on [−10, 10] with counts drawn from
/// `Poisson(3.5 + 3 sin x)`.
pub fn make_poisson_toy(seed: u64) -> Result<Dataset> {
    let n = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n)
        .map(|i| -10.0 + 20.0 * i as f64 / (n - 1) as f64)
        .collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            Poisson::new(poisson_toy_intensity(x))
                .expect("positive intensity")
                .sample(&mut rng)
        })
        .collect();
    Dataset::new(
        "poisson_toy",
        DMatrix::from_column_slice(n, 1, &xs),
        DVector::from_vec(ys),
    )
}

/// Smooth nonlinear regression problem for scale tests:
/// `y = Σ_k sin(1.5 x_k) + 0.5 cos(x_0 x_last) + ε`, inputs uniform on [−3, 3]^d.
pub fn make_synthetic_regression(n: usize, d: usize, noise_var: f64, seed: u64) -> Result<Dataset> {
    if d == 0 {
        return Err(Error::InvalidParameter(
            "input dimension must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: DMatrix<f64> = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-3.0..3.0));
    let noise =
        Normal::new(0.0, noise_var.sqrt()).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let y = DVector::from_fn(n, |i, _| {
        let row = x.row(i);
        let s: f64 = row.iter().map(|v: &f64| (1.5 * v).sin()).sum();
        s + 0.5 * (row[0] * row[d - 1]).cos() + noise.sample(&mut rng)
    });
    Dataset::new("synthetic", x, y)
}

/// Index partition into train / validation / test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with `seed`; the first `test_fraction·n` indices are the
/// test set, and `validation_fraction` of the remainder is carved off for
/// validation. Each part is returned sorted.
pub fn split_indices(
    n: usize,
    test_fraction: f64,
    validation_fraction: f64,
    seed: u64,
) -> Result<Split> {
    if !(0.0..1.0).contains(&test_fraction) || !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::Config(format!(
            "split fractions must lie in [0, 1): test {test_fraction}, validation {validation_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_test = (test_fraction * n as f64).round() as usize;
    let n_val = (validation_fraction * (n - n_test) as f64).round() as usize;
    let mut test = idx[..n_test].to_vec();
    let mut validation = idx[n_test..n_test + n_val].to_vec();
    let mut train = idx[n_test + n_val..].to_vec();
    test.sort_unstable();
    validation.sort_unstable();
    train.sort_unstable();
    if train.is_empty() {
        return Err(Error::Config("split leaves no training data".into()));
    }
    Ok(Split {
        train,
        validation,
        test,
    })
}
