//! Experiment driver: dataset sources, held-out metrics, saved models and the
//! repeated train/test runs that write JSON results and CSV tables.
//!
//! Output layout of [`run_experiment`] under the output directory:
//!
//! ```text
//! repeat_000.json              per-repeat fits, traces and metrics
//! summary.csv, summary.json    mean and standard error per method
//! traces/<method>_r000.csv     step,bound,noise_var (one file per panel)
//! v_hist/<method>_r000.csv     lo,hi,count of the optimal v_i
//! timings.csv                  wall-clock seconds (not deterministic)
//! ```
//!
//! Every CSV is plain comma-separated columns with a header, so gnuplot can
//! read it with `set datafile separator ','` and `using 1:2`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collapsed::{
    build_cache, dtc_log_likelihood, elbo_sgpr, elbo_sgpr_artemev, elbo_sgpr_new,
    predict_marginals_with_factor, BoundReport, SparseModel,
};
use crate::data::{
    load_csv, make_poisson_toy, make_snelson_like, make_synthetic_regression, split_indices,
    Dataset, Normalization, TargetColumn,
};
use crate::error::{Error, Result};
use crate::exact::{ExactGp, EXACT_GP_MAX_N};
use crate::kernels::KernelSpec;
use crate::nonconjugate::{MarginalQfi, Poisson, ScalarLikelihood};
use crate::trainer::{fit, FitResult, Method, TrainConfig};

/// Where an experiment's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Csv {
        path: PathBuf,
        #[serde(default)]
        target: TargetColumn,
        #[serde(default = "yes")]
        has_header: bool,
    },
    SnelsonLike {
        n: usize,
    },
    PoissonToy,
    Synthetic {
        n: usize,
        dim: usize,
        noise_var: f64,
    },
}

fn yes() -> bool {
    true
}

impl DatasetSource {
    /// Raw (unnormalized) data. Generated sources use `seed`.
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSource::Csv {
                path,
                target,
                has_header,
            } => Ok(load_csv(path, target, *has_header)?.dataset),
            DatasetSource::SnelsonLike { n } => make_snelson_like(*n, seed),
            DatasetSource::PoissonToy => make_poisson_toy(seed),
            DatasetSource::Synthetic { n, dim, noise_var } => {
                make_synthetic_regression(*n, *dim, *noise_var, seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSource,
    /// Share of all rows held out for testing.
    pub test_fraction: f64,
    /// Share of the remaining rows held out for validation (reported only).
    pub validation_fraction: f64,
    pub repeats: usize,
    pub seed: u64,
    pub methods: Vec<TrainConfig>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            dataset: DatasetSource::SnelsonLike { n: 40 },
            test_fraction: 0.2,
            validation_fraction: 0.2,
            repeats: 1,
            seed: 0,
            methods: vec![TrainConfig::default()],
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON config. A relative CSV path is resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let DatasetSource::Csv { path: csv, .. } = &mut config.dataset {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let frac_ok = |f: f64| (0.0..1.0).contains(&f);
        if !frac_ok(self.test_fraction) || !frac_ok(self.validation_fraction) {
            return Err(Error::Config("split fractions must lie in [0, 1)".into()));
        }
        if self.test_fraction + self.validation_fraction > 1.0 {
            return Err(Error::Config(format!(
                "test ({}) and validation ({}) fractions sum past 1",
                self.test_fraction, self.validation_fraction
            )));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods listed".into()));
        }
        let poisson = self
            .methods
            .iter()
            .filter(|m| m.method.is_poisson())
            .count();
        if poisson != 0 && poisson != self.methods.len() {
            return Err(Error::Config(
                "count and Gaussian methods cannot share one experiment".into(),
            ));
        }
        if let DatasetSource::Synthetic { n, dim, noise_var } = self.dataset {
            if n == 0 || dim == 0 || !(noise_var > 0.0) {
                return Err(Error::Config(
                    "synthetic data needs n, dim >= 1 and noise_var > 0".into(),
                ));
            }
        }
        Ok(())
    }

    fn counts(&self) -> bool {
        self.methods.iter().any(|m| m.method.is_poisson())
    }
}

/// Held-out predictive quality, in the original output scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub mean_loglik: f64,
    pub rmse: f64,
    #[serde(skip)]
    pub per_point_loglik: Vec<f64>,
}

/// Marginal predictive moments of the latent function at new inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPrediction {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

/// Latent predictions at `xstar` (normalized space). The exact GP needs its
/// training set; sparse fits only use `Z` and `q(u)`.
pub fn predict_latent(
    fit: &FitResult,
    train: &Dataset,
    xstar: &DMatrix<f64>,
) -> Result<LatentPrediction> {
    if xstar.ncols() != train.dim() {
        return Err(Error::dims(format!(
            "inputs have {} columns, the model expects {}",
            xstar.ncols(),
            train.dim()
        )));
    }
    if fit.method == Method::Exact {
        let gp = ExactGp::new(
            fit.kernel.clone(),
            fit.noise_var,
            train.x.clone(),
            train.y.clone(),
        )?;
        let p = gp.predict(xstar, false)?;
        let var = p.cov.diagonal().map(|s| s.max(0.0));
        return Ok(LatentPrediction { mean: p.mean, var });
    }
    let model = fit.sparse_model(train)?;
    let q = fit
        .q_u
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{} fit carries no q(u)", fit.method)))?;
    let kuu = model.kuu_factor()?;
    let (mean, var) =
        predict_marginals_with_factor(&model.kernel, &model.inducing, &kuu, q, xstar)?;
    Ok(LatentPrediction { mean, var })
}

fn gaussian_logpdf(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - 0.5 * (y - mean).powi(2) / var
}

/// Per-point predictive log density and RMSE on `test`, which must be
/// expressed in `train`'s normalization. Gaussian fits score
/// `N(y | μ*, s* + σ²)`; count fits score `log ∫ Poisson(y | e^f) q(f*) df`
/// by quadrature and measure RMSE against `E[e^f]`.
pub fn evaluate(fit: &FitResult, train: &Dataset, test: &Dataset) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pred = predict_latent(fit, train, &test.x)?;
    let y_raw = test.raw_y();
    let y_shift = train.normalization.y_mean;
    let mut per_point = Vec::with_capacity(test.len());
    let mut sq = 0.0;
    for i in 0..test.len() {
        let (m, s) = (pred.mean[i], pred.var[i]);
        let (lp, point) = if fit.method.is_poisson() {
            let marg = MarginalQfi {
                mean: m,
                variance: s,
            };
            (
                Poisson.predictive_log_density(&marg, y_raw[i])?,
                Poisson::predictive_mean(&marg),
            )
        } else {
            let mu = m + y_shift;
            (gaussian_logpdf(y_raw[i], mu, s + fit.noise_var), mu)
        };
        per_point.push(lp);
        sq += (y_raw[i] - point).powi(2);
    }
    let n = test.len();
    Ok(Metrics {
        n,
        mean_loglik: per_point.iter().sum::<f64>() / n as f64,
        rmse: (sq / n as f64).sqrt(),
        per_point_loglik: per_point,
    })
}

/// A fit bundled with what prediction needs: the normalization offsets and,
/// for the exact GP, the training data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedModel {
    pub fit: FitResult,
    pub normalization: Normalization,
    pub train_x: Option<DMatrix<f64>>,
    pub train_y: Option<DVector<f64>>,
}

/// Predictions in the original scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionTable {
    pub latent_mean: Vec<f64>,
    pub latent_var: Vec<f64>,
    /// Predictive mean of `y`: `μ*` plus the target offset, or `E[e^f]`.
    pub mean: Vec<f64>,
    /// Predictive variance of `y`: `s* + σ²`, or the Poisson-lognormal
    /// variance `E[e^f] + Var[e^f]`.
    pub var: Vec<f64>,
}

impl SavedModel {
    pub fn new(fit: FitResult, train: &Dataset) -> Self {
        let keep = fit.method == Method::Exact;
        SavedModel {
            fit,
            normalization: train.normalization.clone(),
            train_x: keep.then(|| train.x.clone()),
            train_y: keep.then(|| train.y.clone()),
        }
    }

    fn training(&self) -> Result<Dataset> {
        let d = self.normalization.x_means.len();
        let (x, y) = match (&self.train_x, &self.train_y) {
            (Some(x), Some(y)) => (x.clone(), y.clone()),
            _ if self.fit.method == Method::Exact => {
                return Err(Error::Config(
                    "saved exact GP lacks its training data".into(),
                ))
            }
            _ => (DMatrix::zeros(0, d), DVector::zeros(0)),
        };
        let mut data = Dataset::new("train", x, y)?;
        data.normalization = self.normalization.clone();
        Ok(data)
    }

    pub fn predict(&self, raw_x: &DMatrix<f64>) -> Result<PredictionTable> {
        let train = self.training()?;
        let x = train.normalize_x(raw_x)?;
        let pred = predict_latent(&self.fit, &train, &x)?;
        let (mut mean, mut var) = (Vec::new(), Vec::new());
        for (&m, &s) in pred.mean.iter().zip(pred.var.iter()) {
            if self.fit.method.is_poisson() {
                let rate = (m + 0.5 * s).exp();
                mean.push(rate);
                var.push(rate + rate * rate * s.exp_m1());
            } else {
                mean.push(m + self.normalization.y_mean);
                var.push(s + self.fit.noise_var);
            }
        }
        Ok(PredictionTable {
            latent_mean: pred.mean.iter().copied().collect(),
            latent_var: pred.var.iter().copied().collect(),
            mean,
            var,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// The three collapsed bounds and the exact log marginal at one setting.
#[derive(Debug, Clone, Serialize)]
pub struct BoundComparison {
    pub exact: Option<f64>,
    pub dtc: f64,
    pub sgpr: BoundReport,
    pub sgpr_artemev: BoundReport,
    pub sgpr_new: BoundReport,
}

/// Evaluates every collapsed bound for fixed hyperparameters and inducing
/// inputs. The exact term is skipped above the exact-GP size limit.
pub fn compare_bounds(
    data: &Dataset,
    kernel: KernelSpec,
    noise_var: f64,
    inducing: DMatrix<f64>,
) -> Result<BoundComparison> {
    let exact = if data.len() <= EXACT_GP_MAX_N {
        Some(
            ExactGp::new(kernel.clone(), noise_var, data.x.clone(), data.y.clone())?.log_marginal(),
        )
    } else {
        None
    };
    let model = SparseModel::new(kernel, noise_var, inducing, data)?;
    let cache = build_cache(&model)?;
    Ok(BoundComparison {
        exact,
        dtc: dtc_log_likelihood(&model, &cache)?,
        sgpr: elbo_sgpr(&model, &cache)?,
        sgpr_artemev: elbo_sgpr_artemev(&model, &cache)?,
        sgpr_new: elbo_sgpr_new(&model, &cache)?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub error: Option<String>,
    pub fit: Option<FitResult>,
    pub test: Option<Metrics>,
    pub validation: Option<Metrics>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RepeatResult {
    pub repeat: usize,
    pub split_seed: u64,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub outcomes: Vec<MethodOutcome>,
}

/// Mean and standard error (sample std / √k) over the completed repeats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSe {
    pub mean: f64,
    /// Absent with fewer than two values.
    pub se: Option<f64>,
}

impl MeanSe {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let k = values.len() as f64;
        let mean = values.iter().sum::<f64>() / k;
        let se = (values.len() > 1).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
            (var / k).sqrt()
        });
        Some(MeanSe { mean, se })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub completed: usize,
    pub failed: usize,
    pub bound: Option<MeanSe>,
    pub noise_var: Option<MeanSe>,
    pub test_loglik: Option<MeanSe>,
    pub test_rmse: Option<MeanSe>,
    pub validation_loglik: Option<MeanSe>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub name: String,
    pub repeats: Vec<RepeatResult>,
    pub summary: Vec<SummaryRow>,
}

fn run_repeat(config: &ExperimentConfig, raw: &Dataset, repeat: usize) -> Result<RepeatResult> {
    let split_seed = config.seed.wrapping_add(repeat as u64);
    let split = split_indices(
        raw.len(),
        config.test_fraction,
        config.validation_fraction,
        split_seed,
    )?;
    let train = raw.subset(&split.train).normalized(!config.counts());
    let test = train.normalize_like(&raw.subset(&split.test))?;
    let validation = train.normalize_like(&raw.subset(&split.validation))?;
    let outcomes = config
        .methods
        .iter()
        .map(|base| {
            let mut tc = base.clone();
            tc.seed = base.seed.wrapping_add(repeat as u64);
            let started = std::time::Instant::now();
            let result = fit(&tc, &train).and_then(|f| {
                let score =
                    |d: &Dataset| (!d.is_empty()).then(|| evaluate(&f, &train, d)).transpose();
                let test = score(&test)?;
                let validation = score(&validation)?;
                Ok((f, test, validation))
            });
            let wall_clock_secs = started.elapsed().as_secs_f64();
            match result {
                Ok((f, test, validation)) => {
                    log::info!(
                        "repeat {repeat}, {}: bound {:.4} after {} steps ({wall_clock_secs:.2}s)",
                        tc.method,
                        f.final_bound.bound,
                        f.steps
                    );
                    MethodOutcome {
                        method: tc.method,
                        error: None,
                        fit: Some(f),
                        test,
                        validation,
                        wall_clock_secs,
                    }
                }
                Err(e) => {
                    log::warn!("repeat {repeat}, {}: {e}", tc.method);
                    MethodOutcome {
                        method: tc.method,
                        error: Some(e.to_string()),
                        fit: None,
                        test: None,
                        validation: None,
                        wall_clock_secs,
                    }
                }
            }
        })
        .collect();
    Ok(RepeatResult {
        repeat,
        split_seed,
        n_train: train.len(),
        n_validation: validation.len(),
        n_test: test.len(),
        outcomes,
    })
}

/// Summary rows, one per configured method, over repeats where it succeeded.
pub fn summarize(config: &ExperimentConfig, repeats: &[RepeatResult]) -> Vec<SummaryRow> {
    config
        .methods
        .iter()
        .enumerate()
        .map(|(k, tc)| {
            let outcomes: Vec<&MethodOutcome> = repeats.iter().map(|r| &r.outcomes[k]).collect();
            let ok: Vec<&MethodOutcome> = outcomes
                .iter()
                .copied()
                .filter(|o| o.error.is_none())
                .collect();
            let collect = |f: &dyn Fn(&MethodOutcome) -> Option<f64>| {
                MeanSe::from_values(&ok.iter().filter_map(|o| f(o)).collect::<Vec<_>>())
            };
            SummaryRow {
                method: tc.method,
                completed: ok.len(),
                failed: outcomes.len() - ok.len(),
                bound: collect(&|o| o.fit.as_ref().map(|f| f.final_bound.bound)),
                noise_var: collect(&|o| o.fit.as_ref().map(|f| f.noise_var)),
                test_loglik: collect(&|o| o.test.as_ref().map(|m| m.mean_loglik)),
                test_rmse: collect(&|o| o.test.as_ref().map(|m| m.rmse)),
                validation_loglik: collect(&|o| o.validation.as_ref().map(|m| m.mean_loglik)),
            }
        })
        .collect()
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let stats = [
        "bound",
        "noise_var",
        "test_loglik",
        "test_rmse",
        "validation_loglik",
    ];
    let mut header = vec!["method".to_string(), "completed".into(), "failed".into()];
    for s in stats {
        header.push(format!("{s}_mean"));
        header.push(format!("{s}_se"));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.method.to_string(),
            r.completed.to_string(),
            r.failed.to_string(),
        ];
        for s in [
            r.bound,
            r.noise_var,
            r.test_loglik,
            r.test_rmse,
            r.validation_loglik,
        ] {
            rec.push(opt(s.map(|m| m.mean)));
            rec.push(opt(s.and_then(|m| m.se)));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_repeat_files(dir: &Path, r: &RepeatResult) -> Result<()> {
    fs::write(
        dir.join(format!("repeat_{:03}.json", r.repeat)),
        serde_json::to_vec_pretty(r)?,
    )?;
    for o in &r.outcomes {
        let Some(f) = &o.fit else { continue };
        let stem = format!("{}_r{:03}.csv", o.method, r.repeat);
        let mut w = csv::Writer::from_path(dir.join("traces").join(&stem))?;
        w.write_record(["step", "bound", "noise_var"])?;
        for p in &f.trace {
            w.write_record([
                p.step.to_string(),
                p.bound.to_string(),
                p.noise_var.to_string(),
            ])?;
        }
        w.flush()?;
        if let Some(h) = &f.v_histogram {
            let mut w = csv::Writer::from_path(dir.join("v_hist").join(&stem))?;
            w.write_record(["lo", "hi", "count"])?;
            for (k, c) in h.counts.iter().enumerate() {
                w.write_record([
                    h.edges[k].to_string(),
                    h.edges[k + 1].to_string(),
                    c.to_string(),
                ])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Runs every method on `repeats` seeded splits (repeats in parallel) and
/// writes the result files into `out_dir`. A failing method is recorded in
/// its repeat and left out of the summary.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport> {
    config.validate()?;
    let raw = config.dataset.load(config.seed)?;
    fs::create_dir_all(out_dir.join("traces"))?;
    fs::create_dir_all(out_dir.join("v_hist"))?;
    let repeats: Vec<RepeatResult> = (0..config.repeats)
        .into_par_iter()
        .map(|r| {
            let result = run_repeat(config, &raw, r)?;
            write_repeat_files(out_dir, &result)?;
            Ok(result)
        })
        .collect::<Result<_>>()?;

    let summary = summarize(config, &repeats);
    write_summary_csv(&out_dir.join("summary.csv"), &summary)?;
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_vec_pretty(&summary)?,
    )?;
    let mut w = csv::Writer::from_path(out_dir.join("timings.csv"))?;
    w.write_record(["repeat", "method", "seconds"])?;
    for r in &repeats {
        for o in &r.outcomes {
            w.write_record([
                r.repeat.to_string(),
                o.method.to_string(),
                o.wall_clock_secs.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(ExperimentReport {
        name: config.name.clone(),
        repeats,
        summary,
    })
}
