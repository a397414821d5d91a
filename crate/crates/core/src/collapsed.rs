//! Collapsed inducing-point bounds for Gaussian regression.
//!
//! All three bounds share the DTC fit term `log N(y | 0, Q_ff + σ²I)` with the
//! rank-M Nyström matrix `Q_ff = K_fu K_uu⁻¹ K_uf`, and differ only in how the
//! per-point residuals `r_i = k_ii − q_ii` are penalised:
//!
//! | bound            | regulariser                               |
//! |------------------|-------------------------------------------|
//! | [`elbo_sgpr`]    | `−(1/2σ²) Σ r_i`                          |
//! | [`elbo_sgpr_artemev`] | `−(N/2) log(1 + Σ r_i / (Nσ²))`      |
//! | [`elbo_sgpr_new`] | `−½ Σ log(1 + r_i/σ²)`                   |
//!
//! Since `log(1 + a) ≤ a` and by Jensen, the three are ordered
//! `classic ≤ spherical ≤ new ≤ log p(y)`.
//!
//! The new bound corresponds to replacing the conditional prior `p(f|u)` in the
//! variational posterior by `q(f|u)` with covariance `R^{1/2} V R^{1/2}`,
//! `R = K_ff − Q_ff`, `V = diag(v)`, and maximizing over `v`; the optimum is
//! [`optimal_v`].

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exact::Prediction;
use crate::kernels::KernelSpec;
use crate::linalg::{cholesky, SpdFactor, DEFAULT_RELATIVE_JITTER};

/// Kernel, noise and inducing inputs over a borrowed training set.
#[derive(Debug, Clone)]
pub struct SparseModel<'a> {
    pub kernel: KernelSpec,
    pub noise_var: f64,
    /// M×d inducing inputs Z.
    pub inducing: DMatrix<f64>,
    pub data: &'a Dataset,
    /// Jitter added to `K_uu`, relative to σ_f².
    pub relative_jitter: f64,
}

impl<'a> SparseModel<'a> {
    pub fn new(
        kernel: KernelSpec,
        noise_var: f64,
        inducing: DMatrix<f64>,
        data: &'a Dataset,
    ) -> Result<Self> {
        let model = SparseModel {
            kernel,
            noise_var,
            inducing,
            data,
            relative_jitter: DEFAULT_RELATIVE_JITTER,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_relative_jitter(mut self, relative_jitter: f64) -> Self {
        self.relative_jitter = relative_jitter;
        self
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.inducing.nrows() == 0 {
            return Err(Error::InvalidParameter(
                "need at least one inducing point".into(),
            ));
        }
        if self.inducing.ncols() != self.data.dim() {
            return Err(Error::dims(format!(
                "inducing inputs have {} columns, data has {}",
                self.inducing.ncols(),
                self.data.dim()
            )));
        }
        if self.inducing.iter().any(|z| !z.is_finite()) {
            return Err(Error::InvalidParameter(
                "inducing inputs must be finite".into(),
            ));
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise variance must be positive, got {}",
                self.noise_var
            )));
        }
        self.kernel.validate(Some(self.data.dim()))
    }

    /// Cholesky factor of `K_uu + jitter·I`.
    pub fn kuu_factor(&self) -> Result<SpdFactor> {
        let kuu = self.kernel.cross_cov(&self.inducing, &self.inducing)?;
        cholesky(&kuu, self.relative_jitter * self.kernel.amplitude_sq)
    }
}

/// Per-row quantities shared by every bound, for all rows or a subset.
#[derive(Debug, Clone)]
pub struct NystromCache {
    pub kuu: SpdFactor,
    /// n×M cross-covariance for the cached rows.
    pub kfu: DMatrix<f64>,
    /// `A = L⁻¹ K_uf`, M×n; column `c` holds `L⁻¹ k_u(x_{rows[c]})`.
    pub a: DMatrix<f64>,
    pub qdiag: DVector<f64>,
    pub kdiag: DVector<f64>,
    /// `max(k_ii − q_ii, 0)`.
    pub residual: DVector<f64>,
    /// Smallest residual before clamping.
    pub raw_residual_min: f64,
    pub clamped_count: usize,
    rows: Vec<usize>,
    full: bool,
    positions: HashMap<usize, usize>,
}

impl NystromCache {
    /// Global data indices of the cached columns.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn is_full(&self) -> bool {
        self.full
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Column holding data row `index`, if cached.
    pub fn column_of(&self, index: usize) -> Option<usize> {
        if self.full {
            (index < self.rows.len()).then_some(index)
        } else {
            self.positions.get(&index).copied()
        }
    }

    pub fn residual_sum(&self) -> f64 {
        self.residual.sum()
    }
}

/// Builds the cache over every training row.
pub fn build_cache(model: &SparseModel) -> Result<NystromCache> {
    let rows: Vec<usize> = (0..model.data.len()).collect();
    build_cache_inner(model, rows, true)
}

/// Builds the cache over `rows` only, at O(|rows| M²) cost.
pub fn build_cache_rows(model: &SparseModel, rows: &[usize]) -> Result<NystromCache> {
    let n = model.data.len();
    if let Some(&bad) = rows.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index: bad, len: n });
    }
    build_cache_inner(model, rows.to_vec(), false)
}

fn build_cache_inner(model: &SparseModel, rows: Vec<usize>, full: bool) -> Result<NystromCache> {
    model.validate()?;
    let kuu = model.kuu_factor()?;
    let x = if full {
        model.data.x.clone()
    } else {
        model.data.subset(&rows).x
    };
    let kfu = model.kernel.cross_cov(&x, &model.inducing)?;
    let a = kuu.solve_lower(&kfu.transpose())?;
    let qdiag = DVector::from_iterator(a.ncols(), a.column_iter().map(|c| c.norm_squared()));
    let kdiag = model.kernel.diag_cov(&x);
    let raw = &kdiag - &qdiag;
    let raw_residual_min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let clamped_count = raw.iter().filter(|&&r| r < 0.0).count();
    let residual = raw.map(|r| r.max(0.0));
    let positions = if full {
        HashMap::new()
    } else {
        rows.iter().enumerate().map(|(c, &i)| (i, c)).collect()
    };
    Ok(NystromCache {
        kuu,
        kfu,
        a,
        qdiag,
        kdiag,
        residual,
        raw_residual_min,
        clamped_count,
        rows,
        full,
        positions,
    })
}

/// Value of a bound together with its decomposition and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound: f64,
    /// Data-fit term: the DTC log likelihood for collapsed bounds, the summed
    /// expected log likelihood for uncollapsed ones.
    pub dtc_term: f64,
    /// Penalty on the Nyström residuals (and the `q(f|u)` KL when `v` is free).
    pub reg_term: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_term: Option<f64>,
    pub v_min: f64,
    pub v_max: f64,
    pub clamped_count: usize,
    #[serde(skip)]
    pub residual_min: f64,
    #[serde(skip)]
    pub residual_max: f64,
    /// Per-point `v_i*` for the new collapsed bound.
    #[serde(skip)]
    pub optimal_v: Option<DVector<f64>>,
}

impl BoundReport {
    pub(crate) fn new(
        dtc_term: f64,
        reg_term: f64,
        kl_term: Option<f64>,
        cache: &NystromCache,
    ) -> Self {
        let (rmin, rmax) = min_max(cache.residual.iter().copied());
        BoundReport {
            bound: dtc_term + reg_term - kl_term.unwrap_or(0.0),
            dtc_term,
            reg_term,
            kl_term,
            v_min: 1.0,
            v_max: 1.0,
            clamped_count: cache.clamped_count,
            residual_min: rmin,
            residual_max: rmax,
            optimal_v: None,
        }
    }

    pub(crate) fn with_v_range(mut self, vmin: f64, vmax: f64) -> Self {
        self.v_min = vmin;
        self.v_max = vmax;
        self
    }
}

pub(crate) fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

fn require_full(cache: &NystromCache, model: &SparseModel) -> Result<()> {
    if !cache.full || cache.len() != model.data.len() {
        return Err(Error::dims("collapsed bounds need a cache over all rows"));
    }
    Ok(())
}

/// `B = I + A Aᵀ/σ²` and its factor; `Λ = K_uu + σ⁻² K_uf K_fu = L B Lᵀ`.
struct DtcTerms {
    b_factor: SpdFactor,
    /// `LB⁻¹ A y / σ²`.
    c: DVector<f64>,
    value: f64,
}

fn dtc_terms(model: &SparseModel, cache: &NystromCache) -> Result<DtcTerms> {
    require_full(cache, model)?;
    let s2 = model.noise_var;
    let y = &model.data.y;
    let n = y.len() as f64;
    let m = cache.a.nrows();
    let mut b = &cache.a * cache.a.transpose() / s2;
    for i in 0..m {
        b[(i, i)] += 1.0;
    }
    let b_factor = cholesky(&b, 0.0)?;
    let ay = &cache.a * y;
    let c = b_factor
        .solve_lower(&DMatrix::from_column_slice(m, 1, ay.as_slice()))?
        .column(0)
        / s2;
    // log|Q_ff + σ²I| = N log σ² + log|B|
    let logdet = n * s2.ln() + b_factor.logdet();
    // yᵀ(Q_ff + σ²I)⁻¹y = yᵀy/σ² − ‖c‖²
    let quad = y.norm_squared() / s2 - c.norm_squared();
    let value = -0.5 * (n * (2.0 * PI).ln() + logdet + quad);
    Ok(DtcTerms {
        b_factor,
        c: c.into_owned(),
        value,
    })
}

/// `log N(y | 0, Q_ff + σ²I)` in O(NM²).
pub fn dtc_log_likelihood(model: &SparseModel, cache: &NystromCache) -> Result<f64> {
    Ok(dtc_terms(model, cache)?.value)
}

/// Classic collapsed bound: DTC term minus `(1/2σ²) Σ r_i`.
pub fn elbo_sgpr(model: &SparseModel, cache: &NystromCache) -> Result<BoundReport> {
    let dtc = dtc_log_likelihood(model, cache)?;
    let reg = -0.5 * cache.residual_sum() / model.noise_var;
    Ok(BoundReport::new(dtc, reg, None, cache))
}

/// `v_i* = (1 + r_i/σ²)⁻¹`, always in (0, 1].
pub fn optimal_v(cache: &NystromCache, noise_var: f64) -> DVector<f64> {
    cache.residual.map(|r| 1.0 / (1.0 + r / noise_var))
}

/// Tighter collapsed bound: DTC term minus `½ Σ log(1 + r_i/σ²)`.
pub fn elbo_sgpr_new(model: &SparseModel, cache: &NystromCache) -> Result<BoundReport> {
    let dtc = dtc_log_likelihood(model, cache)?;
    let s2 = model.noise_var;
    let reg = -0.5 * cache.residual.iter().map(|r| (r / s2).ln_1p()).sum::<f64>();
    let v = optimal_v(cache, s2);
    let (vmin, vmax) = min_max(v.iter().copied());
    let mut report = BoundReport::new(dtc, reg, None, cache).with_v_range(vmin, vmax);
    report.optimal_v = Some(v);
    Ok(report)
}

/// Optimal scalar `v* = (1 + Σ r_i/(Nσ²))⁻¹` when `V` is restricted to `vI`.
pub fn spherical_optimal_v(cache: &NystromCache, noise_var: f64) -> f64 {
    let n = cache.len().max(1) as f64;
    1.0 / (1.0 + cache.residual_sum() / (n * noise_var))
}

/// Collapsed bound with spherical `V = vI` at its optimum:
/// DTC term minus `(N/2) log(1 + Σ r_i/(Nσ²))`.
pub fn elbo_sgpr_artemev(model: &SparseModel, cache: &NystromCache) -> Result<BoundReport> {
    let dtc = dtc_log_likelihood(model, cache)?;
    let n = cache.len() as f64;
    let reg = -0.5 * n * (cache.residual_sum() / (n * model.noise_var)).ln_1p();
    let v = spherical_optimal_v(cache, model.noise_var);
    Ok(BoundReport::new(dtc, reg, None, cache).with_v_range(v, v))
}

/// `KL[q(f|u) ‖ p(f|u)] = ½ Σ (v_i − log v_i − 1)`.
pub fn kl_qfu_pfu(v: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (index, &value) in v.iter().enumerate() {
        if !(value > 0.0) {
            return Err(Error::NonPositiveV { index, value });
        }
        total += value - value.ln() - 1.0;
    }
    Ok(0.5 * total)
}

/// Optimal Gaussian over inducing values (shared by the classic and new bounds).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimalQu {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// `q*(u) = N(σ⁻² K_uu Λ⁻¹ K_uf y, K_uu Λ⁻¹ K_uu)`, computed as
/// `σ⁻² L B⁻¹ A y` and `L B⁻¹ Lᵀ`.
pub fn optimal_qu(model: &SparseModel, cache: &NystromCache) -> Result<OptimalQu> {
    let terms = dtc_terms(model, cache)?;
    let l = cache.kuu.lower();
    let m = l.nrows();
    // B⁻¹ A y / σ² = LB⁻ᵀ c
    let c = DMatrix::from_column_slice(m, 1, terms.c.as_slice());
    let binv_ay = terms.b_factor.solve_upper(&c)?;
    let mean = (l * binv_ay).column(0).into_owned();
    // L LB⁻ᵀ, so cov = (L LB⁻ᵀ)(L LB⁻ᵀ)ᵀ
    let g = terms.b_factor.solve_lower(&l.transpose())?.transpose();
    let cov = crate::linalg::symmetrize(&(&g * g.transpose()));
    Ok(OptimalQu { mean, cov })
}

/// A Gaussian over the inducing values `u`, expressible in u-space.
pub trait InducingPosterior {
    /// Mean and covariance of `q(u)` given the factor of `K_uu`.
    fn u_moments(&self, kuu: &SpdFactor) -> Result<(DVector<f64>, DMatrix<f64>)>;
}

impl InducingPosterior for OptimalQu {
    fn u_moments(&self, kuu: &SpdFactor) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if self.mean.len() != kuu.dim() || self.cov.nrows() != kuu.dim() {
            return Err(Error::dims(
                "q(u) does not match the number of inducing points",
            ));
        }
        Ok((self.mean.clone(), self.cov.clone()))
    }
}

/// `q(f*) = ∫ p(f*|u) q(u) du`: mean `K_*u K_uu⁻¹ m`, covariance
/// `K_** − K_*u K_uu⁻¹ K_u* + K_*u K_uu⁻¹ S K_uu⁻¹ K_u*`.
pub fn sparse_predict(
    model: &SparseModel,
    qu: &dyn InducingPosterior,
    xstar: &DMatrix<f64>,
    include_noise: bool,
) -> Result<Prediction> {
    let kuu = model.kuu_factor()?;
    predict_with_factor(
        &model.kernel,
        &model.inducing,
        &kuu,
        qu,
        xstar,
        include_noise.then_some(model.noise_var),
    )
}

pub(crate) fn predict_with_factor(
    kernel: &KernelSpec,
    inducing: &DMatrix<f64>,
    kuu: &SpdFactor,
    qu: &dyn InducingPosterior,
    xstar: &DMatrix<f64>,
    noise_var: Option<f64>,
) -> Result<Prediction> {
    if xstar.ncols() != inducing.ncols() {
        return Err(Error::dims(format!(
            "test inputs have {} columns, inducing inputs {}",
            xstar.ncols(),
            inducing.ncols()
        )));
    }
    let (m, s) = qu.u_moments(kuu)?;
    let kus = kernel.cross_cov(inducing, xstar)?;
    let kss = kernel.cross_cov(xstar, xstar)?;
    let w = kuu.solve_lower(&kus)?; // L⁻¹ K_u*
    let p = kuu.solve_upper(&w)?; // K_uu⁻¹ K_u*
    let mean = p.transpose() * &m;
    let mut cov = kss - w.transpose() * &w + p.transpose() * &s * &p;
    cov = crate::linalg::symmetrize(&cov);
    if let Some(s2) = noise_var {
        for i in 0..cov.nrows() {
            cov[(i, i)] += s2;
        }
    }
    Ok(Prediction { mean, cov })
}

/// Marginal predictive means and variances only (no N*×N* covariance).
pub(crate) fn predict_marginals_with_factor(
    kernel: &KernelSpec,
    inducing: &DMatrix<f64>,
    kuu: &SpdFactor,
    qu: &dyn InducingPosterior,
    xstar: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if xstar.ncols() != inducing.ncols() {
        return Err(Error::dims(
            "test input dimension differs from inducing inputs",
        ));
    }
    let (m, s) = qu.u_moments(kuu)?;
    let kus = kernel.cross_cov(inducing, xstar)?;
    let w = kuu.solve_lower(&kus)?;
    let p = kuu.solve_upper(&w)?;
    let mean = p.transpose() * &m;
    let sp = &s * &p;
    let kdiag = kernel.diag_cov(xstar);
    let var = DVector::from_fn(xstar.nrows(), |j, _| {
        let q = w.column(j).norm_squared();
        let extra = p.column(j).dot(&sp.column(j));
        (kdiag[j] - q + extra).max(0.0)
    });
    Ok((mean, var))
}
