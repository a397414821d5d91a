//! Bounds for non-Gaussian likelihoods with `q(f|u)` covariance `v R`,
//! `R = K_ff − Q_ff`, for a single scalar `v > 0`.
//!
//! With this choice each `q(f_i)` stays cheap:
//! `N(p_iᵀ m, v r_i + s_i)` (see [`crate::stochastic::latent_marginals`]), and
//! the bound is
//!
//! ```text
//! Σ_i E_{q(f_i)}[log p(y_i | f_i)] − (N/2)(v − log v − 1) − KL[q(u) ‖ p(u)]
//! ```
//!
//! `v = 1` gives the usual SVGP bound. Poisson counts with an exponential
//! link have a closed-form expectation; other likelihoods fall back to
//! Gauss–Hermite quadrature.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::collapsed::{build_cache_rows, BoundReport, NystromCache, SparseModel};
use crate::error::{Error, Result};
use crate::stochastic::{kl_qu_pu, latent_marginals, GaussianVariational};

/// Scale `v` of the residual covariance in `q(f|u)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarV(f64);

impl ScalarV {
    pub fn new(v: f64) -> Result<Self> {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::NonPositiveV { index: 0, value: v });
        }
        Ok(ScalarV(v))
    }

    /// `v = 1`, i.e. `q(f|u) = p(f|u)`.
    pub fn one() -> Self {
        ScalarV(1.0)
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// `½ (v − log v − 1)`, the per-point `KL[q(f_i|u) ‖ p(f_i|u)]`.
    pub fn kl_per_point(self) -> f64 {
        0.5 * (self.0 - self.0.ln() - 1.0)
    }
}

/// Gaussian marginal `q(f_i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalQfi {
    pub mean: f64,
    pub variance: f64,
}

/// `q(f_i)` for data row `index`, which must be present in `cache`.
pub fn marginal_qfi(
    q: &GaussianVariational,
    cache: &NystromCache,
    v: ScalarV,
    index: usize,
) -> Result<MarginalQfi> {
    let col = cache.column_of(index).ok_or(Error::IndexOutOfRange {
        index,
        len: cache.len(),
    })?;
    let lm = latent_marginals(q, cache)?;
    Ok(MarginalQfi {
        mean: lm.mean[col],
        variance: v.get() * cache.residual[col] + lm.var[col],
    })
}

/// `q(f_i)` for every cached row, in cache order.
pub fn marginals_qfi(
    q: &GaussianVariational,
    cache: &NystromCache,
    v: ScalarV,
) -> Result<Vec<MarginalQfi>> {
    let lm = latent_marginals(q, cache)?;
    Ok((0..cache.len())
        .map(|c| MarginalQfi {
            mean: lm.mean[c],
            variance: v.get() * cache.residual[c] + lm.var[c],
        })
        .collect())
}

fn check_count(y: f64) -> Result<()> {
    if y < 0.0 {
        return Err(Error::NegativeCount(y));
    }
    if !y.is_finite() || y.fract() != 0.0 {
        return Err(Error::InvalidCount(y));
    }
    Ok(())
}

/// `E_{q(f)}[log Poisson(y | e^f)] = y μ − exp(μ + s/2) − log y!`.
pub fn expected_poisson_loglik(marg: &MarginalQfi, y: f64) -> Result<f64> {
    check_count(y)?;
    Ok(y * marg.mean - (marg.mean + 0.5 * marg.variance).exp() - ln_gamma(y + 1.0))
}

/// Nodes and weights for `E_{N(0,1)}[g(z)] ≈ Σ_k w_k g(z_k)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

pub const DEFAULT_QUADRATURE_NODES: usize = 20;

impl GaussHermite {
    /// Golub–Welsch: eigen-decomposition of the Jacobi matrix of the
    /// probabilists' Hermite polynomials.
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter(
                "need at least one quadrature node".into(),
            ));
        }
        let jacobi = DMatrix::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64).sqrt()
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (nodes, weights) = pairs.into_iter().unzip();
        Ok(GaussHermite { nodes, weights })
    }

    pub fn default_rule() -> &'static GaussHermite {
        static RULE: OnceLock<GaussHermite> = OnceLock::new();
        RULE.get_or_init(|| GaussHermite::new(DEFAULT_QUADRATURE_NODES).unwrap())
    }

    /// `E_{N(f; mean, variance)}[g(f)]`.
    pub fn expect(&self, marg: &MarginalQfi, g: impl Fn(f64) -> f64) -> f64 {
        let sd = marg.variance.max(0.0).sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(z, w)| w * g(marg.mean + sd * z))
            .sum()
    }

    /// `log E[exp(h(f))]`, computed stably.
    pub fn log_expect_exp(&self, marg: &MarginalQfi, h: impl Fn(f64) -> f64) -> f64 {
        let sd = marg.variance.max(0.0).sqrt();
        let terms: Vec<f64> = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(z, w)| w.ln() + h(marg.mean + sd * z))
            .collect();
        let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
    }
}

/// A likelihood `p(y | f)` that factorizes over scalar latent values.
pub trait ScalarLikelihood: Sync {
    fn check_target(&self, y: f64) -> Result<()>;

    fn log_density(&self, y: f64, f: f64) -> f64;

    /// `E_{q(f)}[log p(y | f)]`; quadrature unless overridden.
    fn expected_loglik(&self, marg: &MarginalQfi, y: f64) -> Result<f64> {
        self.check_target(y)?;
        Ok(GaussHermite::default_rule().expect(marg, |f| self.log_density(y, f)))
    }

    /// `log ∫ p(y | f) q(f) df`.
    fn predictive_log_density(&self, marg: &MarginalQfi, y: f64) -> Result<f64> {
        self.check_target(y)?;
        Ok(GaussHermite::default_rule().log_expect_exp(marg, |f| self.log_density(y, f)))
    }
}

/// Poisson counts with intensity `e^f`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Poisson;

impl Poisson {
    /// Predictive mean intensity `E[e^f] = exp(μ + s/2)`.
    pub fn predictive_mean(marg: &MarginalQfi) -> f64 {
        (marg.mean + 0.5 * marg.variance).exp()
    }
}

impl ScalarLikelihood for Poisson {
    fn check_target(&self, y: f64) -> Result<()> {
        check_count(y)
    }

    fn log_density(&self, y: f64, f: f64) -> f64 {
        y * f - f.exp() - ln_gamma(y + 1.0)
    }

    fn expected_loglik(&self, marg: &MarginalQfi, y: f64) -> Result<f64> {
        expected_poisson_loglik(marg, y)
    }
}

/// Routes a likelihood's expectation through quadrature even when it has a
/// closed form.
#[derive(Debug, Clone)]
pub struct Quadrature<L> {
    pub inner: L,
    pub rule: GaussHermite,
}

impl<L: ScalarLikelihood> ScalarLikelihood for Quadrature<L> {
    fn check_target(&self, y: f64) -> Result<()> {
        self.inner.check_target(y)
    }

    fn log_density(&self, y: f64, f: f64) -> f64 {
        self.inner.log_density(y, f)
    }

    fn expected_loglik(&self, marg: &MarginalQfi, y: f64) -> Result<f64> {
        self.check_target(y)?;
        Ok(self.rule.expect(marg, |f| self.inner.log_density(y, f)))
    }

    fn predictive_log_density(&self, marg: &MarginalQfi, y: f64) -> Result<f64> {
        self.check_target(y)?;
        Ok(self
            .rule
            .log_expect_exp(marg, |f| self.inner.log_density(y, f)))
    }
}

fn batch_bound(
    q: &GaussianVariational,
    model: &SparseModel,
    cache: &NystromCache,
    v: ScalarV,
    likelihood: &dyn ScalarLikelihood,
) -> Result<BoundReport> {
    let margs = marginals_qfi(q, cache, v)?;
    let mut fit = 0.0;
    for (marg, &i) in margs.iter().zip(cache.rows()) {
        fit += likelihood.expected_loglik(marg, model.data.y[i])?;
    }
    let n = model.data.len() as f64;
    let scale = n / cache.len() as f64;
    let reg = -n * v.kl_per_point();
    let kl = kl_qu_pu(q, &cache.kuu)?;
    Ok(BoundReport::new(scale * fit, reg, Some(kl), cache).with_v_range(v.get(), v.get()))
}

/// `Σ_i E_{q(f_i)}[log p(y_i|f_i)] − (N/2)(v − log v − 1) − KL[q(u) ‖ p(u)]`.
pub fn elbo_nonconjugate(
    q: &GaussianVariational,
    model: &SparseModel,
    cache: &NystromCache,
    v: ScalarV,
    likelihood: &dyn ScalarLikelihood,
) -> Result<BoundReport> {
    if !cache.is_full() || cache.len() != model.data.len() {
        return Err(Error::dims("full-data bound needs a cache over all rows"));
    }
    batch_bound(q, model, cache, v, likelihood)
}

/// Unbiased estimate of [`elbo_nonconjugate`]: the data sum is rescaled by
/// `N/|B|`, the `v` and `q(u)` penalties enter unscaled.
pub fn elbo_nonconjugate_minibatch(
    q: &GaussianVariational,
    model: &SparseModel,
    v: ScalarV,
    likelihood: &dyn ScalarLikelihood,
    batch: &[usize],
) -> Result<BoundReport> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let cache = build_cache_rows(model, batch)?;
    batch_bound(q, model, &cache, v, likelihood)
}

/// Gaussian log density, exposed for quadrature cross-checks.
pub fn gaussian_log_density(y: f64, f: f64, noise_var: f64) -> f64 {
    -0.5 * (2.0 * PI * noise_var).ln() - (y - f).powi(2) / (2.0 * noise_var)
}

/// Predictive marginals `q(f*)` at new inputs (no residual scaling by `v`,
/// which is only defined on training rows).
pub fn predict_marginals(
    model: &SparseModel,
    q: &GaussianVariational,
    xstar: &DMatrix<f64>,
) -> Result<Vec<MarginalQfi>> {
    let kuu = model.kuu_factor()?;
    let (mean, var): (DVector<f64>, DVector<f64>) =
        crate::collapsed::predict_marginals_with_factor(
            &model.kernel,
            &model.inducing,
            &kuu,
            q,
            xstar,
        )?;
    Ok(mean
        .iter()
        .zip(var.iter())
        .map(|(&m, &s)| MarginalQfi {
            mean: m,
            variance: s,
        })
        .collect())
}
