//! Uncollapsed bounds with an explicit Gaussian `q(u)`, and their minibatch
//! estimators.
//!
//! Both variants decompose over data points:
//!
//! ```text
//! Σ_i [ E_q[log N(y_i | f_i, σ²)] − penalty(r_i) ] − KL[q(u) ‖ p(u)]
//! ```
//!
//! where the expectation is under the marginal of `q(u) p(f_i|u)` without its
//! residual part, and `penalty(r) = r/(2σ²)` (classic) or `½ log(1 + r/σ²)`
//! (new, after optimizing the per-point `v_i` in closed form). Summing a
//! random batch and rescaling by `N/|B|` is unbiased.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collapsed::{
    build_cache_rows, kl_qfu_pfu, min_max, BoundReport, InducingPosterior, NystromCache, OptimalQu,
    SparseModel,
};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, SpdFactor};

/// `q(u) = N(m, C Cᵀ)` with lower-triangular `C`.
///
/// When `whitened`, `m` and `C` describe `v = L⁻¹ u` where `K_uu = L Lᵀ`, so the
/// prior is `N(0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianVariational {
    pub mean: DVector<f64>,
    pub cov_factor: DMatrix<f64>,
    pub whitened: bool,
}

impl GaussianVariational {
    pub fn new(mean: DVector<f64>, cov_factor: DMatrix<f64>, whitened: bool) -> Result<Self> {
        let q = GaussianVariational {
            mean,
            cov_factor,
            whitened,
        };
        q.validate()?;
        Ok(q)
    }

    /// Whitened prior: zero mean, identity covariance.
    pub fn whitened_prior(m: usize) -> Self {
        GaussianVariational {
            mean: DVector::zeros(m),
            cov_factor: DMatrix::identity(m, m),
            whitened: true,
        }
    }

    /// Builds `q(u)` from u-space moments, stored in the requested parametrization.
    pub fn from_moments(
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        kuu: &SpdFactor,
        whitened: bool,
    ) -> Result<Self> {
        let c = cholesky(cov, 0.0)?.lower().clone();
        let q = GaussianVariational {
            mean: mean.clone(),
            cov_factor: c,
            whitened: false,
        };
        if whitened {
            q.to_whitened(kuu)
        } else {
            Ok(q)
        }
    }

    pub fn from_optimal(q: &OptimalQu, kuu: &SpdFactor, whitened: bool) -> Result<Self> {
        Self::from_moments(&q.mean, &q.cov, kuu, whitened)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.mean.len();
        let c = &self.cov_factor;
        if c.nrows() != m || c.ncols() != m {
            return Err(Error::dims(format!(
                "covariance factor is {}×{}, mean has length {m}",
                c.nrows(),
                c.ncols()
            )));
        }
        for j in 0..m {
            if !(c[(j, j)] > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "covariance factor diagonal must be positive, got {} at {j}",
                    c[(j, j)]
                )));
            }
            for i in 0..j {
                if c[(i, j)] != 0.0 {
                    return Err(Error::InvalidParameter(
                        "covariance factor must be lower triangular".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn cov(&self) -> DMatrix<f64> {
        &self.cov_factor * self.cov_factor.transpose()
    }

    /// `m_u = L m_w`, `C_u = L C_w`.
    pub fn to_unwhitened(&self, kuu: &SpdFactor) -> Result<Self> {
        self.check_dim(kuu)?;
        if !self.whitened {
            return Ok(self.clone());
        }
        let l = kuu.lower();
        Ok(GaussianVariational {
            mean: l * &self.mean,
            cov_factor: (l * &self.cov_factor).lower_triangle(),
            whitened: false,
        })
    }

    /// `m_w = L⁻¹ m_u`, `C_w = L⁻¹ C_u`.
    pub fn to_whitened(&self, kuu: &SpdFactor) -> Result<Self> {
        self.check_dim(kuu)?;
        if self.whitened {
            return Ok(self.clone());
        }
        let m = DMatrix::from_column_slice(self.dim(), 1, self.mean.as_slice());
        Ok(GaussianVariational {
            mean: kuu.solve_lower(&m)?.column(0).into_owned(),
            cov_factor: kuu.solve_lower(&self.cov_factor)?.lower_triangle(),
            whitened: true,
        })
    }

    fn check_dim(&self, kuu: &SpdFactor) -> Result<()> {
        if self.dim() != kuu.dim() {
            return Err(Error::dims(format!(
                "q(u) has dimension {}, K_uu has {}",
                self.dim(),
                kuu.dim()
            )));
        }
        Ok(())
    }

    fn log_det_cov(&self) -> f64 {
        2.0 * self
            .cov_factor
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>()
    }
}

impl InducingPosterior for GaussianVariational {
    fn u_moments(&self, kuu: &SpdFactor) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let u = self.to_unwhitened(kuu)?;
        let cov = u.cov();
        Ok((u.mean, cov))
    }
}

/// `KL[q(u) ‖ p(u)]` with `p(u) = N(0, K_uu)`.
pub fn kl_qu_pu(q: &GaussianVariational, kuu: &SpdFactor) -> Result<f64> {
    q.check_dim(kuu)?;
    let m = q.dim() as f64;
    if q.whitened {
        return Ok(
            0.5 * (q.cov_factor.norm_squared() + q.mean.norm_squared() - m - q.log_det_cov())
        );
    }
    let lc = kuu.solve_lower(&q.cov_factor)?;
    let lm = kuu.solve_lower(&DMatrix::from_column_slice(q.dim(), 1, q.mean.as_slice()))?;
    Ok(0.5 * (lc.norm_squared() + lm.norm_squared() - m + kuu.logdet() - q.log_det_cov()))
}

/// Mean and `q(u)`-induced variance of each cached `f_i`, excluding the
/// Nyström residual.
#[derive(Debug, Clone)]
pub struct LatentMarginals {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

/// `μ_i = p_iᵀ m`, `s_i = ‖Cᵀ p_i‖²`, with `p_i = L⁻¹ k_u(x_i)` when whitened
/// and `K_uu⁻¹ k_u(x_i)` otherwise.
pub fn latent_marginals(q: &GaussianVariational, cache: &NystromCache) -> Result<LatentMarginals> {
    q.check_dim(&cache.kuu)?;
    let p = if q.whitened {
        cache.a.clone()
    } else {
        cache.kuu.solve_upper(&cache.a)?
    };
    let mean = p.transpose() * &q.mean;
    let w = q.cov_factor.transpose() * &p;
    let var = DVector::from_iterator(w.ncols(), w.column_iter().map(|c| c.norm_squared()));
    Ok(LatentMarginals { mean, var })
}

/// `E_{N(f; μ, var)}[log N(y | f, σ²)] = −½ log 2πσ² − ((y − μ)² + var)/(2σ²)`.
pub fn gaussian_expected_loglik(y: f64, mean: f64, var: f64, noise_var: f64) -> f64 {
    -0.5 * (2.0 * PI * noise_var).ln() - ((y - mean).powi(2) + var) / (2.0 * noise_var)
}

/// `E[log N(y_i | f_i, σ²)]` under `q(f_i) = ∫ p(f_i|u) q(u) du`, i.e. with
/// variance `s_i + r_i`. `index` is a data row that must be present in `cache`.
pub fn expected_gaussian_loglik(
    model: &SparseModel,
    cache: &NystromCache,
    q: &GaussianVariational,
    index: usize,
) -> Result<f64> {
    let n = model.data.len();
    if index >= n {
        return Err(Error::IndexOutOfRange { index, len: n });
    }
    let col = cache.column_of(index).ok_or(Error::IndexOutOfRange {
        index,
        len: cache.len(),
    })?;
    q.check_dim(&cache.kuu)?;
    let p = if q.whitened {
        cache.a.column(col).into_owned()
    } else {
        let a = DMatrix::from_column_slice(cache.a.nrows(), 1, cache.a.column(col).as_slice());
        cache.kuu.solve_upper(&a)?.column(0).into_owned()
    };
    let mean = p.dot(&q.mean);
    let s = (q.cov_factor.transpose() * &p).norm_squared();
    Ok(gaussian_expected_loglik(
        model.data.y[index],
        mean,
        s + cache.residual[col],
        model.noise_var,
    ))
}

/// Which residual penalty an uncollapsed bound uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundVariant {
    /// `r_i/(2σ²)`, i.e. `q(f|u) = p(f|u)`.
    Classic,
    /// `½ log(1 + r_i/σ²)`, the per-point optimum over `v_i`.
    New,
}

impl BoundVariant {
    pub fn penalty(self, residual: f64, noise_var: f64) -> f64 {
        match self {
            BoundVariant::Classic => 0.5 * residual / noise_var,
            BoundVariant::New => 0.5 * (residual / noise_var).ln_1p(),
        }
    }
}

fn batch_bound(
    model: &SparseModel,
    cache: &NystromCache,
    q: &GaussianVariational,
    variant: BoundVariant,
    scale: f64,
) -> Result<BoundReport> {
    let lm = latent_marginals(q, cache)?;
    let s2 = model.noise_var;
    let mut fit = 0.0;
    let mut reg = 0.0;
    for (c, &i) in cache.rows().iter().enumerate() {
        fit += gaussian_expected_loglik(model.data.y[i], lm.mean[c], lm.var[c], s2);
        reg -= variant.penalty(cache.residual[c], s2);
    }
    let kl = kl_qu_pu(q, &cache.kuu)?;
    let mut report = BoundReport::new(scale * fit, scale * reg, Some(kl), cache);
    if variant == BoundVariant::New {
        let (vmin, vmax) = min_max(cache.residual.iter().map(|r| 1.0 / (1.0 + r / s2)));
        report = report.with_v_range(vmin, vmax);
    }
    Ok(report)
}

/// Full-data uncollapsed bound for the given `q(u)`.
pub fn elbo_svgp_uncollapsed(
    model: &SparseModel,
    cache: &NystromCache,
    q: &GaussianVariational,
    variant: BoundVariant,
) -> Result<BoundReport> {
    if !cache.is_full() || cache.len() != model.data.len() {
        return Err(Error::dims("full-data bound needs a cache over all rows"));
    }
    batch_bound(model, cache, q, variant, 1.0)
}

/// Unbiased estimate of [`elbo_svgp_uncollapsed`] from the rows in `batch`;
/// only those rows are touched.
pub fn elbo_svgp_minibatch(
    model: &SparseModel,
    q: &GaussianVariational,
    batch: &[usize],
    variant: BoundVariant,
) -> Result<BoundReport> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let cache = build_cache_rows(model, batch)?;
    let scale = model.data.len() as f64 / batch.len() as f64;
    batch_bound(model, &cache, q, variant, scale)
}

/// Uncollapsed bound with an explicit per-point `v`:
/// `Σ_i E[log N(y_i|f_i,σ²)]` under variance `s_i + v_i r_i`, minus
/// `KL[q(f|u) ‖ p(f|u)]` and `KL[q(u) ‖ p(u)]`.
pub fn elbo_svgp_with_v(
    model: &SparseModel,
    cache: &NystromCache,
    q: &GaussianVariational,
    v: &[f64],
) -> Result<BoundReport> {
    if v.len() != cache.len() {
        return Err(Error::dims(format!(
            "{} values of v for {} rows",
            v.len(),
            cache.len()
        )));
    }
    let kl_fu = kl_qfu_pfu(v)?;
    let lm = latent_marginals(q, cache)?;
    let s2 = model.noise_var;
    let mut fit = 0.0;
    let mut reg = -kl_fu;
    for (c, &i) in cache.rows().iter().enumerate() {
        fit += gaussian_expected_loglik(model.data.y[i], lm.mean[c], lm.var[c], s2);
        reg -= 0.5 * v[c] * cache.residual[c] / s2;
    }
    let scale = model.data.len() as f64 / cache.len() as f64;
    let kl = kl_qu_pu(q, &cache.kuu)?;
    let (vmin, vmax) = min_max(v.iter().copied());
    Ok(BoundReport::new(scale * fit, scale * reg, Some(kl), cache).with_v_range(vmin, vmax))
}

/// Shuffles the row indices once per epoch and cuts them into batches; the
/// last batch holds the remainder.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if batch_size == 0 {
            return Err(Error::InvalidParameter(
                "batch size must be positive".into(),
            ));
        }
        Ok(EpochSampler {
            order: (0..n).collect(),
            batch_size: batch_size.min(n),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        self.order.shuffle(&mut self.rng);
        self.order
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}
