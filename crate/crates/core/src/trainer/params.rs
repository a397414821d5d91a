//! Flat unconstrained parameter vector and its transforms.
//!
//! Layout, in order: noise scale σ, amplitude σ_f, lengthscales (1 or d),
//! inducing inputs Z (row-major, M×d), q(u) mean (M), q(u) Cholesky factor
//! (packed lower triangle, column by column), and `v`. Only the blocks a
//! method uses are present.
//!
//! Scales go through softplus: `σ = σ_min + softplus(p)`, `σ_f = softplus(p)`,
//! `ℓ = softplus(p)`, `v = softplus(p)`; the factor diagonal is softplus too.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::tape::softplus;
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::stochastic::GaussianVariational;

/// Lower clamp on the noise standard deviation.
pub const MIN_NOISE_SD: f64 = 1e-3;

/// Inverse of softplus, accurate for large arguments.
pub fn inverse_softplus(y: f64) -> Result<f64> {
    if !(y > 0.0 && y.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "softplus⁻¹ needs a positive finite value, got {y}"
        )));
    }
    Ok(if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    })
}

/// Positions of each parameter block in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub family: KernelFamily,
    pub input_dim: usize,
    pub num_inducing: usize,
    pub noise: usize,
    pub amplitude: usize,
    pub lengthscales: Range<usize>,
    pub inducing: Option<Range<usize>>,
    pub q_mean: Option<Range<usize>>,
    pub q_factor: Option<Range<usize>>,
    pub v: Option<usize>,
    pub len: usize,
}

impl ParamLayout {
    pub fn new(
        family: KernelFamily,
        input_dim: usize,
        num_inducing: Option<usize>,
        variational: bool,
        scalar_v: bool,
    ) -> Self {
        let mut next = 0;
        let mut take = |k: usize| {
            let r = next..next + k;
            next += k;
            r
        };
        let noise = take(1).start;
        let amplitude = take(1).start;
        let lengthscales = take(family.lengthscale_count(input_dim));
        let m = num_inducing.unwrap_or(0);
        let inducing = num_inducing.map(|m| take(m * input_dim));
        let q_mean = (variational && m > 0).then(|| take(m));
        let q_factor = (variational && m > 0).then(|| take(m * (m + 1) / 2));
        let v = scalar_v.then(|| take(1).start);
        ParamLayout {
            family,
            input_dim,
            num_inducing: m,
            noise,
            amplitude,
            lengthscales,
            inducing,
            q_mean,
            q_factor,
            v,
            len: next,
        }
    }
}

/// Parameters in constrained space.
#[derive(Debug, Clone, PartialEq)]
pub struct Constrained {
    pub noise_sd: f64,
    pub amplitude_sd: f64,
    pub lengthscales: Vec<f64>,
    pub inducing: Option<DMatrix<f64>>,
    pub q: Option<GaussianVariational>,
    pub v: Option<f64>,
}

impl Constrained {
    pub fn noise_var(&self) -> f64 {
        self.noise_sd * self.noise_sd
    }

    pub fn kernel(&self, family: KernelFamily) -> KernelSpec {
        KernelSpec {
            family,
            amplitude_sq: self.amplitude_sd * self.amplitude_sd,
            lengthscales: self.lengthscales.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedParams {
    pub values: DVector<f64>,
    pub layout: ParamLayout,
}

impl UnconstrainedParams {
    pub fn unconstrain(c: &Constrained, layout: &ParamLayout) -> Result<Self> {
        let mut p = DVector::zeros(layout.len);
        if !(c.noise_sd > MIN_NOISE_SD) {
            return Err(Error::InvalidParameter(format!(
                "noise sd {} must exceed {MIN_NOISE_SD}",
                c.noise_sd
            )));
        }
        p[layout.noise] = inverse_softplus(c.noise_sd - MIN_NOISE_SD)?;
        p[layout.amplitude] = inverse_softplus(c.amplitude_sd)?;
        if c.lengthscales.len() != layout.lengthscales.len() {
            return Err(Error::dims(format!(
                "{} lengthscales for a layout expecting {}",
                c.lengthscales.len(),
                layout.lengthscales.len()
            )));
        }
        for (k, &l) in layout.lengthscales.clone().zip(&c.lengthscales) {
            p[k] = inverse_softplus(l)?;
        }
        let d = layout.input_dim;
        if let Some(r) = &layout.inducing {
            let z = c
                .inducing
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("missing inducing inputs".into()))?;
            if z.shape() != (layout.num_inducing, d) {
                return Err(Error::dims("inducing inputs do not match the layout"));
            }
            for i in 0..layout.num_inducing {
                for k in 0..d {
                    p[r.start + i * d + k] = z[(i, k)];
                }
            }
        }
        if let (Some(rm), Some(rf)) = (&layout.q_mean, &layout.q_factor) {
            let q =
                c.q.as_ref()
                    .ok_or_else(|| Error::InvalidParameter("missing q(u)".into()))?;
            if !q.whitened || q.dim() != layout.num_inducing {
                return Err(Error::InvalidParameter(
                    "training keeps q(u) whitened with M entries".into(),
                ));
            }
            p.rows_mut(rm.start, rm.len()).copy_from(&q.mean);
            let mut k = rf.start;
            let m = layout.num_inducing;
            for j in 0..m {
                for i in j..m {
                    let c = q.cov_factor[(i, j)];
                    p[k] = if i == j { inverse_softplus(c)? } else { c };
                    k += 1;
                }
            }
        }
        if let Some(iv) = layout.v {
            let v =
                c.v.ok_or_else(|| Error::InvalidParameter("missing v".into()))?;
            p[iv] = inverse_softplus(v)?;
        }
        Ok(UnconstrainedParams {
            values: p,
            layout: layout.clone(),
        })
    }

    pub fn constrain(&self) -> Constrained {
        let l = &self.layout;
        let p = &self.values;
        let d = l.input_dim;
        let m = l.num_inducing;
        let inducing = l
            .inducing
            .as_ref()
            .map(|r| DMatrix::from_fn(m, d, |i, k| p[r.start + i * d + k]));
        let q = match (&l.q_mean, &l.q_factor) {
            (Some(rm), Some(rf)) => Some(GaussianVariational {
                mean: p.rows(rm.start, rm.len()).into_owned(),
                cov_factor: unpack_factor(&p.as_slice()[rf.clone()], m, true),
                whitened: true,
            }),
            _ => None,
        };
        Constrained {
            noise_sd: MIN_NOISE_SD + softplus(p[l.noise]),
            amplitude_sd: softplus(p[l.amplitude]),
            lengthscales: l.lengthscales.clone().map(|k| softplus(p[k])).collect(),
            inducing,
            q,
            v: l.v.map(|k| softplus(p[k])),
        }
    }
}

/// Square matrix from packed lower entries (column by column); the diagonal is
/// passed through softplus when `positive_diag`.
pub(crate) fn unpack_factor(packed: &[f64], m: usize, positive_diag: bool) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(m, m);
    let mut k = 0;
    for j in 0..m {
        for i in j..m {
            c[(i, j)] = if i == j && positive_diag {
                softplus(packed[k])
            } else {
                packed[k]
            };
            k += 1;
        }
    }
    c
}

/// Inverse of [`unpack_factor`] without the transform, for gradients.
pub(crate) fn pack_lower(c: &DMatrix<f64>) -> Vec<f64> {
    let m = c.nrows();
    let mut out = Vec::with_capacity(m * (m + 1) / 2);
    for j in 0..m {
        for i in j..m {
            out.push(c[(i, j)]);
        }
    }
    out
}
