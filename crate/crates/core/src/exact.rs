//! Exact GP regression: log marginal likelihood and predictive posterior.
//! This is the reference every sparse bound is compared against.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::linalg::{cholesky, SpdFactor};

/// Largest training set the exact model accepts.
pub const EXACT_GP_MAX_N: usize = 20_000;

/// Gaussian predictive distribution over a set of test points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Prediction {
    pub fn variances(&self) -> DVector<f64> {
        self.cov.diagonal()
    }
}

#[derive(Debug, Clone)]
pub struct ExactGp {
    kernel: KernelSpec,
    noise_var: f64,
    x: DMatrix<f64>,
    y: DVector<f64>,
    factor: SpdFactor,
    alpha: DVector<f64>,
}

impl ExactGp {
    /// Factorizes `K_ff + σ²I` and caches `α = (K_ff + σ²I)⁻¹ y`.
    pub fn new(
        kernel: KernelSpec,
        noise_var: f64,
        x: DMatrix<f64>,
        y: DVector<f64>,
    ) -> Result<Self> {
        let n = x.nrows();
        if n > EXACT_GP_MAX_N {
            return Err(Error::TooLarge {
                n,
                limit: EXACT_GP_MAX_N,
            });
        }
        if y.len() != n {
            return Err(Error::dims(format!("{n} inputs, {} targets", y.len())));
        }
        if !(noise_var > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise variance must be positive, got {noise_var}"
            )));
        }
        let mut k = kernel.cross_cov(&x, &x)?;
        for i in 0..n {
            k[(i, i)] += noise_var;
        }
        let factor = cholesky(&k, 0.0)?;
        let alpha = factor.solve_vec(&y)?;
        Ok(ExactGp {
            kernel,
            noise_var,
            x,
            y,
            factor,
            alpha,
        })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn factor(&self) -> &SpdFactor {
        &self.factor
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// `−½ yᵀα − ½ log|K_ff + σ²I| − (N/2) log 2π`.
    pub fn log_marginal(&self) -> f64 {
        let n = self.y.len() as f64;
        -0.5 * self.y.dot(&self.alpha) - 0.5 * self.factor.logdet() - 0.5 * n * (2.0 * PI).ln()
    }

    /// Predictive posterior over latent values at `xstar`; with
    /// `include_noise` the observation noise is added to the covariance.
    pub fn predict(&self, xstar: &DMatrix<f64>, include_noise: bool) -> Result<Prediction> {
        if xstar.ncols() != self.x.ncols() {
            return Err(Error::dims(format!(
                "test inputs have {} columns, training inputs {}",
                xstar.ncols(),
                self.x.ncols()
            )));
        }
        let ksf = self.kernel.cross_cov(xstar, &self.x)?;
        let kss = self.kernel.cross_cov(xstar, xstar)?;
        let mean = &ksf * &self.alpha;
        let w = self.factor.solve_lower(&ksf.transpose())?;
        let mut cov = kss - w.transpose() * &w;
        cov = crate::linalg::symmetrize(&cov);
        if include_noise {
            for i in 0..cov.nrows() {
                cov[(i, i)] += self.noise_var;
            }
        }
        Ok(Prediction { mean, cov })
    }
}

/// Convenience wrapper for [`ExactGp::log_marginal`].
pub fn exact_log_marginal(
    kernel: &KernelSpec,
    noise_var: f64,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    Ok(ExactGp::new(kernel.clone(), noise_var, x.clone(), y.clone())?.log_marginal())
}
