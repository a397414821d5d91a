//! Stationary covariance functions: squared exponential (shared or ARD
//! lengthscales) and Matérn-3/2 with a common lengthscale.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SqExp,
    SqExpArd,
    Matern32,
}

impl KernelFamily {
    /// Number of lengthscales the family needs for inputs of dimension `d`.
    pub fn lengthscale_count(self, d: usize) -> usize {
        match self {
            KernelFamily::SqExpArd => d,
            KernelFamily::SqExp | KernelFamily::Matern32 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Signal variance σ_f².
    pub amplitude_sq: f64,
    /// One shared lengthscale, or one per input dimension for `SqExpArd`.
    pub lengthscales: Vec<f64>,
}

impl KernelSpec {
    pub fn sq_exp(amplitude_sq: f64, lengthscale: f64) -> Self {
        KernelSpec {
            family: KernelFamily::SqExp,
            amplitude_sq,
            lengthscales: vec![lengthscale],
        }
    }

    pub fn sq_exp_ard(amplitude_sq: f64, lengthscales: Vec<f64>) -> Self {
        KernelSpec {
            family: KernelFamily::SqExpArd,
            amplitude_sq,
            lengthscales,
        }
    }

    pub fn matern32(amplitude_sq: f64, lengthscale: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Matern32,
            amplitude_sq,
            lengthscales: vec![lengthscale],
        }
    }

    /// Checks positivity and, when `dim` is given, the lengthscale count.
    pub fn validate(&self, dim: Option<usize>) -> Result<()> {
        if !(self.amplitude_sq > 0.0 && self.amplitude_sq.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "amplitude_sq must be positive, got {}",
                self.amplitude_sq
            )));
        }
        if self.lengthscales.is_empty() {
            return Err(Error::InvalidParameter("no lengthscales".into()));
        }
        if let Some(&bad) = self
            .lengthscales
            .iter()
            .find(|l| !(**l > 0.0 && l.is_finite()))
        {
            return Err(Error::InvalidParameter(format!(
                "lengthscale must be positive, got {bad}"
            )));
        }
        match self.family {
            KernelFamily::SqExpArd => {
                if let Some(d) = dim {
                    if self.lengthscales.len() != d {
                        return Err(Error::dims(format!(
                            "ARD kernel has {} lengthscales for {d}-dimensional inputs",
                            self.lengthscales.len()
                        )));
                    }
                }
            }
            _ => {
                if self.lengthscales.len() != 1 {
                    return Err(Error::InvalidParameter(format!(
                        "{:?} takes one shared lengthscale, got {}",
                        self.family,
                        self.lengthscales.len()
                    )));
                }
            }
        }
        Ok(())
    }

    fn lengthscale_for(&self, dim: usize) -> f64 {
        if self.lengthscales.len() == 1 {
            self.lengthscales[0]
        } else {
            self.lengthscales[dim]
        }
    }

    /// Evaluates the family's profile on a squared scaled distance.
    pub fn profile(&self, sq_dist: f64) -> f64 {
        match self.family {
            KernelFamily::SqExp | KernelFamily::SqExpArd => {
                self.amplitude_sq * (-0.5 * sq_dist).exp()
            }
            KernelFamily::Matern32 => {
                let s = 3f64.sqrt() * sq_dist.sqrt();
                self.amplitude_sq * (1.0 + s) * (-s).exp()
            }
        }
    }

    /// Cross-covariance matrix `K(A, B)`; rows of `a` and `b` are inputs.
    pub fn cross_cov(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if a.ncols() != b.ncols() {
            return Err(Error::dims(format!(
                "inputs of dimension {} and {}",
                a.ncols(),
                b.ncols()
            )));
        }
        self.validate(Some(a.ncols()))?;
        let d2 = self.scaled_sq_dist(a, b);
        Ok(d2.map(|r2| self.profile(r2)))
    }

    /// Diagonal `k(a_i, a_i)`; constant σ_f² for every stationary family here.
    pub fn diag_cov(&self, a: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_element(a.nrows(), self.amplitude_sq)
    }

    /// Squared distances between lengthscale-scaled rows, via the expanded form
    /// `‖a‖² + ‖b‖² − 2aᵀb`, clamped at zero.
    pub fn scaled_sq_dist(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let d = a.ncols();
        let inv: Vec<f64> = (0..d).map(|k| 1.0 / self.lengthscale_for(k)).collect();
        let sa = DMatrix::from_fn(a.nrows(), d, |i, k| a[(i, k)] * inv[k]);
        let sb = DMatrix::from_fn(b.nrows(), d, |i, k| b[(i, k)] * inv[k]);
        sq_dist(&sa, &sb)
    }
}

/// Pairwise squared Euclidean distances between rows, expanded form clamped at 0.
pub fn sq_dist(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let na: Vec<f64> = a.row_iter().map(|r| r.norm_squared()).collect();
    let nb: Vec<f64> = b.row_iter().map(|r| r.norm_squared()).collect();
    let mut cross = a * b.transpose();
    for j in 0..b.nrows() {
        for i in 0..a.nrows() {
            let v = na[i] + nb[j] - 2.0 * cross[(i, j)];
            cross[(i, j)] = v.max(0.0);
        }
    }
    cross
}
