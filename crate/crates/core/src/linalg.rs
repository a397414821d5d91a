//! Dense linear algebra shared by every bound: Cholesky with a jitter policy,
//! triangular solves and log-determinants.
//!
//! Storage convention: all matrices are `nalgebra::DMatrix<f64>` (column-major).
//! Data matrices are N×d with one observation per row; vectors are `DVector<f64>`.
//! The lower-triangular Cholesky factor is stored densely with an explicit zero
//! upper triangle.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative size of the default diagonal jitter, as a fraction of `mean(diag(A))`.
pub const DEFAULT_RELATIVE_JITTER: f64 = 1e-6;
/// Upper limit of the escalated jitter, as a fraction of `mean(diag(A))`.
pub const MAX_RELATIVE_JITTER: f64 = 1e-2;
/// Number of escalation retries after the first attempt.
pub const MAX_JITTER_RETRIES: usize = 5;
/// First nonzero jitter tried after a zero-jitter attempt fails, as a
/// fraction of `mean(diag(A))`.
pub const ZERO_BASE_FIRST_JITTER: f64 = 1e-10;

/// Lower-triangular factor `L` with `L Lᵀ = A + jitter·I`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    lower: DMatrix<f64>,
    jitter: f64,
}

impl SpdFactor {
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// Diagonal jitter that was finally added to make the factorization succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Solves `L X = B`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        solve_triangular(self, b, false)
    }

    /// Solves `Lᵀ X = B`.
    pub fn solve_upper(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        solve_triangular(self, b, true)
    }

    /// Solves `(L Lᵀ) X = B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let tmp = self.solve_lower(b)?;
        self.solve_upper(&tmp)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        Ok(self.solve(&m)?.column(0).into_owned())
    }

    pub fn logdet(&self) -> f64 {
        logdet(self)
    }

    /// `(L Lᵀ)⁻¹` via two triangular solves.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        self.solve(&DMatrix::identity(n, n))
            .expect("identity has conforming dimensions")
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

fn mean_diag(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.diagonal().mean()
}

/// The default starting jitter `1e-6 · mean(diag(A))`.
pub fn default_jitter(a: &DMatrix<f64>) -> f64 {
    DEFAULT_RELATIVE_JITTER * mean_diag(a).abs()
}

/// Cholesky factorization of the symmetrized `A`, starting with `base_jitter` on
/// the diagonal and escalating it ×10 on each failure (at most
/// [`MAX_JITTER_RETRIES`] times, capped at `1e-2 · mean(diag(A))`). A zero
/// `base_jitter` first tries the exact factorization, then escalates from
/// [`ZERO_BASE_FIRST_JITTER`].
pub fn cholesky(a: &DMatrix<f64>, base_jitter: f64) -> Result<SpdFactor> {
    if !a.is_square() {
        return Err(Error::dims(format!(
            "cholesky of a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    if !(base_jitter >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "base jitter {base_jitter} must be >= 0"
        )));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(SpdFactor {
            lower: DMatrix::zeros(0, 0),
            jitter: base_jitter,
        });
    }
    let sym = symmetrize(a);
    let scale = mean_diag(&sym);
    let cap = MAX_RELATIVE_JITTER * scale.abs();

    let mut jitter = base_jitter;
    for attempt in 0..=MAX_JITTER_RETRIES {
        if let Some(lower) = try_factor(&sym, jitter) {
            return Ok(SpdFactor { lower, jitter });
        }
        if attempt == MAX_JITTER_RETRIES || jitter >= cap {
            break;
        }
        jitter = if jitter > 0.0 {
            jitter * 10.0
        } else {
            ZERO_BASE_FIRST_JITTER * scale.abs()
        };
        jitter = jitter.min(cap);
        log::debug!("cholesky failed, retrying with jitter {jitter:e}");
    }
    Err(Error::SingularMatrix { jitter })
}

fn try_factor(sym: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    let mut m = sym.clone();
    if jitter > 0.0 {
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
    }
    if m.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let chol = nalgebra::Cholesky::new(m)?;
    let lower = chol.unpack();
    if lower.diagonal().iter().all(|&d| d > 0.0 && d.is_finite()) {
        Some(lower)
    } else {
        None
    }
}

/// Solves `L X = B` (or `Lᵀ X = B` when `transpose` is set).
pub fn solve_triangular(
    factor: &SpdFactor,
    b: &DMatrix<f64>,
    transpose: bool,
) -> Result<DMatrix<f64>> {
    let n = factor.dim();
    if b.nrows() != n {
        return Err(Error::dims(format!(
            "triangular solve: factor is {n}x{n}, right-hand side has {} rows",
            b.nrows()
        )));
    }
    let solved = if transpose {
        factor.lower.tr_solve_lower_triangular(b)
    } else {
        factor.lower.solve_lower_triangular(b)
    };
    solved.ok_or(Error::SingularMatrix {
        jitter: factor.jitter,
    })
}

/// `log |L Lᵀ| = 2 Σ log L_ii`.
pub fn logdet(factor: &SpdFactor) -> f64 {
    2.0 * factor.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}
