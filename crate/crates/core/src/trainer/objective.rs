//! Training objectives: each method's bound as a differentiable graph over the
//! flat parameter vector, and the library evaluation used for reporting.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use super::params::{pack_lower, unpack_factor, ParamLayout, UnconstrainedParams, MIN_NOISE_SD};
use super::tape::{Tape, Var};
use super::Method;
use crate::collapsed::{
    build_cache, elbo_sgpr, elbo_sgpr_artemev, elbo_sgpr_new, BoundReport, SparseModel,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exact::ExactGp;
use crate::kernels::KernelFamily;
use crate::linalg::DEFAULT_RELATIVE_JITTER;
use crate::nonconjugate::{elbo_nonconjugate, Poisson, ScalarV};
use crate::stochastic::{elbo_svgp_uncollapsed, BoundVariant};

/// A scalar function of a flat parameter vector, to be maximized.
pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&self, x: &DVector<f64>) -> Result<f64>;

    /// Value and gradient; central differences unless overridden.
    fn value_and_gradient(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        Ok((self.value(x)?, finite_difference_gradient(self, x)?))
    }
}

/// Wraps a closure as an [`Objective`] with finite-difference gradients.
pub struct FnObjective<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&DVector<f64>) -> f64> Objective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        Ok((self.f)(x))
    }
}

/// Step used for coordinate `p`: `1e-5 · max(1, |p|)`.
pub fn fd_step(p: f64) -> f64 {
    1e-5 * p.abs().max(1.0)
}

/// Central finite differences, the reference every faster gradient is tested
/// against.
pub fn finite_difference_gradient<O: Objective + ?Sized>(
    objective: &O,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = fd_step(x[i]);
        xp[i] = x[i] + h;
        let up = objective.value(&xp)?;
        xp[i] = x[i] - h;
        let down = objective.value(&xp)?;
        xp[i] = x[i];
        g[i] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

/// Gradient of `objective` at `params`; fails if the value or any component
/// is not finite.
pub fn gradient<O: Objective + ?Sized>(
    objective: &O,
    params: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (value, g) = objective.value_and_gradient(params)?;
    if !value.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteObjective {
            step: 0,
            last: None,
        });
    }
    Ok(g)
}

/// The bound of `method` on `data`, optionally restricted to `rows` (stochastic
/// methods only), as a function of the unconstrained parameters.
pub struct BoundObjective<'a> {
    pub method: Method,
    pub layout: ParamLayout,
    pub data: &'a Dataset,
    pub rows: Option<Vec<usize>>,
    pub relative_jitter: f64,
}

struct Leaves {
    noise: Var,
    amplitude: Var,
    lengthscales: Var,
    inducing: Option<Var>,
    q_mean: Option<Var>,
    q_factor: Option<Var>,
    v: Option<Var>,
}

struct Kernel {
    family: KernelFamily,
    amp_sq: Var,
    inv_ls: Var,
    ard: bool,
}

impl Kernel {
    fn scaled(&self, t: &mut Tape, a: Var) -> Var {
        if self.ard {
            t.mul_row(a, self.inv_ls)
        } else {
            t.scalar_mul(self.inv_ls, a)
        }
    }

    fn cov(&self, t: &mut Tape, a: Var, b: Var) -> Var {
        let sa = self.scaled(t, a);
        let sb = if a == b { sa } else { self.scaled(t, b) };
        let d = t.sq_dist(sa, sb);
        let profile = match self.family {
            KernelFamily::SqExp | KernelFamily::SqExpArd => {
                let h = t.scale(d, -0.5);
                t.exp(h)
            }
            KernelFamily::Matern32 => t.matern32(d),
        };
        t.scalar_mul(self.amp_sq, profile)
    }
}

impl<'a> BoundObjective<'a> {
    pub fn new(method: Method, layout: ParamLayout, data: &'a Dataset) -> Self {
        BoundObjective {
            method,
            layout,
            data,
            rows: None,
            relative_jitter: DEFAULT_RELATIVE_JITTER,
        }
    }

    pub fn with_rows(mut self, rows: Vec<usize>) -> Self {
        self.rows = Some(rows);
        self
    }

    fn leaves(&self, t: &mut Tape, p: &DVector<f64>) -> Leaves {
        let l = &self.layout;
        let scalar = |t: &mut Tape, i: usize| t.leaf(DMatrix::from_element(1, 1, p[i]));
        let noise = scalar(t, l.noise);
        let amplitude = scalar(t, l.amplitude);
        let ls = l.lengthscales.clone();
        let lengthscales = t.leaf(DMatrix::from_row_slice(1, ls.len(), &p.as_slice()[ls]));
        let (m, d) = (l.num_inducing, l.input_dim);
        let inducing = l
            .inducing
            .as_ref()
            .map(|r| t.leaf(DMatrix::from_row_slice(m, d, &p.as_slice()[r.clone()])));
        let q_mean = l
            .q_mean
            .as_ref()
            .map(|r| t.leaf(DMatrix::from_column_slice(m, 1, &p.as_slice()[r.clone()])));
        let q_factor = l
            .q_factor
            .as_ref()
            .map(|r| t.leaf(unpack_factor(&p.as_slice()[r.clone()], m, false)));
        let v = l.v.map(|i| scalar(t, i));
        Leaves {
            noise,
            amplitude,
            lengthscales,
            inducing,
            q_mean,
            q_factor,
            v,
        }
    }

    fn rows(&self) -> Result<Vec<usize>> {
        let n = self.data.len();
        match &self.rows {
            None => Ok((0..n).collect()),
            Some(rows) => {
                if rows.is_empty() {
                    return Err(Error::EmptyBatch);
                }
                if let Some(&bad) = rows.iter().find(|&&i| i >= n) {
                    return Err(Error::IndexOutOfRange { index: bad, len: n });
                }
                Ok(rows.clone())
            }
        }
    }

    fn build(&self, t: &mut Tape, p: &DVector<f64>) -> Result<(Leaves, Var)> {
        if p.len() != self.layout.len {
            return Err(Error::dims(format!(
                "{} parameters for a layout of {}",
                p.len(),
                self.layout.len
            )));
        }
        let lv = self.leaves(t, p);
        let sd0 = t.softplus(lv.noise);
        let sd = t.add_const(sd0, MIN_NOISE_SD);
        let s2 = t.hadamard(sd, sd);
        let amp = t.softplus(lv.amplitude);
        let amp_sq = t.hadamard(amp, amp);
        let ls = t.softplus(lv.lengthscales);
        let inv_ls = t.recip(ls);
        let kern = Kernel {
            family: self.layout.family,
            amp_sq,
            inv_ls,
            ard: self.layout.lengthscales.len() > 1,
        };
        let out = match self.method {
            Method::Exact => self.exact_graph(t, &kern, s2)?,
            Method::Sgpr | Method::SgprNew | Method::SgprArtemev => {
                if self.rows.is_some() {
                    return Err(Error::Config("collapsed bounds use all rows".into()));
                }
                self.collapsed_graph(t, &kern, s2, &lv)?
            }
            _ => self.stochastic_graph(t, &kern, s2, &lv)?,
        };
        Ok((lv, out))
    }

    fn exact_graph(&self, t: &mut Tape, kern: &Kernel, s2: Var) -> Result<Var> {
        let rows = self.rows()?;
        let sub = self.data.subset(&rows);
        let n = rows.len() as f64;
        let x = t.constant(sub.x.clone());
        let y = t.constant(DMatrix::from_column_slice(rows.len(), 1, sub.y.as_slice()));
        let k = kern.cov(t, x, x);
        let ky = t.add_diag_scalar(k, s2);
        let l = t.cholesky(ky)?;
        let a = t.solve_lower(l, y)?;
        let aa = t.hadamard(a, a);
        let quad = t.sum(aa);
        let half_logdet = t.sum_ln_diag(l);
        let hq = t.scale(quad, -0.5);
        let total = t.sub(hq, half_logdet);
        Ok(t.add_const(total, -0.5 * n * (2.0 * PI).ln()))
    }

    fn kuu_factor(&self, t: &mut Tape, kern: &Kernel, z: Var) -> Result<Var> {
        let kuu = kern.cov(t, z, z);
        let jit = t.scale(kern.amp_sq, self.relative_jitter);
        let kuu = t.add_diag_scalar(kuu, jit);
        t.cholesky(kuu)
    }

    /// `max(σ_f² − ‖a_i‖², 0)` as a 1×n row.
    fn residuals(&self, t: &mut Tape, kern: &Kernel, a: Var) -> Var {
        let aa = t.hadamard(a, a);
        let q = t.col_sum(aa);
        let nq = t.neg(q);
        let r = t.add_scalar(nq, kern.amp_sq);
        t.relu(r)
    }

    fn collapsed_graph(&self, t: &mut Tape, kern: &Kernel, s2: Var, lv: &Leaves) -> Result<Var> {
        let z = lv
            .inducing
            .ok_or_else(|| Error::Config("missing inducing inputs".into()))?;
        let data = self.data;
        let n = data.len() as f64;
        let x = t.constant(data.x.clone());
        let y = t.constant(DMatrix::from_column_slice(data.len(), 1, data.y.as_slice()));
        let l = self.kuu_factor(t, kern, z)?;
        let kuf = kern.cov(t, z, x);
        let a = t.solve_lower(l, kuf)?;
        let inv_s2 = t.recip(s2);
        let at = t.transpose(a);
        let aat = t.matmul(a, at);
        let scaled = t.scalar_mul(inv_s2, aat);
        let b = t.add_identity(scaled, 1.0);
        let lb = t.cholesky(b)?;
        let ay = t.matmul(a, y);
        let c0 = t.solve_lower(lb, ay)?;
        let c = t.scalar_mul(inv_s2, c0);
        // −½ (N log σ² + log|B| + yᵀy/σ² − ‖c‖²) − (N/2) log 2π
        let ln_s2 = t.ln(s2);
        let n_ln_s2 = t.scale(ln_s2, n);
        let half_logdet_b = t.sum_ln_diag(lb);
        let logdet_b = t.scale(half_logdet_b, 2.0);
        let yy = t.scale(inv_s2, data.y.norm_squared());
        let cc = t.hadamard(c, c);
        let cc = t.sum(cc);
        let quad = t.sub(yy, cc);
        let s = t.add(n_ln_s2, logdet_b);
        let s = t.add(s, quad);
        let dtc = t.scale(s, -0.5);
        let dtc = t.add_const(dtc, -0.5 * n * (2.0 * PI).ln());

        let r = self.residuals(t, kern, a);
        let reg = match self.method {
            Method::Sgpr => {
                let sr = t.sum(r);
                let v = t.scalar_mul(inv_s2, sr);
                t.scale(v, -0.5)
            }
            Method::SgprNew => {
                let ratio = t.scalar_mul(inv_s2, r);
                let l1p = t.ln_1p(ratio);
                let s = t.sum(l1p);
                t.scale(s, -0.5)
            }
            _ => {
                let sr = t.sum(r);
                let ratio = t.scalar_mul(inv_s2, sr);
                let ratio = t.scale(ratio, 1.0 / n);
                let l1p = t.ln_1p(ratio);
                t.scale(l1p, -0.5 * n)
            }
        };
        Ok(t.add(dtc, reg))
    }

    fn stochastic_graph(&self, t: &mut Tape, kern: &Kernel, s2: Var, lv: &Leaves) -> Result<Var> {
        let (z, qm, qf) = match (lv.inducing, lv.q_mean, lv.q_factor) {
            (Some(z), Some(m), Some(c)) => (z, m, c),
            _ => return Err(Error::Config("stochastic methods need Z and q(u)".into())),
        };
        let rows = self.rows()?;
        let sub = self.data.subset(&rows);
        let nb = rows.len() as f64;
        let n = self.data.len() as f64;
        let scale = n / nb;
        let mdim = self.layout.num_inducing as f64;
        let x = t.constant(sub.x.clone());
        let y = t.constant(DMatrix::from_column_slice(rows.len(), 1, sub.y.as_slice()));

        let l = self.kuu_factor(t, kern, z)?;
        let kuf = kern.cov(t, z, x);
        let a = t.solve_lower(l, kuf)?;
        let c = t.lower_pos(qf);
        let at = t.transpose(a);
        let mu = t.matmul(at, qm);
        let ct = t.transpose(c);
        let w = t.matmul(ct, a);
        let ww = t.hadamard(w, w);
        let s_row = t.col_sum(ww);
        let r = self.residuals(t, kern, a);

        // ½ [tr(CCᵀ) + mᵀm − M − log|CCᵀ|]
        let cc = t.hadamard(c, c);
        let tr = t.sum(cc);
        let mm = t.hadamard(qm, qm);
        let mm = t.sum(mm);
        let half_logdet = t.sum_ln_diag(c);
        let logdet = t.scale(half_logdet, 2.0);
        let kl = t.add(tr, mm);
        let kl = t.sub(kl, logdet);
        let kl = t.add_const(kl, -mdim);
        let kl = t.scale(kl, 0.5);

        let data_terms = match self.method {
            Method::Svgp | Method::SvgpNew => {
                let inv_s2 = t.recip(s2);
                let resid = t.sub(y, mu);
                let rr = t.hadamard(resid, resid);
                let rr = t.sum(rr);
                let ss = t.sum(s_row);
                let sq = t.add(rr, ss);
                let quad = t.scalar_mul(inv_s2, sq);
                let quad = t.scale(quad, -0.5);
                let ln_s2 = t.ln(s2);
                let norm = t.scale(ln_s2, -0.5 * nb);
                let fit = t.add(quad, norm);
                let fit = t.add_const(fit, -0.5 * nb * (2.0 * PI).ln());
                let pen = if self.method == Method::Svgp {
                    let sr = t.sum(r);
                    let v = t.scalar_mul(inv_s2, sr);
                    t.scale(v, -0.5)
                } else {
                    let ratio = t.scalar_mul(inv_s2, r);
                    let l1p = t.ln_1p(ratio);
                    let s = t.sum(l1p);
                    t.scale(s, -0.5)
                };
                let total = t.add(fit, pen);
                t.scale(total, scale)
            }
            Method::SvgpPoisson | Method::SvgpPoissonNew => {
                let s_col = t.transpose(s_row);
                let r_col = t.transpose(r);
                let (var, v) = match lv.v {
                    Some(raw) => {
                        let v = t.softplus(raw);
                        (t.scalar_mul(v, r_col), Some(v))
                    }
                    None => (r_col, None),
                };
                let var = t.add(var, s_col);
                let half = t.scale(var, 0.5);
                let arg = t.add(mu, half);
                let rate = t.exp(arg);
                let ymu = t.hadamard(y, mu);
                let e = t.sub(ymu, rate);
                let e = t.sum(e);
                let lg: f64 = sub.y.iter().map(|&c| ln_gamma(c + 1.0)).sum();
                let e = t.add_const(e, -lg);
                let fit = t.scale(e, scale);
                match v {
                    Some(v) => {
                        // −(N/2)(v − log v − 1)
                        let lnv = t.ln(v);
                        let d = t.sub(v, lnv);
                        let d = t.add_const(d, -1.0);
                        let reg = t.scale(d, -0.5 * n);
                        t.add(fit, reg)
                    }
                    None => fit,
                }
            }
            _ => unreachable!("collapsed and exact methods are handled elsewhere"),
        };
        Ok(t.sub(data_terms, kl))
    }

    fn flatten(&self, t: &Tape, lv: &Leaves, out: Var) -> DVector<f64> {
        let grads = t.backward(out);
        let l = &self.layout;
        let mut g = DVector::zeros(l.len);
        g[l.noise] = grads.wrt(lv.noise)[(0, 0)];
        g[l.amplitude] = grads.wrt(lv.amplitude)[(0, 0)];
        let gl = grads.wrt(lv.lengthscales);
        for (j, k) in l.lengthscales.clone().enumerate() {
            g[k] = gl[(0, j)];
        }
        if let (Some(r), Some(z)) = (&l.inducing, lv.inducing) {
            let gz = grads.wrt(z);
            let d = l.input_dim;
            for i in 0..l.num_inducing {
                for k in 0..d {
                    g[r.start + i * d + k] = gz[(i, k)];
                }
            }
        }
        if let (Some(r), Some(m)) = (&l.q_mean, lv.q_mean) {
            g.rows_mut(r.start, r.len())
                .copy_from(&grads.wrt(m).column(0));
        }
        if let (Some(r), Some(c)) = (&l.q_factor, lv.q_factor) {
            for (k, v) in r.clone().zip(pack_lower(&grads.wrt(c))) {
                g[k] = v;
            }
        }
        if let (Some(i), Some(v)) = (l.v, lv.v) {
            g[i] = grads.wrt(v)[(0, 0)];
        }
        g
    }
}

impl Objective for BoundObjective<'_> {
    fn dim(&self) -> usize {
        self.layout.len
    }

    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        let mut t = Tape::new();
        let (_, out) = self.build(&mut t, x)?;
        Ok(t.scalar(out))
    }

    fn value_and_gradient(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let mut t = Tape::new();
        let (lv, out) = self.build(&mut t, x)?;
        Ok((t.scalar(out), self.flatten(&t, &lv, out)))
    }
}

/// Evaluates the method's bound on all of `data` through the library
/// functions (not the training graph).
pub fn library_bound(
    method: Method,
    params: &UnconstrainedParams,
    data: &Dataset,
    relative_jitter: f64,
) -> Result<BoundReport> {
    let c = params.constrain();
    let kernel = c.kernel(params.layout.family);
    let noise_var = c.noise_var();
    if method == Method::Exact {
        let gp = ExactGp::new(kernel, noise_var, data.x.clone(), data.y.clone())?;
        let lm = gp.log_marginal();
        return Ok(BoundReport {
            bound: lm,
            dtc_term: lm,
            reg_term: 0.0,
            kl_term: None,
            v_min: 1.0,
            v_max: 1.0,
            clamped_count: 0,
            residual_min: 0.0,
            residual_max: 0.0,
            optimal_v: None,
        });
    }
    let z = c
        .inducing
        .clone()
        .ok_or_else(|| Error::Config("missing inducing inputs".into()))?;
    let model = SparseModel::new(kernel, noise_var, z, data)?.with_relative_jitter(relative_jitter);
    let cache = build_cache(&model)?;
    let q = || {
        c.q.clone()
            .ok_or_else(|| Error::Config("missing q(u)".into()))
    };
    match method {
        Method::Exact => unreachable!(),
        Method::Sgpr => elbo_sgpr(&model, &cache),
        Method::SgprNew => elbo_sgpr_new(&model, &cache),
        Method::SgprArtemev => elbo_sgpr_artemev(&model, &cache),
        Method::Svgp => elbo_svgp_uncollapsed(&model, &cache, &q()?, BoundVariant::Classic),
        Method::SvgpNew => elbo_svgp_uncollapsed(&model, &cache, &q()?, BoundVariant::New),
        Method::SvgpPoisson => elbo_nonconjugate(&q()?, &model, &cache, ScalarV::one(), &Poisson),
        Method::SvgpPoissonNew => {
            let v = ScalarV::new(c.v.unwrap_or(1.0))?;
            elbo_nonconjugate(&q()?, &model, &cache, v, &Poisson)
        }
    }
}
