//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any binding check fails.
//!
//! Dense oracles below use LU inverses and determinants of the full matrices;
//! the library goes through Cholesky factors and low-rank identities.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sgp_core::collapsed::{
    build_cache, elbo_sgpr, elbo_sgpr_artemev, elbo_sgpr_new, kl_qfu_pfu, optimal_qu, optimal_v,
    sparse_predict, NystromCache, SparseModel,
};
use sgp_core::data::{make_poisson_toy, make_snelson_like, make_synthetic_regression, Dataset};
use sgp_core::exact::exact_log_marginal;
use sgp_core::experiment::{run_experiment, DatasetSource, ExperimentConfig};
use sgp_core::kernels::{KernelFamily, KernelSpec};
use sgp_core::linalg::DEFAULT_RELATIVE_JITTER;
use sgp_core::nonconjugate::{
    elbo_nonconjugate, elbo_nonconjugate_minibatch, marginals_qfi, Poisson, ScalarV,
};
use sgp_core::stochastic::{
    elbo_svgp_minibatch, elbo_svgp_uncollapsed, elbo_svgp_with_v, kl_qu_pu, latent_marginals,
    BoundVariant, GaussianVariational,
};
use sgp_core::trainer::{
    finite_difference_gradient, fit, BoundObjective, Constrained, FitResult, Freeze, InducingInit,
    Method, Objective, TrainConfig, UnconstrainedParams,
};

// Tolerances, as stated in the acceptance criteria.
const ORDER_SLACK: f64 = 1e-8;
const STRICT_RESIDUAL: f64 = 1e-6;
const ORDER_MIN_CASES: u32 = 200;
const ORDER_TIME_LIMIT_S: f64 = 30.0;
const COLLAPSE_REL: f64 = 1e-6;
const ORACLE_TOL: f64 = 1e-7;
const V_NUMERIC_TOL: f64 = 1e-6;
const V_RECONSTRUCT_TOL: f64 = 1e-7;
const GRAD_REL: f64 = 1e-4;
const MINIBATCH_TOL: f64 = 1e-9;
const SNELSON_NOISE: (f64, f64) = (0.0715, 0.02);
const SNELSON_AMPLITUDE: (f64, f64) = (0.712, 0.1);
const SNELSON_LENGTHSCALE_SQ: (f64, f64) = (0.597, 0.1);
const POISSON_V_RANGE: (f64, f64) = (0.575, 0.775);

// Long enough for both stochastic runs to level off; at a few hundred epochs
// the comparison reflects optimizer progress, not the bounds.
const SYNTHETIC_EPOCHS: usize = 1500;

// Denominator floor for the gradient relative error, so coordinates whose
// derivative is numerically zero are compared on an absolute scale.
const GRAD_FLOOR: f64 = 1e-2;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Instance {
    data: Dataset,
    kernel: KernelSpec,
    noise_var: f64,
    z: DMatrix<f64>,
}

impl Instance {
    fn model(&self) -> SparseModel<'_> {
        SparseModel::new(
            self.kernel.clone(),
            self.noise_var,
            self.z.clone(),
            &self.data,
        )
        .unwrap()
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo.ln()..hi.ln()).exp()
}

fn random_instance(n: usize, m: usize, d: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: DMatrix<f64> = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-3.0..3.0));
    let y = DVector::from_fn(n, |i, _| x[(i, 0)].sin() + 0.3 * rng.gen_range(-1.0..1.0));
    let amp = log_uniform(&mut rng, 0.2, 3.0);
    let ls = log_uniform(&mut rng, 0.3, 3.0);
    let kernel = if rng.gen_bool(0.5) {
        KernelSpec::sq_exp(amp, ls)
    } else {
        KernelSpec::matern32(amp, ls)
    };
    let noise_var = log_uniform(&mut rng, 0.01, 1.0);
    let z = DMatrix::from_fn(m, d, |_, _| rng.gen_range(-3.5..3.5));
    Instance {
        data: Dataset::new("random", x, y).unwrap(),
        kernel,
        noise_var,
        z,
    }
}

// ---- dense oracles ----

fn inv(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().lu().try_inverse().expect("invertible")
}

fn logdet(a: &DMatrix<f64>) -> f64 {
    let d = a.clone().lu().determinant();
    assert!(d > 0.0, "determinant {d}");
    d.ln()
}

fn dense_gauss_logpdf(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let r = y - mean;
    let n = y.len() as f64;
    -0.5 * (r.transpose() * inv(cov) * &r)[(0, 0)] - 0.5 * logdet(cov) - 0.5 * n * (2.0 * PI).ln()
}

fn dense_gauss_kl(
    m1: &DVector<f64>,
    s1: &DMatrix<f64>,
    m2: &DVector<f64>,
    s2: &DMatrix<f64>,
) -> f64 {
    let s2i = inv(s2);
    let dm = m2 - m1;
    0.5 * ((&s2i * s1).trace() + (dm.transpose() * &s2i * &dm)[(0, 0)] - m1.len() as f64
        + logdet(s2)
        - logdet(s1))
}

struct Dense {
    kuu: DMatrix<f64>,
    kuu_inv: DMatrix<f64>,
    kfu: DMatrix<f64>,
    kff: DMatrix<f64>,
    q: DMatrix<f64>,
}

fn dense(inst: &Instance, cache: &NystromCache) -> Dense {
    let m = inst.z.nrows();
    let kuu = inst.kernel.cross_cov(&inst.z, &inst.z).unwrap()
        + DMatrix::identity(m, m) * cache.kuu.jitter();
    let kuu_inv = inv(&kuu);
    let kfu = inst.kernel.cross_cov(&inst.data.x, &inst.z).unwrap();
    let kff = inst.kernel.cross_cov(&inst.data.x, &inst.data.x).unwrap();
    let q = &kfu * &kuu_inv * kfu.transpose();
    Dense {
        kuu,
        kuu_inv,
        kfu,
        kff,
        q,
    }
}

impl Dense {
    fn residuals(&self) -> Vec<f64> {
        (0..self.kff.nrows())
            .map(|i| (self.kff[(i, i)] - self.q[(i, i)]).max(0.0))
            .collect()
    }

    fn dtc(&self, y: &DVector<f64>, s2: f64) -> f64 {
        let n = y.len();
        dense_gauss_logpdf(
            y,
            &DVector::zeros(n),
            &(&self.q + DMatrix::identity(n, n) * s2),
        )
    }

    /// Posterior of u in the linear-Gaussian model y = K_fu K_uu⁻¹ u + ε.
    fn optimal_qu(&self, y: &DVector<f64>, s2: f64) -> (DVector<f64>, DMatrix<f64>) {
        let a = &self.kfu * &self.kuu_inv;
        let prec = &self.kuu_inv + a.transpose() * &a / s2;
        let cov = inv(&prec);
        let mean = &cov * a.transpose() * y / s2;
        (mean, cov)
    }

    /// `E_q[log N(y | f, σ²I)]` with q(f) = N(A m, A S Aᵀ + diag(v ∘ r)) on
    /// the diagonal that enters the trace.
    fn expected_loglik(
        &self,
        y: &DVector<f64>,
        s2: f64,
        m: &DVector<f64>,
        s: &DMatrix<f64>,
        v: &[f64],
    ) -> f64 {
        let a = &self.kfu * &self.kuu_inv;
        let mu = &a * m;
        let cov = &a * s * a.transpose();
        let r = self.residuals();
        let n = y.len() as f64;
        let tr: f64 = (0..y.len()).map(|i| cov[(i, i)] + v[i] * r[i]).sum();
        -0.5 * n * (2.0 * PI * s2).ln() - 0.5 * (y - mu).norm_squared() / s2 - 0.5 * tr / s2
    }
}

// ---- criteria ----

fn ac1_ordering() -> Outcome {
    let start = Instant::now();
    let seed = [7u8; 32];
    let mut runner = TestRunner::new_with_rng(
        Config {
            cases: ORDER_MIN_CASES,
            ..Config::default()
        },
        TestRng::from_seed(RngAlgorithm::ChaCha, &seed),
    );
    let strategy = (
        10usize..=200,
        1usize..=20,
        1usize..=3,
        proptest::num::u64::ANY,
    );
    let mut cases = 0;
    let mut strict_checked = 0;
    let mut worst = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    for _ in 0..ORDER_MIN_CASES {
        let (n, m, d, s) = strategy.new_tree(&mut runner).unwrap().current();
        let inst = random_instance(n, m.min(n), d, s);
        let model = inst.model();
        let cache = build_cache(&model).unwrap();
        let a = elbo_sgpr(&model, &cache).unwrap();
        let b = elbo_sgpr_artemev(&model, &cache).unwrap();
        let c = elbo_sgpr_new(&model, &cache).unwrap();
        let e =
            exact_log_marginal(&inst.kernel, inst.noise_var, &inst.data.x, &inst.data.y).unwrap();
        let gaps = [a.bound - b.bound, b.bound - c.bound, c.bound - e];
        worst = gaps.iter().fold(worst, |w, &g| w.max(g));
        let mut ok = gaps.iter().all(|&g| g <= ORDER_SLACK);
        let rmax = cache.residual.iter().fold(0.0f64, |x, &r| x.max(r));
        if rmax > STRICT_RESIDUAL {
            strict_checked += 1;
            // the two bounds share the DTC term, so strictness lives in the
            // regularizers, which are computed without that cancellation
            ok &= a.reg_term < b.reg_term && a.bound <= b.bound;
        }
        if !ok {
            failures.push(format!("n={n} m={m} d={d} seed={s} gaps={gaps:?}"));
        }
        cases += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && cases >= ORDER_MIN_CASES && secs < ORDER_TIME_LIMIT_S;
    outcome(
        pass,
        format!(
            "{cases} instances ({strict_checked} strict), worst gap {worst:.3e}, {secs:.2}s{}",
            failures
                .first()
                .map(|f| format!("; first failure {f}"))
                .unwrap_or_default()
        ),
    )
}

fn ac2_collapse() -> Outcome {
    // Evaluated at zero base jitter: the default K_uu jitter shifts every
    // collapsed bound by about N·jitter/(2σ²), which at Z = X is the whole gap.
    let mut worst: f64 = 0.0;
    let mut worst_default: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.gen_range(5..=30);
        let mut inst = random_instance(n, 1, rng.gen_range(1..=2), 2000 + seed);
        inst.noise_var = log_uniform(&mut rng, 0.05, 1.0);
        inst.z = inst.data.x.clone();
        let e =
            exact_log_marginal(&inst.kernel, inst.noise_var, &inst.data.x, &inst.data.y).unwrap();
        for (rel_jitter, w) in [
            (0.0, &mut worst),
            (DEFAULT_RELATIVE_JITTER, &mut worst_default),
        ] {
            let model = inst.model().with_relative_jitter(rel_jitter);
            let cache = build_cache(&model).unwrap();
            for b in [
                elbo_sgpr(&model, &cache).unwrap().bound,
                elbo_sgpr_artemev(&model, &cache).unwrap().bound,
                elbo_sgpr_new(&model, &cache).unwrap().bound,
            ] {
                *w = w.max((b - e).abs() / e.abs());
            }
        }
    }
    outcome(
        worst <= COLLAPSE_REL,
        format!(
            "20 instances, worst relative gap {worst:.3e} at zero base jitter \
             ({worst_default:.3e} with the default K_uu jitter, non-binding)"
        ),
    )
}

fn ac3_oracles() -> Outcome {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut note = |name: &'static str, lib: f64, oracle: f64| {
        let err = (lib - oracle).abs() / oracle.abs().max(1.0);
        match worst.iter_mut().find(|(n, _)| *n == name) {
            Some((_, w)) => *w = w.max(err),
            None => worst.push((name, err)),
        }
    };
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let n = rng.gen_range(8..=30);
        let m = rng.gen_range(1..=5);
        let mut inst = random_instance(n, m, 1, 400 + seed);
        inst.noise_var = log_uniform(&mut rng, 0.05, 0.5);
        let y = inst.data.y.clone();
        let s2 = inst.noise_var;
        let model = inst.model();
        let cache = build_cache(&model).unwrap();
        let dn = dense(&inst, &cache);
        let r = dn.residuals();
        let dtc = dn.dtc(&y, s2);

        note(
            "classic",
            elbo_sgpr(&model, &cache).unwrap().bound,
            dtc - r.iter().sum::<f64>() / (2.0 * s2),
        );
        note(
            "new",
            elbo_sgpr_new(&model, &cache).unwrap().bound,
            dtc - 0.5 * r.iter().map(|ri| (1.0 + ri / s2).ln()).sum::<f64>(),
        );
        let nf = n as f64;
        note(
            "spherical",
            elbo_sgpr_artemev(&model, &cache).unwrap().bound,
            dtc - 0.5 * nf * (1.0 + r.iter().sum::<f64>() / (nf * s2)).ln(),
        );

        // optimal q*(u) against the linear-Gaussian posterior
        let (om, oc) = dn.optimal_qu(&y, s2);
        let q = optimal_qu(&model, &cache).unwrap();
        note("q*(u) mean", (&q.mean - &om).amax(), 0.0);
        note("q*(u) cov", (&q.cov - &oc).amax(), 0.0);

        // the new bound as an explicit uncollapsed ELBO at (q*, v*)
        let vstar: Vec<f64> = r.iter().map(|ri| 1.0 / (1.0 + ri / s2)).collect();
        let kl_u = dense_gauss_kl(&om, &oc, &DVector::zeros(m), &dn.kuu);
        let kl_f: f64 = 0.5 * vstar.iter().map(|v| v - v.ln() - 1.0).sum::<f64>();
        note(
            "new via (q*, v*)",
            elbo_sgpr_new(&model, &cache).unwrap().bound,
            dn.expected_loglik(&y, s2, &om, &oc, &vstar) - kl_f - kl_u,
        );

        // KL[q(u) ‖ p(u)] and uncollapsed bounds for a random q(u)
        let qmean = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
        let qf = DMatrix::from_fn(m, m, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => rng.gen_range(-0.3..0.3),
            std::cmp::Ordering::Equal => rng.gen_range(0.2..1.0),
            std::cmp::Ordering::Less => 0.0,
        });
        let qu = GaussianVariational::new(qmean.clone(), qf.clone(), false).unwrap();
        let qs = &qf * qf.transpose();
        note(
            "KL[q(u)|p(u)]",
            kl_qu_pu(&qu, &cache.kuu).unwrap(),
            dense_gauss_kl(&qmean, &qs, &DVector::zeros(m), &dn.kuu),
        );
        let qw = qu.to_whitened(&cache.kuu).unwrap();
        note(
            "KL whitened",
            kl_qu_pu(&qw, &cache.kuu).unwrap(),
            dense_gauss_kl(&qmean, &qs, &DVector::zeros(m), &dn.kuu),
        );
        let ones = vec![1.0; n];
        note(
            "uncollapsed classic",
            elbo_svgp_uncollapsed(&model, &cache, &qw, BoundVariant::Classic)
                .unwrap()
                .bound,
            dn.expected_loglik(&y, s2, &qmean, &qs, &ones) - kl_u_for(&qmean, &qs, &dn.kuu),
        );

        // marginals of q(f_i) with spherical v
        let v = rng.gen_range(0.2..1.5);
        let a = &dn.kfu * &dn.kuu_inv;
        let cov_f = &a * &qs * a.transpose() + (&dn.kff - &dn.q) * v;
        let mean_f = &a * &qmean;
        let margs = marginals_qfi(&qw, &cache, ScalarV::new(v).unwrap()).unwrap();
        for i in 0..n {
            note("q(f_i) mean", margs[i].mean, mean_f[i]);
            note("q(f_i) var", margs[i].variance, cov_f[(i, i)]);
        }
        let lm = latent_marginals(&qu, &cache).unwrap();
        note("latent mean (unwhitened)", (lm.mean - &mean_f).amax(), 0.0);

        // predictive at new inputs, for q* against the closed-form posterior
        let xs = DMatrix::from_fn(4, 1, |_, _| rng.gen_range(-4.0..4.0));
        let ksu = inst.kernel.cross_cov(&xs, &inst.z).unwrap();
        let kss = inst.kernel.cross_cov(&xs, &xs).unwrap();
        let sig = inv(&(&dn.kuu + dn.kfu.transpose() * &dn.kfu / s2));
        let want_mean = &ksu * &sig * dn.kfu.transpose() * &y / s2;
        let want_cov = &kss - &ksu * &dn.kuu_inv * ksu.transpose() + &ksu * &sig * ksu.transpose();
        let got = sparse_predict(&model, &q, &xs, false).unwrap();
        note("predictive mean", (got.mean - want_mean).amax(), 0.0);
        note("predictive cov", (got.cov - want_cov).amax(), 0.0);
        let gotq = sparse_predict(&model, &qu, &xs, false).unwrap();
        let p = &ksu * &dn.kuu_inv;
        let cov_q = &kss - &p * ksu.transpose() + &p * &qs * p.transpose();
        note("predictive cov, random q", (gotq.cov - cov_q).amax(), 0.0);
    }

    // KL[q(f|u) ‖ p(f|u)] with the full residual covariance, on a small
    // well-conditioned instance
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let n = 6;
        let x = DMatrix::from_fn(n, 1, |i, _| {
            -3.0 + 1.2 * i as f64 + rng.gen_range(-0.1..0.1)
        });
        let inst = Instance {
            data: Dataset::new("kl", x, DVector::zeros(n)).unwrap(),
            kernel: KernelSpec::matern32(1.0, 0.4),
            noise_var: 0.1,
            z: DMatrix::from_row_slice(2, 1, &[-1.0, 1.5]),
        };
        let model = inst.model();
        let cache = build_cache(&model).unwrap();
        let dn = dense(&inst, &cache);
        let rfull = &dn.kff - &dn.q;
        let eig = rfull.clone().symmetric_eigen();
        let half = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()))
            * eig.eigenvectors.transpose();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
        let qcov = &half * DMatrix::from_diagonal(&DVector::from_vec(v.clone())) * &half;
        let zero = DVector::zeros(n);
        note(
            "KL[q(f|u)|p(f|u)]",
            kl_qfu_pfu(&v).unwrap(),
            dense_gauss_kl(&zero, &qcov, &zero, &rfull),
        );
    }

    let bad: Vec<String> = worst
        .iter()
        .filter(|(_, e)| *e > ORACLE_TOL)
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect();
    let max = worst.iter().fold(0.0f64, |a, (_, e)| a.max(*e));
    outcome(
        bad.is_empty(),
        format!(
            "{} quantities, worst error {max:.2e}{}",
            worst.len(),
            if bad.is_empty() {
                String::new()
            } else {
                format!("; over tolerance: {}", bad.join(", "))
            }
        ),
    )
}

fn kl_u_for(m: &DVector<f64>, s: &DMatrix<f64>, kuu: &DMatrix<f64>) -> f64 {
    dense_gauss_kl(m, s, &DVector::zeros(m.len()), kuu)
}

fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > 1e-13 {
        if fa < fb {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b);
        } else {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a);
        }
    }
    0.5 * (lo + hi)
}

fn ac4_optimal_v() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst_v: f64 = 0.0;
    let mut pairs = 0;
    let mut seed = 0;
    while pairs < 100 {
        seed += 1;
        let inst = random_instance(rng.gen_range(10..40), rng.gen_range(1..6), 1, 4400 + seed);
        let model = inst.model();
        let cache = build_cache(&model).unwrap();
        let vstar = optimal_v(&cache, inst.noise_var);
        for _ in 0..5 {
            let i = rng.gen_range(0..inst.data.len());
            let (r, s2) = (cache.residual[i], inst.noise_var);
            // per-point terms of the bound that depend on v, over t = ln v
            let obj = |t: f64| {
                let v = t.exp();
                -0.5 * v * r / s2 - 0.5 * (v - t - 1.0)
            };
            let v_num = golden_max(obj, -30.0, 5.0).exp();
            worst_v = worst_v.max((v_num - vstar[i]).abs());
            pairs += 1;
        }
    }
    let mut worst_rec: f64 = 0.0;
    for seed in 0..20u64 {
        let inst = random_instance(25, 4, 2, 4500 + seed);
        let model = inst.model();
        let cache = build_cache(&model).unwrap();
        let q = GaussianVariational::from_optimal(
            &optimal_qu(&model, &cache).unwrap(),
            &cache.kuu,
            true,
        )
        .unwrap();
        let v: Vec<f64> = optimal_v(&cache, inst.noise_var).iter().copied().collect();
        let a = elbo_svgp_with_v(&model, &cache, &q, &v).unwrap().bound;
        let b = elbo_sgpr_new(&model, &cache).unwrap().bound;
        worst_rec = worst_rec.max((a - b).abs() / b.abs().max(1.0));
    }
    outcome(
        worst_v <= V_NUMERIC_TOL && worst_rec <= V_RECONSTRUCT_TOL,
        format!("{pairs} pairs, worst |v − v_num| {worst_v:.2e}; reconstruction worst {worst_rec:.2e} on 20 instances"),
    )
}

fn random_params(method: Method, data: &Dataset, m: usize, seed: u64) -> UnconstrainedParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = data.dim();
    let layout = method.layout(KernelFamily::SqExp, d, m);
    let q = method.is_stochastic().then(|| {
        let f = DMatrix::from_fn(m, m, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => rng.gen_range(-0.3..0.3),
            std::cmp::Ordering::Equal => rng.gen_range(0.3..1.0),
            std::cmp::Ordering::Less => 0.0,
        });
        GaussianVariational::new(
            DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0)),
            f,
            true,
        )
        .unwrap()
    });
    let c = Constrained {
        noise_sd: rng.gen_range(0.2..0.8),
        amplitude_sd: rng.gen_range(0.5..1.5),
        lengthscales: vec![rng.gen_range(0.5..1.5)],
        inducing: method
            .is_sparse()
            .then(|| DMatrix::from_fn(m, d, |_, _| rng.gen_range(-2.5..2.5))),
        q,
        v: Some(rng.gen_range(0.3..1.2)),
    };
    UnconstrainedParams::unconstrain(&c, &layout).unwrap()
}

fn ac5_gradients() -> Outcome {
    let data = make_synthetic_regression(15, 1, 0.05, 5)
        .unwrap()
        .normalized(true);
    let counts = make_poisson_toy(5)
        .unwrap()
        .subset(&(0..50).step_by(3).take(15).collect::<Vec<_>>());
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    let mut bad = Vec::new();
    for method in Method::ALL {
        let d = if method.is_poisson() { &counts } else { &data };
        for seed in 0..3u64 {
            let p = random_params(method, d, 3, 50 + seed);
            let obj = BoundObjective::new(method, p.layout.clone(), d);
            let (_, g) = obj.value_and_gradient(&p.values).unwrap();
            let fd = finite_difference_gradient(&obj, &p.values).unwrap();
            for i in 0..g.len() {
                let rel = (g[i] - fd[i]).abs() / fd[i].abs().max(g[i].abs()).max(GRAD_FLOOR);
                worst = worst.max(rel);
                coords += 1;
                if rel >= GRAD_REL {
                    bad.push(format!("{method}[{i}] {:.6e} vs {:.6e}", g[i], fd[i]));
                }
            }
        }
    }
    outcome(
        bad.is_empty(),
        format!(
            "8 methods × 3 points, {coords} coordinates, worst relative error {worst:.2e}{}",
            bad.first()
                .map(|b| format!("; e.g. {b}"))
                .unwrap_or_default()
        ),
    )
}

fn ac6_minibatch() -> Outcome {
    let inst = random_instance(20, 4, 1, 66);
    let model = inst.model();
    let cache = build_cache(&model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = GaussianVariational::new(
        DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0)),
        DMatrix::from_fn(4, 4, |i, j| {
            if i == j {
                0.6
            } else if i > j {
                0.1
            } else {
                0.0
            }
        }),
        true,
    )
    .unwrap();
    let singles: Vec<Vec<usize>> = (0..20).map(|i| vec![i]).collect();
    let mut perm: Vec<usize> = (0..20).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
    let fives: Vec<Vec<usize>> = perm.chunks(5).map(<[usize]>::to_vec).collect();
    let mut worst: f64 = 0.0;
    for variant in [BoundVariant::Classic, BoundVariant::New] {
        let full = elbo_svgp_uncollapsed(&model, &cache, &q, variant)
            .unwrap()
            .bound;
        for batches in [&singles, &fives] {
            let avg = batches
                .iter()
                .map(|b| elbo_svgp_minibatch(&model, &q, b, variant).unwrap().bound)
                .sum::<f64>()
                / batches.len() as f64;
            worst = worst.max((avg - full).abs());
        }
    }
    // the count-likelihood bound has the same structure
    let counts = make_poisson_toy(6)
        .unwrap()
        .subset(&(0..20).collect::<Vec<_>>());
    let pm = SparseModel::new(
        KernelSpec::sq_exp(1.0, 2.0),
        1.0,
        DMatrix::from_fn(4, 1, |i, _| -9.0 + 2.5 * i as f64),
        &counts,
    )
    .unwrap();
    let pc = build_cache(&pm).unwrap();
    let v = ScalarV::new(0.7).unwrap();
    let full = elbo_nonconjugate(&q, &pm, &pc, v, &Poisson).unwrap().bound;
    for batches in [&singles, &fives] {
        let avg = batches
            .iter()
            .map(|b| {
                elbo_nonconjugate_minibatch(&q, &pm, v, &Poisson, b)
                    .unwrap()
                    .bound
            })
            .sum::<f64>()
            / batches.len() as f64;
        worst = worst.max((avg - full).abs());
    }
    outcome(
        worst <= MINIBATCH_TOL,
        format!("singleton and size-5 partitions, classic/new/count bounds, worst |avg − full| {worst:.2e}"),
    )
}

fn ac7_snelson() -> Outcome {
    let data = make_snelson_like(40, 0).unwrap().normalized(true);
    let run = |method| {
        let cfg = TrainConfig {
            method,
            num_inducing: 7,
            iterations: 5000,
            inducing_init: InducingInit::RandomSubset,
            seed: 1,
            ..TrainConfig::default()
        };
        fit(&cfg, &data).unwrap()
    };
    let exact = run(Method::Exact);
    let sgpr = run(Method::Sgpr);
    let new = run(Method::SgprNew);
    let s2 = exact.noise_var;
    let amp = exact.kernel.amplitude_sq;
    let l2 = exact.kernel.lengthscales[0].powi(2);
    let within = |x: f64, (c, w): (f64, f64)| (x - c).abs() <= w;
    let a = [
        within(s2, SNELSON_NOISE),
        within(amp, SNELSON_AMPLITUDE),
        within(l2, SNELSON_LENGTHSCALE_SQ),
    ];
    let b =
        new.noise_var < sgpr.noise_var && (new.noise_var - s2).abs() < (sgpr.noise_var - s2).abs();
    let c = new.final_bound.bound > sgpr.final_bound.bound;
    let mark = |ok: bool| if ok { "ok" } else { "MISS" };
    outcome(
        b && c,
        format!(
            "(a, non-binding) exact σ²={s2:.4} [{}] σ_f²={amp:.3} [{}] ℓ²={l2:.3} [{}]; \
             (b) σ²: new {:.4} sgpr {:.4} [{}]; (c) ELBO: new {:.3} sgpr {:.3} [{}]",
            mark(a[0]),
            mark(a[1]),
            mark(a[2]),
            new.noise_var,
            sgpr.noise_var,
            mark(b),
            new.final_bound.bound,
            sgpr.final_bound.bound,
            mark(c)
        ),
    )
}

fn poisson_fit(data: &Dataset, method: Method, full: bool) -> FitResult {
    let cfg = TrainConfig {
        method,
        num_inducing: if full { data.len() } else { 6 },
        inducing_init: if full {
            InducingInit::TrainingInputs
        } else {
            InducingInit::KMeans
        },
        freeze: Freeze {
            inducing: full,
            ..Freeze::default()
        },
        epochs: 5000,
        batch_size: data.len(),
        log_every: 50,
        seed: 0,
        ..TrainConfig::default()
    };
    fit(&cfg, data).unwrap()
}

fn ac8_poisson() -> Outcome {
    let data = make_poisson_toy(0).unwrap().normalized(false);
    let old = poisson_fit(&data, Method::SvgpPoisson, false);
    let new = poisson_fit(&data, Method::SvgpPoissonNew, false);
    let full = poisson_fit(&data, Method::SvgpPoissonNew, true);
    let v = new.v.unwrap();
    let v_ok = (POISSON_V_RANGE.0..=POISSON_V_RANGE.1).contains(&v);
    let elbo_ok = new.final_bound.bound >= old.final_bound.bound;
    // trace gaps to the Z = X run, skipping the first tenth of training
    let gap = |f: &FitResult| {
        let pts: Vec<f64> = f
            .trace
            .iter()
            .zip(&full.trace)
            .filter(|(p, _)| p.step >= 500)
            .map(|(p, q)| (q.bound - p.bound).abs())
            .collect();
        pts.iter().sum::<f64>() / pts.len() as f64
    };
    let (g_old, g_new) = (gap(&old), gap(&new));
    let trace_ok = g_new < g_old;
    outcome(
        v_ok && elbo_ok && trace_ok,
        format!(
            "v={v:.4}; ELBO new {:.3} vs v=1 {:.3}; full GP {:.3}; mean trace gap new {g_new:.3} vs v=1 {g_old:.3}",
            new.final_bound.bound, old.final_bound.bound, full.final_bound.bound
        ),
    )
}

fn ac9_synthetic() -> Outcome {
    let data = make_synthetic_regression(2000, 2, 0.05, 9)
        .unwrap()
        .normalized(true);
    let run = |method| {
        let cfg = TrainConfig {
            method,
            kernel: KernelFamily::Matern32,
            num_inducing: 15,
            epochs: SYNTHETIC_EPOCHS,
            batch_size: 200,
            seed: 9,
            ..TrainConfig::default()
        };
        fit(&cfg, &data).unwrap()
    };
    let old = run(Method::Svgp);
    let new = run(Method::SvgpNew);
    outcome(
        new.final_bound.bound >= old.final_bound.bound,
        format!(
            "N=2000, M=15, {SYNTHETIC_EPOCHS} epochs: svgp_new {:.3} vs svgp {:.3}",
            new.final_bound.bound, old.final_bound.bound
        ),
    )
}

fn json_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn ac10_determinism() -> Outcome {
    let config = ExperimentConfig {
        name: "determinism".into(),
        dataset: DatasetSource::SnelsonLike { n: 60 },
        repeats: 3,
        seed: 10,
        methods: [Method::Exact, Method::SgprNew, Method::SvgpNew]
            .into_iter()
            .map(|method| TrainConfig {
                method,
                num_inducing: 6,
                iterations: 200,
                epochs: 30,
                batch_size: 10,
                ..TrainConfig::default()
            })
            .collect(),
        ..ExperimentConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&config, a.path()).unwrap();
    run_experiment(&config, b.path()).unwrap();
    let (fa, fb) = (json_files(a.path()), json_files(b.path()));
    let same = !fa.is_empty() && fa == fb;
    outcome(
        same,
        format!("{} JSON files compared byte for byte", fa.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("AC1 bound ordering", ac1_ordering),
        ("AC2 exactness at Z = X", ac2_collapse),
        ("AC3 dense-oracle equivalence", ac3_oracles),
        ("AC4 optimal v", ac4_optimal_v),
        ("AC5 gradients vs finite differences", ac5_gradients),
        ("AC6 minibatch unbiasedness", ac6_minibatch),
        ("AC7 toy 1-D regression", ac7_snelson),
        ("AC8 Poisson toy", ac8_poisson),
        ("AC9 2000-point synthetic", ac9_synthetic),
        ("AC10 experiment determinism", ac10_determinism),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, check) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {name}: {} ({:.1}s)",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
