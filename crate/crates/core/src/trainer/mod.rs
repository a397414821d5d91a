//! Hyperparameter and variational training with Adam.
//!
//! Full-batch methods (`exact` and the collapsed bounds) take one step per
//! iteration over all rows; stochastic methods sweep shuffled minibatches
//! once per epoch. Gradients come from a reverse-mode tape over the bound's
//! matrix expression ([`tape`]), checked against central differences.

mod adam;
mod kmeans;
pub mod objective;
pub mod params;
pub mod tape;

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use kmeans::{kmeans_init, random_subset, DEFAULT_KMEANS_ITERS};
pub use objective::{
    finite_difference_gradient, gradient, library_bound, BoundObjective, FnObjective, Objective,
};
pub use params::{Constrained, ParamLayout, UnconstrainedParams, MIN_NOISE_SD};

use crate::collapsed::{build_cache, optimal_qu, optimal_v, BoundReport, SparseModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::linalg::DEFAULT_RELATIVE_JITTER;
use crate::stochastic::{EpochSampler, GaussianVariational};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    Sgpr,
    SgprNew,
    SgprArtemev,
    Svgp,
    SvgpNew,
    SvgpPoisson,
    SvgpPoissonNew,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Exact,
        Method::Sgpr,
        Method::SgprNew,
        Method::SgprArtemev,
        Method::Svgp,
        Method::SvgpNew,
        Method::SvgpPoisson,
        Method::SvgpPoissonNew,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Sgpr => "sgpr",
            Method::SgprNew => "sgpr_new",
            Method::SgprArtemev => "sgpr_artemev",
            Method::Svgp => "svgp",
            Method::SvgpNew => "svgp_new",
            Method::SvgpPoisson => "svgp_poisson",
            Method::SvgpPoissonNew => "svgp_poisson_new",
        }
    }

    pub fn is_sparse(self) -> bool {
        self != Method::Exact
    }

    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            Method::Svgp | Method::SvgpNew | Method::SvgpPoisson | Method::SvgpPoissonNew
        )
    }

    pub fn is_poisson(self) -> bool {
        matches!(self, Method::SvgpPoisson | Method::SvgpPoissonNew)
    }

    pub fn layout(
        self,
        family: KernelFamily,
        input_dim: usize,
        num_inducing: usize,
    ) -> ParamLayout {
        ParamLayout::new(
            family,
            input_dim,
            self.is_sparse().then_some(num_inducing),
            self.is_stochastic(),
            self == Method::SvgpPoissonNew,
        )
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InducingInit {
    /// Lloyd's k-means started from a random subset.
    KMeans,
    RandomSubset,
    /// `Z = X`; requires `num_inducing == N`.
    TrainingInputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub noise_sd: f64,
    pub amplitude_sd: f64,
    pub lengthscale: f64,
    pub v: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            noise_sd: 0.51,
            amplitude_sd: 0.69,
            lengthscale: 1.0,
            v: 1.0,
        }
    }
}

/// Parameter blocks held at their initial values.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Freeze {
    pub noise: bool,
    pub amplitude: bool,
    pub lengthscales: bool,
    pub inducing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub kernel: KernelFamily,
    pub num_inducing: usize,
    /// Optimization steps for full-batch methods.
    pub iterations: usize,
    /// Passes over the data for stochastic methods.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub init: InitConfig,
    pub inducing_init: InducingInit,
    pub kmeans_iters: usize,
    pub freeze: Freeze,
    /// Trace interval in steps (full-batch) or epochs (stochastic); 0 picks
    /// 10 steps or 1 epoch.
    pub log_every: usize,
    pub relative_jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::SgprNew,
            kernel: KernelFamily::SqExp,
            num_inducing: 20,
            iterations: 1000,
            epochs: 100,
            batch_size: 1024,
            learning_rate: 0.01,
            seed: 0,
            init: InitConfig::default(),
            inducing_init: InducingInit::KMeans,
            kmeans_iters: DEFAULT_KMEANS_ITERS,
            freeze: Freeze::default(),
            log_every: 0,
            relative_jitter: DEFAULT_RELATIVE_JITTER,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.method.is_sparse() {
            if self.num_inducing == 0 {
                return Err(Error::Config("num_inducing must be at least 1".into()));
            }
            if self.num_inducing > n {
                return Err(Error::MTooLarge {
                    requested: self.num_inducing,
                    available: n,
                });
            }
            if self.inducing_init == InducingInit::TrainingInputs && self.num_inducing != n {
                return Err(Error::Config(
                    "inducing_init = training_inputs needs num_inducing = N".into(),
                ));
            }
        }
        if self.method.is_stochastic() && self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.init.noise_sd <= MIN_NOISE_SD {
            return Err(Error::Config(format!(
                "initial noise sd must exceed {MIN_NOISE_SD}"
            )));
        }
        if !(self.init.amplitude_sd > 0.0 && self.init.lengthscale > 0.0 && self.init.v > 0.0) {
            return Err(Error::Config("initial scales must be positive".into()));
        }
        Ok(())
    }

    fn log_interval(&self) -> usize {
        match (self.log_every, self.method.is_stochastic()) {
            (0, true) => 1,
            (0, false) => 10,
            (k, _) => k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    /// Updates applied before this evaluation (epochs for stochastic methods).
    pub step: usize,
    pub bound: f64,
    pub noise_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl VHistogram {
    /// Equal-width bins over [0, 1].
    pub fn from_values(values: impl Iterator<Item = f64>, bins: usize) -> Self {
        let edges = (0..=bins).map(|k| k as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let k = ((v * bins as f64).floor() as usize).min(bins - 1);
            counts[k] += 1;
        }
        VHistogram { edges, counts }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub method: Method,
    pub kernel: KernelSpec,
    pub noise_var: f64,
    pub inducing: Option<DMatrix<f64>>,
    /// Whitened `q(u)` for stochastic methods; the optimal `q(u)` (u-space)
    /// for collapsed ones.
    pub q_u: Option<GaussianVariational>,
    pub v: Option<f64>,
    pub final_bound: BoundReport,
    pub steps: usize,
    pub trace: Vec<TracePoint>,
    pub v_histogram: Option<VHistogram>,
    /// Jitter on `K_uu`, relative to the kernel amplitude, used in training.
    pub relative_jitter: f64,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl FitResult {
    /// Model over `data` with the trained kernel, noise and inducing inputs.
    pub fn sparse_model<'a>(&self, data: &'a Dataset) -> Result<SparseModel<'a>> {
        let z = self
            .inducing
            .clone()
            .ok_or_else(|| Error::Config(format!("{} has no inducing inputs", self.method)))?;
        Ok(
            SparseModel::new(self.kernel.clone(), self.noise_var, z, data)?
                .with_relative_jitter(self.relative_jitter),
        )
    }
}

fn initial_params(config: &TrainConfig, data: &Dataset) -> Result<UnconstrainedParams> {
    let d = data.dim();
    let m = config.num_inducing;
    let layout = config.method.layout(config.kernel, d, m);
    let inducing = if config.method.is_sparse() {
        Some(match config.inducing_init {
            InducingInit::KMeans => kmeans_init(&data.x, m, config.kmeans_iters, config.seed)?,
            InducingInit::RandomSubset => random_subset(&data.x, m, config.seed)?,
            InducingInit::TrainingInputs => data.x.clone(),
        })
    } else {
        None
    };
    let c = Constrained {
        noise_sd: config.init.noise_sd,
        amplitude_sd: config.init.amplitude_sd,
        lengthscales: vec![config.init.lengthscale; layout.lengthscales.len()],
        inducing,
        q: config
            .method
            .is_stochastic()
            .then(|| GaussianVariational::whitened_prior(m)),
        v: Some(config.init.v),
    };
    UnconstrainedParams::unconstrain(&c, &layout)
}

fn frozen_mask(config: &TrainConfig, layout: &ParamLayout) -> Vec<usize> {
    let mut idx = Vec::new();
    if config.freeze.noise {
        idx.push(layout.noise);
    }
    if config.freeze.amplitude {
        idx.push(layout.amplitude);
    }
    if config.freeze.lengthscales {
        idx.extend(layout.lengthscales.clone());
    }
    if config.freeze.inducing {
        if let Some(r) = &layout.inducing {
            idx.extend(r.clone());
        }
    }
    idx
}

fn finish(
    config: &TrainConfig,
    data: &Dataset,
    params: &UnconstrainedParams,
    steps: usize,
    trace: Vec<TracePoint>,
    started: Instant,
) -> Result<FitResult> {
    let c = params.constrain();
    let kernel = c.kernel(config.kernel);
    let noise_var = c.noise_var();
    let final_bound = library_bound(config.method, params, data, config.relative_jitter)?;
    let mut q_u = c.q.clone();
    let mut v = c.v.filter(|_| config.method == Method::SvgpPoissonNew);
    let mut v_histogram = None;
    if matches!(
        config.method,
        Method::Sgpr | Method::SgprNew | Method::SgprArtemev
    ) {
        let z = c.inducing.clone().expect("sparse layout has Z");
        let model = SparseModel::new(kernel.clone(), noise_var, z, data)?
            .with_relative_jitter(config.relative_jitter);
        let cache = build_cache(&model)?;
        let q = optimal_qu(&model, &cache)?;
        q_u = Some(GaussianVariational::from_optimal(&q, &cache.kuu, false)?);
        match config.method {
            Method::SgprNew => {
                let vs = optimal_v(&cache, noise_var);
                v_histogram = Some(VHistogram::from_values(vs.iter().copied(), 20));
            }
            Method::SgprArtemev => v = Some(final_bound.v_min),
            _ => {}
        }
    }
    Ok(FitResult {
        method: config.method,
        kernel,
        noise_var,
        inducing: c.inducing,
        q_u,
        v,
        final_bound,
        steps,
        trace,
        v_histogram,
        relative_jitter: config.relative_jitter,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

fn non_finite(
    config: &TrainConfig,
    data: &Dataset,
    last: &UnconstrainedParams,
    step: usize,
    trace: Vec<TracePoint>,
    started: Instant,
) -> Error {
    log::warn!("{}: non-finite objective at step {step}", config.method);
    let last = finish(config, data, last, step, trace, started)
        .ok()
        .map(Box::new);
    Error::NonFiniteObjective { step, last }
}

/// Trains `config.method` on `data` (already normalized by the caller).
pub fn fit(config: &TrainConfig, data: &Dataset) -> Result<FitResult> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    config.validate(data.len())?;
    if config.method.is_poisson() {
        for &y in data.y.iter() {
            if y < 0.0 {
                return Err(Error::NegativeCount(y));
            }
            if y.fract() != 0.0 {
                return Err(Error::InvalidCount(y));
            }
        }
    }
    let started = Instant::now();
    let mut params = initial_params(config, data)?;
    let frozen = frozen_mask(config, &params.layout);
    let mut adam = AdamState::new(params.layout.len, config.learning_rate);
    let every = config.log_interval();
    let mut trace = Vec::new();
    let mut last_good = params.clone();

    let mut apply =
        |params: &mut UnconstrainedParams, mut g: nalgebra::DVector<f64>| -> Result<()> {
            for &i in &frozen {
                g[i] = 0.0;
            }
            adam_step(&mut adam, &mut params.values, &g)
        };

    if !config.method.is_stochastic() {
        let mut objective = BoundObjective::new(config.method, params.layout.clone(), data);
        objective.relative_jitter = config.relative_jitter;
        for step in 0..config.iterations {
            let evaluated = objective.value_and_gradient(&params.values);
            let (value, g) = match evaluated {
                Ok((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => (v, g),
                Ok(_) | Err(Error::SingularMatrix { .. }) => {
                    return Err(non_finite(config, data, &last_good, step, trace, started))
                }
                Err(e) => return Err(e),
            };
            last_good = params.clone();
            if step % every == 0 {
                trace.push(TracePoint {
                    step,
                    bound: value,
                    noise_var: params.constrain().noise_var(),
                });
                log::debug!("{} step {step}: bound {value:.6}", config.method);
            }
            apply(&mut params, g)?;
        }
        let result = finish(config, data, &params, config.iterations, trace, started);
        return match result {
            Ok(mut r) => {
                if r.trace.last().map(|t| t.step) != Some(config.iterations) {
                    r.trace.push(TracePoint {
                        step: config.iterations,
                        bound: r.final_bound.bound,
                        noise_var: r.noise_var,
                    });
                }
                Ok(r)
            }
            Err(Error::SingularMatrix { .. }) => Err(non_finite(
                config,
                data,
                &last_good,
                config.iterations,
                Vec::new(),
                started,
            )),
            Err(e) => Err(e),
        };
    }

    let mut sampler = EpochSampler::new(data.len(), config.batch_size, config.seed)?;
    let record = |params: &UnconstrainedParams, epoch: usize| -> Result<TracePoint> {
        let r = library_bound(config.method, params, data, config.relative_jitter)?;
        Ok(TracePoint {
            step: epoch,
            bound: r.bound,
            noise_var: params.constrain().noise_var(),
        })
    };
    trace.push(record(&params, 0)?);
    let mut steps = 0;
    for epoch in 1..=config.epochs {
        for batch in sampler.next_epoch() {
            let mut objective =
                BoundObjective::new(config.method, params.layout.clone(), data).with_rows(batch);
            objective.relative_jitter = config.relative_jitter;
            let g = match objective.value_and_gradient(&params.values) {
                Ok((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => g,
                Ok(_) | Err(Error::SingularMatrix { .. }) => {
                    return Err(non_finite(config, data, &last_good, steps, trace, started))
                }
                Err(e) => return Err(e),
            };
            last_good = params.clone();
            apply(&mut params, g)?;
            steps += 1;
        }
        if epoch % every == 0 || epoch == config.epochs {
            match record(&params, epoch) {
                Ok(p) if p.bound.is_finite() => {
                    log::debug!("{} epoch {epoch}: bound {:.6}", config.method, p.bound);
                    trace.push(p);
                }
                _ => return Err(non_finite(config, data, &last_good, steps, trace, started)),
            }
        }
    }
    finish(config, data, &params, steps, trace, started)
}
