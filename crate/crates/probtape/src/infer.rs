//! Inference as an object: a problem (model, latent-to-approximation map,
//! data, scale factors) plus an algorithm, driven by `initialize` / `update`
//! / `run`. Every algorithm here is one instance of the same optimization
//! framing: pick an approximating family, a loss or transition rule, and a
//! parameter-update rule.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::dist::{beta_sample, categorical_sample, Dist, Empirical};
use crate::error::{Error, Result};
use crate::model::{Bindings, Feeds, ModelCtx, ModelFn, Source};
use crate::opt::{Optimizer, OptimizerConfig};
use crate::rng::{self, Rng};
use crate::tape::{sigmoid_scalar, softplus_scalar, Param, ParamStore, Tape, Value};
use crate::tensor::Tensor;

/// Declared placeholder: a tensor of this shape must be fed at every update.
#[derive(Clone, Debug)]
pub struct FeedSlot {
    pub name: String,
    pub shape: Vec<usize>,
}

impl FeedSlot {
    pub fn new(name: &str, shape: &[usize]) -> Self {
        FeedSlot { name: name.to_string(), shape: shape.to_vec() }
    }
}

/// Elementwise link from an unconstrained parameter to a constrained value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Sigmoid,
    Softplus,
}

impl Transform {
    pub fn apply_value(&self, tape: &mut Tape, v: Value) -> Result<Value> {
        match self {
            Transform::Identity => Ok(v),
            Transform::Sigmoid => tape.sigmoid(v),
            Transform::Softplus => tape.softplus(v),
        }
    }

    pub fn apply_tensor(&self, t: &Tensor) -> Tensor {
        match self {
            Transform::Identity => t.clone(),
            Transform::Sigmoid => t.map(sigmoid_scalar),
            Transform::Softplus => t.map(softplus_scalar),
        }
    }

    /// log |d constrained / d unconstrained| summed over elements, built on
    /// the tape so it can join a log joint.
    pub fn log_jacobian(&self, tape: &mut Tape, v: Value) -> Result<Option<Value>> {
        match self {
            Transform::Identity => Ok(None),
            Transform::Sigmoid => {
                // ln s'(u) = -softplus(u) - softplus(-u)
                let sp = tape.softplus(v)?;
                let nv = tape.neg(v)?;
                let spn = tape.softplus(nv)?;
                let s = tape.add(sp, spn)?;
                let total = tape.sum_all(s)?;
                Ok(Some(tape.neg(total)?))
            }
            Transform::Softplus => {
                // ln softplus'(u) = ln sigmoid(u) = -softplus(-u)
                let nv = tape.neg(v)?;
                let spn = tape.softplus(nv)?;
                let total = tape.sum_all(spn)?;
                Ok(Some(tape.neg(total)?))
            }
        }
    }
}

/// Builder function for amortized approximations: reads feeds/parameters and
/// returns a distribution on the current tape.
pub type ApproxBuilder = Arc<dyn Fn(&mut ModelCtx) -> Result<Dist> + Send + Sync>;

/// An approximating family for one latent variable, holding the variational
/// parameters that inference will adjust.
#[derive(Clone)]
pub enum Approx {
    /// Diagonal Normal; sigma = softplus(rho) keeps the scale positive while
    /// rho stays unconstrained.
    Normal { mu: Param, rho: Param },
    /// Beta with log-parameterized concentrations.
    Beta { log_a: Param, log_b: Param },
    /// Categorical over the last axis of a logits parameter.
    Categorical { logits: Param },
    /// Degenerate point, optionally pushed through a constraining transform.
    PointMass { param: Param, transform: Transform },
    /// Sample store written by Monte Carlo algorithms.
    Empirical(Empirical),
    /// Arbitrary builder (inference networks); `params` lists everything the
    /// optimizer should update.
    Amortized { params: Vec<Param>, build: ApproxBuilder },
}

impl Approx {
    pub fn normal(store: &mut ParamStore, name: &str, shape: &[usize]) -> Result<Self> {
        let mu = store.create(&format!("{}.mu", name), Tensor::zeros(shape))?;
        let rho = store.create(&format!("{}.rho", name), Tensor::zeros(shape))?;
        Ok(Approx::Normal { mu, rho })
    }

    /// Normal approximation with explicit initial tensors. With
    /// `trainable_scale` false the scale parameter is never updated, which
    /// pins sigma = softplus(rho0) for the whole run.
    pub fn normal_with(
        store: &mut ParamStore,
        name: &str,
        mu0: Tensor,
        rho0: Tensor,
        trainable_scale: bool,
    ) -> Result<Self> {
        let mu = store.create(&format!("{}.mu", name), mu0)?;
        let rho = store.create_with(&format!("{}.rho", name), rho0, trainable_scale)?;
        Ok(Approx::Normal { mu, rho })
    }

    pub fn beta(store: &mut ParamStore, name: &str, shape: &[usize]) -> Result<Self> {
        let log_a = store.create(&format!("{}.log_a", name), Tensor::zeros(shape))?;
        let log_b = store.create(&format!("{}.log_b", name), Tensor::zeros(shape))?;
        Ok(Approx::Beta { log_a, log_b })
    }

    pub fn categorical(store: &mut ParamStore, name: &str, shape: &[usize]) -> Result<Self> {
        let logits = store.create(&format!("{}.logits", name), Tensor::zeros(shape))?;
        Ok(Approx::Categorical { logits })
    }

    pub fn point_mass(
        store: &mut ParamStore,
        name: &str,
        init: Tensor,
        transform: Transform,
    ) -> Result<Self> {
        let param = store.create(&format!("{}.point", name), init)?;
        Ok(Approx::PointMass { param, transform })
    }

    pub fn empirical(
        store: &mut ParamStore,
        name: &str,
        capacity: usize,
        event_shape: &[usize],
    ) -> Result<Self> {
        Ok(Approx::Empirical(Empirical::new(store, name, capacity, event_shape)?))
    }

    pub fn amortized(params: Vec<Param>, build: ApproxBuilder) -> Self {
        Approx::Amortized { params, build }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Approx::Normal { .. } => "Normal",
            Approx::Beta { .. } => "Beta",
            Approx::Categorical { .. } => "Categorical",
            Approx::PointMass { .. } => "PointMass",
            Approx::Empirical(_) => "Empirical",
            Approx::Amortized { .. } => "Amortized",
        }
    }

    /// Variational parameters owned by this approximation.
    pub fn params(&self) -> Vec<Param> {
        match self {
            Approx::Normal { mu, rho } => vec![*mu, *rho],
            Approx::Beta { log_a, log_b } => vec![*log_a, *log_b],
            Approx::Categorical { logits } => vec![*logits],
            Approx::PointMass { param, .. } => vec![*param],
            Approx::Empirical(_) => vec![],
            Approx::Amortized { params, .. } => params.clone(),
        }
    }

    /// Builds the approximating distribution on the current tape with live
    /// parameter leaves.
    pub fn build_dist(&self, ctx: &mut ModelCtx) -> Result<Dist> {
        match self {
            Approx::Normal { mu, rho } => {
                let m = ctx.param(*mu);
                let r = ctx.param(*rho);
                let sigma = ctx.tape.softplus(r)?;
                Ok(Dist::normal(m, sigma))
            }
            Approx::Beta { log_a, log_b } => {
                let la = ctx.param(*log_a);
                let lb = ctx.param(*log_b);
                let a = ctx.tape.exp(la)?;
                let b = ctx.tape.exp(lb)?;
                Ok(Dist::beta(a, b))
            }
            Approx::Categorical { logits } => {
                let l = ctx.param(*logits);
                Ok(Dist::categorical_logits(l))
            }
            Approx::PointMass { param, transform } => {
                let p = ctx.param(*param);
                let point = transform.apply_value(ctx.tape, p)?;
                Ok(Dist::point_mass(point))
            }
            Approx::Empirical(_) => Err(Error::Unsupported(
                "Empirical approximations have no parametric density; use a Monte Carlo algorithm"
                    .into(),
            )),
            Approx::Amortized { build, .. } => build(ctx),
        }
    }

    /// The approximation's current sample or point as a plain tensor, for
    /// cross-bound reads (no gradient flows to the owner).
    pub fn current_tensor(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        feeds: &Feeds,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        match self {
            Approx::Normal { mu, rho } => {
                let m = store.get(*mu);
                let s = store.get(*rho).map(softplus_scalar);
                let mut out = m.clone();
                for (x, &sd) in out.data_mut().iter_mut().zip(s.data()) {
                    *x += sd * rng::standard_normal(rng);
                }
                Ok(out)
            }
            Approx::Beta { log_a, log_b } => {
                let a = store.get(*log_a).map(f64::exp);
                let b = store.get(*log_b).map(f64::exp);
                let mut out = Tensor::zeros(a.shape());
                for i in 0..out.len() {
                    out.data_mut()[i] = beta_sample(a.data()[i], b.data()[i], rng);
                }
                Ok(out)
            }
            Approx::Categorical { logits } => {
                let l = store.get(*logits);
                let k = *l.shape().last().ok_or_else(|| {
                    Error::ShapeMismatch("categorical logits need a class axis".into())
                })?;
                let batch: Vec<usize> = l.shape()[..l.rank() - 1].to_vec();
                let mut out = Tensor::zeros(&batch);
                for (row, slot) in l.data().chunks(k).zip(out.data_mut().iter_mut()) {
                    *slot = categorical_sample(row, rng) as f64;
                }
                Ok(out)
            }
            Approx::PointMass { param, transform } => Ok(transform.apply_tensor(store.get(*param))),
            Approx::Empirical(e) => e.current(store),
            Approx::Amortized { build, .. } => {
                let bindings = Bindings::new();
                let d = {
                    let mut ctx = ModelCtx::new(tape, store, &bindings, feeds, rng, None);
                    build(&mut ctx)?
                };
                d.sample(tape, rng)
            }
        }
    }

    pub fn is_reparameterizable(&self) -> bool {
        matches!(self, Approx::Normal { .. } | Approx::Amortized { .. })
    }
}

/// What an observed variable is bound to.
#[derive(Clone)]
pub enum DataSource {
    Tensor(Tensor),
    Feed(FeedSlot),
    /// Another inference's approximation (composed inference): the model term
    /// is evaluated at the approximation's current sample/point.
    Approx(Approx),
}

/// The two inputs of inference — latent variables mapped to approximations,
/// observed variables mapped to data — plus per-variable scale factors and
/// any model parameters to point-estimate alongside.
#[derive(Clone)]
pub struct InferenceProblem {
    pub model: ModelFn,
    pub latents: BTreeMap<String, Approx>,
    pub data: BTreeMap<String, DataSource>,
    pub scale: BTreeMap<String, f64>,
    pub model_params: Vec<Param>,
    /// Input placeholders the model reads via `ctx.feed`; shapes are checked
    /// at every update.
    pub input_slots: Vec<FeedSlot>,
}

impl InferenceProblem {
    pub fn new(model: ModelFn) -> Self {
        InferenceProblem {
            model,
            latents: BTreeMap::new(),
            data: BTreeMap::new(),
            scale: BTreeMap::new(),
            model_params: Vec::new(),
            input_slots: Vec::new(),
        }
    }

    /// Declares a non-random input placeholder (features, covariates).
    pub fn input(mut self, slot: FeedSlot) -> Self {
        self.input_slots.push(slot);
        self
    }

    pub fn latent(mut self, name: &str, approx: Approx) -> Self {
        self.latents.insert(name.to_string(), approx);
        self
    }

    pub fn observe(mut self, name: &str, data: Tensor) -> Self {
        self.data.insert(name.to_string(), DataSource::Tensor(data));
        self
    }

    pub fn observe_feed(mut self, name: &str, slot: FeedSlot) -> Self {
        self.data.insert(name.to_string(), DataSource::Feed(slot));
        self
    }

    pub fn observe_approx(mut self, name: &str, approx: Approx) -> Self {
        self.data.insert(name.to_string(), DataSource::Approx(approx));
        self
    }

    pub fn scale(mut self, name: &str, s: f64) -> Self {
        self.scale.insert(name.to_string(), s);
        self
    }

    pub fn model_params(mut self, params: &[Param]) -> Self {
        self.model_params.extend_from_slice(params);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for name in self.latents.keys() {
            if self.data.contains_key(name) {
                return Err(Error::Config(format!(
                    "{:?} appears in both latents and data",
                    name
                )));
            }
        }
        for (name, &s) in &self.scale {
            if !(s > 0.0) {
                return Err(Error::Config(format!(
                    "scale for {:?} must be positive, got {}",
                    name, s
                )));
            }
        }
        Ok(())
    }

    /// Bindings for the observed side, with feeds resolved and checked.
    pub fn data_bindings(&self, feeds: &Feeds) -> Result<Bindings> {
        for slot in &self.input_slots {
            let t = feeds
                .get(&slot.name)
                .ok_or_else(|| Error::MissingFeed(slot.name.clone()))?;
            if t.shape() != slot.shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "feed {:?} has shape {:?}, slot expects {:?}",
                    slot.name,
                    t.shape(),
                    slot.shape
                )));
            }
        }
        let mut bindings = Bindings::new();
        for (name, src) in &self.data {
            match src {
                DataSource::Tensor(t) => bindings.insert(name, Source::Data(t.clone())),
                DataSource::Feed(slot) => {
                    let t = feeds
                        .get(&slot.name)
                        .ok_or_else(|| Error::MissingFeed(slot.name.clone()))?;
                    if t.shape() != slot.shape.as_slice() {
                        return Err(Error::ShapeMismatch(format!(
                            "feed {:?} has shape {:?}, slot expects {:?}",
                            slot.name,
                            t.shape(),
                            slot.shape
                        )));
                    }
                    bindings.insert(name, Source::Data(t.clone()));
                }
                DataSource::Approx(a) => bindings.insert(name, Source::Approx(a.clone())),
            }
        }
        Ok(bindings)
    }

    /// Every parameter the optimizer should step: variational parameters of
    /// all approximations plus declared model parameters.
    pub fn trainable_params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        for approx in self.latents.values() {
            out.extend(approx.params());
        }
        out.extend(self.model_params.iter().copied());
        out.sort();
        out.dedup();
        out
    }
}

/// Gradient estimator for the KL(q || p) objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    /// Pathwise samples through both the joint and the q density.
    Reparam,
    /// Analytic KL(q || prior), Monte Carlo likelihood.
    ReparamAnalyticKl,
    /// Analytic entropy of q, Monte Carlo joint.
    ReparamAnalyticEntropy,
    /// Score-function (likelihood-ratio) gradient; no closed forms needed.
    Score,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Reparam => "reparam",
            Estimator::ReparamAnalyticKl => "reparam_analytic_kl",
            Estimator::ReparamAnalyticEntropy => "reparam_analytic_entropy",
            Estimator::Score => "score",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct KlqpConfig {
    /// Monte Carlo samples per step.
    pub n_samples: usize,
    pub estimator: Estimator,
    /// Running-mean control variate (score estimator only).
    pub baseline: bool,
}

impl KlqpConfig {
    pub fn new(estimator: Estimator) -> Self {
        KlqpConfig { n_samples: 1, estimator, baseline: true }
    }

    pub fn with_samples(mut self, s: usize) -> Self {
        self.n_samples = s;
        self
    }
}

#[derive(Clone, Copy, Debug)]
pub struct IwaeConfig {
    /// Importance samples per step; K = 1 reduces to the plain ELBO.
    pub k: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct HmcConfig {
    pub step_size: f64,
    /// Leapfrog updates per iteration.
    pub n_steps: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct SgldDecay {
    pub a: f64,
    pub b: f64,
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct SgldConfig {
    pub step_size: f64,
    pub decay: Option<SgldDecay>,
}

#[derive(Clone, Copy, Debug)]
pub struct MhConfig {
    /// Isotropic Gaussian random-walk standard deviation (continuous
    /// latents; discrete latents are re-drawn uniformly).
    pub proposal_std: f64,
}

#[derive(Clone, Debug)]
pub enum Algorithm {
    Klqp(KlqpConfig),
    Map,
    Iwae(IwaeConfig),
    Hmc(HmcConfig),
    Sgld(SgldConfig),
    Mh(MhConfig),
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Klqp(cfg) => match cfg.estimator {
                Estimator::Reparam => "klqp",
                Estimator::ReparamAnalyticKl => "klqp_analytic_kl",
                Estimator::ReparamAnalyticEntropy => "klqp_analytic_entropy",
                Estimator::Score => "klqp_score",
            },
            Algorithm::Map => "map",
            Algorithm::Iwae(_) => "iwae",
            Algorithm::Hmc(_) => "hmc",
            Algorithm::Sgld(_) => "sgld",
            Algorithm::Mh(_) => "mh",
        }
    }

    fn is_monte_carlo(&self) -> bool {
        matches!(self, Algorithm::Hmc(_) | Algorithm::Sgld(_) | Algorithm::Mh(_))
    }
}

/// One row of the algorithm registry: the (approximating family, objective
/// or transition rule, parameter-update rule) triple each method instantiates.
#[derive(Debug, Clone, Copy)]
pub struct AlgorithmInfo {
    pub name: &'static str,
    pub family: &'static str,
    pub objective: &'static str,
    pub update_rule: &'static str,
}

/// Every inference method in the crate, expressed in the common framing.
pub fn algorithm_registry() -> &'static [AlgorithmInfo] {
    &[
        AlgorithmInfo {
            name: "klqp",
            family: "parametric (reparameterizable)",
            objective: "negative ELBO, pathwise Monte Carlo",
            update_rule: "stochastic gradient step",
        },
        AlgorithmInfo {
            name: "klqp_analytic_kl",
            family: "Normal",
            objective: "negative ELBO with closed-form KL(q || prior)",
            update_rule: "stochastic gradient step",
        },
        AlgorithmInfo {
            name: "klqp_analytic_entropy",
            family: "Normal",
            objective: "negative ELBO with closed-form entropy of q",
            update_rule: "stochastic gradient step",
        },
        AlgorithmInfo {
            name: "klqp_score",
            family: "any parametric (discrete allowed)",
            objective: "negative ELBO, likelihood-ratio surrogate",
            update_rule: "stochastic gradient step",
        },
        AlgorithmInfo {
            name: "map",
            family: "PointMass",
            objective: "negative log joint",
            update_rule: "gradient step",
        },
        AlgorithmInfo {
            name: "iwae",
            family: "parametric (reparameterizable)",
            objective: "negative importance-weighted bound",
            update_rule: "stochastic gradient step",
        },
        AlgorithmInfo {
            name: "hmc",
            family: "Empirical",
            objective: "Hamiltonian over the scaled log joint",
            update_rule: "leapfrog proposal + Metropolis accept, store write",
        },
        AlgorithmInfo {
            name: "sgld",
            family: "Empirical",
            objective: "scaled log joint gradient",
            update_rule: "Langevin step, always accepted, store write",
        },
        AlgorithmInfo {
            name: "mh",
            family: "Empirical",
            objective: "log joint ratio",
            update_rule: "random-walk proposal + Metropolis accept, store write",
        },
        AlgorithmInfo {
            name: "gan",
            family: "implicit generator",
            objective: "binary cross-entropy game",
            update_rule: "alternating discriminator/generator gradient steps",
        },
    ]
}

/// Per-step report: loss or acceptance plus any algorithm-specific metrics.
#[derive(Clone, Debug)]
pub struct Diagnostics {
    pub step: usize,
    pub metrics: BTreeMap<String, f64>,
    pub wall: Duration,
}

impl Diagnostics {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn divergent(&self) -> bool {
        self.metric("divergent").unwrap_or(0.0) != 0.0
    }
}

/// Kind of latent discovered by the initialization trace, fixing how Monte
/// Carlo algorithms move it.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum LatentKind {
    Continuous(Transform),
    Discrete { classes: usize },
}

/// Mutable algorithm state: optimizer slots or sampler positions, the RNG
/// stream, and the step counter.
pub struct InferenceState {
    pub problem: InferenceProblem,
    pub alg: Algorithm,
    pub(crate) optimizer: Optimizer,
    pub(crate) rng: Rng,
    pub(crate) baseline: Option<f64>,
    pub(crate) positions: BTreeMap<String, Tensor>,
    pub(crate) latent_kinds: BTreeMap<String, LatentKind>,
    pub(crate) empiricals: BTreeMap<String, Empirical>,
    pub step: usize,
    seed: u64,
    opt_cfg: OptimizerConfig,
    discovered: bool,
}

impl InferenceState {
    /// Validates the problem/algorithm pairing and builds fresh state.
    /// Re-initializing resets everything: step counter, optimizer moments,
    /// sampler positions and store cursors.
    pub fn initialize(
        problem: InferenceProblem,
        alg: Algorithm,
        opt: Option<OptimizerConfig>,
        store: &ParamStore,
        seed: u64,
    ) -> Result<Self> {
        problem.validate()?;
        match &alg {
            Algorithm::Klqp(cfg) => {
                if cfg.n_samples == 0 {
                    return Err(Error::Config("KLqp needs n_samples >= 1".into()));
                }
                for (name, approx) in &problem.latents {
                    if matches!(approx, Approx::Empirical(_)) {
                        return Err(Error::Config(format!(
                            "KLqp over {:?} requires a parametric approximation, got Empirical",
                            name
                        )));
                    }
                    match cfg.estimator {
                        Estimator::Score => {
                            if matches!(approx, Approx::PointMass { .. }) {
                                return Err(Error::Config(format!(
                                    "score estimator over {:?} is degenerate for PointMass",
                                    name
                                )));
                            }
                        }
                        _ => {
                            if !approx.is_reparameterizable() {
                                return Err(Error::Config(format!(
                                    "estimator {:?} requires reparameterizable approximations; {:?} is {}",
                                    cfg.estimator.name(),
                                    name,
                                    approx.family()
                                )));
                            }
                        }
                    }
                }
            }
            Algorithm::Map => {
                for (name, approx) in &problem.latents {
                    if !matches!(approx, Approx::PointMass { .. }) {
                        return Err(Error::Config(format!(
                            "MAP requires PointMass approximations; {:?} is {}",
                            name,
                            approx.family()
                        )));
                    }
                }
            }
            Algorithm::Iwae(cfg) => {
                if cfg.k == 0 {
                    return Err(Error::Config("IWAE needs K >= 1".into()));
                }
                for (name, approx) in &problem.latents {
                    if !approx.is_reparameterizable() {
                        return Err(Error::Config(format!(
                            "IWAE requires reparameterizable approximations; {:?} is {}",
                            name,
                            approx.family()
                        )));
                    }
                }
            }
            Algorithm::Hmc(cfg) => {
                if !(cfg.step_size > 0.0) {
                    return Err(Error::Config("HMC step size must be > 0".into()));
                }
                if cfg.n_steps == 0 {
                    return Err(Error::Config("HMC needs n_steps >= 1".into()));
                }
                require_empirical(&problem, "HMC")?;
            }
            Algorithm::Sgld(cfg) => {
                if cfg.step_size < 0.0 {
                    return Err(Error::Config("SGLD step size must be >= 0".into()));
                }
                if let Some(d) = cfg.decay {
                    if !(d.gamma > 0.5 && d.gamma <= 1.0) {
                        return Err(Error::Config(format!(
                            "SGLD decay exponent {} outside (0.5, 1]",
                            d.gamma
                        )));
                    }
                }
                require_empirical(&problem, "SGLD")?;
            }
            Algorithm::Mh(cfg) => {
                if !cfg.proposal_std.is_finite() || cfg.proposal_std <= 0.0 {
                    return Err(Error::Config("MH proposal stddev must be positive".into()));
                }
                require_empirical(&problem, "MH")?;
            }
        }

        let opt_cfg = opt.unwrap_or_default();
        let mut optimizer = Optimizer::new(opt_cfg);
        if !alg.is_monte_carlo() {
            optimizer.ensure_slots(store, &problem.trainable_params());
        }

        let mut state = InferenceState {
            problem,
            alg,
            optimizer,
            rng: rng::stream(seed, rng::STREAM_ALG),
            baseline: None,
            positions: BTreeMap::new(),
            latent_kinds: BTreeMap::new(),
            empiricals: BTreeMap::new(),
            step: 0,
            seed,
            opt_cfg,
            discovered: false,
        };
        if state.alg.is_monte_carlo() {
            for (name, approx) in &state.problem.latents {
                let empirical = match approx {
                    Approx::Empirical(e) => e.clone(),
                    _ => unreachable!("validated above"),
                };
                state
                    .positions
                    .insert(name.clone(), Tensor::zeros(empirical.event_shape()));
                state.empiricals.insert(name.clone(), empirical);
            }
            // support discovery needs one ancestral trace; run it now unless
            // the model reads feeds, in which case it waits for the first
            // update
            let needs_feeds = !state.problem.input_slots.is_empty()
                || state
                    .problem
                    .data
                    .values()
                    .any(|d| matches!(d, DataSource::Feed(_)));
            if !needs_feeds {
                state.ensure_discovered(store, &Feeds::new())?;
            }
        }
        Ok(state)
    }

    /// Runs one throwaway ancestral trace to learn each latent's support,
    /// fixing the transform each Monte Carlo move uses. Idempotent.
    pub(crate) fn ensure_discovered(&mut self, store: &ParamStore, feeds: &Feeds) -> Result<()> {
        if self.discovered || !self.alg.is_monte_carlo() {
            return Ok(());
        }
        let mut tape = Tape::new();
        let bindings = self.problem.data_bindings(feeds)?;
        let mut rng = rng::stream(self.seed, rng::STREAM_INIT);
        let model = self.problem.model.clone();
        let tr = crate::model::trace(
            move |ctx| model(ctx),
            &mut tape,
            store,
            &bindings,
            feeds,
            &mut rng,
        )?;
        let continuous_only = !matches!(self.alg, Algorithm::Mh(_));
        for name in self.problem.latents.keys() {
            let rv = tr.get(name).ok_or_else(|| {
                Error::UnknownBinding(format!("latent {:?} never created by the model", name))
            })?;
            let kind = match rv.dist {
                Dist::Normal { .. } => LatentKind::Continuous(Transform::Identity),
                Dist::Beta { .. } => LatentKind::Continuous(Transform::Sigmoid),
                Dist::Bernoulli { .. } => LatentKind::Discrete { classes: 2 },
                Dist::Categorical { logits } => LatentKind::Discrete {
                    classes: *tape.shape_of(logits).last().unwrap_or(&0),
                },
                Dist::Dirichlet { .. } | Dist::PointMass { .. } => {
                    return Err(Error::Unsupported(format!(
                        "Monte Carlo over a {} latent ({:?})",
                        rv.dist.name(),
                        name
                    )));
                }
            };
            if continuous_only {
                if let LatentKind::Discrete { .. } = kind {
                    return Err(Error::Unsupported(format!(
                        "{} cannot move the discrete latent {:?}",
                        self.alg.name(),
                        name
                    )));
                }
            }
            self.latent_kinds.insert(name.clone(), kind);
        }
        self.discovered = true;
        Ok(())
    }

    /// Back to a freshly initialized state: step 0, zeroed moments, reset
    /// cursors and positions.
    pub fn reset(&mut self, store: &ParamStore) -> Result<()> {
        self.step = 0;
        self.optimizer = Optimizer::new(self.opt_cfg);
        if !self.alg.is_monte_carlo() {
            self.optimizer.ensure_slots(store, &self.problem.trainable_params());
        }
        self.baseline = None;
        self.rng = rng::stream(self.seed, rng::STREAM_ALG);
        for pos in self.positions.values_mut() {
            *pos = Tensor::zeros(pos.shape());
        }
        for e in self.empiricals.values() {
            e.reset();
        }
        Ok(())
    }

    pub fn optimizer_slot_count(&self) -> usize {
        self.optimizer.slot_count()
    }

    pub fn optimizer_step_count(&self) -> usize {
        self.optimizer.step_count()
    }

    /// One algorithm step on a fresh tape: compute the loss or transition,
    /// apply parameter updates, report diagnostics. A non-finite loss or
    /// gradient skips the write and flags `divergent` instead of aborting.
    pub fn update(&mut self, store: &mut ParamStore, feeds: &Feeds) -> Result<Diagnostics> {
        let start = Instant::now();
        let mut metrics = match &self.alg {
            Algorithm::Klqp(cfg) => {
                let cfg = *cfg;
                crate::vi::klqp_update(self, store, feeds, &cfg)?
            }
            Algorithm::Map => crate::vi::map_update(self, store, feeds)?,
            Algorithm::Iwae(cfg) => {
                let cfg = *cfg;
                crate::vi::iwae_update(self, store, feeds, &cfg)?
            }
            Algorithm::Hmc(cfg) => {
                let cfg = *cfg;
                self.ensure_discovered(store, feeds)?;
                crate::mc::hmc_update(self, store, feeds, &cfg)?
            }
            Algorithm::Sgld(cfg) => {
                let cfg = *cfg;
                self.ensure_discovered(store, feeds)?;
                crate::mc::sgld_update(self, store, feeds, &cfg)?
            }
            Algorithm::Mh(cfg) => {
                let cfg = *cfg;
                self.ensure_discovered(store, feeds)?;
                crate::mc::mh_update(self, store, feeds, &cfg)?
            }
        };
        self.step += 1;
        metrics.entry("divergent".to_string()).or_insert(0.0);
        Ok(Diagnostics { step: self.step, metrics, wall: start.elapsed() })
    }

    /// Calls `update` in a loop, optionally printing progress to stderr at a
    /// stride.
    pub fn run(
        &mut self,
        store: &mut ParamStore,
        n_iter: usize,
        mut feeds_provider: impl FnMut(usize) -> Feeds,
        print_stride: Option<usize>,
    ) -> Result<Vec<Diagnostics>> {
        if n_iter == 0 {
            return Err(Error::Config("run needs n_iter >= 1".into()));
        }
        let mut all = Vec::with_capacity(n_iter);
        for i in 0..n_iter {
            let feeds = feeds_provider(i);
            let diag = self.update(store, &feeds)?;
            if let Some(stride) = print_stride {
                if stride > 0 && (i + 1) % stride == 0 {
                    let mut line = format!("[{}] step {}/{}", self.alg.name(), i + 1, n_iter);
                    for (k, v) in &diag.metrics {
                        line.push_str(&format!(" {}={:.6}", k, v));
                    }
                    eprintln!("{}", line);
                }
            }
            all.push(diag);
        }
        Ok(all)
    }

}

fn require_empirical(problem: &InferenceProblem, alg: &str) -> Result<()> {
    for (name, approx) in &problem.latents {
        if !matches!(approx, Approx::Empirical(_)) {
            return Err(Error::Config(format!(
                "{} over {:?} requires an Empirical approximation, got {}",
                alg,
                name,
                approx.family()
            )));
        }
    }
    if problem.latents.is_empty() {
        return Err(Error::Config(format!("{} needs at least one latent", alg)));
    }
    Ok(())
}
