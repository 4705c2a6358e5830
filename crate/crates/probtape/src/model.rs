//! Models are host-language functions that create named random variables on
//! a tape. Tracing runs the function once; each variable's value is, in
//! priority order, a bound data tensor, a bound approximation's current
//! sample/point, a caller-supplied free value, or a fresh ancestral draw.
//! Downstream computation consumes whichever value was substituted, so the
//! same model function serves generation and every inference algorithm.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;

use crate::dist::{beta_sample, Dist};
use crate::error::{Error, Result};
use crate::infer::Approx;
use crate::rng::{self, Rng};
use crate::tape::{Param, ParamStore, Tape, Value};
use crate::tensor::Tensor;

/// What a random variable's value is bound to.
#[derive(Clone)]
pub enum Source {
    /// Observed data.
    Data(Tensor),
    /// A value already on the current tape (gradients flow through it).
    Value(Value),
    /// An approximating family; its current sample/point is substituted as a
    /// constant.
    Approx(Approx),
}

/// Name-keyed substitution map used while tracing.
#[derive(Clone, Default)]
pub struct Bindings {
    map: BTreeMap<String, Source>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, name: &str, source: Source) -> Self {
        self.map.insert(name.to_string(), source);
        self
    }

    pub fn insert(&mut self, name: &str, source: Source) {
        self.map.insert(name.to_string(), source);
    }

    pub fn get(&self, name: &str) -> Option<&Source> {
        self.map.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }
}

/// How a traced variable's value was resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceKind {
    Sampled,
    Data,
    ApproxBound,
    Free,
}

/// One random variable recorded during a trace.
pub struct TraceRv {
    pub name: String,
    pub dist: Dist,
    pub value: Value,
    pub kind: SourceKind,
}

/// Ordered record of one model execution.
#[derive(Default)]
pub struct Trace {
    pub rvs: Vec<TraceRv>,
}

impl Trace {
    pub fn get(&self, name: &str) -> Option<&TraceRv> {
        self.rvs.iter().find(|rv| rv.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.rvs.iter().map(|rv| rv.name.as_str())
    }
}

/// Feed tensors keyed by slot name.
pub type Feeds = BTreeMap<String, Tensor>;

/// A model is any function that declares random variables on a context.
pub type ModelFn = Arc<dyn Fn(&mut ModelCtx) -> Result<()> + Send + Sync>;

/// Execution context handed to model functions.
pub struct ModelCtx<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    bindings: &'a Bindings,
    feeds: &'a Feeds,
    rng: &'a mut Rng,
    trace: Trace,
    used: BTreeSet<String>,
    frozen: Option<&'a HashSet<Param>>,
}

impl<'a> ModelCtx<'a> {
    pub(crate) fn new(
        tape: &'a mut Tape,
        store: &'a ParamStore,
        bindings: &'a Bindings,
        feeds: &'a Feeds,
        rng: &'a mut Rng,
        frozen: Option<&'a HashSet<Param>>,
    ) -> Self {
        ModelCtx {
            tape,
            store,
            bindings,
            feeds,
            rng,
            trace: Trace::default(),
            used: BTreeSet::new(),
            frozen,
        }
    }

    /// Declares a named random variable and resolves its value.
    pub fn rv(&mut self, name: &str, dist: Dist) -> Result<Value> {
        if self.trace.get(name).is_some() {
            return Err(Error::DuplicateName(format!("random variable {:?}", name)));
        }
        let expected = dist.sample_shape(self.tape)?;
        let (value, kind) = match self.bindings.get(name) {
            Some(Source::Data(t)) => {
                if t.shape() != expected {
                    return Err(Error::ShapeMismatch(format!(
                        "data bound to {:?} has shape {:?}, expected {:?}",
                        name,
                        t.shape(),
                        expected
                    )));
                }
                (self.tape.constant(t.clone()), SourceKind::Data)
            }
            Some(Source::Value(v)) => {
                if self.tape.shape_of(*v) != expected {
                    return Err(Error::ShapeMismatch(format!(
                        "value bound to {:?} has shape {:?}, expected {:?}",
                        name,
                        self.tape.shape_of(*v),
                        expected
                    )));
                }
                (*v, SourceKind::Free)
            }
            Some(Source::Approx(a)) => {
                let t = a.current_tensor(self.tape, self.store, self.feeds, self.rng)?;
                if t.shape() != expected {
                    return Err(Error::ShapeMismatch(format!(
                        "approximation bound to {:?} yields shape {:?}, expected {:?}",
                        name,
                        t.shape(),
                        expected
                    )));
                }
                (self.tape.constant(t), SourceKind::ApproxBound)
            }
            None => {
                let t = dist.sample(self.tape, self.rng)?;
                (self.tape.constant(t), SourceKind::Sampled)
            }
        };
        self.used.insert(name.to_string());
        self.trace.rvs.push(TraceRv { name: name.to_string(), dist, value, kind });
        Ok(value)
    }

    /// Constant leaf holding the tensor fed for `name`.
    pub fn feed(&mut self, name: &str) -> Result<Value> {
        let t = self
            .feeds
            .get(name)
            .ok_or_else(|| Error::MissingFeed(name.to_string()))?;
        Ok(self.tape.constant(t.clone()))
    }

    /// Parameter leaf; detached when the parameter is frozen for this trace.
    pub fn param(&mut self, p: Param) -> Value {
        match self.frozen {
            Some(set) if set.contains(&p) => self.tape.param_detached(self.store, p),
            _ => self.tape.param(self.store, p),
        }
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Value> {
        let p = self
            .store
            .find(name)
            .ok_or_else(|| Error::UnknownBinding(format!("parameter {:?}", name)))?;
        Ok(self.param(p))
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn rng(&mut self) -> &mut Rng {
        self.rng
    }
}

/// Runs a model function, returning the ordered trace. Every binding must
/// name a variable the model actually creates; silent misbindings hide bugs.
pub fn trace(
    model: impl Fn(&mut ModelCtx) -> Result<()>,
    tape: &mut Tape,
    store: &ParamStore,
    bindings: &Bindings,
    feeds: &Feeds,
    rng: &mut Rng,
) -> Result<Trace> {
    trace_frozen(model, tape, store, bindings, feeds, rng, None)
}

pub(crate) fn trace_frozen(
    model: impl Fn(&mut ModelCtx) -> Result<()>,
    tape: &mut Tape,
    store: &ParamStore,
    bindings: &Bindings,
    feeds: &Feeds,
    rng: &mut Rng,
    frozen: Option<&HashSet<Param>>,
) -> Result<Trace> {
    let mut ctx = ModelCtx::new(tape, store, bindings, feeds, rng, frozen);
    model(&mut ctx)?;
    for name in bindings.names() {
        if !ctx.used.contains(name) {
            return Err(Error::UnknownBinding(name.clone()));
        }
    }
    Ok(ctx.trace)
}

/// Scaled log joint density of a trace:
/// `sum over variables of scale[name] * sum(log_prob(dist, value))`.
/// Scales default to 1 and must be positive; a scale of exactly 1 adds no
/// extra node, so unscaled joints match handwritten graphs bit for bit.
pub fn log_joint(
    tape: &mut Tape,
    trace: &Trace,
    scale: &BTreeMap<String, f64>,
) -> Result<Value> {
    for (name, &s) in scale {
        if !(s > 0.0) {
            return Err(Error::Config(format!("scale for {:?} must be positive, got {}", name, s)));
        }
        if trace.get(name).is_none() {
            return Err(Error::UnknownBinding(format!("scale key {:?}", name)));
        }
    }
    let mut total: Option<Value> = None;
    for rv in &trace.rvs {
        let lp = rv.dist.log_prob(tape, rv.value)?;
        let mut term = tape.sum_all(lp)?;
        let s = scale.get(&rv.name).copied().unwrap_or(1.0);
        if s != 1.0 {
            term = tape.mul_c(term, s)?;
        }
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    total.ok_or_else(|| Error::Config("log_joint of an empty trace".into()))
}

/// One Dirichlet-process draw via the stick-breaking stochastic while loop:
/// keep a running product of Beta(1, alpha) sticks, flip a Bernoulli with
/// that product as its probability, and continue while the flip is 1. The
/// returned tensor is a base-measure draw indexed by the stop count.
pub fn dirichlet_process_draw<F>(
    alpha: f64,
    mut base: F,
    rng: &mut Rng,
) -> Result<(Tensor, usize)>
where
    F: FnMut(&mut Rng) -> Tensor,
{
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("dirichlet process alpha must be > 0, got {}", alpha)));
    }
    const CAP: usize = 10_000;
    let mut sticks = 0usize;
    let mut running = beta_sample(1.0, alpha, rng);
    loop {
        let flip = rng::uniform(rng) < running;
        if !flip {
            break;
        }
        sticks += 1;
        if sticks >= CAP {
            return Err(Error::Divergence(format!(
                "dirichlet process stick cap ({}) exceeded; alpha = {}",
                CAP, alpha
            )));
        }
        running *= beta_sample(1.0, alpha, rng);
    }
    Ok((base(rng), sticks))
}

/// Memoizing Dirichlet-process sampler: the same stick index always returns
/// the same base-measure atom, as a mixture prior requires.
pub struct DirichletProcess<F> {
    alpha: f64,
    base: F,
    atoms: Vec<Option<Tensor>>,
}

impl<F: FnMut(&mut Rng) -> Tensor> DirichletProcess<F> {
    pub fn new(alpha: f64, base: F) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Config(format!("dirichlet process alpha must be > 0, got {}", alpha)));
        }
        Ok(DirichletProcess { alpha, base, atoms: Vec::new() })
    }

    pub fn draw(&mut self, rng: &mut Rng) -> Result<(Tensor, usize)> {
        let (fresh, k) = dirichlet_process_draw(self.alpha, &mut self.base, rng)?;
        if self.atoms.len() <= k {
            self.atoms.resize(k + 1, None);
        }
        let atom = self.atoms[k].get_or_insert(fresh);
        Ok((atom.clone(), k))
    }

    pub fn distinct_atoms(&self) -> usize {
        self.atoms.iter().filter(|a| a.is_some()).count()
    }
}
