//! Adversarial training as inference: a generator model produces data from
//! noise, a discriminator maps data to a real/fake logit, and one update
//! alternates a discriminator step with a generator step.
//!
//! The parameter partition is strict. During the discriminator step the
//! generator's parameters enter the tape detached, and vice versa, so each
//! side's gradient map contains only its own parameters.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::infer::{Diagnostics, FeedSlot};
use crate::model::{Bindings, Feeds, ModelCtx};
use crate::opt::{Optimizer, OptimizerConfig};
use crate::rng::{self, Rng};
use crate::tape::{Param, ParamStore, Tape, Value};

/// Builds the generated batch from fresh noise; owns the noise RV.
pub type GeneratorFn = Arc<dyn Fn(&mut ModelCtx) -> Result<Value> + Send + Sync>;
/// Maps a data value to a real/fake logit of shape `[batch]` or `[batch, 1]`.
pub type DiscriminatorFn = Arc<dyn Fn(&mut ModelCtx, Value) -> Result<Value> + Send + Sync>;

#[derive(Clone)]
pub struct GanProblem {
    pub generator: GeneratorFn,
    pub discriminator: DiscriminatorFn,
    pub gen_params: Vec<Param>,
    pub disc_params: Vec<Param>,
    pub data_slot: FeedSlot,
}

pub struct GanState {
    pub problem: GanProblem,
    d_opt: Optimizer,
    g_opt: Optimizer,
    rng: Rng,
    pub step: usize,
    /// Discriminator steps per generator step.
    pub disc_steps: usize,
}

impl GanState {
    pub fn initialize(
        problem: GanProblem,
        d_opt: OptimizerConfig,
        g_opt: OptimizerConfig,
        store: &ParamStore,
        seed: u64,
    ) -> Result<Self> {
        let gen: HashSet<Param> = problem.gen_params.iter().copied().collect();
        for p in &problem.disc_params {
            if gen.contains(p) {
                return Err(Error::Config(format!(
                    "parameter {:?} is owned by both generator and discriminator",
                    store.name(*p)
                )));
            }
        }
        if problem.gen_params.is_empty() || problem.disc_params.is_empty() {
            return Err(Error::Config("both networks need at least one parameter".into()));
        }
        let mut d = Optimizer::new(d_opt);
        d.ensure_slots(store, &problem.disc_params);
        let mut g = Optimizer::new(g_opt);
        g.ensure_slots(store, &problem.gen_params);
        Ok(GanState {
            problem,
            d_opt: d,
            g_opt: g,
            rng: rng::stream(seed, rng::STREAM_ALG),
            step: 0,
            disc_steps: 1,
        })
    }

    fn real_batch<'a>(&self, feeds: &'a Feeds) -> Result<&'a crate::tensor::Tensor> {
        let slot = &self.problem.data_slot;
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
        Ok(t)
    }

    /// One adversarial update: discriminator step(s) minimizing binary
    /// cross-entropy on (real -> 1, fake -> 0) with the generator frozen,
    /// then a generator step minimizing the non-saturating -log D(fake) with
    /// the discriminator frozen.
    pub fn update(&mut self, store: &mut ParamStore, feeds: &Feeds) -> Result<Diagnostics> {
        let start = Instant::now();
        let real = self.real_batch(feeds)?.clone();
        let mut metrics = BTreeMap::new();

        let gen_frozen: HashSet<Param> = self.problem.gen_params.iter().copied().collect();
        let disc_frozen: HashSet<Param> = self.problem.disc_params.iter().copied().collect();
        let bindings = Bindings::new();

        for _ in 0..self.disc_steps {
            let mut tape = Tape::new();
            let mut ctx =
                ModelCtx::new(&mut tape, store, &bindings, feeds, &mut self.rng, Some(&gen_frozen));
            let fake = (self.problem.generator)(&mut ctx)?;
            let logit_fake = (self.problem.discriminator)(&mut ctx, fake)?;
            let real_v = ctx.tape.constant(real.clone());
            let logit_real = (self.problem.discriminator)(&mut ctx, real_v)?;
            // mean BCE over the 2N (real + fake) examples:
            // 0.5 (mean softplus(-l_real) + mean softplus(l_fake))
            let neg_real = ctx.tape.neg(logit_real)?;
            let sp_real = ctx.tape.softplus(neg_real)?;
            let real_term = ctx.tape.mean_all(sp_real)?;
            let sp_fake = ctx.tape.softplus(logit_fake)?;
            let fake_term = ctx.tape.mean_all(sp_fake)?;
            let sum = ctx.tape.add(real_term, fake_term)?;
            let d_loss = ctx.tape.mul_c(sum, 0.5)?;
            let d_val = tape.value(d_loss).item()?;
            metrics.insert("d_loss".to_string(), d_val);
            if !d_val.is_finite() {
                metrics.insert("divergent".to_string(), 1.0);
                continue;
            }
            let grads = tape.backward(d_loss)?;
            let mut filtered = BTreeMap::new();
            for &p in &self.problem.disc_params {
                if let Some(g) = grads.param(p) {
                    filtered.insert(p, g.clone());
                }
            }
            debug_assert!(self.problem.gen_params.iter().all(|p| grads.param(*p).is_none()));
            if !self.d_opt.apply(store, &filtered)? {
                metrics.insert("divergent".to_string(), 1.0);
            }
        }

        {
            let mut tape = Tape::new();
            let mut ctx = ModelCtx::new(
                &mut tape,
                store,
                &bindings,
                feeds,
                &mut self.rng,
                Some(&disc_frozen),
            );
            let fake = (self.problem.generator)(&mut ctx)?;
            let logit_fake = (self.problem.discriminator)(&mut ctx, fake)?;
            // non-saturating generator loss: mean -log sigmoid(D(fake))
            let neg = ctx.tape.neg(logit_fake)?;
            let sp = ctx.tape.softplus(neg)?;
            let g_loss = ctx.tape.mean_all(sp)?;
            let g_val = tape.value(g_loss).item()?;
            metrics.insert("g_loss".to_string(), g_val);
            if g_val.is_finite() {
                let grads = tape.backward(g_loss)?;
                let mut filtered = BTreeMap::new();
                for &p in &self.problem.gen_params {
                    if let Some(g) = grads.param(p) {
                        filtered.insert(p, g.clone());
                    }
                }
                debug_assert!(self
                    .problem
                    .disc_params
                    .iter()
                    .all(|p| grads.param(*p).is_none()));
                if !self.g_opt.apply(store, &filtered)? {
                    metrics.insert("divergent".to_string(), 1.0);
                }
            } else {
                metrics.insert("divergent".to_string(), 1.0);
            }
        }

        self.step += 1;
        metrics.entry("divergent".to_string()).or_insert(0.0);
        Ok(Diagnostics { step: self.step, metrics, wall: start.elapsed() })
    }

    pub fn run(
        &mut self,
        store: &mut ParamStore,
        n_iter: usize,
        mut feeds_provider: impl FnMut(usize) -> Feeds,
    ) -> Result<Vec<Diagnostics>> {
        if n_iter == 0 {
            return Err(Error::Config("run needs n_iter >= 1".into()));
        }
        (0..n_iter)
            .map(|i| {
                let feeds = feeds_provider(i);
                self.update(store, &feeds)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::Dist;
    use crate::tensor::Tensor;
    use approx::assert_relative_eq;

    // 1-D location-scale generator: x = mu + softplus(rho) * eps
    fn toy_problem(store: &mut ParamStore, batch: usize) -> GanProblem {
        let mu = store.create("gen.mu", Tensor::scalar(0.0)).unwrap();
        let rho = store.create("gen.rho", Tensor::scalar(0.55)).unwrap();
        let w = store.create("disc.w", Tensor::scalar(0.0)).unwrap();
        let b = store.create("disc.b", Tensor::scalar(0.0)).unwrap();
        let generator: GeneratorFn = Arc::new(move |ctx: &mut ModelCtx| {
            let m = ctx.param(mu);
            let r = ctx.param(rho);
            let zero = ctx.tape.constant(Tensor::zeros(&[batch]));
            let one = ctx.tape.constant(Tensor::ones(&[batch]));
            let eps = ctx.rv("eps", Dist::normal(zero, one))?;
            let s = ctx.tape.softplus(r)?;
            let scaled = ctx.tape.mul(s, eps)?;
            ctx.tape.add(m, scaled)
        });
        let discriminator: DiscriminatorFn = Arc::new(move |ctx: &mut ModelCtx, x: Value| {
            let wv = ctx.param(w);
            let bv = ctx.param(b);
            let wx = ctx.tape.mul(wv, x)?;
            ctx.tape.add(wx, bv)
        });
        GanProblem {
            generator,
            discriminator,
            gen_params: vec![mu, rho],
            disc_params: vec![w, b],
            data_slot: FeedSlot::new("x", &[batch]),
        }
    }

    #[test]
    fn indifferent_discriminator_gives_ln2_losses() {
        // with D's logit identically 0 both losses are exactly ln 2
        let mut store = ParamStore::new();
        let problem = toy_problem(&mut store, 16);
        // zero-step optimizers would still move parameters; read the losses
        // from a state built with lr = 0
        let mut state = GanState::initialize(
            problem,
            OptimizerConfig::sgd(0.0),
            OptimizerConfig::sgd(0.0),
            &store,
            1,
        )
        .unwrap();
        let mut feeds = Feeds::new();
        feeds.insert("x".to_string(), Tensor::full(&[16], 3.0));
        let diag = state.update(&mut store, &feeds).unwrap();
        assert_relative_eq!(diag.metric("d_loss").unwrap(), 2.0f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(diag.metric("g_loss").unwrap(), 2.0f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn overlapping_ownership_is_rejected() {
        let mut store = ParamStore::new();
        let mut problem = toy_problem(&mut store, 4);
        problem.disc_params.push(problem.gen_params[0]);
        let err = GanState::initialize(
            problem,
            OptimizerConfig::adam(0.01),
            OptimizerConfig::adam(0.01),
            &store,
            0,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn generator_step_leaves_discriminator_bits_untouched() {
        let mut store = ParamStore::new();
        let problem = toy_problem(&mut store, 8);
        let disc_params = problem.disc_params.clone();
        // discriminator optimizer frozen at lr 0 isolates the generator step
        let mut state = GanState::initialize(
            problem,
            OptimizerConfig::sgd(0.0),
            OptimizerConfig::adam(0.05),
            &store,
            2,
        )
        .unwrap();
        let mut feeds = Feeds::new();
        feeds.insert("x".to_string(), Tensor::full(&[8], 3.0));
        let before: Vec<u64> = disc_params
            .iter()
            .flat_map(|&p| store.get(p).data().iter().map(|x| x.to_bits()))
            .collect();
        state.update(&mut store, &feeds).unwrap();
        let after: Vec<u64> = disc_params
            .iter()
            .flat_map(|&p| store.get(p).data().iter().map(|x| x.to_bits()))
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn missing_feed_is_reported() {
        let mut store = ParamStore::new();
        let problem = toy_problem(&mut store, 4);
        let mut state = GanState::initialize(
            problem,
            OptimizerConfig::adam(0.01),
            OptimizerConfig::adam(0.01),
            &store,
            0,
        )
        .unwrap();
        assert!(matches!(
            state.update(&mut store, &Feeds::new()),
            Err(Error::MissingFeed(_))
        ));
    }
}
