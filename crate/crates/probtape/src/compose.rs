//! Recipes built from multiple inference programs. The stochastic
//! variational inference loop runs a local problem over minibatch latents,
//! a global problem over shared latents, and reinitializes the local
//! variational factors after every outer step, so local parameter storage
//! stays proportional to the minibatch size rather than the data set size.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::infer::{Diagnostics, InferenceState};
use crate::model::Feeds;
use crate::tape::{Param, ParamStore};
use crate::tensor::Tensor;

/// Alternates one update of each state per iteration; the shared utility
/// behind variational EM and full-batch composition oracles.
pub fn alternate_updates(
    a: &mut InferenceState,
    b: &mut InferenceState,
    store: &mut ParamStore,
    n_iter: usize,
    mut feeds_provider: impl FnMut(usize) -> Feeds,
) -> Result<Vec<(Diagnostics, Diagnostics)>> {
    if n_iter == 0 {
        return Err(Error::Config("alternate_updates needs n_iter >= 1".into()));
    }
    let mut out = Vec::with_capacity(n_iter);
    for i in 0..n_iter {
        let feeds = feeds_provider(i);
        let da = a.update(store, &feeds)?;
        let db = b.update(store, &feeds)?;
        out.push((da, db));
    }
    Ok(out)
}

/// Local/global stochastic variational inference over minibatches.
pub struct SviRecipe {
    pub global: InferenceState,
    pub local: InferenceState,
    /// Feed slot carrying the minibatch (leading axis = M).
    pub minibatch_slot: String,
    pub m: usize,
    /// Local updates per outer step.
    pub inner: usize,
    local_params: Vec<Param>,
    local_init: Vec<Tensor>,
}

impl SviRecipe {
    /// Captures the local factors' initial tensors; every outer step restores
    /// exactly these after the global update.
    pub fn new(
        global: InferenceState,
        local: InferenceState,
        minibatch_slot: &str,
        m: usize,
        inner: usize,
        store: &ParamStore,
    ) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("minibatch size must be >= 1".into()));
        }
        let local_params = local.problem.trainable_params();
        let local_init = local_params.iter().map(|&p| store.get(p).clone()).collect();
        Ok(SviRecipe {
            global,
            local,
            minibatch_slot: minibatch_slot.to_string(),
            m,
            inner,
            local_params,
            local_init,
        })
    }

    /// Total elements of local variational storage; proportional to M by
    /// construction, never to the data set size.
    pub fn local_storage_elements(&self, store: &ParamStore) -> usize {
        self.local_params.iter().map(|&p| store.get(p).len()).sum()
    }

    /// One outer step: `inner` local updates, one global update, then reset
    /// the local factors to their initial values.
    pub fn svi_step(&mut self, store: &mut ParamStore, feeds: &Feeds) -> Result<Diagnostics> {
        let batch = feeds
            .get(&self.minibatch_slot)
            .ok_or_else(|| Error::MissingFeed(self.minibatch_slot.clone()))?;
        let rows = batch.shape().first().copied().unwrap_or(0);
        if rows != self.m {
            return Err(Error::Config(format!(
                "minibatch has {} rows, recipe expects M = {}",
                rows, self.m
            )));
        }
        let mut metrics = BTreeMap::new();
        for _ in 0..self.inner {
            let d = self.local.update(store, feeds)?;
            if let Some(loss) = d.metric("loss") {
                metrics.insert("local_loss".to_string(), loss);
            }
        }
        let d = self.global.update(store, feeds)?;
        if let Some(loss) = d.metric("loss") {
            metrics.insert("global_loss".to_string(), loss);
        }
        metrics.insert("divergent".to_string(), if d.divergent() { 1.0 } else { 0.0 });
        for (p, init) in self.local_params.iter().zip(&self.local_init) {
            store.set(*p, init.clone())?;
        }
        Ok(Diagnostics { step: self.global.step, metrics, wall: d.wall })
    }

    /// Checks the post-step reset: local factors bit-equal to their captured
    /// initial tensors.
    pub fn locals_at_init(&self, store: &ParamStore) -> bool {
        self.local_params.iter().zip(&self.local_init).all(|(&p, init)| {
            store
                .get(p)
                .data()
                .iter()
                .zip(init.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }
}
