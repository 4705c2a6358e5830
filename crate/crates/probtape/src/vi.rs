//! Variational losses built on the current tape: the KL(q || p) objective
//! under four gradient estimators, MAP via PointMass substitution, and the
//! importance-weighted bound.
//!
//! Scale factors apply to both the model terms and the q terms of each
//! latent, so a minibatch-scaled local factor optimizes toward the same
//! posterior as the full-data objective.

use std::collections::BTreeMap;

use crate::dist::{kl_normal_normal, Dist};
use crate::error::{Error, Result};
use crate::infer::{
    Approx, DataSource, Diagnostics, Estimator, InferenceProblem, InferenceState, IwaeConfig,
    KlqpConfig,
};
use crate::model::{self, Bindings, Feeds, ModelCtx, Source, Trace};
use crate::rng::Rng;
use crate::tape::{Param, ParamStore, Tape, Value};

/// Loss value plus the scalar report that goes into diagnostics.
pub struct ElboParts {
    /// Node to differentiate; minimizing it maximizes the bound.
    pub loss: Value,
    /// Negative-ELBO estimate to report (the surrogate's own value is not
    /// meaningful under the score estimator).
    pub report_loss: f64,
    /// Mean of (log p - log q) across samples; feeds the score baseline.
    pub f_mean: Option<f64>,
    /// Set when the analytic entropy term dominates the Monte Carlo part,
    /// the regime where that estimator is known to get unstable.
    pub entropy_warning: bool,
}

fn build_qdists(
    tape: &mut Tape,
    store: &ParamStore,
    feeds: &Feeds,
    rng: &mut Rng,
    problem: &InferenceProblem,
) -> Result<BTreeMap<String, Dist>> {
    let empty = Bindings::new();
    let mut ctx = ModelCtx::new(tape, store, &empty, feeds, rng, None);
    let mut out = BTreeMap::new();
    for (name, approx) in &problem.latents {
        out.insert(name.clone(), approx.build_dist(&mut ctx)?);
    }
    Ok(out)
}

fn run_model(
    problem: &InferenceProblem,
    tape: &mut Tape,
    store: &ParamStore,
    bindings: &Bindings,
    feeds: &Feeds,
    rng: &mut Rng,
) -> Result<Trace> {
    let model = problem.model.clone();
    model::trace(move |ctx| model(ctx), tape, store, bindings, feeds, rng)
}

fn scale_of(problem: &InferenceProblem, name: &str) -> f64 {
    problem.scale.get(name).copied().unwrap_or(1.0)
}

/// scale * sum(log q(z)) for one latent.
fn scaled_lq(
    tape: &mut Tape,
    problem: &InferenceProblem,
    name: &str,
    q: &Dist,
    z: Value,
) -> Result<Value> {
    let lq = q.log_prob(tape, z)?;
    let mut total = tape.sum_all(lq)?;
    let s = scale_of(problem, name);
    if s != 1.0 {
        total = tape.mul_c(total, s)?;
    }
    Ok(total)
}

/// Scaled log joint over the trace, skipping the listed latents' own terms.
fn log_joint_excluding(
    tape: &mut Tape,
    trace: &Trace,
    problem: &InferenceProblem,
    skip_latents: bool,
) -> Result<Value> {
    let mut total: Option<Value> = None;
    for rv in &trace.rvs {
        if skip_latents && problem.latents.contains_key(&rv.name) {
            continue;
        }
        let lp = rv.dist.log_prob(tape, rv.value)?;
        let mut term = tape.sum_all(lp)?;
        let s = scale_of(problem, &rv.name);
        if s != 1.0 {
            term = tape.mul_c(term, s)?;
        }
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    total.ok_or_else(|| Error::Config("model produced no random variables".into()))
}

fn add_chain(tape: &mut Tape, terms: &[Value]) -> Result<Value> {
    let mut acc = *terms
        .first()
        .ok_or_else(|| Error::Config("empty sum".into()))?;
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Negative-ELBO estimate under the configured estimator, built on `tape`.
pub fn elbo_loss(
    tape: &mut Tape,
    problem: &InferenceProblem,
    store: &ParamStore,
    feeds: &Feeds,
    cfg: &KlqpConfig,
    baseline: f64,
    rng: &mut Rng,
) -> Result<ElboParts> {
    let qdists = build_qdists(tape, store, feeds, rng, problem)?;
    match cfg.estimator {
        Estimator::Reparam => {
            let mut elbos = Vec::with_capacity(cfg.n_samples);
            for _ in 0..cfg.n_samples {
                let mut bindings = problem.data_bindings(feeds)?;
                let mut zs = Vec::new();
                for (name, q) in &qdists {
                    let z = q.rsample(tape, rng)?;
                    bindings.insert(name, Source::Value(z));
                    zs.push((name.clone(), z));
                }
                let tr = run_model(problem, tape, store, &bindings, feeds, rng)?;
                let lp = model::log_joint(tape, &tr, &problem.scale)?;
                let mut lq_terms = Vec::new();
                for (name, z) in &zs {
                    lq_terms.push(scaled_lq(tape, problem, name, &qdists[name], *z)?);
                }
                elbos.push(if lq_terms.is_empty() {
                    lp
                } else {
                    let lq = add_chain(tape, &lq_terms)?;
                    tape.sub(lp, lq)?
                });
            }
            let acc = add_chain(tape, &elbos)?;
            let mean = tape.mul_c(acc, 1.0 / cfg.n_samples as f64)?;
            let loss = tape.neg(mean)?;
            let report = tape.value(loss).item()?;
            Ok(ElboParts { loss, report_loss: report, f_mean: None, entropy_warning: false })
        }
        Estimator::ReparamAnalyticKl => {
            let mut lls = Vec::with_capacity(cfg.n_samples);
            let mut kl_total: Option<Value> = None;
            for s in 0..cfg.n_samples {
                let mut bindings = problem.data_bindings(feeds)?;
                for (name, q) in &qdists {
                    let z = q.rsample(tape, rng)?;
                    bindings.insert(name, Source::Value(z));
                }
                let tr = run_model(problem, tape, store, &bindings, feeds, rng)?;
                lls.push(log_joint_excluding(tape, &tr, problem, true)?);
                if s == 0 {
                    for (name, q) in &qdists {
                        let prior = tr
                            .get(name)
                            .map(|rv| rv.dist)
                            .ok_or_else(|| Error::UnknownBinding(name.clone()))?;
                        if !matches!(prior, Dist::Normal { .. }) {
                            return Err(Error::Unsupported(format!(
                                "analytic KL needs a Normal prior for {:?}, model has {}",
                                name,
                                prior.name()
                            )));
                        }
                        let kl = kl_normal_normal(tape, q, &prior)?;
                        let mut kl = tape.sum_all(kl)?;
                        let sc = scale_of(problem, name);
                        if sc != 1.0 {
                            kl = tape.mul_c(kl, sc)?;
                        }
                        kl_total = Some(match kl_total {
                            None => kl,
                            Some(acc) => tape.add(acc, kl)?,
                        });
                    }
                }
            }
            let acc = add_chain(tape, &lls)?;
            let mean = tape.mul_c(acc, 1.0 / cfg.n_samples as f64)?;
            let neg_ll = tape.neg(mean)?;
            let loss = match kl_total {
                Some(kl) => tape.add(neg_ll, kl)?,
                None => neg_ll,
            };
            let report = tape.value(loss).item()?;
            Ok(ElboParts { loss, report_loss: report, f_mean: None, entropy_warning: false })
        }
        Estimator::ReparamAnalyticEntropy => {
            let mut lps = Vec::with_capacity(cfg.n_samples);
            for _ in 0..cfg.n_samples {
                let mut bindings = problem.data_bindings(feeds)?;
                for (name, q) in &qdists {
                    let z = q.rsample(tape, rng)?;
                    bindings.insert(name, Source::Value(z));
                }
                let tr = run_model(problem, tape, store, &bindings, feeds, rng)?;
                lps.push(model::log_joint(tape, &tr, &problem.scale)?);
            }
            let mut h_total: Option<Value> = None;
            for (name, q) in &qdists {
                let h = q.entropy(tape)?;
                let mut h = tape.sum_all(h)?;
                let sc = scale_of(problem, name);
                if sc != 1.0 {
                    h = tape.mul_c(h, sc)?;
                }
                h_total = Some(match h_total {
                    None => h,
                    Some(acc) => tape.add(acc, h)?,
                });
            }
            let acc = add_chain(tape, &lps)?;
            let mean = tape.mul_c(acc, 1.0 / cfg.n_samples as f64)?;
            let neg_lp = tape.neg(mean)?;
            let (loss, warn) = match h_total {
                Some(h) => {
                    let l = tape.sub(neg_lp, h)?;
                    let w = tape.value(h).item()?.abs() > tape.value(mean).item()?.abs();
                    (l, w)
                }
                None => (neg_lp, false),
            };
            let report = tape.value(loss).item()?;
            Ok(ElboParts { loss, report_loss: report, f_mean: None, entropy_warning: warn })
        }
        Estimator::Score => {
            let mut surrogates = Vec::with_capacity(cfg.n_samples);
            let mut f_sum = 0.0;
            for _ in 0..cfg.n_samples {
                let mut bindings = problem.data_bindings(feeds)?;
                let mut zs = Vec::new();
                for (name, q) in &qdists {
                    let z = q.sample(tape, rng)?;
                    let zv = tape.constant(z);
                    bindings.insert(name, Source::Value(zv));
                    zs.push((name.clone(), zv));
                }
                let tr = run_model(problem, tape, store, &bindings, feeds, rng)?;
                let lp = model::log_joint(tape, &tr, &problem.scale)?;
                let mut lq_terms = Vec::new();
                for (name, z) in &zs {
                    lq_terms.push(scaled_lq(tape, problem, name, &qdists[name], *z)?);
                }
                if lq_terms.is_empty() {
                    f_sum += tape.value(lp).item()?;
                    surrogates.push(lp);
                    continue;
                }
                let lq = add_chain(tape, &lq_terms)?;
                let f = tape.value(lp).item()? - tape.value(lq).item()?;
                f_sum += f;
                // (f - b) log q(z) carries the score gradient for the
                // variational parameters; adding log p routes gradients to
                // any model parameters (z held constant).
                let weighted = tape.mul_c(lq, f - baseline)?;
                surrogates.push(tape.add(weighted, lp)?);
            }
            let acc = add_chain(tape, &surrogates)?;
            let mean = tape.mul_c(acc, 1.0 / cfg.n_samples as f64)?;
            let loss = tape.neg(mean)?;
            let f_mean = f_sum / cfg.n_samples as f64;
            Ok(ElboParts {
                loss,
                report_loss: -f_mean,
                f_mean: Some(f_mean),
                entropy_warning: false,
            })
        }
    }
}

/// Negative log joint with PointMass latents substituted; no latent is
/// sampled.
pub fn map_loss(
    tape: &mut Tape,
    problem: &InferenceProblem,
    store: &ParamStore,
    feeds: &Feeds,
) -> Result<Value> {
    let mut bindings = problem.data_bindings(feeds)?;
    for (name, approx) in &problem.latents {
        match approx {
            Approx::PointMass { param, transform } => {
                let p = tape.param(store, *param);
                let point = transform.apply_value(tape, p)?;
                bindings.insert(name, Source::Value(point));
            }
            other => {
                return Err(Error::Config(format!(
                    "MAP requires PointMass approximations; {:?} is {}",
                    name,
                    other.family()
                )));
            }
        }
    }
    let mut rng = crate::rng::stream(0, crate::rng::STREAM_MODEL);
    let tr = run_model(problem, tape, store, &bindings, feeds, &mut rng)?;
    // PointMass q terms are identically zero, so the loss is exactly the
    // negative log joint of the model terms.
    let lp = model::log_joint(tape, &tr, &problem.scale)?;
    tape.neg(lp)
}

/// Negative importance-weighted bound:
/// `-(logsumexp_k [log p(x, z_k) - log q(z_k)] - log K)`.
pub fn iwae_loss(
    tape: &mut Tape,
    problem: &InferenceProblem,
    store: &ParamStore,
    feeds: &Feeds,
    cfg: &IwaeConfig,
    rng: &mut Rng,
) -> Result<Value> {
    if cfg.k == 0 {
        return Err(Error::Config("IWAE needs K >= 1".into()));
    }
    let qdists = build_qdists(tape, store, feeds, rng, problem)?;
    let mut weights = Vec::with_capacity(cfg.k);
    for _ in 0..cfg.k {
        let mut bindings = problem.data_bindings(feeds)?;
        let mut zs = Vec::new();
        for (name, q) in &qdists {
            let z = q.rsample(tape, rng)?;
            bindings.insert(name, Source::Value(z));
            zs.push((name.clone(), z));
        }
        let tr = run_model(problem, tape, store, &bindings, feeds, rng)?;
        let lp = model::log_joint(tape, &tr, &problem.scale)?;
        let mut lq_terms = Vec::new();
        for (name, z) in &zs {
            lq_terms.push(scaled_lq(tape, problem, name, &qdists[name], *z)?);
        }
        let w = if lq_terms.is_empty() {
            lp
        } else {
            let lq = add_chain(tape, &lq_terms)?;
            tape.sub(lp, lq)?
        };
        weights.push(tape.reshape(w, &[1])?);
    }
    let stacked = tape.concat(&weights, 0)?;
    let lse = tape.logsumexp(stacked, 0)?;
    let bound = tape.sub_c(lse, (cfg.k as f64).ln())?;
    tape.neg(bound)
}

fn filtered_grads(
    problem: &InferenceProblem,
    grads: &crate::tape::Grads,
) -> BTreeMap<Param, crate::tensor::Tensor> {
    let mut out = BTreeMap::new();
    for p in problem.trainable_params() {
        if let Some(g) = grads.param(p) {
            out.insert(p, g.clone());
        }
    }
    out
}

fn grad_norm(grads: &BTreeMap<Param, crate::tensor::Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|&x| x * x)
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn klqp_update(
    state: &mut InferenceState,
    store: &mut ParamStore,
    feeds: &Feeds,
    cfg: &KlqpConfig,
) -> Result<BTreeMap<String, f64>> {
    let mut tape = Tape::new();
    let baseline = if cfg.baseline { state.baseline.unwrap_or(0.0) } else { 0.0 };
    let parts = elbo_loss(&mut tape, &state.problem, store, feeds, cfg, baseline, &mut state.rng)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("loss".to_string(), parts.report_loss);
    if parts.entropy_warning {
        metrics.insert("warn_entropy_dominant".to_string(), 1.0);
    }
    let loss_val = tape.value(parts.loss).item()?;
    if !loss_val.is_finite() {
        metrics.insert("divergent".to_string(), 1.0);
        return Ok(metrics);
    }
    let grads = tape.backward(parts.loss)?;
    let grads = filtered_grads(&state.problem, &grads);
    metrics.insert("grad_norm".to_string(), grad_norm(&grads));
    let applied = state.optimizer.apply(store, &grads)?;
    if !applied {
        metrics.insert("divergent".to_string(), 1.0);
    }
    if let Some(fm) = parts.f_mean {
        if cfg.baseline && fm.is_finite() {
            state.baseline = Some(match state.baseline {
                None => fm,
                Some(old) => 0.99 * old + 0.01 * fm,
            });
        }
    }
    Ok(metrics)
}

pub(crate) fn map_update(
    state: &mut InferenceState,
    store: &mut ParamStore,
    feeds: &Feeds,
) -> Result<BTreeMap<String, f64>> {
    let mut tape = Tape::new();
    let loss = map_loss(&mut tape, &state.problem, store, feeds)?;
    let mut metrics = BTreeMap::new();
    let loss_val = tape.value(loss).item()?;
    metrics.insert("loss".to_string(), loss_val);
    if !loss_val.is_finite() {
        metrics.insert("divergent".to_string(), 1.0);
        return Ok(metrics);
    }
    let grads = tape.backward(loss)?;
    let grads = filtered_grads(&state.problem, &grads);
    metrics.insert("grad_norm".to_string(), grad_norm(&grads));
    if !state.optimizer.apply(store, &grads)? {
        metrics.insert("divergent".to_string(), 1.0);
    }
    Ok(metrics)
}

pub(crate) fn iwae_update(
    state: &mut InferenceState,
    store: &mut ParamStore,
    feeds: &Feeds,
    cfg: &IwaeConfig,
) -> Result<BTreeMap<String, f64>> {
    let mut tape = Tape::new();
    let loss = iwae_loss(&mut tape, &state.problem, store, feeds, cfg, &mut state.rng)?;
    let mut metrics = BTreeMap::new();
    let loss_val = tape.value(loss).item()?;
    metrics.insert("loss".to_string(), loss_val);
    if !loss_val.is_finite() {
        metrics.insert("divergent".to_string(), 1.0);
        return Ok(metrics);
    }
    let grads = tape.backward(loss)?;
    let grads = filtered_grads(&state.problem, &grads);
    metrics.insert("grad_norm".to_string(), grad_norm(&grads));
    if !state.optimizer.apply(store, &grads)? {
        metrics.insert("divergent".to_string(), 1.0);
    }
    Ok(metrics)
}

/// Checks that two composed problems are cross-bound: each side's latents
/// appear in the other side's data as the same approximation.
pub fn check_cross_binding(a: &InferenceState, b: &InferenceState) -> Result<()> {
    for (direction, (own, other)) in
        [("E-step", (a, b)), ("M-step", (b, a))].into_iter()
    {
        for (name, approx) in &other.problem.latents {
            match own.problem.data.get(name) {
                Some(DataSource::Approx(bound)) => {
                    if bound.params() != approx.params() {
                        return Err(Error::Config(format!(
                            "cross-binding mismatch: {} binds {:?} to a different approximation",
                            direction, name
                        )));
                    }
                }
                _ => {
                    return Err(Error::Config(format!(
                        "cross-binding missing: {} must bind {:?} to the other problem's approximation",
                        direction, name
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Alternating expectation/maximization by composed inference: `e_inner`
/// E-updates then `m_inner` M-updates per outer iteration.
pub fn variational_em(
    e_state: &mut InferenceState,
    m_state: &mut InferenceState,
    store: &mut ParamStore,
    outer: usize,
    e_inner: usize,
    m_inner: usize,
    feeds: &Feeds,
) -> Result<Vec<(Diagnostics, Diagnostics)>> {
    check_cross_binding(e_state, m_state)?;
    let mut out = Vec::with_capacity(outer);
    for _ in 0..outer {
        let mut last_e = None;
        for _ in 0..e_inner {
            last_e = Some(e_state.update(store, feeds)?);
        }
        let mut last_m = None;
        for _ in 0..m_inner {
            last_m = Some(m_state.update(store, feeds)?);
        }
        let e = last_e.ok_or_else(|| Error::Config("variational EM needs e_inner >= 1".into()))?;
        let m = last_m.ok_or_else(|| Error::Config("variational EM needs m_inner >= 1".into()))?;
        for (tag, d) in [("E", &e), ("M", &m)] {
            if let Some(loss) = d.metric("loss") {
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!("{}-step loss is not finite", tag)));
                }
            }
        }
        out.push((e, m));
    }
    Ok(out)
}
