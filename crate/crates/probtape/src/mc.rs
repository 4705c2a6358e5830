//! Monte Carlo inference: each update moves one sample and writes it into
//! the Empirical store at the cursor.
//!
//! Constrained supports are moved on an unconstrained scale (unit-interval
//! latents through a logistic transform) with the log-Jacobian added to the
//! log joint; the store always receives constrained values.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::infer::{HmcConfig, InferenceState, LatentKind, MhConfig, SgldConfig, Transform};
use crate::model::{self, Feeds, Source, SourceKind};
use crate::rng;
use crate::tape::{ParamStore, Tape};
use crate::tensor::Tensor;

type Positions = BTreeMap<String, Tensor>;

/// Standard leapfrog over a log-density gradient: half-step momentum, `l`
/// full position/momentum steps, final half-step. Volume-preserving and
/// time-reversible.
pub fn leapfrog<F>(
    mut position: Positions,
    mut momentum: Positions,
    eps: f64,
    l: usize,
    mut grad_log_density: F,
) -> Result<(Positions, Positions)>
where
    F: FnMut(&Positions) -> Result<Positions>,
{
    if l == 0 {
        return Err(Error::Config("leapfrog needs L >= 1".into()));
    }
    let g = grad_log_density(&position)?;
    axpy(&mut momentum, eps / 2.0, &g);
    for step in 0..l {
        axpy(&mut position, eps, &momentum);
        let g = grad_log_density(&position)?;
        let coef = if step + 1 == l { eps / 2.0 } else { eps };
        axpy(&mut momentum, coef, &g);
    }
    Ok((position, momentum))
}

fn axpy(dst: &mut Positions, a: f64, src: &Positions) {
    for (name, d) in dst.iter_mut() {
        let s = &src[name];
        for (x, &y) in d.data_mut().iter_mut().zip(s.data()) {
            *x += a * y;
        }
    }
}

/// Scaled log joint at explicit unconstrained positions, plus (optionally)
/// its gradient with respect to them. Builds one fresh tape.
pub(crate) fn log_joint_at(
    state: &InferenceState,
    store: &ParamStore,
    feeds: &Feeds,
    positions: &Positions,
    need_grad: bool,
) -> Result<(f64, Option<Positions>)> {
    let mut tape = Tape::new();
    let mut bindings = state.problem.data_bindings(feeds)?;
    let mut leaves = BTreeMap::new();
    let mut jac_terms = Vec::new();
    for (name, pos) in positions {
        let u = tape.constant(pos.clone());
        leaves.insert(name.clone(), u);
        let transform = match &state.latent_kinds[name] {
            LatentKind::Continuous(t) => *t,
            LatentKind::Discrete { .. } => Transform::Identity,
        };
        let constrained = transform.apply_value(&mut tape, u)?;
        if let Some(j) = transform.log_jacobian(&mut tape, u)? {
            jac_terms.push(j);
        }
        bindings.insert(name, Source::Value(constrained));
    }
    // a fully bound trace consumes no randomness; reject models that would
    let mut throwaway = rng::stream(0, rng::STREAM_MODEL);
    let model = state.problem.model.clone();
    let tr = model::trace(
        move |ctx| model(ctx),
        &mut tape,
        store,
        &bindings,
        feeds,
        &mut throwaway,
    )?;
    if let Some(rv) = tr.rvs.iter().find(|rv| rv.kind == SourceKind::Sampled) {
        return Err(Error::Unsupported(format!(
            "Monte Carlo updates need every random variable bound; {:?} was sampled",
            rv.name
        )));
    }
    let mut lj = model::log_joint(&mut tape, &tr, &state.problem.scale)?;
    for j in jac_terms {
        lj = tape.add(lj, j)?;
    }
    let value = tape.value(lj).item()?;
    if !need_grad {
        return Ok((value, None));
    }
    let grads = tape.backward(lj)?;
    let mut out = BTreeMap::new();
    for (name, leaf) in leaves {
        let g = grads
            .wrt(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(positions[&name].shape()));
        if !g.all_finite() {
            return Err(Error::Divergence(format!(
                "non-finite gradient for latent {:?}",
                name
            )));
        }
        out.insert(name, g);
    }
    if !value.is_finite() {
        return Err(Error::Divergence("non-finite log joint".into()));
    }
    Ok((value, Some(out)))
}

fn constrained(state: &InferenceState, name: &str, pos: &Tensor) -> Tensor {
    match &state.latent_kinds[name] {
        LatentKind::Continuous(t) => t.apply_tensor(pos),
        LatentKind::Discrete { .. } => pos.clone(),
    }
}

fn write_positions(
    state: &mut InferenceState,
    store: &mut ParamStore,
) -> Result<()> {
    let rows: Vec<(String, Tensor)> = state
        .positions
        .iter()
        .map(|(name, pos)| (name.clone(), constrained(state, name, pos)))
        .collect();
    for (name, row) in rows {
        state.empiricals[&name].write(store, &row)?;
    }
    Ok(())
}

fn check_capacity(state: &InferenceState) -> Result<()> {
    for e in state.empiricals.values() {
        if e.cursor() >= e.capacity() {
            return Err(Error::StoreFull(e.capacity()));
        }
    }
    Ok(())
}

fn kinetic(momentum: &Positions) -> f64 {
    momentum
        .values()
        .flat_map(|t| t.data().iter())
        .map(|&p| 0.5 * p * p)
        .sum()
}

fn draw_momenta(state: &mut InferenceState) -> Positions {
    let mut out = BTreeMap::new();
    for (name, pos) in &state.positions {
        let mut t = Tensor::zeros(pos.shape());
        for x in t.data_mut() {
            *x = rng::standard_normal(&mut state.rng);
        }
        out.insert(name.clone(), t);
    }
    out
}

/// One HMC iteration: fresh momenta, leapfrog trajectory, Metropolis accept
/// on the Hamiltonian, store write.
pub(crate) fn hmc_update(
    state: &mut InferenceState,
    store: &mut ParamStore,
    feeds: &Feeds,
    cfg: &HmcConfig,
) -> Result<BTreeMap<String, f64>> {
    check_capacity(state)?;
    let mut metrics = BTreeMap::new();
    let momenta = draw_momenta(state);
    let u = rng::uniform(&mut state.rng);

    let result = (|| -> Result<(Positions, f64, f64)> {
        let (lj_cur, _) = log_joint_at(state, store, feeds, &state.positions, false)?;
        let h_old = -lj_cur + kinetic(&momenta);
        let mut last_lj = lj_cur;
        let (proposal, momentum_new) = leapfrog(
            state.positions.clone(),
            momenta.clone(),
            cfg.step_size,
            cfg.n_steps,
            |q| {
                let (lj, g) = log_joint_at(state, store, feeds, q, true)?;
                last_lj = lj;
                Ok(g.expect("gradient requested"))
            },
        )?;
        let h_new = -last_lj + kinetic(&momentum_new);
        Ok((proposal, h_old, h_new))
    })();

    match result {
        Ok((proposal, h_old, h_new)) => {
            let accept = u.ln() < h_old - h_new;
            if accept {
                state.positions = proposal;
            }
            metrics.insert("accept".to_string(), if accept { 1.0 } else { 0.0 });
            metrics.insert("delta_h".to_string(), h_new - h_old);
        }
        Err(Error::Divergence(_)) => {
            metrics.insert("accept".to_string(), 0.0);
            metrics.insert("divergent".to_string(), 1.0);
        }
        Err(e) => return Err(e),
    }
    write_positions(state, store)?;
    Ok(metrics)
}

/// One SGLD iteration: a half-gradient step on the scaled log joint plus
/// Gaussian noise of variance eps; always accepted.
pub(crate) fn sgld_update(
    state: &mut InferenceState,
    store: &mut ParamStore,
    feeds: &Feeds,
    cfg: &SgldConfig,
) -> Result<BTreeMap<String, f64>> {
    check_capacity(state)?;
    let mut metrics = BTreeMap::new();
    let eps = match cfg.decay {
        None => cfg.step_size,
        Some(d) => d.a * (d.b + (state.step + 1) as f64).powf(-d.gamma),
    };
    metrics.insert("step_size".to_string(), eps);
    let noise = draw_momenta(state); // standard normals, scaled below

    match log_joint_at(state, store, feeds, &state.positions, true) {
        Ok((lj, Some(grad))) => {
            let scale = eps.sqrt();
            for (name, pos) in state.positions.iter_mut() {
                let g = &grad[name];
                let n = &noise[name];
                for i in 0..pos.len() {
                    pos.data_mut()[i] += 0.5 * eps * g.data()[i] + scale * n.data()[i];
                }
            }
            metrics.insert("log_joint".to_string(), lj);
        }
        Ok(_) => unreachable!("gradient requested"),
        Err(Error::Divergence(_)) => {
            metrics.insert("divergent".to_string(), 1.0);
        }
        Err(e) => return Err(e),
    }
    write_positions(state, store)?;
    Ok(metrics)
}

/// One random-walk Metropolis–Hastings iteration. Continuous latents get an
/// isotropic Gaussian step on the unconstrained scale; discrete latents are
/// re-drawn uniformly. Both proposals are symmetric.
pub(crate) fn mh_update(
    state: &mut InferenceState,
    store: &mut ParamStore,
    feeds: &Feeds,
    cfg: &MhConfig,
) -> Result<BTreeMap<String, f64>> {
    check_capacity(state)?;
    let mut metrics = BTreeMap::new();
    let mut proposal = state.positions.clone();
    for (name, pos) in proposal.iter_mut() {
        match &state.latent_kinds[name] {
            LatentKind::Continuous(_) => {
                for x in pos.data_mut() {
                    *x += cfg.proposal_std * rng::standard_normal(&mut state.rng);
                }
            }
            LatentKind::Discrete { classes } => {
                for x in pos.data_mut() {
                    *x = (rng::uniform(&mut state.rng) * *classes as f64).floor();
                }
            }
        }
    }
    let u = rng::uniform(&mut state.rng);
    let current = log_joint_at(state, store, feeds, &state.positions, false);
    let proposed = log_joint_at(state, store, feeds, &proposal, false);
    match (current, proposed) {
        (Ok((lj_cur, _)), Ok((lj_prop, _))) => {
            let accept = u.ln() < lj_prop - lj_cur;
            if accept {
                state.positions = proposal;
            }
            metrics.insert("accept".to_string(), if accept { 1.0 } else { 0.0 });
            metrics.insert("log_joint".to_string(), if accept { lj_prop } else { lj_cur });
        }
        (Err(Error::Divergence(_)), _) | (_, Err(Error::Divergence(_))) => {
            metrics.insert("accept".to_string(), 0.0);
            metrics.insert("divergent".to_string(), 1.0);
        }
        (Err(e), _) | (_, Err(e)) => return Err(e),
    }
    write_positions(state, store)?;
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_pos(x: f64) -> Positions {
        let mut m = BTreeMap::new();
        m.insert("z".to_string(), Tensor::scalar(x));
        m
    }

    // standard Normal target: grad log pi(q) = -q
    fn neg_q(q: &Positions) -> Result<Positions> {
        Ok(q.iter().map(|(k, v)| (k.clone(), v.map(|x| -x))).collect())
    }

    fn hamiltonian(q: &Positions, p: &Positions) -> f64 {
        let u: f64 = q.values().flat_map(|t| t.data()).map(|&x| 0.5 * x * x).sum();
        u + kinetic(p)
    }

    #[test]
    fn leapfrog_requires_at_least_one_step() {
        let r = leapfrog(scalar_pos(0.1), scalar_pos(0.2), 0.1, 0, neg_q);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn leapfrog_is_time_reversible() {
        let q0 = scalar_pos(0.37);
        let p0 = scalar_pos(-1.21);
        let (q1, p1) = leapfrog(q0.clone(), p0.clone(), 0.1, 25, neg_q).unwrap();
        // negate momentum, integrate again, negate momentum: back to start
        let p1_neg: Positions = p1.iter().map(|(k, v)| (k.clone(), v.map(|x| -x))).collect();
        let (q2, p2) = leapfrog(q1, p1_neg, 0.1, 25, neg_q).unwrap();
        let dq = (q2["z"].item().unwrap() - q0["z"].item().unwrap()).abs();
        let dp = (-p2["z"].item().unwrap() - p0["z"].item().unwrap()).abs();
        assert!(dq <= 1e-10 && dp <= 1e-10, "dq {} dp {}", dq, dp);
    }

    #[test]
    fn hamiltonian_drift_scales_quadratically_with_step_size() {
        // |dH| at eps vs eps/2 should shrink by about 4
        let q0 = scalar_pos(1.0);
        let p0 = scalar_pos(0.5);
        let h0 = hamiltonian(&q0, &p0);
        let drift = |eps: f64| {
            // fixed integration time: L scales inversely with eps
            let l = (2.0 / eps).round() as usize;
            let (q1, p1) = leapfrog(q0.clone(), p0.clone(), eps, l, neg_q).unwrap();
            (hamiltonian(&q1, &p1) - h0).abs()
        };
        let d1 = drift(0.2);
        let d2 = drift(0.1);
        let ratio = d1 / d2;
        assert!(
            (ratio - 4.0).abs() <= 0.8,
            "expected ratio near 4, got {} ({} / {})",
            ratio,
            d1,
            d2
        );
    }

    #[test]
    fn leapfrog_preserves_phase_space_volume() {
        // Jacobian of one step on the quadratic target by central finite
        // differences; the determinant must be 1
        let eps = 0.3;
        let step = |q: f64, p: f64| {
            let (q1, p1) = leapfrog(scalar_pos(q), scalar_pos(p), eps, 1, neg_q).unwrap();
            (q1["z"].item().unwrap(), p1["z"].item().unwrap())
        };
        let h = 1e-6;
        let (q0, p0) = (0.4, -0.7);
        let (qp, pp) = step(q0 + h, p0);
        let (qm, pm) = step(q0 - h, p0);
        let dq_dq = (qp - qm) / (2.0 * h);
        let dp_dq = (pp - pm) / (2.0 * h);
        let (qp2, pp2) = step(q0, p0 + h);
        let (qm2, pm2) = step(q0, p0 - h);
        let dq_dp = (qp2 - qm2) / (2.0 * h);
        let dp_dp = (pp2 - pm2) / (2.0 * h);
        let det = dq_dq * dp_dp - dq_dp * dp_dq;
        assert!((det - 1.0).abs() <= 1e-8, "det {}", det);
    }
}
