//! Distribution objects whose parameters are tape values.
//!
//! `log_prob` builds a differentiable graph; `sample` draws plain tensors;
//! `rsample` (Normal only) draws through the pathwise trick so gradients
//! reach the distribution's parameters. Parameter validity (positive scale,
//! positive concentration) is checked at forward evaluation, not at
//! construction, because parameters are symbolic until then.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tape::{Param, ParamStore, Tape, Value};
use crate::tensor::{broadcast_shapes, Tensor};

const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_7;

/// Closed set of distribution families.
#[derive(Clone, Copy, Debug)]
pub enum Dist {
    /// Elementwise Gaussian; `sigma` strictly positive.
    Normal { mu: Value, sigma: Value },
    /// Bernoulli in logit parameterization: p = sigmoid(logits).
    Bernoulli { logits: Value },
    /// Beta on the open interval (0, 1).
    Beta { a: Value, b: Value },
    /// Categorical over the last axis of `logits` (K classes).
    Categorical { logits: Value },
    /// Dirichlet over the last axis of `alpha` (simplex support).
    Dirichlet { alpha: Value },
    /// All mass at `point`; log_prob is defined as 0 so that substituting a
    /// point into a joint density leaves only the model terms.
    PointMass { point: Value },
}

/// Support of a distribution's one-dimensional components.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Support {
    Real,
    UnitInterval,
    Simplex,
    Binary,
    Classes(usize),
    Point,
}

impl Dist {
    pub fn normal(mu: Value, sigma: Value) -> Self {
        Dist::Normal { mu, sigma }
    }

    pub fn bernoulli_logits(logits: Value) -> Self {
        Dist::Bernoulli { logits }
    }

    /// Bernoulli given probabilities; converted to logits internally.
    pub fn bernoulli_probs(tape: &mut Tape, probs: Value) -> Result<Self> {
        let one_minus = {
            let one = tape.scalar(1.0);
            tape.sub(one, probs)?
        };
        let lp = tape.log(probs)?;
        let lq = tape.log(one_minus)?;
        let logits = tape.sub(lp, lq)?;
        Ok(Dist::Bernoulli { logits })
    }

    pub fn beta(a: Value, b: Value) -> Self {
        Dist::Beta { a, b }
    }

    pub fn categorical_logits(logits: Value) -> Self {
        Dist::Categorical { logits }
    }

    pub fn dirichlet(alpha: Value) -> Self {
        Dist::Dirichlet { alpha }
    }

    pub fn point_mass(point: Value) -> Self {
        Dist::PointMass { point }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Dist::Normal { .. } => "Normal",
            Dist::Bernoulli { .. } => "Bernoulli",
            Dist::Beta { .. } => "Beta",
            Dist::Categorical { .. } => "Categorical",
            Dist::Dirichlet { .. } => "Dirichlet",
            Dist::PointMass { .. } => "PointMass",
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Dist::Bernoulli { .. } | Dist::Categorical { .. })
    }

    pub fn support(&self, tape: &Tape) -> Support {
        match self {
            Dist::Normal { .. } => Support::Real,
            Dist::Bernoulli { .. } => Support::Binary,
            Dist::Beta { .. } => Support::UnitInterval,
            Dist::Categorical { logits } => {
                let shape = tape.shape_of(*logits);
                Support::Classes(*shape.last().unwrap_or(&0))
            }
            Dist::Dirichlet { .. } => Support::Simplex,
            Dist::PointMass { .. } => Support::Point,
        }
    }

    /// Shape of one draw (batch shape plus event shape).
    pub fn sample_shape(&self, tape: &Tape) -> Result<Vec<usize>> {
        match self {
            Dist::Normal { mu, sigma } => {
                broadcast_shapes(tape.shape_of(*mu), tape.shape_of(*sigma))
            }
            Dist::Bernoulli { logits } => Ok(tape.shape_of(*logits).to_vec()),
            Dist::Beta { a, b } => broadcast_shapes(tape.shape_of(*a), tape.shape_of(*b)),
            Dist::Categorical { logits } => {
                let s = tape.shape_of(*logits);
                if s.is_empty() {
                    return Err(Error::ShapeMismatch("categorical logits must have a class axis".into()));
                }
                Ok(s[..s.len() - 1].to_vec())
            }
            Dist::Dirichlet { alpha } => Ok(tape.shape_of(*alpha).to_vec()),
            Dist::PointMass { point } => Ok(tape.shape_of(*point).to_vec()),
        }
    }

    fn validate_params(&self, tape: &Tape) -> Result<()> {
        match self {
            Dist::Normal { sigma, .. } => {
                if tape.value(*sigma).data().iter().any(|&s| !(s > 0.0)) {
                    return Err(Error::InvalidParam("Normal sigma must be > 0".into()));
                }
            }
            Dist::Beta { a, b } => {
                for (v, n) in [(a, "a"), (b, "b")] {
                    if tape.value(*v).data().iter().any(|&x| !(x > 0.0)) {
                        return Err(Error::InvalidParam(format!("Beta {} must be > 0", n)));
                    }
                }
            }
            Dist::Dirichlet { alpha } => {
                if tape.value(*alpha).data().iter().any(|&x| !(x > 0.0)) {
                    return Err(Error::InvalidParam("Dirichlet alpha must be > 0".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn validate_support(&self, tape: &Tape, value: &Tensor) -> Result<()> {
        match self {
            Dist::Bernoulli { .. } => {
                for &x in value.data() {
                    if (x - 0.0).abs() > 1e-9 && (x - 1.0).abs() > 1e-9 {
                        return Err(Error::OutOfSupport(format!("Bernoulli value {}", x)));
                    }
                }
            }
            Dist::Beta { .. } => {
                for &x in value.data() {
                    if !(x > 0.0 && x < 1.0) {
                        return Err(Error::OutOfSupport(format!("Beta value {}", x)));
                    }
                }
            }
            Dist::Categorical { logits } => {
                let k = *tape.shape_of(*logits).last().unwrap() as f64;
                for &x in value.data() {
                    if (x - x.round()).abs() > 1e-9 || x.round() < 0.0 || x.round() >= k {
                        return Err(Error::OutOfSupport(format!(
                            "Categorical index {} not in [0, {})",
                            x, k
                        )));
                    }
                }
            }
            Dist::Dirichlet { alpha } => {
                let k = *tape.shape_of(*alpha).last().unwrap();
                if k == 0 || value.len() % k != 0 {
                    return Err(Error::ShapeMismatch("Dirichlet value shape".into()));
                }
                for row in value.data().chunks(k) {
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&x| !(x > 0.0)) {
                        return Err(Error::OutOfSupport("Dirichlet value off the simplex".into()));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Log density/mass at `value`, with event axes reduced. Differentiable
    /// with respect to the distribution's parameters and (for continuous
    /// families) the value.
    pub fn log_prob(&self, tape: &mut Tape, value: Value) -> Result<Value> {
        self.validate_params(tape)?;
        self.validate_support(tape, &tape.value(value).clone())?;
        match self {
            Dist::Normal { mu, sigma } => {
                // -ln sigma - 0.5 ln 2pi - 0.5 ((x - mu)/sigma)^2
                let centered = tape.sub(value, *mu)?;
                let z = tape.div(centered, *sigma)?;
                let z2 = tape.powc(z, 2.0)?;
                let half_z2 = tape.mul_c(z2, 0.5)?;
                let ln_sigma = tape.log(*sigma)?;
                let s = tape.add(half_z2, ln_sigma)?;
                let s = tape.add_c(s, HALF_LN_TWO_PI)?;
                tape.neg(s)
            }
            Dist::Bernoulli { logits } => {
                // x * logits - softplus(logits)
                let xl = tape.mul(value, *logits)?;
                let sp = tape.softplus(*logits)?;
                tape.sub(xl, sp)
            }
            Dist::Beta { a, b } => {
                // (a-1) ln x + (b-1) ln(1-x) - ln B(a, b)
                let one = tape.scalar(1.0);
                let am1 = tape.sub(*a, one)?;
                let bm1 = tape.sub(*b, one)?;
                let ln_x = tape.log(value)?;
                let one_minus = tape.sub(one, value)?;
                let ln_1mx = tape.log(one_minus)?;
                let t1 = tape.mul(am1, ln_x)?;
                let t2 = tape.mul(bm1, ln_1mx)?;
                let kernel = tape.add(t1, t2)?;
                let lg_a = tape.lgamma(*a)?;
                let lg_b = tape.lgamma(*b)?;
                let apb = tape.add(*a, *b)?;
                let lg_ab = tape.lgamma(apb)?;
                let lnb = tape.add(lg_a, lg_b)?;
                let lnb = tape.sub(lnb, lg_ab)?;
                tape.sub(kernel, lnb)
            }
            Dist::Categorical { logits } => {
                let shape = tape.shape_of(*logits).to_vec();
                let last = shape.len() - 1;
                let batch = &shape[..last];
                if tape.value(value).shape() != batch {
                    return Err(Error::ShapeMismatch(format!(
                        "Categorical value shape {:?}, expected {:?}",
                        tape.value(value).shape(),
                        batch
                    )));
                }
                let one_hot = one_hot_tensor(&tape.value(value).clone(), shape[last])?;
                let oh = tape.constant(one_hot);
                let ls = self.log_softmax(tape)?;
                let picked = tape.mul(oh, ls)?;
                tape.sum(picked, &[last])
            }
            Dist::Dirichlet { alpha } => {
                let shape = tape.shape_of(*alpha).to_vec();
                let last = shape.len() - 1;
                // sum (alpha-1) ln x - [sum lnG(alpha) - lnG(sum alpha)]
                let one = tape.scalar(1.0);
                let am1 = tape.sub(*alpha, one)?;
                let ln_x = tape.log(value)?;
                let kern = tape.mul(am1, ln_x)?;
                let kern = tape.sum(kern, &[last])?;
                let lg = tape.lgamma(*alpha)?;
                let lg_sum = tape.sum(lg, &[last])?;
                let a_sum = tape.sum(*alpha, &[last])?;
                let lg_total = tape.lgamma(a_sum)?;
                let norm = tape.sub(lg_sum, lg_total)?;
                tape.sub(kern, norm)
            }
            Dist::PointMass { .. } => {
                let shape = tape.value(value).shape().to_vec();
                Ok(tape.constant(Tensor::zeros(&shape)))
            }
        }
    }

    fn log_softmax(&self, tape: &mut Tape) -> Result<Value> {
        let logits = match self {
            Dist::Categorical { logits } => *logits,
            _ => unreachable!(),
        };
        let shape = tape.shape_of(logits).to_vec();
        let last = shape.len() - 1;
        let lse = tape.logsumexp(logits, last)?;
        let mut keep = shape.clone();
        keep[last] = 1;
        let lse = tape.reshape(lse, &keep)?;
        let lse = tape.broadcast_to(lse, &shape)?;
        tape.sub(logits, lse)
    }

    /// Ancestral draw; deterministic given the RNG state.
    pub fn sample(&self, tape: &mut Tape, rng: &mut Rng) -> Result<Tensor> {
        self.validate_params(tape)?;
        let shape = self.sample_shape(tape)?;
        match self {
            Dist::Normal { mu, sigma } => {
                let mu = tape.value(*mu).clone();
                let sigma = tape.value(*sigma).clone();
                let mut out = Tensor::zeros(&shape);
                let eps: Vec<f64> = (0..out.len()).map(|_| rng::standard_normal(rng)).collect();
                let m = mu.zip_broadcast(&sigma, |m, _| m)?;
                let s = mu.zip_broadcast(&sigma, |_, s| s)?;
                for i in 0..out.len() {
                    out.data_mut()[i] = m.data()[i] + s.data()[i] * eps[i];
                }
                Ok(out)
            }
            Dist::Bernoulli { logits } => {
                let l = tape.value(*logits).clone();
                let mut out = Tensor::zeros(&shape);
                for i in 0..out.len() {
                    let p = crate::tape::sigmoid_scalar(l.data()[i]);
                    out.data_mut()[i] = if rng::uniform(rng) < p { 1.0 } else { 0.0 };
                }
                Ok(out)
            }
            Dist::Beta { a, b } => {
                let a = tape.value(*a).clone();
                let b = tape.value(*b).clone();
                let av = a.zip_broadcast(&b, |x, _| x)?;
                let bv = a.zip_broadcast(&b, |_, y| y)?;
                let mut out = Tensor::zeros(&shape);
                for i in 0..out.len() {
                    out.data_mut()[i] = beta_sample(av.data()[i], bv.data()[i], rng);
                }
                Ok(out)
            }
            Dist::Categorical { logits } => {
                let l = tape.value(*logits).clone();
                let k = *l.shape().last().unwrap();
                let mut out = Tensor::zeros(&shape);
                for (row, slot) in l.data().chunks(k).zip(out.data_mut().iter_mut()) {
                    *slot = categorical_sample(row, rng) as f64;
                }
                Ok(out)
            }
            Dist::Dirichlet { alpha } => {
                let a = tape.value(*alpha).clone();
                let k = *a.shape().last().unwrap();
                let mut out = Tensor::zeros(&shape);
                for (row, slot) in a.data().chunks(k).zip(out.data_mut().chunks_mut(k)) {
                    let mut gs: Vec<f64> = row.iter().map(|&ai| gamma_sample(ai, rng)).collect();
                    let total: f64 = gs.iter().sum();
                    for g in gs.iter_mut() {
                        *g /= total;
                    }
                    slot.copy_from_slice(&gs);
                }
                Ok(out)
            }
            Dist::PointMass { point } => Ok(tape.value(*point).clone()),
        }
    }

    /// Reparameterized draw: the returned value is differentiable with
    /// respect to the distribution's parameters. Only Normal supports this.
    pub fn rsample(&self, tape: &mut Tape, rng: &mut Rng) -> Result<Value> {
        match self {
            Dist::Normal { mu, sigma } => {
                self.validate_params(tape)?;
                let shape = self.sample_shape(tape)?;
                let eps: Vec<f64> = (0..shape.iter().product())
                    .map(|_| rng::standard_normal(rng))
                    .collect();
                let eps = tape.constant(Tensor::new(shape, eps)?);
                let scaled = tape.mul(*sigma, eps)?;
                tape.add(*mu, scaled)
            }
            d => Err(Error::NotReparameterizable(d.name())),
        }
    }

    /// Analytic differentiable entropy; defined for Normal and Categorical.
    pub fn entropy(&self, tape: &mut Tape) -> Result<Value> {
        self.validate_params(tape)?;
        match self {
            Dist::Normal { sigma, .. } => {
                // 0.5 ln(2 pi e sigma^2) = 0.5 ln(2 pi e) + ln sigma
                let ln_sigma = tape.log(*sigma)?;
                tape.add_c(ln_sigma, HALF_LN_TWO_PI + 0.5)
            }
            Dist::Categorical { logits } => {
                let shape = tape.shape_of(*logits).to_vec();
                let last = shape.len() - 1;
                let ls = self.log_softmax(tape)?;
                let p = tape.exp(ls)?;
                let pls = tape.mul(p, ls)?;
                let s = tape.sum(pls, &[last])?;
                tape.neg(s)
            }
            d => Err(Error::Unsupported(format!("entropy of {}", d.name()))),
        }
    }
}

/// Elementwise KL(q || p) for diagonal Normals:
/// `ln(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2`.
pub fn kl_normal_normal(tape: &mut Tape, q: &Dist, p: &Dist) -> Result<Value> {
    let (mq, sq) = match q {
        Dist::Normal { mu, sigma } => (*mu, *sigma),
        d => return Err(Error::Unsupported(format!("kl_normal_normal of {}", d.name()))),
    };
    let (mp, sp) = match p {
        Dist::Normal { mu, sigma } => (*mu, *sigma),
        d => return Err(Error::Unsupported(format!("kl_normal_normal of {}", d.name()))),
    };
    q.validate_params(tape)?;
    p.validate_params(tape)?;
    let ratio = tape.div(sp, sq)?;
    let ln_ratio = tape.log(ratio)?;
    let sq2 = tape.powc(sq, 2.0)?;
    let dm = tape.sub(mq, mp)?;
    let dm2 = tape.powc(dm, 2.0)?;
    let num = tape.add(sq2, dm2)?;
    let sp2 = tape.powc(sp, 2.0)?;
    let two_sp2 = tape.mul_c(sp2, 2.0)?;
    let frac = tape.div(num, two_sp2)?;
    let s = tape.add(ln_ratio, frac)?;
    tape.add_c(s, -0.5)
}

fn one_hot_tensor(value: &Tensor, k: usize) -> Result<Tensor> {
    let mut shape = value.shape().to_vec();
    shape.push(k);
    let mut out = Tensor::zeros(&shape);
    for (i, &x) in value.data().iter().enumerate() {
        out.data_mut()[i * k + x.round() as usize] = 1.0;
    }
    Ok(out)
}

// ---- samplers ----------------------------------------------------------

/// Marsaglia–Tsang gamma draw, with the alpha < 1 boost.
pub fn gamma_sample(alpha: f64, rng: &mut Rng) -> f64 {
    if alpha < 1.0 {
        let u = rng::uniform(rng).max(f64::MIN_POSITIVE);
        return gamma_sample(alpha + 1.0, rng) * u.powf(1.0 / alpha);
    }
    let d = alpha - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng::standard_normal(rng);
        let v = (1.0 + c * x).powi(3);
        if v <= 0.0 {
            continue;
        }
        let u = rng::uniform(rng);
        if u < 1.0 - 0.0331 * x.powi(4) {
            return d * v;
        }
        if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Beta draw via two gamma draws, clamped into the open interval.
pub fn beta_sample(a: f64, b: f64, rng: &mut Rng) -> f64 {
    let ga = gamma_sample(a, rng);
    let gb = gamma_sample(b, rng);
    (ga / (ga + gb)).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
}

/// Categorical draw by inverse CDF over a stable softmax of one logit row.
pub fn categorical_sample(logits: &[f64], rng: &mut Rng) -> usize {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng::uniform(rng) * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

// ---- empirical sample store ---------------------------------------------

/// Nonparametric approximation backed by a `[T, event]` parameter: row t
/// holds the t-th retained sample. The cursor is shared between clones so a
/// sampler and a cross-bound reader observe the same notion of "latest".
#[derive(Clone)]
pub struct Empirical {
    param: Param,
    capacity: usize,
    event_shape: Vec<usize>,
    cursor: Arc<AtomicUsize>,
}

impl Empirical {
    /// Creates a zero-initialized store of `capacity` rows.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        capacity: usize,
        event_shape: &[usize],
    ) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("empirical store capacity must be >= 1".into()));
        }
        let mut shape = vec![capacity];
        shape.extend_from_slice(event_shape);
        let param = store.create_with(name, Tensor::zeros(&shape), false)?;
        Ok(Empirical {
            param,
            capacity,
            event_shape: event_shape.to_vec(),
            cursor: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn param(&self) -> Param {
        self.param
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn event_shape(&self) -> &[usize] {
        &self.event_shape
    }

    pub fn cursor(&self) -> usize {
        self.cursor.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.cursor.store(0, Ordering::Relaxed);
    }

    /// Appends one sample at the cursor and advances it.
    pub fn write(&self, store: &mut ParamStore, row: &Tensor) -> Result<()> {
        let t = self.cursor();
        if t >= self.capacity {
            return Err(Error::StoreFull(self.capacity));
        }
        let mut all = store.get(self.param).clone();
        all.set_row(t, row)?;
        store.set(self.param, all)?;
        self.cursor.store(t + 1, Ordering::Relaxed);
        Ok(())
    }

    /// Latest written row; before any write this is the (zero) initial row.
    pub fn current(&self, store: &ParamStore) -> Result<Tensor> {
        let t = self.cursor();
        let row = if t == 0 { 0 } else { t - 1 };
        store.get(self.param).row(row)
    }

    /// Rows written so far, `[t, event]`.
    pub fn rows(&self, store: &ParamStore) -> Result<Tensor> {
        let t = self.cursor();
        let all = store.get(self.param);
        let stride: usize = self.event_shape.iter().product::<usize>().max(1);
        let mut shape = vec![t];
        shape.extend_from_slice(&self.event_shape);
        Tensor::new(shape, all.data()[..t * stride].to_vec())
    }

    /// Mean/sd/quantile summary over rows `[burn, t)`.
    pub fn summary(&self, store: &ParamStore, burn_frac: f64) -> Result<EmpiricalSummary> {
        rows_summary(&self.rows(store)?, burn_frac)
    }
}

#[derive(Clone, Debug)]
pub struct EmpiricalSummary {
    pub n: usize,
    pub mean: Tensor,
    pub sd: Tensor,
    pub q05: Tensor,
    pub q50: Tensor,
    pub q95: Tensor,
}

/// Summary over the leading (sample) axis, discarding a leading burn-in
/// fraction of rows.
pub fn rows_summary(rows: &Tensor, burn_frac: f64) -> Result<EmpiricalSummary> {
    if !(0.0..1.0).contains(&burn_frac) {
        return Err(Error::Config(format!("burn fraction {} outside [0, 1)", burn_frac)));
    }
    let total = rows.shape().first().copied().unwrap_or(0);
    let burn = (total as f64 * burn_frac).floor() as usize;
    let n = total - burn;
    if n == 0 {
        return Err(Error::Config("no samples to summarize".into()));
    }
    let event: Vec<usize> = rows.shape()[1..].to_vec();
    let width: usize = event.iter().product::<usize>().max(1);
    let mut mean = Tensor::zeros(&event);
    let mut sd = Tensor::zeros(&event);
    let mut q05 = Tensor::zeros(&event);
    let mut q50 = Tensor::zeros(&event);
    let mut q95 = Tensor::zeros(&event);
    let mut column = vec![0.0; n];
    for j in 0..width {
        for (i, slot) in column.iter_mut().enumerate() {
            *slot = rows.data()[(burn + i) * width + j];
        }
        let m: f64 = column.iter().sum::<f64>() / n as f64;
        let var: f64 = column.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        mean.data_mut()[j] = m;
        sd.data_mut()[j] = var.sqrt();
        column.sort_by(|a, b| a.partial_cmp(b).unwrap());
        q05.data_mut()[j] = quantile_sorted(&column, 0.05);
        q50.data_mut()[j] = quantile_sorted(&column, 0.50);
        q95.data_mut()[j] = quantile_sorted(&column, 0.95);
    }
    Ok(EmpiricalSummary { n, mean, sd, q05, q50, q95 })
}

/// Concatenates the written rows of several chains.
pub fn concat_chains(store: &ParamStore, chains: &[Empirical]) -> Result<Tensor> {
    if chains.is_empty() {
        return Err(Error::Config("no chains to merge".into()));
    }
    let event = chains[0].event_shape.clone();
    let mut data = Vec::new();
    let mut total = 0usize;
    for c in chains {
        if c.event_shape != event {
            return Err(Error::ShapeMismatch("chains have different event shapes".into()));
        }
        let rows = c.rows(store)?;
        total += rows.shape()[0];
        data.extend_from_slice(rows.data());
    }
    let mut shape = vec![total];
    shape.extend_from_slice(&event);
    Tensor::new(shape, data)
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_relative_eq;

    fn tape_scalar(x: f64) -> (Tape, Value) {
        let mut t = Tape::new();
        let v = t.scalar(x);
        (t, v)
    }

    #[test]
    fn normal_log_prob_at_mode() {
        let (mut t, zero) = tape_scalar(0.0);
        let one = t.scalar(1.0);
        let d = Dist::normal(zero, one);
        let lp = d.log_prob(&mut t, zero).unwrap();
        assert_relative_eq!(t.value(lp).item().unwrap(), -0.918_938_533_204_672_7, epsilon = 1e-9);
    }

    #[test]
    fn uniform_categorical_log_prob() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(&[5]));
        let d = Dist::categorical_logits(logits);
        for k in 0..5 {
            let v = t.constant(Tensor::scalar(k as f64));
            let lp = d.log_prob(&mut t, v).unwrap();
            assert_relative_eq!(t.value(lp).item().unwrap(), -(5.0f64.ln()), epsilon = 1e-12);
        }
        let bad = t.constant(Tensor::scalar(5.0));
        assert!(d.log_prob(&mut t, bad).is_err());
    }

    #[test]
    fn flat_beta_log_prob_is_zero() {
        let (mut t, a) = tape_scalar(1.0);
        let b = t.scalar(1.0);
        let d = Dist::beta(a, b);
        let x = t.scalar(0.73);
        let lp = d.log_prob(&mut t, x).unwrap();
        assert_relative_eq!(t.value(lp).item().unwrap(), 0.0, epsilon = 1e-12);
        let edge = t.scalar(1.0);
        assert!(d.log_prob(&mut t, edge).is_err());
    }

    #[test]
    fn bernoulli_rejects_non_binary() {
        let (mut t, l) = tape_scalar(0.3);
        let d = Dist::bernoulli_logits(l);
        let v = t.scalar(0.5);
        assert!(matches!(d.log_prob(&mut t, v), Err(Error::OutOfSupport(_))));
    }

    #[test]
    fn invalid_sigma_surfaces_at_forward_eval() {
        let (mut t, mu) = tape_scalar(0.0);
        let sigma = t.scalar(-1.0);
        let d = Dist::normal(mu, sigma);
        let mut rng = stream(0, 0);
        assert!(matches!(d.sample(&mut t, &mut rng), Err(Error::InvalidParam(_))));
    }

    #[test]
    fn normal_sampling_moments() {
        let (mut t, mu) = tape_scalar(0.0);
        let sigma = t.scalar(1.0);
        let d = Dist::normal(mu, sigma);
        let mut rng = stream(11, 0);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let x = d.sample(&mut t, &mut rng).unwrap().item().unwrap();
            sum += x;
            sum2 += x * x;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {}", mean);
        assert!((var - 1.0).abs() < 0.05, "var {}", var);
    }

    #[test]
    fn categorical_sampling_frequency() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(&[2]));
        let d = Dist::categorical_logits(logits);
        let mut rng = stream(5, 0);
        let n = 10_000;
        let mut zeros = 0;
        for _ in 0..n {
            if d.sample(&mut t, &mut rng).unwrap().item().unwrap() == 0.0 {
                zeros += 1;
            }
        }
        let freq = zeros as f64 / n as f64;
        assert!((0.47..=0.53).contains(&freq), "class-0 frequency {}", freq);
    }

    #[test]
    fn point_mass_sample_is_exact() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::from_vec(vec![1.5, -2.5]));
        let d = Dist::point_mass(c);
        let mut rng = stream(0, 0);
        let s = d.sample(&mut t, &mut rng).unwrap();
        assert_eq!(s.data(), &[1.5, -2.5]);
    }

    #[test]
    fn beta_sampling_mean_oracle() {
        // E[Beta(a, b)] = a / (a + b); 3-sigma Monte Carlo band
        let n = 20_000;
        for (i, (a, b)) in [(1.0, 1.0), (2.0, 5.0), (0.5, 0.5)].into_iter().enumerate() {
            let mut rng = stream(100 + i as u64, 0);
            let mut sum = 0.0;
            for _ in 0..n {
                sum += beta_sample(a, b, &mut rng);
            }
            let mean = sum / n as f64;
            let expect = a / (a + b);
            let sd = (a * b / ((a + b) * (a + b) * (a + b + 1.0))).sqrt();
            let band = 3.0 * sd / (n as f64).sqrt();
            assert!(
                (mean - expect).abs() < band,
                "Beta({},{}) mean {} vs {} (band {})",
                a,
                b,
                mean,
                expect,
                band
            );
        }
    }

    #[test]
    fn dirichlet_samples_lie_on_simplex() {
        let mut t = Tape::new();
        let alpha = t.constant(Tensor::new(vec![4, 3], vec![0.5; 12]).unwrap());
        let d = Dist::dirichlet(alpha);
        let mut rng = stream(3, 0);
        let s = d.sample(&mut t, &mut rng).unwrap();
        for row in s.data().chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn rsample_mu_gradient_is_one() {
        let mut store = ParamStore::new();
        let mu = store.create("mu", Tensor::scalar(0.3)).unwrap();
        let mut t = Tape::new();
        let muv = t.param(&store, mu);
        let sigma = t.scalar(1.0);
        let d = Dist::normal(muv, sigma);
        let mut rng = stream(8, 0);
        let z = d.rsample(&mut t, &mut rng).unwrap();
        let root = t.sum_all(z).unwrap();
        let g = t.backward(root).unwrap();
        assert_relative_eq!(g.param(mu).unwrap().item().unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn rsample_sigma_gradient_matches_finite_differences() {
        // f(sigma) = rsample(N(0, sigma))^2 with fixed eps: f = (sigma eps)^2,
        // df/dsigma = 2 sigma eps^2
        let builder = |tape: &mut Tape, store: &ParamStore| {
            let p = store.find("sigma").unwrap();
            let sigma = tape.param(store, p);
            let mu = tape.scalar(0.0);
            let d = Dist::normal(mu, sigma);
            let mut rng = stream(21, 0); // fixed eps across evaluations
            let z = d.rsample(tape, &mut rng)?;
            let z2 = tape.powc(z, 2.0)?;
            tape.sum_all(z2)
        };
        let mut store = ParamStore::new();
        let p = store.create("sigma", Tensor::scalar(1.3)).unwrap();
        let report = crate::tape::grad_check(builder, &mut store, &[p], 1e-5, 1e-6).unwrap();
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
        // also the closed form
        let mut t = Tape::new();
        let sv = t.param(&store, p);
        let mu = t.scalar(0.0);
        let d = Dist::normal(mu, sv);
        let mut rng = stream(21, 0);
        let z = d.rsample(&mut t, &mut rng).unwrap();
        let eps = t.value(z).item().unwrap() / 1.3;
        let z2 = t.powc(z, 2.0).unwrap();
        let root = t.sum_all(z2).unwrap();
        let g = t.backward(root).unwrap();
        assert_relative_eq!(
            g.param(p).unwrap().item().unwrap(),
            2.0 * 1.3 * eps * eps,
            epsilon = 1e-10
        );
    }

    #[test]
    fn rsample_rejects_discrete() {
        let (mut t, l) = tape_scalar(0.0);
        let d = Dist::bernoulli_logits(l);
        let mut rng = stream(0, 0);
        assert!(matches!(
            d.rsample(&mut t, &mut rng),
            Err(Error::NotReparameterizable("Bernoulli"))
        ));
    }

    #[test]
    fn kl_identical_normals_is_zero() {
        let (mut t, mu) = tape_scalar(0.0);
        let sigma = t.scalar(1.0);
        let q = Dist::normal(mu, sigma);
        let p = Dist::normal(mu, sigma);
        let kl = kl_normal_normal(&mut t, &q, &p).unwrap();
        assert_relative_eq!(t.value(kl).item().unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn kl_mean_shift() {
        let (mut t, one) = tape_scalar(1.0);
        let zero = t.scalar(0.0);
        let q = Dist::normal(one, one);
        let p = Dist::normal(zero, one);
        let kl = kl_normal_normal(&mut t, &q, &p).unwrap();
        assert_relative_eq!(t.value(kl).item().unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn kl_scale_matches_quadrature() {
        // KL(N(0,2) || N(0,1)) against Simpson quadrature of q ln(q/p)
        let (mut t, zero) = tape_scalar(0.0);
        let two = t.scalar(2.0);
        let one = t.scalar(1.0);
        let q = Dist::normal(zero, two);
        let p = Dist::normal(zero, one);
        let kl = kl_normal_normal(&mut t, &q, &p).unwrap();
        let got = t.value(kl).item().unwrap();

        let lq = |x: f64| -(2.0f64.ln()) - HALF_LN_TWO_PI - 0.5 * (x / 2.0) * (x / 2.0);
        let lp = |x: f64| -HALF_LN_TWO_PI - 0.5 * x * x;
        let integrand = |x: f64| lq(x).exp() * (lq(x) - lp(x));
        let oracle = simpson(integrand, -40.0, 40.0, 200_000);
        assert_relative_eq!(got, oracle, epsilon = 1e-6);
        assert_relative_eq!(got, 1.5 - 2.0f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn entropy_values() {
        let (mut t, zero) = tape_scalar(0.0);
        let one = t.scalar(1.0);
        let d = Dist::normal(zero, one);
        let h = d.entropy(&mut t).unwrap();
        assert_relative_eq!(
            t.value(h).item().unwrap(),
            0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln(),
            epsilon = 1e-12
        );
        let logits = t.constant(Tensor::zeros(&[4]));
        let c = Dist::categorical_logits(logits);
        let h = c.entropy(&mut t).unwrap();
        assert_relative_eq!(t.value(h).item().unwrap(), 4.0f64.ln(), epsilon = 1e-12);
        let b = Dist::bernoulli_logits(zero);
        assert!(b.entropy(&mut t).is_err());
    }

    #[test]
    fn normal_entropy_matches_monte_carlo() {
        // H = -E[log q], 1e5 draws, 3-sigma band
        let sigma_val = 1.7;
        let (mut t, mu) = tape_scalar(0.0);
        let sigma = t.scalar(sigma_val);
        let d = Dist::normal(mu, sigma);
        let h = d.entropy(&mut t).unwrap();
        let analytic = t.value(h).item().unwrap();

        let mut rng = stream(17, 0);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let z = sigma_val * rng::standard_normal(&mut rng);
            let lq = -(sigma_val.ln()) - HALF_LN_TWO_PI - 0.5 * (z / sigma_val).powi(2);
            sum += -lq;
            sum2 += lq * lq;
        }
        let mc = sum / n as f64;
        let var = (sum2 / n as f64 - (sum / n as f64).powi(2)).max(0.0);
        let band = 3.0 * (var / n as f64).sqrt();
        assert!((mc - analytic).abs() < band.max(1e-3), "mc {} vs {}", mc, analytic);
    }

    #[test]
    fn discrete_normalization_is_exact() {
        let mut t = Tape::new();
        // Bernoulli
        let l = t.scalar(0.37);
        let d = Dist::bernoulli_logits(l);
        let mut total = 0.0;
        for v in [0.0, 1.0] {
            let val = t.constant(Tensor::scalar(v));
            let lp = d.log_prob(&mut t, val).unwrap();
            total += t.value(lp).item().unwrap().exp();
        }
        assert!((total - 1.0).abs() <= 1e-12);
        // Categorical, K = 16
        let logits: Vec<f64> = (0..16).map(|i| (i as f64) * 0.21 - 1.0).collect();
        let lv = t.constant(Tensor::from_vec(logits));
        let c = Dist::categorical_logits(lv);
        let mut total = 0.0;
        for k in 0..16 {
            let val = t.constant(Tensor::scalar(k as f64));
            let lp = c.log_prob(&mut t, val).unwrap();
            total += t.value(lp).item().unwrap().exp();
        }
        assert!((total - 1.0).abs() <= 1e-12, "sum {}", total);
    }

    #[test]
    fn continuous_normalization_by_quadrature() {
        // Normal over [mu - 10 sigma, mu + 10 sigma]
        let (mu, sigma) = (0.4, 1.3);
        let f = |x: f64| {
            let mut t = Tape::new();
            let m = t.scalar(mu);
            let s = t.scalar(sigma);
            let d = Dist::normal(m, s);
            let v = t.constant(Tensor::scalar(x));
            let lp = d.log_prob(&mut t, v).unwrap();
            t.value(lp).item().unwrap().exp()
        };
        let total = simpson(f, mu - 10.0 * sigma, mu + 10.0 * sigma, 20_000);
        assert!((total - 1.0).abs() <= 1e-6, "normal mass {}", total);

        // Beta(2, 5) over (0, 1); density vanishes at both ends
        let g = |x: f64| {
            let mut t = Tape::new();
            let a = t.scalar(2.0);
            let b = t.scalar(5.0);
            let d = Dist::beta(a, b);
            let v = t.constant(Tensor::scalar(x.clamp(1e-12, 1.0 - 1e-12)));
            let lp = d.log_prob(&mut t, v).unwrap();
            t.value(lp).item().unwrap().exp()
        };
        let total = simpson(g, 0.0, 1.0, 20_000);
        assert!((total - 1.0).abs() <= 1e-6, "beta mass {}", total);
    }

    #[test]
    fn log_prob_gradients_match_finite_differences() {
        // every distribution, 10 random parameter/value pairs, rel err <= 1e-5
        let mut outer = stream(42, 0);
        for trial in 0..10 {
            let seed = 1000 + trial;
            // Normal(mu, softplus-free sigma > 0.2)
            {
                let mut store = ParamStore::new();
                let mu = store
                    .create("mu", Tensor::scalar(2.0 * rng::standard_normal(&mut outer)))
                    .unwrap();
                let sigma = store
                    .create("sigma", Tensor::scalar(0.2 + rng::uniform(&mut outer) * 2.0))
                    .unwrap();
                let x = 2.0 * rng::standard_normal(&mut outer);
                let report = crate::tape::grad_check(
                    move |t, s| {
                        let m = t.param(s, s.find("mu").unwrap());
                        let sg = t.param(s, s.find("sigma").unwrap());
                        let d = Dist::normal(m, sg);
                        let v = t.constant(Tensor::scalar(x));
                        let lp = d.log_prob(t, v)?;
                        t.sum_all(lp)
                    },
                    &mut store,
                    &[mu, sigma],
                    1e-5,
                    1e-5,
                )
                .unwrap();
                assert!(report.pass(), "Normal seed {}: {}", seed, report.max_rel_err);
            }
            // Bernoulli(logits)
            {
                let mut store = ParamStore::new();
                let l = store
                    .create("l", Tensor::scalar(2.0 * rng::standard_normal(&mut outer)))
                    .unwrap();
                let x = if rng::uniform(&mut outer) < 0.5 { 0.0 } else { 1.0 };
                let report = crate::tape::grad_check(
                    move |t, s| {
                        let lv = t.param(s, s.find("l").unwrap());
                        let d = Dist::bernoulli_logits(lv);
                        let v = t.constant(Tensor::scalar(x));
                        let lp = d.log_prob(t, v)?;
                        t.sum_all(lp)
                    },
                    &mut store,
                    &[l],
                    1e-5,
                    1e-5,
                )
                .unwrap();
                assert!(report.pass(), "Bernoulli: {}", report.max_rel_err);
            }
            // Beta(a, b)
            {
                let mut store = ParamStore::new();
                let a = store
                    .create("a", Tensor::scalar(0.5 + rng::uniform(&mut outer) * 3.0))
                    .unwrap();
                let b = store
                    .create("b", Tensor::scalar(0.5 + rng::uniform(&mut outer) * 3.0))
                    .unwrap();
                let x = 0.05 + 0.9 * rng::uniform(&mut outer);
                let report = crate::tape::grad_check(
                    move |t, s| {
                        let av = t.param(s, s.find("a").unwrap());
                        let bv = t.param(s, s.find("b").unwrap());
                        let d = Dist::beta(av, bv);
                        let v = t.constant(Tensor::scalar(x));
                        let lp = d.log_prob(t, v)?;
                        t.sum_all(lp)
                    },
                    &mut store,
                    &[a, b],
                    1e-5,
                    1e-5,
                )
                .unwrap();
                assert!(report.pass(), "Beta: {}", report.max_rel_err);
            }
            // Categorical(logits), K = 4
            {
                let mut store = ParamStore::new();
                let logits: Vec<f64> =
                    (0..4).map(|_| rng::standard_normal(&mut outer)).collect();
                let l = store.create("l", Tensor::from_vec(logits)).unwrap();
                let x = (rng::uniform(&mut outer) * 4.0).floor().min(3.0);
                let report = crate::tape::grad_check(
                    move |t, s| {
                        let lv = t.param(s, s.find("l").unwrap());
                        let d = Dist::categorical_logits(lv);
                        let v = t.constant(Tensor::scalar(x));
                        let lp = d.log_prob(t, v)?;
                        t.sum_all(lp)
                    },
                    &mut store,
                    &[l],
                    1e-5,
                    1e-5,
                )
                .unwrap();
                assert!(report.pass(), "Categorical: {}", report.max_rel_err);
            }
            // Dirichlet(alpha), K = 3
            {
                let mut store = ParamStore::new();
                let alpha: Vec<f64> =
                    (0..3).map(|_| 0.5 + rng::uniform(&mut outer) * 3.0).collect();
                let a = store.create("alpha", Tensor::from_vec(alpha)).unwrap();
                let raw: Vec<f64> = (0..3).map(|_| 0.1 + rng::uniform(&mut outer)).collect();
                let total: f64 = raw.iter().sum();
                let x: Vec<f64> = raw.iter().map(|r| r / total).collect();
                let report = crate::tape::grad_check(
                    move |t, s| {
                        let av = t.param(s, s.find("alpha").unwrap());
                        let d = Dist::dirichlet(av);
                        let v = t.constant(Tensor::from_vec(x.clone()));
                        let lp = d.log_prob(t, v)?;
                        t.sum_all(lp)
                    },
                    &mut store,
                    &[a],
                    1e-5,
                    1e-5,
                )
                .unwrap();
                assert!(report.pass(), "Dirichlet: {}", report.max_rel_err);
            }
        }
    }

    #[test]
    fn pathwise_and_score_gradients_agree() {
        // d/dmu E[z^2] under N(mu, 1) is 2 mu; compare both estimators on
        // 1e5 vectorized samples within 3 combined standard errors.
        let s = 100_000usize;
        let mu_val = 0.7;
        let mut rng = stream(33, 0);

        // pathwise: z = mu + eps, d(z^2)/dmu = 2 z per sample
        let mut store = ParamStore::new();
        let mu = store.create("mu", Tensor::full(&[s], mu_val)).unwrap();
        let mut t = Tape::new();
        let muv = t.param(&store, mu);
        let one = t.scalar(1.0);
        let d = Dist::normal(muv, one);
        let z = d.rsample(&mut t, &mut rng).unwrap();
        let z2 = t.powc(z, 2.0).unwrap();
        let root = t.sum_all(z2).unwrap();
        let g = t.backward(root).unwrap();
        let per_sample_path = g.param(mu).unwrap().clone();

        // score: f(z) grad log q(z) = z^2 (z - mu)
        let mut t2 = Tape::new();
        let muv2 = t2.param(&store, mu);
        let one2 = t2.scalar(1.0);
        let d2 = Dist::normal(muv2, one2);
        let zs = d2.sample(&mut t2, &mut rng).unwrap();
        let zc = t2.constant(zs.clone());
        let lq = d2.log_prob(&mut t2, zc).unwrap();
        let f = t2.constant(zs.map(|x| x * x));
        let weighted = t2.mul(f, lq).unwrap();
        let root2 = t2.sum_all(weighted).unwrap();
        let g2 = t2.backward(root2).unwrap();
        let per_sample_score = g2.param(mu).unwrap().clone();

        let stats = |v: &Tensor| {
            let m = v.data().iter().sum::<f64>() / v.len() as f64;
            let var =
                v.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
            (m, (var / v.len() as f64).sqrt())
        };
        let (m1, se1) = stats(&per_sample_path);
        let (m2, se2) = stats(&per_sample_score);
        let combined = (se1 * se1 + se2 * se2).sqrt();
        assert!(
            (m1 - m2).abs() <= 3.0 * combined,
            "pathwise {} vs score {} (3 se = {})",
            m1,
            m2,
            3.0 * combined
        );
        assert!((m1 - 2.0 * mu_val).abs() <= 3.0 * se1);
    }

    #[test]
    fn empirical_cursor_and_summary() {
        let mut store = ParamStore::new();
        let e = Empirical::new(&mut store, "q", 4, &[]).unwrap();
        assert_eq!(e.cursor(), 0);
        assert_eq!(e.current(&store).unwrap().item().unwrap(), 0.0);
        e.write(&mut store, &Tensor::scalar(1.0)).unwrap();
        e.write(&mut store, &Tensor::scalar(3.0)).unwrap();
        assert_eq!(e.cursor(), 2);
        assert_eq!(e.current(&store).unwrap().item().unwrap(), 3.0);
        let s = e.summary(&store, 0.0).unwrap();
        assert_eq!(s.n, 2);
        assert_relative_eq!(s.mean.item().unwrap(), 2.0);
        e.write(&mut store, &Tensor::scalar(5.0)).unwrap();
        e.write(&mut store, &Tensor::scalar(7.0)).unwrap();
        assert!(matches!(
            e.write(&mut store, &Tensor::scalar(9.0)),
            Err(Error::StoreFull(4))
        ));
        // burn-in discards leading rows
        let s = e.summary(&store, 0.5).unwrap();
        assert_eq!(s.n, 2);
        assert_relative_eq!(s.mean.item().unwrap(), 6.0);
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = if n % 2 == 0 { n } else { n + 1 };
        let h = (b - a) / n as f64;
        let mut total = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            total += w * f(a + i as f64 * h);
        }
        total * h / 3.0
    }
}
