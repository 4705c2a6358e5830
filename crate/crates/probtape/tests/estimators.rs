//! Estimator-level properties on the conjugate Normal–Normal toy: the four
//! gradient estimators agree in mean, every ELBO estimate lower-bounds the
//! log marginal, the score baseline reduces variance, and longer importance
//! ladders tighten the bound.

mod common;

use std::collections::BTreeMap;

use probtape::rng::{self, stream};
use probtape::vi::elbo_loss;
use probtape::{
    Approx, Estimator, InferenceProblem, InferenceState, IwaeConfig, KlqpConfig,
    OptimizerConfig, ParamStore, Tape, Tensor,
};

const LOG_PX: f64 = -1.515_512_108_185_827_7; // log Normal(1; 0, 2)

fn problem_at(store: &mut ParamStore, mu: f64, sd: f64) -> InferenceProblem {
    let q = Approx::normal_with(
        store,
        "qz",
        Tensor::scalar(mu),
        Tensor::scalar(common::softplus_inv(sd)),
        true,
    )
    .unwrap();
    InferenceProblem::new(common::normal_normal_model())
        .latent("z", q)
        .observe("x", Tensor::scalar(1.0))
}

/// Mean gradient of the loss for (mu, rho) with its standard errors,
/// estimated from `chunks` independent chunks of `chunk_size` samples.
fn gradient_mean(
    estimator: Estimator,
    mu: f64,
    sd: f64,
    chunks: usize,
    chunk_size: usize,
    seed: u64,
) -> ([f64; 2], [f64; 2]) {
    let mut store = ParamStore::new();
    let problem = problem_at(&mut store, mu, sd);
    let mu_p = store.find("qz.mu").unwrap();
    let rho_p = store.find("qz.rho").unwrap();
    let mut rng = stream(seed, 0);
    let cfg = KlqpConfig {
        n_samples: chunk_size,
        estimator,
        baseline: false,
    };
    let mut sums = [0.0f64; 2];
    let mut sums2 = [0.0f64; 2];
    for _ in 0..chunks {
        let mut tape = Tape::new();
        let parts =
            elbo_loss(&mut tape, &problem, &store, &BTreeMap::new(), &cfg, 0.0, &mut rng)
                .unwrap();
        let grads = tape.backward(parts.loss).unwrap();
        let gm = grads.param(mu_p).map(|t| t.item().unwrap()).unwrap_or(0.0);
        let gr = grads.param(rho_p).map(|t| t.item().unwrap()).unwrap_or(0.0);
        for (i, g) in [gm, gr].into_iter().enumerate() {
            sums[i] += g;
            sums2[i] += g * g;
        }
    }
    let mut means = [0.0f64; 2];
    let mut ses = [0.0f64; 2];
    for i in 0..2 {
        let m = sums[i] / chunks as f64;
        let var = (sums2[i] / chunks as f64 - m * m).max(0.0);
        means[i] = m;
        ses[i] = (var / chunks as f64).sqrt();
    }
    (means, ses)
}

#[test]
fn the_four_estimators_agree_in_mean_gradient() {
    // five random variational points, 1e5 samples each (400 chunks of 250),
    // pairwise agreement within 3 combined standard errors
    let estimators = [
        Estimator::Reparam,
        Estimator::ReparamAnalyticKl,
        Estimator::ReparamAnalyticEntropy,
        Estimator::Score,
    ];
    let mut point_rng = stream(77, 0);
    for point in 0..5 {
        let mu = 2.0 * rng::standard_normal(&mut point_rng);
        let sd = 0.4 + 1.2 * rng::uniform(&mut point_rng);
        let results: Vec<([f64; 2], [f64; 2])> = estimators
            .iter()
            .enumerate()
            .map(|(i, &e)| gradient_mean(e, mu, sd, 400, 250, 1000 + point * 10 + i as u64))
            .collect();
        for i in 0..estimators.len() {
            for j in (i + 1)..estimators.len() {
                let (ma, sa) = &results[i];
                let (mb, sb) = &results[j];
                for c in 0..2 {
                    let diff = (ma[c] - mb[c]).abs();
                    let band = 3.0 * (sa[c] * sa[c] + sb[c] * sb[c]).sqrt();
                    assert!(
                        diff <= band.max(1e-9),
                        "point {} ({:.3}, {:.3}): {:?} vs {:?} component {}: {} vs {} (band {})",
                        point,
                        mu,
                        sd,
                        estimators[i],
                        estimators[j],
                        c,
                        ma[c],
                        mb[c],
                        band
                    );
                }
            }
        }
    }
}

#[test]
fn every_elbo_estimate_stays_below_the_log_marginal() {
    // averaged over 1e4 reps the ELBO cannot exceed log p(x) beyond noise
    for (estimator, seed) in [
        (Estimator::Reparam, 1u64),
        (Estimator::ReparamAnalyticKl, 2),
        (Estimator::ReparamAnalyticEntropy, 3),
        (Estimator::Score, 4),
    ] {
        let mut store = ParamStore::new();
        let problem = problem_at(&mut store, 0.2, 1.1);
        let mut rng = stream(seed, 0);
        let cfg = KlqpConfig { n_samples: 1, estimator, baseline: false };
        let reps = 10_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..reps {
            let mut tape = Tape::new();
            let parts =
                elbo_loss(&mut tape, &problem, &store, &BTreeMap::new(), &cfg, 0.0, &mut rng)
                    .unwrap();
            let elbo = -parts.report_loss;
            sum += elbo;
            sum2 += elbo * elbo;
        }
        let mean = sum / reps as f64;
        let var = (sum2 / reps as f64 - mean * mean).max(0.0);
        let band = 3.0 * (var / reps as f64).sqrt();
        assert!(
            mean <= LOG_PX + band,
            "{:?}: mean ELBO {} exceeds log p(x) {} + {}",
            estimator,
            mean,
            LOG_PX,
            band
        );
    }
}

#[test]
fn score_baseline_reduces_gradient_variance() {
    // single-sample score gradients at a non-optimal point, with the
    // baseline fixed at the running mean of f versus no baseline
    let mut store = ParamStore::new();
    let problem = problem_at(&mut store, -0.4, 1.3);
    let mu_p = store.find("qz.mu").unwrap();
    let cfg = KlqpConfig { n_samples: 1, estimator: Estimator::Score, baseline: false };

    // first pass: estimate E[f]
    let mut rng = stream(42, 0);
    let reps = 10_000;
    let mut f_sum = 0.0;
    for _ in 0..reps {
        let mut tape = Tape::new();
        let parts =
            elbo_loss(&mut tape, &problem, &store, &BTreeMap::new(), &cfg, 0.0, &mut rng)
                .unwrap();
        f_sum += parts.f_mean.unwrap();
    }
    let baseline = f_sum / reps as f64;

    let variance_with = |b: f64, seed: u64| {
        let mut rng = stream(seed, 0);
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..reps {
            let mut tape = Tape::new();
            let parts =
                elbo_loss(&mut tape, &problem, &store, &BTreeMap::new(), &cfg, b, &mut rng)
                    .unwrap();
            let g = tape
                .backward(parts.loss)
                .unwrap()
                .param(mu_p)
                .map(|t| t.item().unwrap())
                .unwrap_or(0.0);
            sum += g;
            sum2 += g * g;
        }
        let m = sum / reps as f64;
        (sum2 / reps as f64 - m * m).max(0.0)
    };
    let with = variance_with(baseline, 43);
    let without = variance_with(0.0, 43);
    assert!(
        with <= without,
        "baseline variance {} not below {}",
        with,
        without
    );
}

#[test]
fn longer_importance_ladders_tighten_the_bound() {
    // E[IWAE bound at K = 50] >= E[bound at K = 1]; compare averages over
    // independent replicates within 3 combined standard errors
    let mut store = ParamStore::new();
    let problem = problem_at(&mut store, 0.0, 1.0);
    let reps = 2_000;
    let average = |k: usize, seed: u64| {
        let mut rng = stream(seed, 0);
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..reps {
            let mut tape = Tape::new();
            let loss = probtape::vi::iwae_loss(
                &mut tape,
                &problem,
                &store,
                &BTreeMap::new(),
                &IwaeConfig { k },
                &mut rng,
            )
            .unwrap();
            let bound = -tape.value(loss).item().unwrap();
            sum += bound;
            sum2 += bound * bound;
        }
        let m = sum / reps as f64;
        let var = (sum2 / reps as f64 - m * m).max(0.0);
        (m, (var / reps as f64).sqrt())
    };
    let (b1, se1) = average(1, 7);
    let (b50, se50) = average(50, 8);
    let band = 3.0 * (se1 * se1 + se50 * se50).sqrt();
    assert!(
        b50 >= b1 - band,
        "K=50 bound {} below K=1 bound {} (band {})",
        b50,
        b1,
        band
    );
    // both still lower bounds
    assert!(b50 <= LOG_PX + 3.0 * se50);
}

#[test]
fn entropy_domination_raises_a_warning_metric() {
    // push the approximation far from the data so the entropy term
    // dominates the Monte Carlo part of the objective
    let mut store = ParamStore::new();
    let q = Approx::normal_with(
        &mut store,
        "qz",
        Tensor::scalar(0.0),
        Tensor::scalar(common::softplus_inv(40.0)),
        true,
    )
    .unwrap();
    let problem = InferenceProblem::new(common::normal_normal_model())
        .latent("z", q)
        .observe("x", Tensor::scalar(0.0));
    let mut state = InferenceState::initialize(
        problem,
        probtape::Algorithm::Klqp(KlqpConfig::new(Estimator::ReparamAnalyticEntropy)),
        Some(OptimizerConfig::adam(0.001)),
        &store,
        5,
    )
    .unwrap();
    // a sigma of 40 puts |H| around 4.1 nats while the expected joint term
    // is several hundred; widen until the warning depends on the actual
    // magnitudes rather than a hardcoded assumption
    let d = state.update(&mut store, &BTreeMap::new()).unwrap();
    let warned = d.metric("warn_entropy_dominant").unwrap_or(0.0);
    let loss = d.metric("loss").unwrap();
    assert!(loss.is_finite());
    // with sigma = 40 the expected quadratic term dominates; no warning
    assert_eq!(warned, 0.0);

    // near-deterministic q on exact data: entropy term dominates
    let mut store = ParamStore::new();
    let q = Approx::normal_with(
        &mut store,
        "qz",
        Tensor::scalar(0.0),
        Tensor::scalar(common::softplus_inv(1e-4)),
        true,
    )
    .unwrap();
    let problem = InferenceProblem::new(common::normal_normal_model())
        .latent("z", q)
        .observe("x", Tensor::scalar(0.0));
    let mut state = InferenceState::initialize(
        problem,
        probtape::Algorithm::Klqp(KlqpConfig::new(Estimator::ReparamAnalyticEntropy)),
        Some(OptimizerConfig::adam(0.001)),
        &store,
        6,
    )
    .unwrap();
    let d = state.update(&mut store, &BTreeMap::new()).unwrap();
    assert_eq!(d.metric("warn_entropy_dominant"), Some(1.0));
}
