//! Shared toy models for the integration suites.
#![allow(dead_code)]

use std::sync::Arc;

use probtape::model::ModelCtx;
use probtape::rng::{self, Rng};
use probtape::{Dist, ModelFn, Tensor};

/// z ~ Normal(0, 1); x ~ Normal(z, 1). With one observation x the posterior
/// is Normal(x/2, 1/sqrt(2)).
pub fn normal_normal_model() -> ModelFn {
    Arc::new(|ctx: &mut ModelCtx| {
        let zero = ctx.tape.scalar(0.0);
        let one = ctx.tape.scalar(1.0);
        let z = ctx.rv("z", Dist::normal(zero, one))?;
        let one2 = ctx.tape.scalar(1.0);
        ctx.rv("x", Dist::normal(z, one2))?;
        Ok(())
    })
}

/// theta ~ Beta(1, 1); x ~ Bernoulli(p = ones(n) * theta).
pub fn beta_bernoulli_model(n: usize) -> ModelFn {
    Arc::new(move |ctx: &mut ModelCtx| {
        let a = ctx.tape.scalar(1.0);
        let b = ctx.tape.scalar(1.0);
        let theta = ctx.rv("theta", Dist::beta(a, b))?;
        let ones = ctx.tape.constant(Tensor::ones(&[n]));
        let probs = ctx.tape.mul(ones, theta)?;
        let x = Dist::bernoulli_probs(ctx.tape, probs)?;
        ctx.rv("x", x)?;
        Ok(())
    })
}

/// s ones followed by n - s zeros; the Beta(1,1) posterior is
/// Beta(1 + s, 1 + n - s).
pub fn coin_data(s: usize, n: usize) -> Tensor {
    let mut data = vec![1.0; s];
    data.extend(vec![0.0; n - s]);
    Tensor::new(vec![n], data).unwrap()
}

/// beta ~ Normal(0, I) [d]; y ~ Bernoulli(logits = x @ beta). Features come
/// from the "x" feed.
pub fn logreg_model(n: usize, d: usize) -> ModelFn {
    Arc::new(move |ctx: &mut ModelCtx| {
        let mu = ctx.tape.constant(Tensor::zeros(&[d]));
        let sigma = ctx.tape.constant(Tensor::ones(&[d]));
        let beta = ctx.rv("beta", Dist::normal(mu, sigma))?;
        let x = ctx.feed("x")?;
        let logits = ctx.tape.matmul(x, beta)?;
        debug_assert_eq!(ctx.tape.shape_of(logits), &[n]);
        ctx.rv("y", Dist::bernoulli_logits(logits))?;
        Ok(())
    })
}

/// Synthetic logistic-regression data with known coefficients.
pub fn logreg_data(n: usize, d: usize, seed: u64) -> (Tensor, Tensor, Vec<f64>) {
    let mut rng = rng::stream(seed, rng::STREAM_DATA);
    let beta: Vec<f64> = (0..d).map(|_| rng::standard_normal(&mut rng)).collect();
    let mut x = Tensor::zeros(&[n, d]);
    let mut y = Tensor::zeros(&[n]);
    for i in 0..n {
        let mut logit = 0.0;
        for j in 0..d {
            let v = rng::standard_normal(&mut rng);
            x.data_mut()[i * d + j] = v;
            logit += v * beta[j];
        }
        let p = 1.0 / (1.0 + (-logit).exp());
        y.data_mut()[i] = if rng::uniform(&mut rng) < p { 1.0 } else { 0.0 };
    }
    (x, y, beta)
}

/// Mixture of Gaussians: beta ~ Normal(0, sigma0) [k, d];
/// z ~ Categorical(zeros [n, k]); x ~ Normal(gather(beta, z), 1).
pub fn gmm_model(n: usize, k: usize, d: usize, prior_sigma: f64) -> ModelFn {
    Arc::new(move |ctx: &mut ModelCtx| {
        let mu0 = ctx.tape.constant(Tensor::zeros(&[k, d]));
        let s0 = ctx.tape.constant(Tensor::full(&[k, d], prior_sigma));
        let beta = ctx.rv("beta", Dist::normal(mu0, s0))?;
        let logits = ctx.tape.constant(Tensor::zeros(&[n, k]));
        let z = ctx.rv("z", Dist::categorical_logits(logits))?;
        let mu = ctx.tape.gather(beta, z)?;
        let sx = ctx.tape.constant(Tensor::ones(&[n, d]));
        ctx.rv("x", Dist::normal(mu, sx))?;
        Ok(())
    })
}

/// Well-separated mixture draws: k means on a circle of radius r in the
/// first two dimensions, unit noise, balanced assignment counts.
pub fn gmm_data(n: usize, k: usize, d: usize, radius: f64, seed: u64) -> (Tensor, Vec<Vec<f64>>) {
    let mut rng = rng::stream(seed, rng::STREAM_DATA);
    let mut means = Vec::with_capacity(k);
    for c in 0..k {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
        let mut m = vec![0.0; d];
        m[0] = radius * angle.cos();
        if d > 1 {
            m[1] = radius * angle.sin();
        }
        means.push(m);
    }
    let mut x = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let c = i % k;
        for j in 0..d {
            x.data_mut()[i * d + j] = means[c][j] + rng::standard_normal(&mut rng);
        }
    }
    (x, means)
}

/// Greedy distance-weighted seeding: pick the first center uniformly, each
/// next one proportional to squared distance from the chosen set.
pub fn kmeanspp_init(x: &Tensor, k: usize, rng: &mut Rng) -> Tensor {
    let n = x.shape()[0];
    let d = x.shape()[1];
    let row = |i: usize| &x.data()[i * d..(i + 1) * d];
    let mut chosen: Vec<usize> = vec![(rng::uniform(rng) * n as f64) as usize];
    while chosen.len() < k {
        let dists: Vec<f64> = (0..n)
            .map(|i| {
                chosen
                    .iter()
                    .map(|&c| {
                        row(i)
                            .iter()
                            .zip(row(c))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = dists.iter().sum();
        let mut u = rng::uniform(rng) * total;
        let mut pick = n - 1;
        for (i, &w) in dists.iter().enumerate() {
            u -= w;
            if u < 0.0 {
                pick = i;
                break;
            }
        }
        chosen.push(pick);
    }
    let mut init = Tensor::zeros(&[k, d]);
    for (c, &i) in chosen.iter().enumerate() {
        for j in 0..d {
            init.data_mut()[c * d + j] = x.data()[i * d + j];
        }
    }
    init
}

/// Minimum over assignment permutations of the max per-mean distance.
pub fn best_permutation_error(estimated: &Tensor, truth: &[Vec<f64>]) -> f64 {
    let k = truth.len();
    let d = truth[0].len();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p: &[usize]| {
        let worst = (0..k)
            .map(|c| {
                let est = &estimated.data()[p[c] * d..(p[c] + 1) * d];
                est.iter()
                    .zip(&truth[c])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0f64, f64::max);
        best = best.min(worst);
    });
    best
}

fn permute(items: &mut Vec<usize>, start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == items.len() {
        visit(items);
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permute(items, start + 1, visit);
        items.swap(start, i);
    }
}

pub fn softplus_inv(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
