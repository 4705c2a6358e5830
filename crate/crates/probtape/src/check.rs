//! Self-check suites: every primitive operation and every distribution's
//! log density compared against central finite differences at random
//! points, away from nondifferentiable or singular inputs.

use crate::dist::Dist;
use crate::error::Result;
use crate::rng::{self, Rng};
use crate::tape::{grad_check, ParamStore, Tape, Value};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_err: f64,
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| lo + (hi - lo) * rng::uniform(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Builder = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Value>>;

fn unary_case(name: &str, lo: f64, hi: f64, f: fn(&mut Tape, Value) -> Result<Value>) -> (String, Vec<(Vec<usize>, f64, f64)>, Builder) {
    (
        name.to_string(),
        vec![(vec![3], lo, hi)],
        Box::new(move |t, s| {
            let x = t.param(s, s.find("p0").unwrap());
            let y = f(t, x)?;
            t.sum_all(y)
        }),
    )
}

fn binary_case(name: &str, lo: f64, hi: f64, f: fn(&mut Tape, Value, Value) -> Result<Value>) -> (String, Vec<(Vec<usize>, f64, f64)>, Builder) {
    (
        name.to_string(),
        vec![(vec![3], lo, hi), (vec![3], lo, hi)],
        Box::new(move |t, s| {
            let a = t.param(s, s.find("p0").unwrap());
            let b = t.param(s, s.find("p1").unwrap());
            let y = f(t, a, b)?;
            t.sum_all(y)
        }),
    )
}

/// Gradient check of every primitive op at `points` random inputs each.
pub fn primitive_gradient_suite(
    points: usize,
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<Vec<SuiteEntry>> {
    let mut rng = rng::stream(seed, 0);
    let mut cases: Vec<(String, Vec<(Vec<usize>, f64, f64)>, Builder)> = vec![
        binary_case("add", -2.0, 2.0, |t, a, b| t.add(a, b)),
        binary_case("sub", -2.0, 2.0, |t, a, b| t.sub(a, b)),
        binary_case("mul", -2.0, 2.0, |t, a, b| t.mul(a, b)),
        binary_case("div", 0.5, 2.0, |t, a, b| t.div(a, b)),
        unary_case("neg", -2.0, 2.0, |t, x| t.neg(x)),
        unary_case("exp", -2.0, 2.0, |t, x| t.exp(x)),
        unary_case("log", 0.2, 3.0, |t, x| t.log(x)),
        unary_case("sqrt", 0.2, 3.0, |t, x| t.sqrt(x)),
        unary_case("tanh", -2.0, 2.0, |t, x| t.tanh(x)),
        unary_case("sigmoid", -3.0, 3.0, |t, x| t.sigmoid(x)),
        unary_case("softplus", -3.0, 3.0, |t, x| t.softplus(x)),
        unary_case("lgamma", 0.3, 4.0, |t, x| t.lgamma(x)),
        unary_case("pow_const", 0.3, 2.0, |t, x| t.powc(x, 2.5)),
        // stay away from the kink at 0 by more than the probe step
        unary_case("maximum_const_pos", 0.05, 2.0, |t, x| t.maxc(x, 0.0)),
        unary_case("maximum_const_neg", -2.0, -0.05, |t, x| t.maxc(x, 0.0)),
        (
            "matmul".to_string(),
            vec![(vec![2, 3], -1.5, 1.5), (vec![3, 2], -1.5, 1.5)],
            Box::new(|t, s| {
                let a = t.param(s, s.find("p0").unwrap());
                let b = t.param(s, s.find("p1").unwrap());
                let y = t.matmul(a, b)?;
                t.sum_all(y)
            }),
        ),
        (
            "matmul_vec".to_string(),
            vec![(vec![3, 2], -1.5, 1.5), (vec![2], -1.5, 1.5)],
            Box::new(|t, s| {
                let a = t.param(s, s.find("p0").unwrap());
                let b = t.param(s, s.find("p1").unwrap());
                let y = t.matmul(a, b)?;
                t.sum_all(y)
            }),
        ),
        (
            "sum_axes".to_string(),
            vec![(vec![2, 3], -2.0, 2.0)],
            Box::new(|t, s| {
                let x = t.param(s, s.find("p0").unwrap());
                let y = t.sum(x, &[1])?;
                let sq = t.powc(y, 2.0)?;
                t.sum_all(sq)
            }),
        ),
        (
            "mean_axes".to_string(),
            vec![(vec![2, 3], -2.0, 2.0)],
            Box::new(|t, s| {
                let x = t.param(s, s.find("p0").unwrap());
                let y = t.mean(x, &[0])?;
                let sq = t.powc(y, 2.0)?;
                t.sum_all(sq)
            }),
        ),
        (
            "logsumexp".to_string(),
            vec![(vec![2, 4], -2.0, 2.0)],
            Box::new(|t, s| {
                let x = t.param(s, s.find("p0").unwrap());
                let y = t.logsumexp(x, 1)?;
                t.sum_all(y)
            }),
        ),
        (
            "gather".to_string(),
            vec![(vec![4, 2], -2.0, 2.0)],
            Box::new(|t, s| {
                let x = t.param(s, s.find("p0").unwrap());
                let idx = t.constant(Tensor::from_vec(vec![2.0, 0.0, 3.0, 2.0]));
                let y = t.gather(x, idx)?;
                let sq = t.powc(y, 2.0)?;
                t.sum_all(sq)
            }),
        ),
        (
            "reshape".to_string(),
            vec![(vec![6], -2.0, 2.0)],
            Box::new(|t, s| {
                let x = t.param(s, s.find("p0").unwrap());
                let y = t.reshape(x, &[2, 3])?;
                let z = t.logsumexp(y, 0)?;
                t.sum_all(z)
            }),
        ),
        (
            "broadcast_to".to_string(),
            vec![(vec![3], -2.0, 2.0)],
            Box::new(|t, s| {
                let x = t.param(s, s.find("p0").unwrap());
                let y = t.broadcast_to(x, &[4, 3])?;
                let sq = t.powc(y, 2.0)?;
                t.sum_all(sq)
            }),
        ),
        (
            "concat".to_string(),
            vec![(vec![2], -2.0, 2.0), (vec![3], -2.0, 2.0)],
            Box::new(|t, s| {
                let a = t.param(s, s.find("p0").unwrap());
                let b = t.param(s, s.find("p1").unwrap());
                let y = t.concat(&[a, b], 0)?;
                let sq = t.powc(y, 2.0)?;
                t.sum_all(sq)
            }),
        ),
        (
            "broadcast_binary".to_string(),
            vec![(vec![2, 1], -2.0, 2.0), (vec![3], -2.0, 2.0)],
            Box::new(|t, s| {
                let a = t.param(s, s.find("p0").unwrap());
                let b = t.param(s, s.find("p1").unwrap());
                let y = t.mul(a, b)?;
                t.sum_all(y)
            }),
        ),
    ];
    let mut out = Vec::new();
    for (name, specs, builder) in cases.drain(..) {
        let mut worst = 0.0f64;
        for _ in 0..points {
            let mut store = ParamStore::new();
            let mut params = Vec::new();
            for (i, (shape, lo, hi)) in specs.iter().enumerate() {
                let p = store
                    .create(&format!("p{}", i), rand_tensor(shape, *lo, *hi, &mut rng))
                    .unwrap();
                params.push(p);
            }
            let report = grad_check(&builder, &mut store, &params, h, tol)?;
            worst = worst.max(report.max_rel_err);
        }
        out.push(SuiteEntry { name, max_rel_err: worst });
    }
    Ok(out)
}

/// Gradient check of every distribution's log density with respect to its
/// parameters (and the value, for continuous families).
pub fn distribution_gradient_suite(
    points: usize,
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<Vec<SuiteEntry>> {
    let mut rng = rng::stream(seed, 0);
    let mut out = Vec::new();

    let mut run = |name: &str,
                   rng: &mut Rng,
                   setup: &mut dyn FnMut(&mut ParamStore, &mut Rng) -> Vec<crate::tape::Param>,
                   builder: Builder|
     -> Result<()> {
        let mut worst = 0.0f64;
        for _ in 0..points {
            let mut store = ParamStore::new();
            let params = setup(&mut store, rng);
            let report = grad_check(&builder, &mut store, &params, h, tol)?;
            worst = worst.max(report.max_rel_err);
        }
        out.push(SuiteEntry { name: name.to_string(), max_rel_err: worst });
        Ok(())
    };

    run(
        "normal_log_prob",
        &mut rng,
        &mut |s, r| {
            vec![
                s.create("mu", rand_tensor(&[2], -2.0, 2.0, r)).unwrap(),
                s.create("sigma", rand_tensor(&[2], 0.3, 2.0, r)).unwrap(),
                s.create("value", rand_tensor(&[2], -2.0, 2.0, r)).unwrap(),
            ]
        },
        Box::new(|t, s| {
            let mu = t.param(s, s.find("mu").unwrap());
            let sigma = t.param(s, s.find("sigma").unwrap());
            let v = t.param(s, s.find("value").unwrap());
            let lp = Dist::normal(mu, sigma).log_prob(t, v)?;
            t.sum_all(lp)
        }),
    )?;
    run(
        "bernoulli_log_prob",
        &mut rng,
        &mut |s, r| {
            let x = if rng::uniform(r) < 0.5 { 0.0 } else { 1.0 };
            s.create("x", Tensor::scalar(x)).unwrap();
            vec![s.create("logits", rand_tensor(&[3], -2.5, 2.5, r)).unwrap()]
        },
        Box::new(|t, s| {
            let l = t.param(s, s.find("logits").unwrap());
            let x = t.param_detached(s, s.find("x").unwrap());
            let xs = t.broadcast_to(x, &[3])?;
            let lp = Dist::bernoulli_logits(l).log_prob(t, xs)?;
            t.sum_all(lp)
        }),
    )?;
    run(
        "beta_log_prob",
        &mut rng,
        &mut |s, r| {
            vec![
                s.create("a", rand_tensor(&[2], 0.5, 3.5, r)).unwrap(),
                s.create("b", rand_tensor(&[2], 0.5, 3.5, r)).unwrap(),
                s.create("value", rand_tensor(&[2], 0.05, 0.95, r)).unwrap(),
            ]
        },
        Box::new(|t, s| {
            let a = t.param(s, s.find("a").unwrap());
            let b = t.param(s, s.find("b").unwrap());
            let v = t.param(s, s.find("value").unwrap());
            let lp = Dist::beta(a, b).log_prob(t, v)?;
            t.sum_all(lp)
        }),
    )?;
    run(
        "categorical_log_prob",
        &mut rng,
        &mut |s, r| {
            let k = (rng::uniform(r) * 4.0).floor().min(3.0);
            s.create("k", Tensor::scalar(k)).unwrap();
            vec![s.create("logits", rand_tensor(&[4], -2.0, 2.0, r)).unwrap()]
        },
        Box::new(|t, s| {
            let l = t.param(s, s.find("logits").unwrap());
            let v = t.param_detached(s, s.find("k").unwrap());
            let lp = Dist::categorical_logits(l).log_prob(t, v)?;
            t.sum_all(lp)
        }),
    )?;
    run(
        "dirichlet_log_prob",
        &mut rng,
        &mut |s, r| {
            let raw = rand_tensor(&[3], 0.2, 1.0, r);
            let total: f64 = raw.data().iter().sum();
            let simplex = raw.map(|x| x / total);
            s.create("value", simplex).unwrap();
            vec![s.create("alpha", rand_tensor(&[3], 0.6, 3.0, r)).unwrap()]
        },
        Box::new(|t, s| {
            let a = t.param(s, s.find("alpha").unwrap());
            let v = t.param_detached(s, s.find("value").unwrap());
            let lp = Dist::dirichlet(a).log_prob(t, v)?;
            t.sum_all(lp)
        }),
    )?;
    Ok(out)
}
