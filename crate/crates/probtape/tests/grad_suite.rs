//! Full finite-difference gradient suite plus tape determinism.

mod common;

use probtape::check::{distribution_gradient_suite, primitive_gradient_suite};
use probtape::model::{trace, Bindings, Feeds};
use probtape::rng::stream;
use probtape::{ParamStore, Tape};

#[test]
fn every_primitive_matches_central_differences() {
    // 20 random points per op, h = 1e-5: worst relative error below 1e-6
    let entries = primitive_gradient_suite(20, 1e-5, 1e-6, 2024).unwrap();
    for e in &entries {
        assert!(
            e.max_rel_err < 1e-6,
            "{}: max relative error {}",
            e.name,
            e.max_rel_err
        );
    }
}

#[test]
fn every_distribution_log_prob_matches_central_differences() {
    let entries = distribution_gradient_suite(10, 1e-5, 1e-5, 7).unwrap();
    for e in &entries {
        assert!(
            e.max_rel_err <= 1e-5,
            "{}: max relative error {}",
            e.name,
            e.max_rel_err
        );
    }
}

#[test]
fn same_builder_same_seed_gives_bit_identical_tapes() {
    let build = |seed: u64| {
        let mut tape = Tape::new();
        let store = ParamStore::new();
        let mut rng = stream(seed, 0);
        trace(
            |ctx| {
                let model = common::beta_bernoulli_model(50);
                model(ctx)
            },
            &mut tape,
            &store,
            &Bindings::new(),
            &Feeds::new(),
            &mut rng,
        )
        .unwrap();
        tape.fingerprint()
    };
    assert_eq!(build(42), build(42));
    assert_ne!(build(42), build(43));
}
