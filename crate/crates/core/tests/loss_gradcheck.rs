//! Full-objective parameter gradients against finite differences.

mod common;

use common::lossgrad::{batch, rel_err, spec};
use eavae::distributions::{Likelihood, ZFamily};
use eavae::models::{Model, Variant};
use ndgrad::RngStream;

#[test]
fn every_objective_matches_finite_differences() {
    for (name, err) in common::lossgrad::loss_suite() {
        assert!(err < 1e-5, "{name}: rel err {err:e}");
    }
}

#[test]
fn zero_betas_leave_only_reconstruction_gradients() {
    // the KL heads still get exact zero-weight gradients through the sample
    let model = Model::new(spec(Variant::EavaeLognormal, ZFamily::Normal, Likelihood::Bernoulli), 4).unwrap();
    let x = batch(Likelihood::Bernoulli, &mut RngStream::seeded(5));
    assert!(rel_err(model, &x, (0.0, 0.0)) < 1e-5);
}
