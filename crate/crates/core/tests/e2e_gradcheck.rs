//! Whole-model gradients against central differences on tiny configs.
//!
//! The tokenizer loss contains stop-gradients and a straight-through
//! estimator, so its reference is an independent float64 re-implementation in
//! which every stopped quantity (and the token choice) is evaluated at the
//! unperturbed parameters.

mod common;

use common::oracle::{policy_loss_worst, tokenizer_loss_worst};

const SEEDS: u64 = 10;
const TOL: f32 = 1e-3;

#[test]
fn tokenizer_loss_gradients() {
    let worst = tokenizer_loss_worst(SEEDS);
    println!("tokenizer loss: max rel err {worst:.2e}");
    assert!(worst < TOL, "tokenizer loss max rel err {worst:.3e}");
}

#[test]
fn policy_loss_gradients() {
    let worst = policy_loss_worst(SEEDS);
    println!("policy loss: max rel err {worst:.2e}");
    assert!(worst < TOL, "policy loss max rel err {worst:.3e}");
}
