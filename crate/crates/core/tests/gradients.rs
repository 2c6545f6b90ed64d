mod common;

use common::gradcheck::{net_worst, op_table, op_worst};
use gibbsnet::nets::Role;

const TOL: f64 = 1e-3;

#[test]
fn every_tape_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for (i, (name, gen, f)) in op_table().into_iter().enumerate() {
        let worst = op_worst(gen, f, i as u64);
        if !(worst < TOL) {
            failures.push(format!("{name}: {worst:e}"));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let w = net_worst(Role::Encoder);
    assert!(w < TOL, "{w:e}");
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let w = net_worst(Role::Decoder);
    assert!(w < TOL, "{w:e}");
}

#[test]
fn discriminator_gradients_match_finite_differences() {
    let w = net_worst(Role::Discriminator);
    assert!(w < TOL, "{w:e}");
}
