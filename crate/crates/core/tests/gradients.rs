//! Finite-difference checks of every autodiff op and every adapter
//! parameter, in f64.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const OP_TOL: f64 = 1e-6;
const ADAPTER_TOL: f64 = 1e-4;

#[test]
fn every_op_matches_central_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (op, err) in common::op_errors(&mut rng) {
            assert!(err < OP_TOL, "seed {seed}: {op} rel err {err:e}");
        }
    }
}

#[test]
fn every_adapter_parameter_matches_central_differences() {
    for seed in 0..SEEDS {
        let errors = common::adapter_errors(seed);
        // scale, the type embedding (odd seeds) and the input all included
        assert!(errors.iter().any(|(p, _)| p == "scale"));
        for (path, err) in errors {
            assert!(err < ADAPTER_TOL, "seed {seed}: {path} rel err {err:e}");
        }
    }
}

#[test]
fn adapters_inside_the_encoder_match_central_differences() {
    for seed in 0..SEEDS {
        for (path, err) in common::stacked_errors(seed) {
            assert!(err < ADAPTER_TOL, "seed {seed}: {path} rel err {err:e}");
        }
    }
}
