//! Shared helpers for the integration suites.
#![allow(dead_code)]

use klda::gradients::gradient_check;
use klda::{ParamVector, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

/// Uniform entries with magnitude in `[lo, hi]` and random sign; keeps
/// kinked ops away from their kink.
pub fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

#[allow(unused_imports)]
pub use klda::gradients::relative_error;

/// Tape gradient against central differences.
pub fn gradient_error<F>(inputs: Vec<Tensor>, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    gradient_check(&ParamVector::new(inputs), |t, v| Ok(f(t, v))).expect("finite objective")
}

/// Reduces any node to a scalar through a fixed irregular weighting, so
/// every entry of the output contributes to the checked gradient.
pub fn weighted_sum(tape: &mut Tape, out: Var) -> Var {
    let (r, c) = tape.shape(out);
    let weights = (0..r * c).map(|k| (1.3 + 0.77 * k as f64).sin() + 0.1).collect();
    let w = tape.constant(Tensor::from_vec(r, c, weights));
    let p = tape.mul(out, w);
    tape.sum(p)
}
