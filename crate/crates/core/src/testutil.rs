//! Shared helpers for unit tests: seeded random fills and a central
//! finite-difference gradient check. Compiled only for `cargo test`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor};

pub fn randu(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Build `f` over fresh parameter values and compare analytic parameter
/// gradients against central finite differences (h = 1e-5).
pub fn gradcheck<F>(shapes: &[(usize, usize)], seed: u64, f: F)
where
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Tensor<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape: Tape<f64> = Tape::new();
    let params: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|&(r, c)| tape.param(r, c, randu(&mut rng, r * c)).unwrap())
        .collect();
    gradcheck_params(&tape, &params, |t| f(t, &params));
}

/// Same check for pre-built parameters (e.g. a module constructed on `tape`).
/// `f` must rebuild the loss from scratch on every call.
pub fn gradcheck_params<F>(tape: &Tape<f64>, params: &[Tensor<f64>], f: F)
where
    F: Fn(&Tape<f64>) -> Tensor<f64>,
{
    tape.restart();
    tape.zero_grad();
    let loss = f(tape);
    tape.backward(&loss).unwrap();
    let grads: Vec<Vec<f64>> = params.iter().map(|p| p.grad()).collect();

    let h = 1e-5;
    for (pi, p) in params.iter().enumerate() {
        let base = p.value();
        for e in 0..base.len() {
            let mut bumped = base.clone();
            bumped[e] = base[e] + h;
            p.set_value(&bumped).unwrap();
            tape.restart();
            let up = f(tape).scalar().unwrap();

            bumped[e] = base[e] - h;
            p.set_value(&bumped).unwrap();
            tape.restart();
            let down = f(tape).scalar().unwrap();

            p.set_value(&base).unwrap();
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[pi][e];
            let tol = 1e-7 + 1e-4 * analytic.abs().max(numeric.abs());
            assert!(
                (analytic - numeric).abs() <= tol,
                "param {pi} elem {e}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }
}
