#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqrec::tensor::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// |a - b| / max(|a|, |b|, 1e-6)
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences (h = 1e-5) against tape gradients for every entry of
/// every input. `f` builds a scalar on a fresh tape from leaves of `inputs`.
/// Returns the worst relative error.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&Tape<f64>, &[Var]) -> Var,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let root = f(&tape, &vars);
    tape.backward(root).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let root = f(&tape, &vars);
        tape.item(root)
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[k].data()[j], numeric));
        }
    }
    worst
}

/// Reduces any tensor to a scalar with fixed pseudo-random weights, so the
/// upstream gradient is not uniform.
pub fn weighted_sum(tape: &Tape<f64>, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x);
    let mut r = rng(seed);
    let w: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| r.gen_range(-1.0..1.0))
        .collect();
    let w = tape.constant(Tensor::new(shape, w).unwrap());
    let prod = tape.mul(x, w).unwrap();
    tape.sum(prod)
}
