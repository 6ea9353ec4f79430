//! Finite-difference gradient checking shared by the integration tests.
#![allow(dead_code)]

pub mod grad_cases;

use radiance_core::autograd::{Tape, Tensor, Var};
use radiance_oracles::{central_difference, relative_error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
/// Gradients below this magnitude are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in `[lo, hi]` with random signs, away from zero.
pub fn signed_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    let mut t = random_tensor(rng, shape, lo, hi);
    for v in &mut t.data {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Scalar objective: the output itself when scalar, otherwise a fixed random
/// projection so every output element carries weight.
fn objective(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out);
    if shape.iter().product::<usize>() == 1 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(random_tensor(&mut rng, shape, -1.0, 1.0));
    let p = tape.mul(out, r).unwrap();
    tape.sum(p).unwrap()
}

/// Worst relative error between reverse-mode and central-difference
/// gradients over up to `per_input` coordinates of each selected input.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], check: &[usize], per_input: usize, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let loss = objective(&mut tape, out, 99);
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let loss = objective(&mut tape, out, 99);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &k in check {
        let n = inputs[k].numel();
        let idx: Vec<usize> = if n <= per_input {
            (0..n).collect()
        } else {
            (0..per_input).map(|_| rng.random_range(0..n)).collect()
        };
        let analytic = grads.wrt(vars[k]);
        let numeric = central_difference(
            |x| {
                let mut ins = inputs.to_vec();
                ins[k].data.copy_from_slice(x);
                eval(&ins)
            },
            &inputs[k].data,
            &idx,
            FD_STEP,
        );
        for (j, &i) in idx.iter().enumerate() {
            worst = worst.max(relative_error(analytic.data[i], numeric[j], FD_FLOOR));
        }
    }
    worst
}
