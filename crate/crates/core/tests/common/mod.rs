#![allow(dead_code)]

use dsainet::autodiff::{Tape, Var};
use dsainet::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so coordinates whose true
/// gradient is numerically zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::new(shape.to_vec(), rand_vec(shape.iter().product(), seed)).unwrap()
}

/// Reduces an op's output to a scalar with fixed random weights so every
/// output element contributes a distinct upstream gradient.
fn weighted_loss(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let w = rand_tensor(&tape.shape(out).to_vec(), seed ^ 0xabcdef);
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv).unwrap();
    tape.sum(prod)
}

fn loss_at<F>(inputs: &[Tensor], seed: u64, f: &F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let l = weighted_loss(&mut tape, out, seed);
    tape.data(l)[0]
}

/// Max relative error between analytic and central-difference gradients
/// over up to `per_input` coordinates of every input.
pub fn check_op<F>(inputs: &[Tensor], per_input: usize, seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars).unwrap();
    let l = weighted_loss(&mut tape, out, seed);
    tape.backward(l).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let g = tape.grad(*v).expect("input gradient").to_vec();
        let n = inputs[i].numel();
        let coords: Vec<usize> = if n <= per_input {
            (0..n).collect()
        } else {
            (0..per_input).map(|_| rng.gen_range(0..n)).collect()
        };
        for j in coords {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            minus[i].data_mut()[j] -= FD_STEP;
            let num = (loss_at(&plus, seed, &f) - loss_at(&minus, seed, &f)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g[j], num));
        }
    }
    worst
}
