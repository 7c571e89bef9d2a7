#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use st_tree_core::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between tape gradients and central differences
/// (h = 1e-5) of the scalar built by `f`, over every input entry.
pub fn fd_max_err(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let run = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
        let out = f(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = run(inputs);
    let grads = tape.gradients(out).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        for e in 0..t.numel() {
            let mut up = inputs.to_vec();
            up[k].data_mut()[e] += h;
            let mut down = inputs.to_vec();
            down[k].data_mut()[e] -= h;
            let (tu, _, ou) = run(&up);
            let (td, _, od) = run(&down);
            let numeric = (tu.value(ou).item() - td.value(od).item()) / (2.0 * h);
            worst = worst.max(rel_err(analytic[e], numeric));
        }
    }
    worst
}

/// Weighted sum with fixed pseudo-random weights, so every output entry
/// contributes a distinct gradient.
pub fn probe_sum(tape: &mut Tape, v: Var) -> Var {
    let shape = tape.shape(v).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i * 7919 % 13) as f64 - 6.0) / 5.0);
    let w = tape.constant(w);
    let p = tape.mul(v, w).unwrap();
    tape.sum(p)
}
