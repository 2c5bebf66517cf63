#![allow(dead_code)]

use convllava_core::params::normal;
use convllava_core::verify::relative_error;
use convllava_core::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-5;
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    normal(rng, shape, 1.0)
}

/// Reduce a graph output to a scalar with a fixed random projection, so every
/// output element contributes with a distinct weight.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    if shape.is_empty() {
        return Ok(out);
    }
    let probe = g.constant(normal(&mut rng(seed ^ 0xabcdef), &shape, 1.0));
    let p = g.mul(out, probe)?;
    Ok(g.sum(p))
}

/// Largest relative error between tape gradients and central differences of
/// `f` over up to `max_coords` random coordinates per input.
pub fn fd_max_rel_err(
    inputs: &[Tensor<f64>],
    seed: u64,
    max_coords: usize,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.variable(x.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        let s = project(&mut g, out, seed).unwrap();
        g.value(s).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let s = project(&mut g, out, seed).unwrap();
    let grads = g.backward(s).unwrap();

    let mut pick = rng(seed.wrapping_mul(31) + 7);
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).expect("input on tape").clone();
        let coords: Vec<usize> = if x.numel() <= max_coords {
            (0..x.numel()).collect()
        } else {
            (0..max_coords).map(|_| pick.random_range(0..x.numel())).collect()
        };
        for j in coords {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric, FD_FLOOR));
        }
    }
    worst
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "{what}[{i}]: {x} vs {y} (tol {tol})");
    }
}
