#![allow(dead_code)]

use metadapt::autodiff::{grad, no_grad};
use metadapt::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Vec<f64> {
    (0..shape.iter().product::<usize>())
        .map(|_| r.random_range(lo..hi))
        .collect()
}

pub fn param(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::param(data, shape).unwrap()
}

/// `|a − n| / max(|a|, |n|)`, zero when both vanish.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Largest relative error between the analytic gradient of `f` and
/// central differences with step `H`, over every element of every input.
pub fn max_fd_error(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> Tensor) -> f64 {
    max_fd_error_above(inputs, f, 0.0)
}

/// As [`max_fd_error`], ignoring elements whose absolute mismatch is below
/// `floor` (the rounding noise of differencing a large loss).
pub fn max_fd_error_above(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> Tensor, floor: f64) -> f64 {
    let loss = f(inputs);
    let analytic = grad(&loss, inputs).unwrap();
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        for e in 0..x.numel() {
            let eval = |delta: f64| {
                no_grad(|| {
                    let moved: Vec<Tensor> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut v = t.to_vec();
                            if j == i {
                                v[e] += delta;
                            }
                            Tensor::new(v, t.shape()).unwrap()
                        })
                        .collect();
                    f(&moved).item()
                })
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            let a = analytic[i].data()[e];
            if (a - numeric).abs() >= floor {
                worst = worst.max(rel_err(a, numeric));
            }
        }
    }
    worst
}

/// Reduces any tensor to a scalar through fixed random weights, so every
/// output element carries a distinct sensitivity.
pub fn weighted_sum(t: &Tensor, seed: u64) -> Tensor {
    let w = Tensor::new(uniform(&mut rng(seed), t.shape(), 0.5, 1.5), t.shape()).unwrap();
    t.mul(&w).unwrap().sum()
}

pub fn verdict(name: &str, ok: bool, detail: impl std::fmt::Display) {
    // leading newline: libtest prints "test name ... " without one when run serially
    println!("\n{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
}
