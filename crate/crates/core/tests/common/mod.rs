//! Analytic oracles shared by the engine tests and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steexlab_core::engine::{expand_freedom, objective, optimize, LogisticToy, SemanticPipeline};
use steexlab_core::models::{Backbone, BackboneArch, Generator, GeneratorArch, Visibility};
use steexlab_core::synth::PixelRect;
use steexlab_core::types::{OptimizerConfig, SemanticMask};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// -ln σ(w·z + b) + λ|z - z0|² and its gradient, written out by hand.
pub fn toy_closed_form(w: &[f64], b: f64, lambda: f64, z: &[f64], z0: &[f64]) -> (f64, Vec<f64>) {
    let s: f64 = w.iter().zip(z).map(|(a, c)| a * c).sum::<f64>() + b;
    let dist: f64 = z.iter().zip(z0).map(|(a, c)| (a - c) * (a - c)).sum();
    let value = (1.0 + (-s).exp()).ln() + lambda * dist;
    let grad = (0..z.len()).map(|i| -(1.0 - sigmoid(s)) * w[i] + 2.0 * lambda * (z[i] - z0[i])).collect();
    (value, grad)
}

/// Largest deviation of the engine's toy objective and gradient from the
/// closed form over a few points.
pub fn toy_closed_form_error() -> f64 {
    let toy = LogisticToy { w: vec![1.5, -0.7], b: -0.4 };
    let z0 = [0.3, 0.8];
    let mut worst = 0.0f64;
    for z in [[0.3, 0.8], [1.0, -2.0], [-0.5, 0.25]] {
        let obj = objective(&toy, &z, &z0, &[true, true], 2, 0.3);
        let (value, grad) = toy_closed_form(&toy.w, toy.b, 0.3, &z, &z0);
        worst = worst.max((obj.total - value).abs());
        for (a, b) in obj.grad.iter().zip(&grad) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

pub struct ToyComparison {
    pub code_error: f64,
    pub objective_error: f64,
    pub oracle_grad_norm: f64,
}

/// Engine optimum against plain gradient descent run to convergence on
/// the closed form.
pub fn toy_optimum_comparison() -> ToyComparison {
    let toy = LogisticToy { w: vec![2.0, -1.0], b: -1.5 };
    let z0 = [0.2, 0.4];
    let lambda = 0.3;
    let mut z = z0.to_vec();
    for _ in 0..200_000 {
        let (_, g) = toy_closed_form(&toy.w, toy.b, lambda, &z, &z0);
        z.iter_mut().zip(&g).for_each(|(v, d)| *v -= 0.05 * d);
    }
    let (oracle_value, oracle_grad) = toy_closed_form(&toy.w, toy.b, lambda, &z, &z0);
    let cfg = OptimizerConfig { lambda, learning_rate: 0.01, num_steps: 20_000, seed: 0 };
    let run = optimize(&toy, &z0, &[true, true], 2, &cfg).expect("toy optimization is finite");
    ToyComparison {
        code_error: run.codes.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
        objective_error: (run.last.total - oracle_value).abs(),
        oracle_grad_norm: oracle_grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
    }
}

pub struct GradientCheck {
    /// Relative error of every probe, run-major.
    pub relative_errors: Vec<f64>,
    /// Whether every frozen coordinate had an exactly zero gradient.
    pub frozen_exact: bool,
}

fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize, n: usize, classes: &[u8]) -> SemanticMask {
    let labels = (0..h * w).map(|_| classes[r.random_range(0..classes.len())]).collect();
    SemanticMask::new(h, w, n, labels).expect("labels are in range")
}

/// Central finite differences of the full objective along random
/// directions, in double precision on reduced networks: 5 runs of 10
/// probes, alternating full and partial classifier visibility.
pub fn objective_gradient_check() -> GradientCheck {
    const H: f64 = 1e-5;
    let (n, d) = (4, 3);
    let mut out = GradientCheck { relative_errors: Vec::new(), frozen_exact: true };
    for run in 0..5u64 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + run);
        let g: Generator<f64> = Generator::new(n, d, GeneratorArch { width: 5 }, run);
        let vis = if run % 2 == 0 {
            Visibility::full()
        } else {
            Visibility::region("part", PixelRect { y0: 0, x0: 0, y1: 5, x1: 8 })
        };
        let b: Backbone<f64> = Backbone::new(BackboneArch { widths: vec![4, 4, 4, 4] }, 2, vis, 50 + run);
        let mask = random_mask(&mut r, 8, 8, n, &[1, 2, 4]);
        let pipe = SemanticPipeline::new(&g, &b, &mask).expect("mask matches generator");
        let class_free = [true, run % 2 == 0, false, true];
        let free = expand_freedom(&class_free, d);
        let counter = 1 + run as usize % 2;
        let z0: Vec<f64> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let z: Vec<f64> = z0.iter().map(|v| v + r.random_range(-0.3..0.3)).collect();
        let obj = objective(&pipe, &z, &z0, &free, counter, 0.3);
        out.frozen_exact &= obj.grad.iter().zip(&free).all(|(g, &f)| f || *g == 0.0);
        for _ in 0..10 {
            let v: Vec<f64> = free.iter().map(|&f| if f { r.random_range(-1.0..1.0) } else { 0.0 }).collect();
            let at = |eps: f64| {
                let zz: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a + eps * b).collect();
                objective(&pipe, &zz, &z0, &free, counter, 0.3).total
            };
            let fd = (at(H) - at(-H)) / (2.0 * H);
            let an: f64 = obj.grad.iter().zip(&v).map(|(a, b)| a * b).sum();
            out.relative_errors.push((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
        }
    }
    out
}
