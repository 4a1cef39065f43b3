//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use ddm_core::metrics::GaussianSummary;
use ddm_core::nn::{self, NetParams, VelocitySample};
use ddm_core::rng;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn summary(mean: Vec<f64>, cov: Array2<f64>) -> GaussianSummary {
    GaussianSummary {
        mean: Array1::from(mean),
        cov,
        n: 1000,
    }
}

/// Gauss-Jordan with partial pivoting.
pub fn inverse(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut inv = Array2::eye(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs()))
            .unwrap();
        for k in 0..n {
            m.swap([col, k], [pivot, k]);
            inv.swap([col, k], [pivot, k]);
        }
        let p = m[[col, col]];
        for k in 0..n {
            m[[col, k]] /= p;
            inv[[col, k]] /= p;
        }
        for row in 0..n {
            if row != col {
                let f = m[[row, col]];
                for k in 0..n {
                    m[[row, k]] -= f * m[[col, k]];
                    inv[[row, k]] -= f * inv[[col, k]];
                }
            }
        }
    }
    inv
}

/// Principal square root by the Denman–Beavers iteration.
pub fn denman_beavers(a: &Array2<f64>) -> Array2<f64> {
    let mut y = a.clone();
    let mut z = Array2::eye(a.nrows());
    for _ in 0..100 {
        let y_next = (&y + &inverse(&z)) * 0.5;
        let z_next = (&z + &inverse(&y)) * 0.5;
        let delta = (&y_next - &y).iter().map(|v| v.abs()).fold(0.0, f64::max);
        y = y_next;
        z = z_next;
        if delta < 1e-15 {
            break;
        }
    }
    y
}

/// Fréchet distance through the square root of the non-symmetric Σ₁Σ₂.
pub fn frechet_oracle(p: &GaussianSummary, q: &GaussianSummary) -> f64 {
    let dm: f64 = (&p.mean - &q.mean).iter().map(|v| v * v).sum();
    let cross = denman_beavers(&p.cov.dot(&q.cov));
    dm + p.cov.diag().sum() + q.cov.diag().sum() - 2.0 * cross.diag().sum()
}

/// `B Bᵀ + 0.1 I` from the first d² entries.
pub fn spd(entries: &[f64], d: usize) -> Array2<f64> {
    let b = Array2::from_shape_vec((d, d), entries[..d * d].to_vec()).unwrap();
    b.dot(&b.t()) + Array2::<f64>::eye(d) * 0.1
}

pub fn random_batch(net: &NetParams, cond_dim: usize, n: usize, seed: u64) -> Vec<VelocitySample> {
    let mut r = rng::stream(seed, 99);
    let d = net.output_width();
    (0..n)
        .map(|_| VelocitySample {
            x_t: (0..d).map(|_| r.sample(StandardNormal)).collect(),
            t: r.random(),
            cond: (0..cond_dim).map(|_| r.sample(StandardNormal)).collect(),
            target: (0..d).map(|_| r.sample(StandardNormal)).collect(),
        })
        .collect()
}

/// Relative error with a floor so that near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error between backprop and central differences over
/// `samples` randomly chosen parameters.
pub fn worst_gradient_error(widths: &[usize], cond_dim: usize, samples: usize, seed: u64) -> f64 {
    let net = nn::init_params(widths, seed).unwrap();
    let batch = random_batch(&net, cond_dim, 8, seed);
    let loss = |n: &NetParams| nn::loss_and_gradients(n, &batch).unwrap().0;
    let (_, grads) = nn::loss_and_gradients(&net, &batch).unwrap();
    let mut r = rng::stream(seed, 100);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let idx = r.random_range(0..net.param_count());
        let mut plus = net.clone();
        plus.set_param(idx, net.param(idx) + h);
        let mut minus = net.clone();
        minus.set_param(idx, net.param(idx) - h);
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        worst = worst.max(rel_err(grads.param(idx), numeric));
    }
    worst
}
