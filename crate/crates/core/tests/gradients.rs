//! Reverse-mode gradients against central finite differences.

use ddm_core::datagen::GenParams;
use ddm_core::flow::{velocity_widths, EXPERT_HIDDEN};
use ddm_core::nn;
use ddm_core::rng;
use rand::Rng;
use rand_distr::StandardNormal;

mod common;
use common::{rel_err, worst_gradient_error};

fn check(widths: &[usize], cond_dim: usize, samples: usize, seed: u64) {
    let worst = worst_gradient_error(widths, cond_dim, samples, seed);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn default_expert_gradients_match_finite_differences() {
    let p = GenParams::default();
    check(&velocity_widths(&p, &EXPERT_HIDDEN), p.cond_dim, 150, 1);
}

#[test]
fn small_net_gradients_match_finite_differences() {
    // input 40 = 24 clip + 8 time + 8 cond
    check(&[40, 32, 32, 24], 8, 200, 2);
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    let net = nn::init_params(&[10, 16, 3], 5).unwrap();
    let mut r = rng::stream(5, 1);
    let inputs = ndarray::Array2::from_shape_fn((12, 10), |_| r.sample::<f64, _>(StandardNormal));
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let (_, grads) = nn::cross_entropy_loss_and_gradients(&net, inputs.view(), &labels).unwrap();
    let h = 1e-5;
    for idx in 0..net.param_count() {
        let mut plus = net.clone();
        plus.set_param(idx, net.param(idx) + h);
        let mut minus = net.clone();
        minus.set_param(idx, net.param(idx) - h);
        let lp = nn::cross_entropy_loss_and_gradients(&plus, inputs.view(), &labels).unwrap().0;
        let lm = nn::cross_entropy_loss_and_gradients(&minus, inputs.view(), &labels).unwrap().0;
        let numeric = (lp - lm) / (2.0 * h);
        assert!(rel_err(grads.param(idx), numeric) < 1e-4, "param {idx}");
    }
}
