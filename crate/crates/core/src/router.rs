//! The router: a small classifier over `(noisy clip, timestep, pooled
//! condition)` trained to recover the source cluster, and the top-k routing
//! weights derived from its logits.
//!
//! The router never sees the full condition. Its input width is
//! `F·D + T_w + P`, so handing it a `C`-wide condition is a shape error.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, GenParams, Item};
use crate::error::{Error, Result};
use crate::flow::interpolate_path;
use crate::nn::{self, AdamConfig, NetParams, OptState, TIME_FEATURES};
use crate::rng::{self, Stream};

pub const ROUTER_HIDDEN: [usize; 2] = [32, 32];
pub const DEFAULT_TOP_K: usize = 1;

pub fn router_widths(params: &GenParams, hidden: &[usize]) -> Vec<usize> {
    let mut w = vec![params.clip_len() + TIME_FEATURES + params.pooled_dim];
    w.extend_from_slice(hidden);
    w.push(params.clusters);
    w
}

/// Convex routing weights with an explicit active set.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingWeights {
    weights: Vec<f64>,
    active: Vec<usize>,
    top_k: usize,
}

impl RoutingWeights {
    /// All weight on expert `k` of `n`.
    pub fn one_hot(k: usize, n: usize) -> Result<Self> {
        if k >= n {
            return Err(Error::invalid(format!("expert index {k} >= {n} experts")));
        }
        let mut weights = vec![0.0; n];
        weights[k] = 1.0;
        Ok(Self {
            weights,
            active: vec![k],
            top_k: 1,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Selected experts, in descending weight order.
    pub fn active_set(&self) -> &[usize] {
        &self.active
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }
}

fn check_router_input(net: &NetParams, x_t: &[f64], pooled: &[f64]) -> Result<()> {
    let cond_width = net.input_width().checked_sub(x_t.len() + TIME_FEATURES);
    if cond_width != Some(pooled.len()) {
        return Err(Error::shape(
            "router condition (pooled only)",
            cond_width.map_or_else(|| "n/a".to_string(), |w| w.to_string()),
            pooled.len(),
        ));
    }
    Ok(())
}

pub fn router_logits(net: &NetParams, x_t: &[f64], t: f64, pooled: &[f64]) -> Result<Vec<f64>> {
    check_router_input(net, x_t, pooled)?;
    let mut row = vec![0.0; net.input_width()];
    nn::fill_input(&mut row, x_t, t, pooled)?;
    nn::forward_row(net, &row)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Softmax, keep the `top_k` largest, renormalize. Ties prefer lower indices.
pub fn route_weights(logits: &[f64], top_k: usize) -> Result<RoutingWeights> {
    let n = logits.len();
    if top_k == 0 || top_k > n {
        return Err(Error::invalid(format!(
            "top_k {top_k} outside 1..={n}"
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("router logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    let probs: Vec<f64> = exp.iter().map(|e| e / z).collect();

    let mut order: Vec<usize> = (0..n).collect();
    // Rank by logits, not probabilities, which can underflow to equal zeros.
    // Stable sort keeps ascending index among equal logits.
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    let active: Vec<usize> = order[..top_k].to_vec();
    let kept: f64 = active.iter().map(|&i| probs[i]).sum();
    let mut weights = vec![0.0; n];
    for &i in &active {
        weights[i] = probs[i] / kept;
    }
    Ok(RoutingWeights {
        weights,
        active,
        top_k,
    })
}

pub fn predict_cluster(net: &NetParams, x_t: &[f64], t: f64, pooled: &[f64]) -> Result<usize> {
    Ok(argmax(&router_logits(net, x_t, t, pooled)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Held-out accuracy is recorded every this many steps (and at the end).
    pub eval_every: usize,
    /// Every `holdout_stride`-th item is held out from training.
    pub holdout_stride: usize,
    /// Control run: train on labels permuted across items.
    pub shuffle_labels: bool,
}

impl Default for RouterTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 64,
            seed: 0,
            adam: AdamConfig::default(),
            eval_every: 250,
            holdout_stride: 5,
            shuffle_labels: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RouterOutcome {
    pub params: NetParams,
    pub opt: OptState,
    pub losses: Vec<f64>,
    /// `(step, held-out accuracy)` pairs.
    pub accuracy_trace: Vec<(usize, f64)>,
    /// Items held out from training, evaluated with their true labels.
    pub heldout: Vec<Item>,
}

/// One noisy router example: `(x_t, t, pooled)` with its source label.
fn noisy_input(item: &Item, t: f64, rng: &mut Stream, row: &mut [f64]) -> Result<()> {
    let x0 = item.clip.as_slice();
    let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let x_t = interpolate_path(x0, &eps, t)?;
    nn::fill_input(row, &x_t, t, &item.cond.pooled)
}

/// Held-out accuracy at uniformly drawn timesteps, with a fixed noise stream.
pub fn heldout_accuracy(net: &NetParams, items: &[Item], seed: u64) -> Result<f64> {
    let bins = accuracy_by_t_bin(net, items, 1, 1, seed)?;
    Ok(bins[0].accuracy)
}

pub fn train_router(dataset: &Dataset, config: &RouterTrainConfig) -> Result<RouterOutcome> {
    let k = dataset.params.clusters;
    if dataset.cluster_counts.contains(&0) {
        return Err(Error::invalid("router training data must cover every cluster"));
    }
    if config.batch_size == 0 || config.holdout_stride < 2 || config.eval_every == 0 {
        return Err(Error::invalid(format!("router config {config:?}")));
    }
    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for (i, it) in dataset.items.iter().enumerate() {
        if i % config.holdout_stride == config.holdout_stride - 1 {
            heldout.push(it.clone());
        } else {
            train.push(it.clone());
        }
    }
    let mut labels: Vec<usize> = train.iter().map(|it| it.cond.cluster).collect();
    if config.shuffle_labels {
        labels.shuffle(&mut rng::stream(config.seed, rng::tags::LABEL_SHUFFLE));
    }

    let widths = router_widths(&dataset.params, &ROUTER_HIDDEN);
    let mut params = nn::init_params(&widths, config.seed)?;
    let mut opt = OptState::new(&params, config.adam);
    let mut rng = rng::stream(config.seed, rng::tags::ROUTER_BATCHES);
    let mut losses = Vec::with_capacity(config.steps);
    let mut trace = Vec::new();
    let mut inputs = Array2::zeros((config.batch_size, widths[0]));
    let mut batch_labels = vec![0usize; config.batch_size];
    for step in 0..config.steps {
        for (b, label) in batch_labels.iter_mut().enumerate() {
            let i = rng.random_range(0..train.len());
            let t: f64 = rng.random_range(0.0..=1.0);
            let row = inputs.row_mut(b).into_slice().expect("standard layout");
            noisy_input(&train[i], t, &mut rng, row)?;
            *label = labels[i];
        }
        let (loss, grads) = nn::cross_entropy_loss_and_gradients(&params, inputs.view(), &batch_labels)
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Divergence { step, loss: f64::NAN },
                other => other,
            })?;
        (params, opt) = nn::adam_update(params, &grads, opt)
            .map_err(|_| Error::Divergence { step, loss })?;
        losses.push(loss);
        if (step + 1) % config.eval_every == 0 || step + 1 == config.steps {
            trace.push((step + 1, heldout_accuracy(&params, &heldout, config.seed)?));
        }
    }
    debug_assert_eq!(params.output_width(), k);
    Ok(RouterOutcome {
        params,
        opt,
        losses,
        accuracy_trace: trace,
        heldout,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinAccuracy {
    pub t_lo: f64,
    pub t_hi: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Accuracy per timestep bin: each item is evaluated `draws` times per bin at
/// `t` uniform within the bin.
pub fn accuracy_by_t_bin(
    net: &NetParams,
    items: &[Item],
    bins: usize,
    draws: usize,
    seed: u64,
) -> Result<Vec<BinAccuracy>> {
    if items.is_empty() || bins == 0 || draws == 0 {
        return Err(Error::invalid("accuracy evaluation needs items, bins and draws"));
    }
    let mut rng = rng::stream(seed, rng::tags::ROUTER_EVAL);
    let mut row = vec![0.0; net.input_width()];
    let mut out = Vec::with_capacity(bins);
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let mut correct = 0usize;
        for item in items {
            for _ in 0..draws {
                let t = rng.random_range(lo..=hi);
                noisy_input(item, t, &mut rng, &mut row)?;
                let logits = nn::forward_row(net, &row)?;
                correct += usize::from(argmax(&logits) == item.cond.cluster);
            }
        }
        let count = items.len() * draws;
        out.push(BinAccuracy {
            t_lo: lo,
            t_hi: hi,
            accuracy: correct as f64 / count as f64,
            count,
        });
    }
    Ok(out)
}

/// Accuracy of the router at exactly `t` (one noise draw per item per repeat).
pub fn accuracy_at(net: &NetParams, items: &[Item], t: f64, draws: usize, seed: u64) -> Result<f64> {
    let mut rng = rng::stream(seed, rng::tags::ROUTER_EVAL);
    let mut row = vec![0.0; net.input_width()];
    let mut correct = 0usize;
    for item in items {
        for _ in 0..draws {
            noisy_input(item, t, &mut rng, &mut row)?;
            correct += usize::from(argmax(&nn::forward_row(net, &row)?) == item.cond.cluster);
        }
    }
    Ok(correct as f64 / (items.len() * draws).max(1) as f64)
}

/// `t_bin,accuracy` CSV, one row per bin labelled by its midpoint.
pub fn accuracy_csv(bins: &[BinAccuracy]) -> String {
    let mut s = String::from("t_bin,accuracy\n");
    for b in bins {
        s.push_str(&format!("{},{}\n", 0.5 * (b.t_lo + b.t_hi), b.accuracy));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn equal_logits_spread_evenly() {
        let w = route_weights(&[0.4, 0.4, 0.4], 3).unwrap();
        assert!(close(w.weights(), &[1.0 / 3.0; 3], 1e-15));
        assert_eq!(w.active_set(), &[0, 1, 2]);
    }

    #[test]
    fn top1_is_one_hot_at_argmax() {
        let w = route_weights(&[0.1, 2.0, -0.3], 1).unwrap();
        assert_eq!(w.weights(), &[0.0, 1.0, 0.0]);
        let tie = route_weights(&[1.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(tie.active_set(), &[0]);
    }

    #[test]
    fn truncated_softmax_renormalizes() {
        let w = route_weights(&[2f64.ln(), 0.0, -1000.0], 2).unwrap();
        assert!(close(w.weights(), &[2.0 / 3.0, 1.0 / 3.0, 0.0], 1e-15));
        assert_eq!(w.weights()[2], 0.0);
    }

    #[test]
    fn route_weights_rejects_bad_input() {
        assert!(route_weights(&[0.0, 1.0], 0).is_err());
        assert!(route_weights(&[0.0, 1.0], 3).is_err());
        assert!(route_weights(&[0.0, f64::NAN], 1).is_err());
    }

    #[test]
    fn prediction_rules() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[100.1, 100.9, 100.3]), 1);
    }

    #[test]
    fn zero_router_routes_uniformly() {
        let p = GenParams::default();
        let net = NetParams::zeros(&router_widths(&p, &ROUTER_HIDDEN)).unwrap();
        let x = vec![0.3; p.clip_len()];
        let logits = router_logits(&net, &x, 0.5, &[0.0; 4]).unwrap();
        assert_eq!(logits, vec![0.0; 3]);
        let w = route_weights(&logits, 3).unwrap();
        assert!(close(w.weights(), &[1.0 / 3.0; 3], 1e-15));
        assert_eq!(logits, router_logits(&net, &x, 0.5, &[0.0; 4]).unwrap());
    }

    #[test]
    fn router_accepts_pooled_rejects_full() {
        let p = GenParams::default();
        let net = nn::init_params(&router_widths(&p, &ROUTER_HIDDEN), 1).unwrap();
        let x = vec![0.0; p.clip_len()];
        assert!(router_logits(&net, &x, 0.5, &vec![0.0; p.pooled_dim]).is_ok());
        let err = router_logits(&net, &x, 0.5, &vec![0.0; p.cond_dim]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
        assert!(predict_cluster(&net, &x, 0.5, &vec![0.0; p.cond_dim]).is_err());
    }
}
