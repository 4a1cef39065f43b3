//! Small tanh MLPs with hand-written reverse-mode gradients, Adam, and
//! checkpoint files. Used both for velocity fields (experts and the
//! monolithic baseline) and for router logits.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Header};
use crate::error::{Error, Result};
use crate::rng;

pub const CHECKPOINT_MAGIC: &str = "DDMLAB-CKPT";

/// Width of the sinusoidal timestep embedding.
pub const TIME_FEATURES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Parameters of a fully connected network with tanh hidden layers and a
/// linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    layers: Vec<Layer>,
}

/// Gradient record, shaped exactly like the parameters it belongs to.
pub type Gradients = NetParams;

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::invalid(format!(
            "a network needs at least 2 widths, got {widths:?}"
        )));
    }
    if widths.contains(&0) {
        return Err(Error::invalid(format!("zero layer width in {widths:?}")));
    }
    Ok(())
}

impl NetParams {
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        Ok(Self {
            layers: widths
                .windows(2)
                .map(|w| Layer {
                    weight: Array2::zeros((w[1], w[0])),
                    bias: Array1::zeros(w[1]),
                })
                .collect(),
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network without layers"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::shape("layer bias", l.weight.nrows(), l.bias.len()));
            }
            if i > 0 && layers[i - 1].weight.nrows() != l.weight.ncols() {
                return Err(Error::shape(
                    "layer composition",
                    layers[i - 1].weight.nrows(),
                    l.weight.ncols(),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].weight.ncols()];
        w.extend(self.layers.iter().map(|l| l.weight.nrows()));
        w
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// All parameters in checkpoint order: per layer, weight row-major then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn from_flat(widths: &[usize], flat: &[f64]) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        if flat.len() != net.param_count() {
            return Err(Error::shape("flat parameters", net.param_count(), flat.len()));
        }
        let mut it = flat.iter().copied();
        for l in &mut net.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|p| {
                *p = it.next().expect("length checked");
            });
        }
        Ok(net)
    }

    /// Parameter at flat index `idx` (same order as [`NetParams::flatten`]).
    pub fn param(&self, idx: usize) -> f64 {
        let (l, i, is_bias) = self.locate(idx);
        if is_bias {
            self.layers[l].bias[i]
        } else {
            self.layers[l].weight.as_slice().expect("standard layout")[i]
        }
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        let (l, i, is_bias) = self.locate(idx);
        if is_bias {
            self.layers[l].bias[i] = value;
        } else {
            self.layers[l].weight.as_slice_mut().expect("standard layout")[i] = value;
        }
    }

    fn locate(&self, mut idx: usize) -> (usize, usize, bool) {
        for (l, layer) in self.layers.iter().enumerate() {
            if idx < layer.weight.len() {
                return (l, idx, false);
            }
            idx -= layer.weight.len();
            if idx < layer.bias.len() {
                return (l, idx, true);
            }
            idx -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim())
    }
}

/// Uniform `±1/sqrt(fan_in)` weights, zero biases.
pub fn init_params(widths: &[usize], seed: u64) -> Result<NetParams> {
    let mut net = NetParams::zeros(widths)?;
    let mut rng = rng::stream(seed, rng::tags::INIT);
    for l in &mut net.layers {
        let bound = 1.0 / (l.weight.ncols() as f64).sqrt();
        l.weight
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-bound..=bound));
    }
    Ok(net)
}

/// `[sin(2π f_i t), cos(2π f_i t)]` pairs for `f_i = 2^i`, `i < width/2`.
pub fn time_features(t: f64, width: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; width];
    write_time_features(t, &mut out)?;
    Ok(out)
}

pub(crate) fn write_time_features(t: f64, out: &mut [f64]) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("timestep {t} outside [0, 1]")));
    }
    if !out.len().is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "time feature width {} is odd",
            out.len()
        )));
    }
    let mut freq = 1.0;
    for pair in out.chunks_exact_mut(2) {
        let (s, c) = (2.0 * PI * freq * t).sin_cos();
        pair[0] = s;
        pair[1] = c;
        freq *= 2.0;
    }
    Ok(())
}

/// Writes `[x ∥ time_features(t) ∥ cond]` into `row`.
pub(crate) fn fill_input(row: &mut [f64], x: &[f64], t: f64, cond: &[f64]) -> Result<()> {
    let expected = x.len() + TIME_FEATURES + cond.len();
    if row.len() != expected {
        return Err(Error::shape("network input", row.len(), expected));
    }
    row[..x.len()].copy_from_slice(x);
    write_time_features(t, &mut row[x.len()..x.len() + TIME_FEATURES])?;
    row[x.len() + TIME_FEATURES..].copy_from_slice(cond);
    Ok(())
}

/// Batched forward pass; returns the activations of every layer, input first.
fn forward_trace(net: &NetParams, input: ArrayView2<f64>) -> Vec<Array2<f64>> {
    let mut acts = Vec::with_capacity(net.layers.len() + 1);
    acts.push(input.to_owned());
    let last = net.layers.len() - 1;
    for (i, l) in net.layers.iter().enumerate() {
        let mut z = acts[i].dot(&l.weight.t());
        z += &l.bias;
        if i < last {
            z.mapv_inplace(f64::tanh);
        }
        acts.push(z);
    }
    acts
}

/// Batched forward pass over the rows of `input`.
pub fn forward(net: &NetParams, input: ArrayView2<f64>) -> Result<Array2<f64>> {
    if input.ncols() != net.input_width() {
        return Err(Error::shape("network input", net.input_width(), input.ncols()));
    }
    Ok(forward_trace(net, input).pop().expect("non-empty trace"))
}

/// Single-row forward pass without batching overhead.
pub fn forward_row(net: &NetParams, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != net.input_width() {
        return Err(Error::shape("network input", net.input_width(), input.len()));
    }
    let last = net.layers.len() - 1;
    let mut a = input.to_vec();
    for (i, l) in net.layers.iter().enumerate() {
        let mut z = l.bias.to_vec();
        for (o, zo) in z.iter_mut().enumerate() {
            let w = l.weight.row(o);
            let w = w.as_slice().expect("standard layout");
            *zo += w.iter().zip(&a).map(|(w, x)| w * x).sum::<f64>();
            if i < last {
                *zo = zo.tanh();
            }
        }
        a = z;
    }
    Ok(a)
}

/// Velocity prediction for one flattened clip state.
pub fn forward_velocity(net: &NetParams, x_t: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
    let width = x_t.len() + TIME_FEATURES + cond.len();
    if width != net.input_width() {
        return Err(Error::shape("velocity net input", net.input_width(), width));
    }
    if net.output_width() != x_t.len() {
        return Err(Error::shape("velocity net output", x_t.len(), net.output_width()));
    }
    let mut row = vec![0.0; width];
    fill_input(&mut row, x_t, t, cond)?;
    forward_row(net, &row)
}

/// Backpropagates `d_out` (gradient of the loss w.r.t. the network output)
/// through a recorded trace.
fn backward(net: &NetParams, acts: &[Array2<f64>], d_out: Array2<f64>) -> Gradients {
    let n = net.layers.len();
    let mut grads = Vec::with_capacity(n);
    let mut dz = d_out;
    for i in (0..n).rev() {
        let weight = dz.t().dot(&acts[i]);
        let bias = dz.sum_axis(Axis(0));
        if i > 0 {
            let mut da = dz.dot(&net.layers[i].weight);
            da.zip_mut_with(&acts[i], |g, &a| *g *= 1.0 - a * a);
            dz = da;
        }
        grads.push(Layer { weight, bias });
    }
    grads.reverse();
    NetParams { layers: grads }
}

/// One regression example for a velocity net.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocitySample {
    pub x_t: Vec<f64>,
    pub t: f64,
    pub cond: Vec<f64>,
    pub target: Vec<f64>,
}

/// Mean squared error over batch and coordinates, with exact gradients.
pub fn loss_and_gradients(net: &NetParams, batch: &[VelocitySample]) -> Result<(f64, Gradients)> {
    let first = batch
        .first()
        .ok_or_else(|| Error::invalid("empty training batch"))?;
    let width = first.x_t.len() + TIME_FEATURES + first.cond.len();
    let out = first.target.len();
    let mut inputs = Array2::zeros((batch.len(), width));
    let mut targets = Array2::zeros((batch.len(), out));
    for (i, s) in batch.iter().enumerate() {
        if s.target.len() != out {
            return Err(Error::shape("velocity target", out, s.target.len()));
        }
        let row = inputs.row_mut(i).into_slice().expect("standard layout");
        fill_input(row, &s.x_t, s.t, &s.cond)?;
        targets
            .row_mut(i)
            .as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(&s.target);
    }
    mse_loss_and_gradients(net, inputs.view(), targets.view())
}

/// Matrix form of [`loss_and_gradients`].
pub fn mse_loss_and_gradients(
    net: &NetParams,
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
) -> Result<(f64, Gradients)> {
    if inputs.nrows() == 0 {
        return Err(Error::invalid("empty training batch"));
    }
    if inputs.ncols() != net.input_width() {
        return Err(Error::shape("network input", net.input_width(), inputs.ncols()));
    }
    if targets.dim() != (inputs.nrows(), net.output_width()) {
        return Err(Error::shape(
            "regression targets",
            format!("{}x{}", inputs.nrows(), net.output_width()),
            format!("{}x{}", targets.nrows(), targets.ncols()),
        ));
    }
    let acts = forward_trace(net, inputs);
    let mut resid = acts[acts.len() - 1].clone();
    resid -= &targets;
    let count = resid.len() as f64;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / count;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    resid.mapv_inplace(|r| 2.0 * r / count);
    Ok((loss, backward(net, &acts, resid)))
}

/// Mean softmax cross-entropy of logits against integer labels.
pub fn cross_entropy_loss_and_gradients(
    net: &NetParams,
    inputs: ArrayView2<f64>,
    labels: &[usize],
) -> Result<(f64, Gradients)> {
    if inputs.nrows() == 0 {
        return Err(Error::invalid("empty training batch"));
    }
    if inputs.ncols() != net.input_width() {
        return Err(Error::shape("network input", net.input_width(), inputs.ncols()));
    }
    if labels.len() != inputs.nrows() {
        return Err(Error::shape("labels", inputs.nrows(), labels.len()));
    }
    let classes = net.output_width();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} >= {classes} classes")));
    }
    let acts = forward_trace(net, inputs);
    let mut d = acts[acts.len() - 1].clone();
    let n = labels.len() as f64;
    let mut loss = 0.0;
    for (mut row, &label) in d.rows_mut().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        loss += z.ln() - (row[label].ln());
        row.mapv_inplace(|v| v / z / n);
        row[label] -= 1.0 / n;
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok((loss, backward(net, &acts, d)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.lr.is_finite()
            && self.eps.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("Adam hyperparameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub first_moment: NetParams,
    pub second_moment: NetParams,
    pub step: u64,
    pub hyper: AdamConfig,
}

impl OptState {
    pub fn new(net: &NetParams, hyper: AdamConfig) -> Self {
        let widths = net.widths();
        let zeros = NetParams::zeros(&widths).expect("widths of a valid net");
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            hyper,
        }
    }
}

/// Bias-corrected Adam step. Consumes and returns the state so callers can
/// treat parameters as values.
pub fn adam_update(
    mut net: NetParams,
    grads: &Gradients,
    mut opt: OptState,
) -> Result<(NetParams, OptState)> {
    opt.hyper.validate()?;
    if !net.same_shape(grads)
        || !net.same_shape(&opt.first_moment)
        || !net.same_shape(&opt.second_moment)
    {
        return Err(Error::shape(
            "adam update",
            format!("{:?}", net.widths()),
            format!("{:?}", grads.widths()),
        ));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients"));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = opt.hyper;
    opt.step += 1;
    let c1 = 1.0 - beta1.powf(opt.step as f64);
    let c2 = 1.0 - beta2.powf(opt.step as f64);
    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for (((l, g), m), v) in net
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut opt.first_moment.layers)
        .zip(&mut opt.second_moment.layers)
    {
        ndarray::Zip::from(&mut l.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .and(&g.weight)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        ndarray::Zip::from(&mut l.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .and(&g.bias)
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
    if !net.is_finite() {
        return Err(Error::NonFinite("parameters after update"));
    }
    Ok((net, opt))
}

pub fn checkpoint_bytes(net: &NetParams, opt: &OptState, role: &str) -> Vec<u8> {
    let mut h = Header::new(CHECKPOINT_MAGIC);
    h.set("role", role)
        .set("widths", codec::join_list(&net.widths()))
        .set("step", opt.step)
        .set("lr", opt.hyper.lr)
        .set("beta1", opt.hyper.beta1)
        .set("beta2", opt.hyper.beta2)
        .set("eps", opt.hyper.eps);
    let mut blob = net.flatten();
    blob.extend(opt.first_moment.flatten());
    blob.extend(opt.second_moment.flatten());
    codec::encode(&h, &blob)
}

/// Decodes a checkpoint. With `expected_widths`, a file declaring different
/// widths is a shape error.
pub fn checkpoint_from_bytes(
    bytes: &[u8],
    expected_widths: Option<&[usize]>,
) -> Result<(NetParams, OptState, String)> {
    let (h, blob) = codec::decode(bytes, CHECKPOINT_MAGIC)?;
    let widths: Vec<usize> = h.parse_list("widths")?;
    check_widths(&widths)?;
    if let Some(expected) = expected_widths {
        if expected != widths.as_slice() {
            return Err(Error::shape(
                "checkpoint widths",
                format!("{expected:?}"),
                format!("{widths:?}"),
            ));
        }
    }
    let count = widths
        .windows(2)
        .try_fold(0usize, |acc, w| {
            w[0].checked_mul(w[1])
                .and_then(|p| p.checked_add(w[1]))
                .and_then(|p| acc.checked_add(p))
        })
        .ok_or_else(|| Error::invalid("checkpoint widths overflow"))?;
    if Some(blob.len()) != count.checked_mul(3) {
        return Err(Error::shape("checkpoint blob", count.saturating_mul(3), blob.len()));
    }
    let hyper = AdamConfig {
        lr: h.parse("lr")?,
        beta1: h.parse("beta1")?,
        beta2: h.parse("beta2")?,
        eps: h.parse("eps")?,
    };
    let net = NetParams::from_flat(&widths, &blob[..count])?;
    let opt = OptState {
        first_moment: NetParams::from_flat(&widths, &blob[count..2 * count])?,
        second_moment: NetParams::from_flat(&widths, &blob[2 * count..])?,
        step: h.parse("step")?,
        hyper,
    };
    Ok((net, opt, h.get("role")?.to_string()))
}

pub fn save_checkpoint(path: &Path, net: &NetParams, opt: &OptState, role: &str) -> Result<()> {
    fs::write(path, checkpoint_bytes(net, opt, role))?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
    expected_widths: Option<&[usize]>,
) -> Result<(NetParams, OptState, String)> {
    checkpoint_from_bytes(&fs::read(path)?, expected_widths)
}

/// Saves and reloads, checking the declared widths on the way back.
pub fn checkpoint_roundtrip(
    net: &NetParams,
    opt: &OptState,
    path: &Path,
) -> Result<(NetParams, OptState)> {
    save_checkpoint(path, net, opt, "roundtrip")?;
    let (n, o, _) = load_checkpoint(path, Some(&net.widths()))?;
    Ok((n, o))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::FormatError;

    #[test]
    fn init_shapes_and_zero_bias() {
        let net = init_params(&[8, 16, 8], 1).unwrap();
        assert_eq!(net.layers()[0].weight.dim(), (16, 8));
        assert_eq!(net.layers()[1].weight.dim(), (8, 16));
        let small = init_params(&[4, 4], 99).unwrap();
        assert_eq!(small.layers()[0].bias.to_vec(), vec![0.0; 4]);
        assert_eq!(init_params(&[8, 16, 8], 1).unwrap(), net);
        assert!(init_params(&[8], 1).is_err());
        assert!(init_params(&[8, 0, 2], 1).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let net = init_params(&[25, 10], 3).unwrap();
        assert!(net.layers()[0].weight.iter().all(|w| w.abs() <= 0.2));
    }

    #[test]
    fn time_feature_values() {
        let f0 = time_features(0.0, 8).unwrap();
        assert_eq!(f0, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let half = time_features(0.5, 8).unwrap();
        assert!(half[0].abs() < 1e-15);
        assert_eq!(half[1], -1.0);
        for t in [0.0, 0.13, 0.5, 0.77, 1.0] {
            let n = time_features(t, 8).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n <= 2.0 + 1e-12);
        }
        assert!(time_features(1.5, 8).is_err());
        assert!(time_features(-0.1, 8).is_err());
        assert!(time_features(0.5, 7).is_err());
    }

    #[test]
    fn zero_net_gives_zero_velocity() {
        let net = NetParams::zeros(&[4 + TIME_FEATURES + 2, 5, 4]).unwrap();
        let v = forward_velocity(&net, &[1.0, -2.0, 3.0, 0.5], 0.3, &[1.0, 1.0]).unwrap();
        assert_eq!(v, vec![0.0; 4]);
    }

    #[test]
    fn output_bias_moves_one_coordinate() {
        let mut net = init_params(&[4 + TIME_FEATURES + 2, 6, 4], 5).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4];
        let c = [0.5, -0.5];
        let before = forward_velocity(&net, &x, 0.4, &c).unwrap();
        assert_eq!(before, forward_velocity(&net, &x, 0.4, &c).unwrap());
        net.layers_mut()[1].bias[2] += 0.25;
        let after = forward_velocity(&net, &x, 0.4, &c).unwrap();
        for i in 0..4 {
            if i == 2 {
                assert!((after[i] - before[i] - 0.25).abs() < 1e-15);
            } else {
                assert_eq!(after[i], before[i]);
            }
        }
    }

    #[test]
    fn velocity_shape_errors() {
        let net = init_params(&[4 + TIME_FEATURES + 2, 6, 4], 5).unwrap();
        assert!(forward_velocity(&net, &[0.0; 4], 0.5, &[0.0; 3]).is_err());
        assert!(forward_velocity(&net, &[0.0; 3], 0.5, &[0.0; 3]).is_err());
    }

    #[test]
    fn batched_and_row_forward_agree() {
        let net = init_params(&[6, 7, 3], 8).unwrap();
        let input = Array2::from_shape_fn((5, 6), |(i, j)| (i as f64 - j as f64) * 0.1);
        let out = forward(&net, input.view()).unwrap();
        for i in 0..5 {
            let row = forward_row(&net, input.row(i).as_slice().unwrap()).unwrap();
            for j in 0..3 {
                assert!((row[j] - out[[i, j]]).abs() < 1e-14);
            }
        }
    }

    fn perfect_batch(net: &NetParams) -> Vec<VelocitySample> {
        let mut batch: Vec<_> = (0..3)
            .map(|i| VelocitySample {
                x_t: vec![0.1 * i as f64, -0.2],
                t: 0.3,
                cond: vec![1.0],
                target: vec![],
            })
            .collect();
        let mut inputs = Array2::zeros((3, net.input_width()));
        for (i, s) in batch.iter().enumerate() {
            fill_input(inputs.row_mut(i).into_slice().unwrap(), &s.x_t, s.t, &s.cond).unwrap();
        }
        let out = forward(net, inputs.view()).unwrap();
        for (i, s) in batch.iter_mut().enumerate() {
            s.target = out.row(i).to_vec();
        }
        batch
    }

    #[test]
    fn zero_residual_gives_zero_loss_and_gradient() {
        let net = init_params(&[2 + TIME_FEATURES + 1, 5, 2], 2).unwrap();
        let (loss, g) = loss_and_gradients(&net, &perfect_batch(&net)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_batch_is_invariant() {
        let net = init_params(&[2 + TIME_FEATURES + 1, 5, 2], 2).unwrap();
        let mut batch = perfect_batch(&net);
        for (i, s) in batch.iter_mut().enumerate() {
            s.target[0] += 0.3 * i as f64 - 0.2;
        }
        let (l1, g1) = loss_and_gradients(&net, &batch).unwrap();
        let doubled: Vec<_> = batch.iter().chain(&batch).cloned().collect();
        let (l2, g2) = loss_and_gradients(&net, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(loss_and_gradients(&net, &[]).is_err());
    }

    #[test]
    fn adam_first_step_with_unit_gradient() {
        let net = init_params(&[3, 4, 2], 1).unwrap();
        let mut grads = NetParams::zeros(&[3, 4, 2]).unwrap();
        grads.layers_mut().iter_mut().for_each(|l| {
            l.weight.fill(1.0);
            l.bias.fill(1.0);
        });
        let opt = OptState::new(&net, AdamConfig::default());
        let (next, opt) = adam_update(net.clone(), &grads, opt).unwrap();
        assert_eq!(opt.step, 1);
        let expected_step = -1e-3 / (1.0 + 1e-8);
        for (a, b) in net.flatten().iter().zip(next.flatten()) {
            assert!((b - a - expected_step).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_zero_gradient_decays_moments() {
        let net = init_params(&[3, 2], 1).unwrap();
        let mut grads = NetParams::zeros(&[3, 2]).unwrap();
        grads.layers_mut()[0].weight.fill(0.5);
        let opt = OptState::new(&net, AdamConfig::default());
        let (net1, opt1) = adam_update(net, &grads, opt).unwrap();
        let zero = NetParams::zeros(&[3, 2]).unwrap();
        let m_before = opt1.first_moment.param(0);
        let v_before = opt1.second_moment.param(0);
        let (net2, opt2) = adam_update(net1.clone(), &zero, opt1.clone()).unwrap();
        // The bias-corrected first moment is still non-zero, so parameters
        // move on a zero gradient unless the moments are zero too.
        assert!(opt2.first_moment.param(0).abs() < m_before.abs());
        assert!(opt2.second_moment.param(0) < v_before);
        let (net3, _) = adam_update(net2.clone(), &zero, OptState::new(&net2, AdamConfig::default())).unwrap();
        assert_eq!(net3, net2);
        let again = adam_update(net1, &zero, opt1).unwrap();
        assert_eq!(again.0, net2);
        assert_eq!(again.1, opt2);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let net = init_params(&[3, 2], 1).unwrap();
        let mut grads = NetParams::zeros(&[3, 2]).unwrap();
        grads.set_param(4, f64::NAN);
        let opt = OptState::new(&net, AdamConfig::default());
        assert!(matches!(adam_update(net, &grads, opt), Err(Error::NonFinite(_))));
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = init_params(&[5, 7, 3], 4).unwrap();
        let mut g = NetParams::zeros(&[5, 7, 3]).unwrap();
        g.set_param(3, 0.7);
        let (net, opt) = adam_update(net.clone(), &g, OptState::new(&net, AdamConfig::default())).unwrap();
        let (n2, o2) = checkpoint_roundtrip(&net, &opt, &path).unwrap();
        assert_eq!(n2.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   net.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(o2, opt);

        assert!(matches!(
            load_checkpoint(&path, Some(&[5, 8, 3])),
            Err(Error::Shape { .. })
        ));

        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(matches!(
            checkpoint_from_bytes(&bytes, None),
            Err(Error::Format(FormatError::Checksum(_)))
        ));
    }
}
