//! Flow-matching training on the linear path `x_t = (1 - t) x0 + t eps`,
//! whose velocity target is `eps - x0`. `t = 0` is data and `t = 1` is noise.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, GenParams, Item};
use crate::error::{Error, Result};
use crate::nn::{self, AdamConfig, NetParams, OptState, TIME_FEATURES};
use crate::rng::{self, Stream};

pub const DEFAULT_P_DROP: f64 = 0.1;
pub const EXPERT_HIDDEN: [usize; 3] = [128, 128, 128];

/// Widths of an expert (or monolithic) velocity net for `params`.
pub fn velocity_widths(params: &GenParams, hidden: &[usize]) -> Vec<usize> {
    let mut w = vec![params.clip_len() + TIME_FEATURES + params.cond_dim];
    w.extend_from_slice(hidden);
    w.push(params.clip_len());
    w
}

fn same_len(a: &[f64], b: &[f64], context: &'static str) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::shape(context, a.len(), b.len()))
    }
}

pub fn interpolate_path(x0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    same_len(x0, eps, "path endpoints")?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("timestep {t} outside [0, 1]")));
    }
    Ok(x0.iter().zip(eps).map(|(a, e)| (1.0 - t) * a + t * e).collect())
}

pub fn target_velocity(x0: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    same_len(x0, eps, "path endpoints")?;
    Ok(x0.iter().zip(eps).map(|(a, e)| e - a).collect())
}

/// Distribution of training timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeSampling {
    Uniform,
    /// `Beta(alpha, beta)`; `alpha > beta` skews toward noise (`t` near 1).
    Beta { alpha: f64, beta: f64 },
}

impl TimeSampling {
    pub fn draw(&self, rng: &mut Stream) -> f64 {
        match *self {
            TimeSampling::Uniform => rng.random_range(0.0..=1.0),
            TimeSampling::Beta { alpha, beta } => Beta::new(alpha, beta)
                .expect("validated shape parameters")
                .sample(rng),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            TimeSampling::Uniform => Ok(()),
            TimeSampling::Beta { alpha, beta } if alpha > 0.0 && beta > 0.0 => Ok(()),
            other => Err(Error::invalid(format!("time sampling {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowBatchItem {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: f64,
    pub x_t: Vec<f64>,
    /// Full condition, or all zeros when dropped.
    pub cond: Vec<f64>,
    pub target: Vec<f64>,
    pub dropped: bool,
    /// Source cluster of the clean item, kept for auditing.
    pub cluster: usize,
}

/// Samples `batch` items uniformly with replacement and builds their flow
/// regression targets. With probability `p_drop` the condition is replaced by
/// the null (zero) condition.
pub fn make_flow_batch(
    items: &[Item],
    batch: usize,
    p_drop: f64,
    time: TimeSampling,
    rng: &mut Stream,
) -> Result<Vec<FlowBatchItem>> {
    if items.is_empty() {
        return Err(Error::invalid("cannot draw a flow batch from an empty dataset"));
    }
    if !(0.0..1.0).contains(&p_drop) {
        return Err(Error::invalid(format!("p_drop {p_drop} outside [0, 1)")));
    }
    time.validate()?;
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let item = &items[rng.random_range(0..items.len())];
        let x0 = item.clip.as_slice().to_vec();
        let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
        let t = time.draw(rng);
        let dropped = rng.random::<f64>() < p_drop;
        let cond = if dropped {
            vec![0.0; item.cond.full.len()]
        } else {
            item.cond.full.clone()
        };
        let x_t = interpolate_path(&x0, &eps, t)?;
        let target = target_velocity(&x0, &eps)?;
        out.push(FlowBatchItem {
            x0,
            eps,
            t,
            x_t,
            cond,
            target,
            dropped,
            cluster: item.cond.cluster,
        });
    }
    Ok(out)
}

/// Packs a flow batch into network input and target matrices.
pub fn batch_matrices(batch: &[FlowBatchItem]) -> Result<(Array2<f64>, Array2<f64>)> {
    let first = batch
        .first()
        .ok_or_else(|| Error::invalid("empty flow batch"))?;
    let width = first.x_t.len() + TIME_FEATURES + first.cond.len();
    let mut inputs = Array2::zeros((batch.len(), width));
    let mut targets = Array2::zeros((batch.len(), first.target.len()));
    for (i, b) in batch.iter().enumerate() {
        nn::fill_input(
            inputs.row_mut(i).into_slice().expect("standard layout"),
            &b.x_t,
            b.t,
            &b.cond,
        )?;
        targets
            .row_mut(i)
            .into_slice()
            .expect("standard layout")
            .copy_from_slice(&b.target);
    }
    Ok((inputs, targets))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArmKind {
    Expert(usize),
    Monolithic,
}

impl ArmKind {
    /// File stem of this arm's checkpoint.
    pub fn name(&self) -> String {
        match self {
            ArmKind::Expert(k) => format!("expert_{k}"),
            ArmKind::Monolithic => "monolithic".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainArmConfig {
    pub kind: ArmKind,
    pub steps: usize,
    pub batch_size: usize,
    pub p_drop: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub time: TimeSampling,
}

impl TrainArmConfig {
    pub fn new(kind: ArmKind, steps: usize, seed: u64) -> Self {
        Self {
            kind,
            steps,
            batch_size: 64,
            p_drop: DEFAULT_P_DROP,
            seed,
            adam: AdamConfig::default(),
            time: TimeSampling::Uniform,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub params: NetParams,
    pub opt: OptState,
    /// Loss of every optimizer step, in order.
    pub losses: Vec<f64>,
    /// Number of clean items drawn, summed over all batches.
    pub items_consumed: usize,
    /// Items drawn per source cluster.
    pub cluster_audit: Vec<usize>,
}

/// Items an arm is allowed to see: its own cluster for an expert, everything
/// for the monolithic arm.
pub fn arm_items(kind: ArmKind, dataset: &Dataset) -> Vec<Item> {
    match kind {
        ArmKind::Expert(k) => dataset.cluster_items(k),
        ArmKind::Monolithic => dataset.items.clone(),
    }
}

/// Trains one arm. Reads nothing but its arguments: two experts never share
/// state, so each can be trained anywhere, in any order.
pub fn train_arm(config: &TrainArmConfig, dataset: &Dataset, init: NetParams) -> Result<ArmOutcome> {
    let items = arm_items(config.kind, dataset);
    if items.is_empty() {
        return Err(Error::invalid(format!(
            "arm {} has no training items",
            config.kind.name()
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut rng = rng::stream(config.seed, rng::tags::BATCHES);
    let mut params = init;
    let mut opt = OptState::new(&params, config.adam);
    let mut losses = Vec::with_capacity(config.steps);
    let mut audit = vec![0usize; dataset.params.clusters];
    for step in 0..config.steps {
        let batch = make_flow_batch(&items, config.batch_size, config.p_drop, config.time, &mut rng)?;
        for b in &batch {
            audit[b.cluster] += 1;
        }
        let (inputs, targets) = batch_matrices(&batch)?;
        let (loss, grads) = match nn::mse_loss_and_gradients(&params, inputs.view(), targets.view()) {
            Ok(ok) => ok,
            Err(Error::NonFinite(_)) => return Err(Error::Divergence { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        (params, opt) = nn::adam_update(params, &grads, opt).map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence { step, loss },
            other => other,
        })?;
        losses.push(loss);
    }
    Ok(ArmOutcome {
        params,
        opt,
        losses,
        items_consumed: config.steps * config.batch_size,
        cluster_audit: audit,
    })
}

/// Step budgets under matched total compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsoFlopSplit {
    pub monolithic_steps: usize,
    pub expert_steps: usize,
    pub experts: usize,
}

/// The monolithic arm gets `total_steps`; each of `k` experts gets
/// `total_steps / k` at the same batch size.
pub fn iso_flop_split(total_steps: usize, k: usize) -> Result<IsoFlopSplit> {
    if k == 0 {
        return Err(Error::invalid("need at least one expert"));
    }
    if !total_steps.is_multiple_of(k) {
        let down = total_steps - total_steps % k;
        return Err(Error::invalid(format!(
            "total_steps {total_steps} is not divisible by {k} experts; use {down} or {}",
            down + k
        )));
    }
    Ok(IsoFlopSplit {
        monolithic_steps: total_steps,
        expert_steps: total_steps / k,
        experts: k,
    })
}

/// Writes a `step,loss` CSV.
pub fn loss_trace_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}
