//! Routed Euler sampling with classifier-free guidance.
//!
//! Integration runs from `t = 1` (noise) to `t = 0` (data) with step
//! `-1/n_steps`. At every step the router (or a fixed schedule) picks the
//! experts for the current state, each selected expert contributes its own
//! guided velocity, and the weighted sum drives one Euler step.

use rand_distr::StandardNormal;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Clip, Condition, GenParams};
use crate::error::{Error, Result};
use crate::nn::{self, NetParams};
use crate::router::{self, RoutingWeights};
use crate::rng::{self, Stream};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_CFG_SCALE: f64 = 7.5;

/// Expert index for every denoising step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertSchedule(Vec<usize>);

impl ExpertSchedule {
    pub fn new(steps: Vec<usize>, experts: usize) -> Result<Self> {
        if let Some(&bad) = steps.iter().find(|&&e| e >= experts) {
            return Err(Error::invalid(format!(
                "schedule names expert {bad} but only {experts} exist"
            )));
        }
        Ok(Self(steps))
    }

    pub fn steps(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `[start, other, start, other, ...]` of length `n_steps`.
pub fn alternating_schedule(n_steps: usize, pair: (usize, usize), start: usize) -> Result<ExpertSchedule> {
    let (a, b) = pair;
    if a == b {
        return Err(Error::invalid("alternating schedule needs two distinct experts"));
    }
    let other = if start == a {
        b
    } else if start == b {
        a
    } else {
        return Err(Error::invalid(format!("start {start} is not in the pair ({a}, {b})")));
    };
    Ok(ExpertSchedule(
        (0..n_steps).map(|i| if i % 2 == 0 { start } else { other }).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Routed,
    Single(usize),
    Schedule(ExpertSchedule),
}

/// Where classifier-free guidance is applied relative to expert mixing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidancePlacement {
    /// Each expert guides its own velocity, then guided fields are mixed.
    #[default]
    PerExpert,
    /// Conditional and unconditional branches are mixed first, then guided.
    AfterMixing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub cfg_scale: f64,
    pub top_k: usize,
    pub seed: u64,
    pub mode: SamplingMode,
    pub guidance: GuidancePlacement,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: DEFAULT_STEPS,
            cfg_scale: DEFAULT_CFG_SCALE,
            top_k: router::DEFAULT_TOP_K,
            seed: 0,
            mode: SamplingMode::Routed,
            guidance: GuidancePlacement::PerExpert,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, experts: usize) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps must be at least 1"));
        }
        if !(self.cfg_scale.is_finite() && self.cfg_scale >= 0.0) {
            return Err(Error::invalid(format!("cfg_scale {}", self.cfg_scale)));
        }
        match &self.mode {
            SamplingMode::Routed if self.top_k == 0 || self.top_k > experts => Err(Error::invalid(
                format!("top_k {} outside 1..={experts}", self.top_k),
            )),
            SamplingMode::Single(k) if *k >= experts => {
                Err(Error::invalid(format!("expert index {k} >= {experts} experts")))
            }
            SamplingMode::Schedule(s) => {
                if s.len() != self.n_steps {
                    return Err(Error::invalid(format!(
                        "schedule has {} entries for {} steps",
                        s.len(),
                        self.n_steps
                    )));
                }
                ExpertSchedule::new(s.0.clone(), experts).map(|_| ())
            }
            _ => Ok(()),
        }
    }
}

pub fn guided_velocity(v_cond: &[f64], v_uncond: &[f64], scale: f64) -> Result<Vec<f64>> {
    if v_cond.len() != v_uncond.len() {
        return Err(Error::shape("guidance branches", v_cond.len(), v_uncond.len()));
    }
    Ok(v_uncond
        .iter()
        .zip(v_cond)
        .map(|(u, c)| u + scale * (c - u))
        .collect())
}

/// Weighted sum of guided expert velocities. Only experts in the active set
/// are evaluated; the second return value counts forward passes.
pub fn mixture_velocity(
    experts: &[NetParams],
    weights: &RoutingWeights,
    x_t: &[f64],
    t: f64,
    cond_full: &[f64],
    scale: f64,
) -> Result<(Vec<f64>, usize)> {
    mixture_velocity_with(experts, weights, x_t, t, cond_full, scale, GuidancePlacement::PerExpert)
}

pub fn mixture_velocity_with(
    experts: &[NetParams],
    weights: &RoutingWeights,
    x_t: &[f64],
    t: f64,
    cond_full: &[f64],
    scale: f64,
    placement: GuidancePlacement,
) -> Result<(Vec<f64>, usize)> {
    if weights.weights().len() != experts.len() {
        return Err(Error::shape(
            "routing weights",
            experts.len(),
            weights.weights().len(),
        ));
    }
    let null = vec![0.0; cond_full.len()];
    let mut passes = 0;
    let mut mixed = vec![0.0; x_t.len()];
    let mut mixed_uncond = vec![0.0; x_t.len()];
    for &k in weights.active_set() {
        let w = weights.weights()[k];
        let v_c = nn::forward_velocity(&experts[k], x_t, t, cond_full)?;
        let v_u = nn::forward_velocity(&experts[k], x_t, t, &null)?;
        passes += 2;
        match placement {
            GuidancePlacement::PerExpert => {
                let g = guided_velocity(&v_c, &v_u, scale)?;
                mixed.iter_mut().zip(&g).for_each(|(m, g)| *m += w * g);
            }
            GuidancePlacement::AfterMixing => {
                mixed.iter_mut().zip(&v_c).for_each(|(m, v)| *m += w * v);
                mixed_uncond.iter_mut().zip(&v_u).for_each(|(m, v)| *m += w * v);
            }
        }
    }
    if placement == GuidancePlacement::AfterMixing {
        mixed = guided_velocity(&mixed, &mixed_uncond, scale)?;
    }
    Ok((mixed, passes))
}

/// Euler integration from `t = 1` to `t = 0`; returns all `n_steps + 1`
/// states. `velocity` receives the state and its timestep.
pub fn euler_integrate<F>(mut velocity: F, x_start: &[f64], n_steps: usize) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be at least 1"));
    }
    let dt = -1.0 / n_steps as f64;
    let mut traj = Vec::with_capacity(n_steps + 1);
    traj.push(x_start.to_vec());
    for i in 0..n_steps {
        let t = 1.0 - i as f64 / n_steps as f64;
        let x = &traj[i];
        let v = velocity(x, t)?;
        if v.len() != x.len() {
            return Err(Error::shape("velocity field output", x.len(), v.len()));
        }
        let next: Vec<f64> = x.iter().zip(&v).map(|(x, v)| x + dt * v).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState(i));
        }
        traj.push(next);
    }
    Ok(traj)
}

/// Expert pool plus optional router, with the clip shape they operate on.
#[derive(Debug, Clone, Copy)]
pub struct Ensemble<'a> {
    pub experts: &'a [NetParams],
    pub router: Option<&'a NetParams>,
    pub frames: usize,
    pub dim: usize,
}

impl<'a> Ensemble<'a> {
    pub fn new(experts: &'a [NetParams], router: Option<&'a NetParams>, params: &GenParams) -> Self {
        Self {
            experts,
            router,
            frames: params.frames,
            dim: params.dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub clip: Clip,
    /// Expert forward passes spent on this sample.
    pub forward_passes: usize,
    /// Active experts chosen at each step.
    pub routes: Vec<Vec<usize>>,
}

/// Draws one clip for `cond`. The starting noise comes from `rng`.
pub fn sample(
    ensemble: &Ensemble<'_>,
    cond: &Condition,
    config: &SamplerConfig,
    rng: &mut Stream,
) -> Result<SampleOutput> {
    let n_experts = ensemble.experts.len();
    if n_experts == 0 {
        return Err(Error::invalid("sampling needs at least one expert"));
    }
    config.validate(n_experts)?;
    let router_net = match (&config.mode, ensemble.router) {
        (SamplingMode::Routed, None) => {
            return Err(Error::invalid("routed sampling needs a router"))
        }
        (SamplingMode::Routed, Some(r)) => Some(r),
        _ => None,
    };
    let len = ensemble.frames * ensemble.dim;
    let x_start: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let mut passes = 0;
    let mut routes = Vec::with_capacity(config.n_steps);
    let mut step = 0usize;
    let traj = euler_integrate(
        |x, t| {
            let weights = match &config.mode {
                SamplingMode::Routed => {
                    let logits = router::router_logits(
                        router_net.expect("checked above"),
                        x,
                        t,
                        &cond.pooled,
                    )?;
                    router::route_weights(&logits, config.top_k)?
                }
                SamplingMode::Single(k) => RoutingWeights::one_hot(*k, n_experts)?,
                SamplingMode::Schedule(s) => RoutingWeights::one_hot(s.steps()[step], n_experts)?,
            };
            step += 1;
            routes.push(weights.active_set().to_vec());
            let (v, p) = mixture_velocity_with(
                ensemble.experts,
                &weights,
                x,
                t,
                &cond.full,
                config.cfg_scale,
                config.guidance,
            )?;
            passes += p;
            Ok(v)
        },
        &x_start,
        config.n_steps,
    )?;
    let last = traj.into_iter().last().expect("at least one state");
    Ok(SampleOutput {
        clip: Clip::new(ensemble.frames, ensemble.dim, last)?,
        forward_passes: passes,
        routes,
    })
}

/// Samples one clip per prompt; prompt `i` draws its noise from its own
/// stream under `config.seed`, so results do not depend on batch order.
pub fn sample_prompts(
    ensemble: &Ensemble<'_>,
    prompts: &[Condition],
    config: &SamplerConfig,
) -> Result<Vec<SampleOutput>> {
    prompts
        .iter()
        .enumerate()
        .map(|(i, cond)| {
            let mut rng = rng::stream(config.seed, rng::tags::SAMPLE_BASE + i as u64);
            sample(ensemble, cond, config, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guidance_formula() {
        let c = [1.0, 0.0];
        let u = [0.25, -0.5];
        assert_eq!(guided_velocity(&c, &u, 1.0).unwrap(), c.to_vec());
        assert_eq!(guided_velocity(&c, &u, 0.0).unwrap(), u.to_vec());
        assert_eq!(guided_velocity(&c, &[0.0, 0.0], 7.5).unwrap(), vec![7.5, 0.0]);
        assert!(guided_velocity(&c, &[0.0], 1.0).is_err());
    }

    #[test]
    fn constant_field_moves_by_minus_c() {
        for n in [1, 3, 50] {
            let traj = euler_integrate(|_, _| Ok(vec![0.5, -2.0]), &[1.0, 1.0], n).unwrap();
            assert_eq!(traj.len(), n + 1);
            let end = traj.last().unwrap();
            assert!((end[0] - 0.5).abs() < 1e-12 && (end[1] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn timesteps_run_from_one_toward_zero() {
        let mut seen = Vec::new();
        euler_integrate(|x, t| { seen.push(t); Ok(vec![0.0; x.len()]) }, &[0.0], 4).unwrap();
        assert_eq!(seen, vec![1.0, 0.75, 0.5, 0.25]);
    }

    #[test]
    fn non_finite_state_reports_step() {
        let err = euler_integrate(|_, t| Ok(vec![if t < 0.6 { f64::INFINITY } else { 0.0 }]), &[0.0], 4)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteState(2)), "{err}");
    }

    #[test]
    fn alternating_schedules() {
        assert_eq!(alternating_schedule(4, (0, 1), 0).unwrap().steps(), &[0, 1, 0, 1]);
        assert_eq!(alternating_schedule(4, (0, 1), 1).unwrap().steps(), &[1, 0, 1, 0]);
        assert_eq!(alternating_schedule(1, (2, 1), 2).unwrap().steps(), &[2]);
        assert!(alternating_schedule(4, (1, 1), 1).is_err());
        assert!(alternating_schedule(4, (0, 1), 2).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = SamplerConfig::default();
        assert!(c.validate(3).is_ok());
        c.n_steps = 0;
        assert!(c.validate(3).is_err());
        let mut c = SamplerConfig::default();
        c.mode = SamplingMode::Schedule(alternating_schedule(49, (0, 1), 0).unwrap());
        assert!(c.validate(3).is_err());
        c.mode = SamplingMode::Single(3);
        assert!(c.validate(3).is_err());
        c.mode = SamplingMode::Routed;
        c.top_k = 4;
        assert!(c.validate(3).is_err());
    }
}
