//! Experiment drivers: data preparation, iso-FLOP training of every arm,
//! the monolithic-vs-ensemble comparison, and the two ablations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{hex_digest, ExperimentConfig};
use super::report::{self, ComparisonReport, IsoAudit, Provenance};
use crate::datagen::{self, Clip, Condition, Dataset};
use crate::error::{Error, Result};
use crate::flow::{self, ArmKind, ArmOutcome, TimeSampling, TrainArmConfig};
use crate::metrics::{self, AlignmentProbe, MetricReport, SpecializationGap};
use crate::nn::{self, NetParams};
use crate::router::{self, RouterOutcome, RouterTrainConfig, ROUTER_HIDDEN};
use crate::sampler::{self, Ensemble, SamplerConfig, SampleOutput, SamplingMode};

pub const HIGH_NOISE_EXPERT: &str = "expert_high_noise";
pub const LOW_NOISE_EXPERT: &str = "expert_low_noise";

/// Deterministic file layout under an output directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn create(&self) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("dataset_train.bin")
    }

    pub fn eval_data(&self) -> PathBuf {
        self.root.join("dataset_eval.bin")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.ckpt"))
    }

    pub fn loss_csv(&self, name: &str) -> PathBuf {
        self.root.join(format!("loss_{name}.csv"))
    }

    pub fn router_accuracy_csv(&self) -> PathBuf {
        self.root.join("router_accuracy.csv")
    }

    pub fn samples(&self, name: &str) -> PathBuf {
        self.root.join(format!("samples_{name}.bin"))
    }
}

/// Training and held-out splits for `config`.
pub fn build_data(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let train = datagen::build_dataset(&config.data, config.n_train_per_cluster, config.data_seed)?;
    let eval = datagen::build_stratified(&config.data, config.n_eval, config.heldout_seed())?;
    Ok((train, eval))
}

fn matches(ds: &Dataset, config: &ExperimentConfig, seed: u64, n: usize) -> bool {
    ds.params == config.data && ds.seed == seed && ds.len() == n
}

/// Reuses cached splits under `dir` when they match `config`, otherwise
/// generates and caches them.
pub fn ensure_data(config: &ExperimentConfig, dir: &RunDir) -> Result<(Dataset, Dataset)> {
    let (tp, ep) = (dir.train_data(), dir.eval_data());
    if tp.exists() && ep.exists() {
        let train = Dataset::load(&tp)?;
        let eval = Dataset::load(&ep)?;
        if matches(&train, config, config.data_seed, config.n_train_per_cluster * config.data.clusters)
            && matches(&eval, config, config.heldout_seed(), config.n_eval)
        {
            return Ok((train, eval));
        }
    }
    dir.create()?;
    let (train, eval) = build_data(config)?;
    train.save(&tp)?;
    eval.save(&ep)?;
    Ok((train, eval))
}

pub fn expert_widths(config: &ExperimentConfig) -> Vec<usize> {
    flow::velocity_widths(&config.data, &config.expert_hidden)
}

fn arm_config(config: &ExperimentConfig, kind: ArmKind, steps: usize, seed: u64) -> TrainArmConfig {
    TrainArmConfig {
        kind,
        steps,
        batch_size: config.batch_size,
        p_drop: config.p_drop,
        seed,
        adam: config.adam(),
        time: TimeSampling::Uniform,
    }
}

/// Expert `k` on its own cluster, with its iso-FLOP share of the steps.
pub fn train_expert(config: &ExperimentConfig, train: &Dataset, k: usize) -> Result<ArmOutcome> {
    if k >= config.data.clusters {
        return Err(Error::invalid(format!(
            "expert {k} does not exist ({} clusters)",
            config.data.clusters
        )));
    }
    let split = flow::iso_flop_split(config.total_steps, config.data.clusters)?;
    let seed = config.expert_seed(k);
    let init = nn::init_params(&expert_widths(config), seed)?;
    flow::train_arm(&arm_config(config, ArmKind::Expert(k), split.expert_steps, seed), train, init)
}

pub fn train_monolithic(config: &ExperimentConfig, train: &Dataset) -> Result<ArmOutcome> {
    let split = flow::iso_flop_split(config.total_steps, config.data.clusters)?;
    let seed = config.monolithic_seed();
    let init = nn::init_params(&expert_widths(config), seed)?;
    flow::train_arm(
        &arm_config(config, ArmKind::Monolithic, split.monolithic_steps, seed),
        train,
        init,
    )
}

pub fn router_config(config: &ExperimentConfig) -> RouterTrainConfig {
    RouterTrainConfig {
        steps: config.router_steps,
        batch_size: config.batch_size,
        seed: config.router_seed(),
        adam: config.adam(),
        ..RouterTrainConfig::default()
    }
}

pub fn train_router_arm(config: &ExperimentConfig, train: &Dataset) -> Result<RouterOutcome> {
    router::train_router(train, &router_config(config))
}

/// Two experts on the full training set that differ only in where their
/// training timesteps concentrate: one near noise, one near data.
pub fn train_noise_specialists(config: &ExperimentConfig, train: &Dataset) -> Result<(ArmOutcome, ArmOutcome)> {
    let split = flow::iso_flop_split(config.total_steps, config.data.clusters)?;
    let run = |time: TimeSampling, seed: u64| -> Result<ArmOutcome> {
        let init = nn::init_params(&expert_widths(config), seed)?;
        let mut cfg = arm_config(config, ArmKind::Monolithic, split.expert_steps, seed);
        cfg.time = time;
        flow::train_arm(&cfg, train, init)
    };
    Ok((
        run(config.high_noise_time, config.expert_seed(0))?,
        run(config.low_noise_time(), config.expert_seed(1))?,
    ))
}

pub fn save_arm(dir: &RunDir, name: &str, outcome: &ArmOutcome) -> Result<()> {
    nn::save_checkpoint(&dir.checkpoint(name), &outcome.params, &outcome.opt, name)?;
    fs::write(dir.loss_csv(name), flow::loss_trace_csv(&outcome.losses))?;
    Ok(())
}

pub fn save_router(dir: &RunDir, outcome: &RouterOutcome) -> Result<()> {
    nn::save_checkpoint(&dir.checkpoint("router"), &outcome.params, &outcome.opt, "router")?;
    fs::write(dir.loss_csv("router"), flow::loss_trace_csv(&outcome.losses))?;
    let bins = router::accuracy_by_t_bin(&outcome.params, &outcome.heldout, 10, 4, 0)?;
    fs::write(dir.router_accuracy_csv(), router::accuracy_csv(&bins))?;
    Ok(())
}

/// Loads a checkpoint by name, failing with a clear message if it is missing.
pub fn load_net(dir: &RunDir, name: &str, widths: &[usize]) -> Result<NetParams> {
    let path = dir.checkpoint(name);
    if !path.exists() {
        return Err(Error::invalid(format!(
            "missing checkpoint {}",
            path.display()
        )));
    }
    Ok(nn::load_checkpoint(&path, Some(widths))?.0)
}

pub fn load_experts(config: &ExperimentConfig, dir: &RunDir) -> Result<Vec<NetParams>> {
    let widths = expert_widths(config);
    (0..config.data.clusters)
        .map(|k| load_net(dir, &ArmKind::Expert(k).name(), &widths))
        .collect()
}

pub fn load_router(config: &ExperimentConfig, dir: &RunDir) -> Result<NetParams> {
    load_net(dir, "router", &router::router_widths(&config.data, &ROUTER_HIDDEN))
}

pub fn fit_probe(config: &ExperimentConfig, train: &Dataset) -> Result<AlignmentProbe> {
    let clips: Vec<&[f64]> = train.items.iter().map(|it| it.clip.as_slice()).collect();
    let pooled: Vec<&[f64]> = train.items.iter().map(|it| it.cond.pooled.as_slice()).collect();
    metrics::fit_alignment_probe(&clips, &pooled, config.probe_lambda)
}

pub fn sampler_config(config: &ExperimentConfig, mode: SamplingMode) -> SamplerConfig {
    SamplerConfig {
        n_steps: config.n_steps,
        cfg_scale: config.cfg_scale,
        top_k: config.top_k,
        seed: config.eval_seed,
        mode,
        guidance: config.guidance,
    }
}

/// Samples one clip per prompt and scores them against `reference`.
pub fn evaluate_arm(
    ensemble: &Ensemble<'_>,
    prompts: &[Condition],
    sampler: &SamplerConfig,
    reference: &[Clip],
    probe: &AlignmentProbe,
) -> Result<(MetricReport, Vec<SampleOutput>)> {
    let outputs = sampler::sample_prompts(ensemble, prompts, sampler)?;
    let clips: Vec<Clip> = outputs.iter().map(|o| o.clip.clone()).collect();
    let pooled: Vec<Vec<f64>> = prompts.iter().map(|c| c.pooled.clone()).collect();
    let report = metrics::evaluate_clips(&clips, &pooled, reference, probe)?;
    Ok((report, outputs))
}

/// Fingerprint of everything that defines a sampling protocol.
pub fn protocol_hash(prompts: &[Condition], sampler: &SamplerConfig) -> String {
    let mut bytes = Vec::new();
    for p in prompts {
        for v in p.full.iter().chain(&p.pooled) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&(p.cluster as u64).to_le_bytes());
    }
    bytes.extend_from_slice(&sampler.seed.to_le_bytes());
    bytes.extend_from_slice(&(sampler.n_steps as u64).to_le_bytes());
    bytes.extend_from_slice(&sampler.cfg_scale.to_le_bytes());
    hex_digest(&bytes)
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex_digest(&fs::read(path)?))
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Writes generated clips (with the prompts that produced them) in the
/// dataset cache format, echoing sampler settings in the header.
pub fn write_samples(
    path: &Path,
    eval: &Dataset,
    prompts: &[Condition],
    outputs: &[SampleOutput],
    sampler: &SamplerConfig,
) -> Result<()> {
    let items = prompts
        .iter()
        .zip(outputs)
        .map(|(c, o)| datagen::Item {
            clip: o.clip.clone(),
            cond: c.clone(),
        })
        .collect::<Vec<_>>();
    let mut counts = vec![0; eval.params.clusters];
    for it in &items {
        counts[it.cond.cluster] += 1;
    }
    let ds = Dataset {
        params: eval.params,
        seed: sampler.seed,
        items,
        cluster_counts: counts,
    };
    let mode = match &sampler.mode {
        SamplingMode::Routed => "routed".to_string(),
        SamplingMode::Single(k) => format!("single:{k}"),
        SamplingMode::Schedule(s) => format!(
            "schedule:{}",
            s.steps().iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
        ),
    };
    let extra = [
        ("mode", mode),
        ("n_steps", sampler.n_steps.to_string()),
        ("cfg_scale", sampler.cfg_scale.to_string()),
        ("top_k", sampler.top_k.to_string()),
    ];
    fs::write(path, ds.to_bytes_with("samples", &extra))?;
    Ok(())
}

/// Trains every arm under iso-FLOP accounting and writes checkpoints.
pub fn train_all(config: &ExperimentConfig, dir: &RunDir, train: &Dataset) -> Result<TrainSummary> {
    let experts = stage(
        "train-experts",
        (0..config.data.clusters)
            .map(|k| train_expert(config, train, k))
            .collect::<Result<Vec<_>>>(),
    )?;
    for (k, e) in experts.iter().enumerate() {
        stage("train-experts", save_arm(dir, &ArmKind::Expert(k).name(), e))?;
    }
    let mono = stage("train-monolithic", train_monolithic(config, train))?;
    stage("train-monolithic", save_arm(dir, "monolithic", &mono))?;
    let router = stage("train-router", train_router_arm(config, train))?;
    stage("train-router", save_router(dir, &router))?;
    Ok(TrainSummary {
        iso: IsoAudit {
            monolithic_items: mono.items_consumed,
            expert_items: experts.iter().map(|e| e.items_consumed).collect(),
            expert_cluster_audit: experts.iter().map(|e| e.cluster_audit.clone()).collect(),
        },
        router_accuracy: router.accuracy_trace.last().map_or(f64::NAN, |a| a.1),
    })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub iso: IsoAudit,
    pub router_accuracy: f64,
}

/// The full comparison: data, all arms, sampling under a shared protocol,
/// metrics, and report files under `config.out_dir`.
pub fn run_comparison(config: &ExperimentConfig) -> Result<ComparisonReport> {
    stage("config", config.validate())?;
    let dir = RunDir::new(&config.out_dir);
    stage("data", dir.create())?;
    let (train, eval) = stage("data", ensure_data(config, &dir))?;
    let summary = train_all(config, &dir, &train)?;
    let report = stage("evaluate", evaluate_comparison(config, &dir, &train, &eval, summary))?;
    stage("report", report::emit_report(&report, dir.root()))?;
    Ok(report)
}

/// Samples and scores every arm from checkpoints already in `dir`.
pub fn evaluate_comparison(
    config: &ExperimentConfig,
    dir: &RunDir,
    train: &Dataset,
    eval: &Dataset,
    summary: TrainSummary,
) -> Result<ComparisonReport> {
    let experts = load_experts(config, dir)?;
    let mono = load_net(dir, "monolithic", &expert_widths(config))?;
    let router_net = load_router(config, dir)?;
    let probe = fit_probe(config, train)?;
    let prompts = eval.conditions();
    let reference: Vec<Clip> = eval.items.iter().map(|it| it.clip.clone()).collect();

    let ddm_cfg = sampler_config(config, SamplingMode::Routed);
    let ddm = Ensemble::new(&experts, Some(&router_net), &config.data);
    let (ddm_report, ddm_out) = evaluate_arm(&ddm, &prompts, &ddm_cfg, &reference, &probe)?;
    write_samples(&dir.samples("ddm"), eval, &prompts, &ddm_out, &ddm_cfg)?;

    let mono_cfg = sampler_config(config, SamplingMode::Single(0));
    let mono_pool = [mono];
    let mono_ens = Ensemble::new(&mono_pool, None, &config.data);
    let (mono_report, mono_out) = evaluate_arm(&mono_ens, &prompts, &mono_cfg, &reference, &probe)?;
    write_samples(&dir.samples("monolithic"), eval, &prompts, &mono_out, &mono_cfg)?;

    let mut expert_reports = Vec::with_capacity(experts.len());
    for k in 0..experts.len() {
        let cfg = sampler_config(config, SamplingMode::Single(k));
        let ens = Ensemble::new(&experts, None, &config.data);
        expert_reports.push(evaluate_arm(&ens, &prompts, &cfg, &reference, &probe)?.0);
    }

    let mut checkpoint_hashes = BTreeMap::new();
    let mut names: Vec<String> = (0..experts.len()).map(|k| ArmKind::Expert(k).name()).collect();
    names.push("monolithic".into());
    names.push("router".into());
    for name in names {
        checkpoint_hashes.insert(name.clone(), file_hash(&dir.checkpoint(&name))?);
    }
    let mut dataset_hashes = BTreeMap::new();
    dataset_hashes.insert("train".to_string(), file_hash(&dir.train_data())?);
    dataset_hashes.insert("eval".to_string(), file_hash(&dir.eval_data())?);
    let mut protocol = BTreeMap::new();
    protocol.insert("ddm".to_string(), protocol_hash(&prompts, &ddm_cfg));
    protocol.insert("monolithic".to_string(), protocol_hash(&prompts, &mono_cfg));

    Ok(report::build_comparison(
        ddm_report,
        mono_report,
        expert_reports,
        eval.items.iter().map(|it| it.cond.cluster).collect(),
        summary.router_accuracy,
        summary.iso,
        Provenance {
            config_hash: config.hash(),
            dataset_hashes,
            checkpoint_hashes,
            protocol,
            expert_init: "independent seeds per expert".into(),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecializationResult {
    pub expert: usize,
    pub in_scores: Vec<f64>,
    pub out_scores: Vec<f64>,
    pub gap: SpecializationGap,
}

/// Scores expert `k` on its own cluster's held-out prompts and on an equally
/// sized stratified mixture of all clusters' prompts.
pub fn specialization_probe(
    config: &ExperimentConfig,
    experts: &[NetParams],
    k: usize,
    train: &Dataset,
    eval: &Dataset,
) -> Result<SpecializationResult> {
    if k >= experts.len() {
        return Err(Error::invalid(format!("expert {k} does not exist")));
    }
    let probe = fit_probe(config, train)?;
    let in_prompts: Vec<Condition> = eval
        .items
        .iter()
        .filter(|it| it.cond.cluster == k)
        .map(|it| it.cond.clone())
        .collect();
    let generic: Vec<Condition> = eval
        .items
        .iter()
        .take(in_prompts.len())
        .map(|it| it.cond.clone())
        .collect();
    let ens = Ensemble::new(experts, None, &config.data);
    let cfg = sampler_config(config, SamplingMode::Single(k));
    let score = |prompts: &[Condition]| -> Result<Vec<f64>> {
        sampler::sample_prompts(&ens, prompts, &cfg)?
            .iter()
            .zip(prompts)
            .map(|(o, c)| metrics::alignment_score(&probe, &o.clip, &c.pooled))
            .collect()
    };
    let in_scores = score(&in_prompts)?;
    let out_scores = score(&generic)?;
    let gap = metrics::specialization_gap(&in_scores, &out_scores)?;
    Ok(SpecializationResult {
        expert: k,
        in_scores,
        out_scores,
        gap,
    })
}

/// Specialization probe over checkpoints already trained under `config.out_dir`.
pub fn run_specialization_probe(config: &ExperimentConfig, k: usize) -> Result<SpecializationResult> {
    let dir = RunDir::new(&config.out_dir);
    let experts = stage("load-checkpoints", load_experts(config, &dir))?;
    let (train, eval) = stage("data", ensure_data(config, &dir))?;
    let result = stage("probe", specialization_probe(config, &experts, k, &train, &eval))?;
    let json = serde_json::to_string_pretty(&result).expect("serializable");
    stage("report", fs::write(dir.root().join(format!("specialization_expert_{k}.json")), json).map_err(Error::from))?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingReport {
    pub schedules: BTreeMap<String, MetricReport>,
    pub baseline: BTreeSet<String>,
    pub preference_count: usize,
    pub prompts: usize,
}

pub const SINGLE_A: &str = "single_a";
pub const SINGLE_B: &str = "single_b";
pub const ALTERNATE_A: &str = "alternate_a_first";
pub const ALTERNATE_B: &str = "alternate_b_first";

/// Evaluates single-a, single-b and both alternating orders on the first
/// `config.switching_prompts` held-out prompts, router bypassed.
pub fn switching_ablation(
    config: &ExperimentConfig,
    pair: [&NetParams; 2],
    train: &Dataset,
    eval: &Dataset,
) -> Result<SwitchingReport> {
    let n = config.switching_prompts.min(eval.len());
    let prompts: Vec<Condition> = eval.items[..n].iter().map(|it| it.cond.clone()).collect();
    let reference: Vec<Clip> = eval.items.iter().map(|it| it.clip.clone()).collect();
    let probe = fit_probe(config, train)?;
    let pool = [pair[0].clone(), pair[1].clone()];
    let ens = Ensemble::new(&pool, None, &config.data);
    let modes = [
        (SINGLE_A, SamplingMode::Single(0)),
        (SINGLE_B, SamplingMode::Single(1)),
        (
            ALTERNATE_A,
            SamplingMode::Schedule(sampler::alternating_schedule(config.n_steps, (0, 1), 0)?),
        ),
        (
            ALTERNATE_B,
            SamplingMode::Schedule(sampler::alternating_schedule(config.n_steps, (0, 1), 1)?),
        ),
    ];
    let mut schedules = BTreeMap::new();
    for (name, mode) in modes {
        let cfg = sampler_config(config, mode);
        let (report, _) = evaluate_arm(&ens, &prompts, &cfg, &reference, &probe)?;
        schedules.insert(name.to_string(), report);
    }
    let baseline: BTreeSet<String> = [SINGLE_A, SINGLE_B].iter().map(|s| s.to_string()).collect();
    let per_prompt: BTreeMap<String, Vec<f64>> = schedules
        .iter()
        .map(|(k, r)| (k.clone(), r.per_prompt.clone()))
        .collect();
    let preference_count = metrics::schedule_preference(&per_prompt, &baseline)?;
    Ok(SwitchingReport {
        schedules,
        baseline,
        preference_count,
        prompts: n,
    })
}

/// Which expert pair the switching ablation runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchingPair {
    /// Two experts of the trained pool, by index.
    Pool(usize, usize),
    /// A high-noise and a low-noise specialist trained for the ablation.
    NoiseSpecialists,
}

pub fn run_switching_ablation(config: &ExperimentConfig, pair: SwitchingPair) -> Result<SwitchingReport> {
    let dir = RunDir::new(&config.out_dir);
    let (train, eval) = stage("data", ensure_data(config, &dir))?;
    let widths = expert_widths(config);
    let (a, b) = match pair {
        SwitchingPair::Pool(a, b) => {
            if a == b {
                return Err(Error::invalid("switching pair needs two distinct experts"));
            }
            let a = stage("load-checkpoints", load_net(&dir, &ArmKind::Expert(a).name(), &widths))?;
            let b = stage("load-checkpoints", load_net(&dir, &ArmKind::Expert(b).name(), &widths))?;
            (a, b)
        }
        SwitchingPair::NoiseSpecialists => {
            let (hi_path, lo_path) = (dir.checkpoint(HIGH_NOISE_EXPERT), dir.checkpoint(LOW_NOISE_EXPERT));
            if !(hi_path.exists() && lo_path.exists()) {
                let (hi, lo) = stage("train-specialists", train_noise_specialists(config, &train))?;
                stage("train-specialists", save_arm(&dir, HIGH_NOISE_EXPERT, &hi))?;
                stage("train-specialists", save_arm(&dir, LOW_NOISE_EXPERT, &lo))?;
            }
            (
                stage("load-checkpoints", load_net(&dir, HIGH_NOISE_EXPERT, &widths))?,
                stage("load-checkpoints", load_net(&dir, LOW_NOISE_EXPERT, &widths))?,
            )
        }
    };
    let report = stage("evaluate", switching_ablation(config, [&a, &b], &train, &eval))?;
    let json = serde_json::to_string_pretty(&report).expect("serializable");
    stage("report", fs::write(dir.root().join("switching_ablation.json"), json).map_err(Error::from))?;
    Ok(report)
}
