use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use ddm_core::harness::experiment::{self, RunDir, SwitchingPair};
use ddm_core::harness::{self, report, ExperimentConfig};
use ddm_core::sampler::{self, Ensemble, SamplingMode};
use ddm_core::flow::ArmKind;

#[derive(Parser)]
#[command(name = "ddmlab", version, about = "Toy decentralized diffusion experiments")]
struct Cli {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sets data, train and eval seeds at once (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Routed,
    Single,
    Schedule,
}

#[derive(Subcommand)]
enum Command {
    /// Build and cache the training and held-out datasets.
    GenData,
    /// Train one cluster expert.
    TrainExpert {
        #[arg(long)]
        cluster: usize,
    },
    /// Train the monolithic baseline on all clusters.
    TrainMonolithic,
    /// Train the router.
    TrainRouter,
    /// Sample clips for the held-out prompts from trained checkpoints.
    Sample {
        #[arg(long, value_enum, default_value = "routed")]
        mode: Mode,
        /// Expert index for `--mode single`.
        #[arg(long, default_value_t = 0)]
        expert: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        cfg: Option<f64>,
        #[arg(long)]
        topk: Option<usize>,
        /// Per-step expert indices for `--mode schedule`.
        #[arg(long, value_delimiter = ',')]
        schedule: Option<Vec<usize>>,
        /// Number of held-out prompts to sample (default: all).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Full monolithic-vs-ensemble comparison.
    Compare,
    /// Router-bypassed schedule ablation over two experts.
    AblateSwitching {
        /// Two pool experts, e.g. `0,1`. Without it, a high-noise and a
        /// low-noise specialist are trained and used.
        #[arg(long, value_delimiter = ',')]
        pair: Option<Vec<usize>>,
    },
    /// In-cluster versus generic alignment of one expert.
    ProbeSpecialization {
        #[arg(long)]
        expert: usize,
    },
    /// Print the relative-improvement table of a finished comparison.
    Report,
}

fn load(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => harness::load_config(path).context("config")?,
        None => ExperimentConfig::with_seed(cli.seed.unwrap_or(0)),
    };
    if let Some(seed) = cli.seed {
        config.data_seed = seed;
        config.train_seed = seed;
        config.eval_seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    config.validate().context("config")?;
    Ok(config)
}

fn stage<T>(name: &str, r: ddm_core::Result<T>) -> anyhow::Result<T> {
    r.with_context(|| format!("stage {name} failed"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = load(&cli)?;
    let dir = RunDir::new(&config.out_dir);
    match cli.command {
        Command::GenData => {
            let (train, eval) = stage("data", experiment::ensure_data(&config, &dir))?;
            println!("train items: {}, eval items: {}", train.len(), eval.len());
        }
        Command::TrainExpert { cluster } => {
            let (train, _) = stage("data", experiment::ensure_data(&config, &dir))?;
            let out = stage("train-expert", experiment::train_expert(&config, &train, cluster))?;
            stage("train-expert", experiment::save_arm(&dir, &ArmKind::Expert(cluster).name(), &out))?;
            println!("final loss: {}", out.losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::TrainMonolithic => {
            let (train, _) = stage("data", experiment::ensure_data(&config, &dir))?;
            let out = stage("train-monolithic", experiment::train_monolithic(&config, &train))?;
            stage("train-monolithic", experiment::save_arm(&dir, "monolithic", &out))?;
            println!("final loss: {}", out.losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::TrainRouter => {
            let (train, _) = stage("data", experiment::ensure_data(&config, &dir))?;
            let out = stage("train-router", experiment::train_router_arm(&config, &train))?;
            stage("train-router", experiment::save_router(&dir, &out))?;
            if let Some((_, acc)) = out.accuracy_trace.last() {
                println!("held-out accuracy: {acc}");
            }
        }
        Command::Sample {
            mode,
            expert,
            steps,
            cfg,
            topk,
            schedule,
            count,
        } => {
            let (_, eval) = stage("data", experiment::ensure_data(&config, &dir))?;
            let experts = stage("load-checkpoints", experiment::load_experts(&config, &dir))?;
            let n_steps = steps.unwrap_or(config.n_steps);
            let (mode, router, name) = match mode {
                Mode::Routed => (
                    SamplingMode::Routed,
                    Some(stage("load-checkpoints", experiment::load_router(&config, &dir))?),
                    "routed".to_string(),
                ),
                Mode::Single => (SamplingMode::Single(expert), None, format!("single_{expert}")),
                Mode::Schedule => {
                    let Some(steps_list) = schedule else {
                        bail!("stage sample failed: --mode schedule needs --schedule");
                    };
                    let s = stage("sample", sampler::ExpertSchedule::new(steps_list, experts.len()))?;
                    (SamplingMode::Schedule(s), None, "schedule".to_string())
                }
            };
            let mut sc = experiment::sampler_config(&config, mode);
            sc.n_steps = n_steps;
            if let Some(c) = cfg {
                sc.cfg_scale = c;
            }
            if let Some(k) = topk {
                sc.top_k = k;
            }
            let prompts = eval.conditions();
            let prompts = &prompts[..count.unwrap_or(prompts.len()).min(prompts.len())];
            let ens = Ensemble::new(&experts, router.as_ref(), &config.data);
            let outputs = stage("sample", sampler::sample_prompts(&ens, prompts, &sc))?;
            let path = dir.samples(&name);
            stage("sample", experiment::write_samples(&path, &eval, prompts, &outputs, &sc))?;
            println!("wrote {} clips to {}", outputs.len(), path.display());
        }
        Command::Compare => {
            let r = harness::run_comparison(&config)?;
            print!("{}", report::relative_improvement_csv(&r.relative));
        }
        Command::AblateSwitching { pair } => {
            let pair = match pair.as_deref() {
                None => SwitchingPair::NoiseSpecialists,
                Some([a, b]) => SwitchingPair::Pool(*a, *b),
                Some(_) => bail!("stage config failed: --pair takes exactly two indices"),
            };
            let r = harness::run_switching_ablation(&config, pair)?;
            for (name, m) in &r.schedules {
                println!("{name}: alignment {:.4} ± {:.4}, frechet {:.4}", m.alignment_mean, m.alignment_se, m.frechet);
            }
            println!("preference: {} of {}", r.preference_count, r.prompts);
        }
        Command::ProbeSpecialization { expert } => {
            let r = harness::run_specialization_probe(&config, expert)?;
            println!(
                "expert {}: in {:.4}, generic {:.4}, gap {:.4} ± {:.4}",
                r.expert, r.gap.in_mean, r.gap.out_mean, r.gap.gap, r.gap.se
            );
        }
        Command::Report => {
            let r = stage("report", report::load_report(dir.root()))?;
            stage("report", report::emit_report(&r, dir.root()))?;
            print!("{}", report::relative_improvement_csv(&r.relative));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
