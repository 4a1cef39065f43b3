//! Experiment configuration: a flat TOML file of `key = value` pairs.
//!
//! Only `seed` is required. Every other key has a documented default, and
//! unknown keys are rejected by name.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use toml::Value;

use crate::datagen::{stratified_counts, GenParams};
use crate::error::{Error, Result};
use crate::flow::{self, TimeSampling, EXPERT_HIDDEN};
use crate::metrics::DEFAULT_PROBE_LAMBDA;
use crate::nn::AdamConfig;
use crate::router::DEFAULT_TOP_K;
use crate::sampler::{GuidancePlacement, DEFAULT_CFG_SCALE, DEFAULT_STEPS};

/// Offsets that keep derived seeds apart when only `seed` is given.
const ROUTER_SEED_OFFSET: u64 = 0x5eed;
const HELDOUT_SEED_SALT: u64 = 0xe7a1_0000_0000_0000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub data: GenParams,
    pub n_train_per_cluster: usize,
    pub n_eval: usize,

    pub total_steps: usize,
    pub batch_size: usize,
    pub p_drop: f64,
    pub lr: f64,
    pub expert_hidden: Vec<usize>,
    pub router_steps: usize,

    pub n_steps: usize,
    pub cfg_scale: f64,
    pub top_k: usize,
    pub guidance: GuidancePlacement,
    pub probe_lambda: f64,

    /// Prompt count of the switching ablation.
    pub switching_prompts: usize,
    /// Timestep distribution of the induced high-noise expert; the low-noise
    /// expert uses the mirrored shape.
    pub high_noise_time: TimeSampling,

    pub data_seed: u64,
    pub train_seed: u64,
    pub eval_seed: u64,

    /// Output location; not part of the experiment identity.
    #[serde(skip)]
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Defaults with every seed set to `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            data: GenParams::default(),
            n_train_per_cluster: 400,
            n_eval: 300,
            total_steps: 6000,
            batch_size: 64,
            p_drop: flow::DEFAULT_P_DROP,
            lr: AdamConfig::default().lr,
            expert_hidden: EXPERT_HIDDEN.to_vec(),
            router_steps: 1500,
            n_steps: DEFAULT_STEPS,
            cfg_scale: DEFAULT_CFG_SCALE,
            top_k: DEFAULT_TOP_K,
            guidance: GuidancePlacement::PerExpert,
            probe_lambda: DEFAULT_PROBE_LAMBDA,
            switching_prompts: 40,
            high_noise_time: TimeSampling::Beta {
                alpha: 5.0,
                beta: 1.0,
            },
            data_seed: seed,
            train_seed: seed,
            eval_seed: seed,
            out_dir: PathBuf::from("runs"),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn expert_seed(&self, k: usize) -> u64 {
        self.train_seed.wrapping_add(k as u64)
    }

    /// The monolithic arm shares expert 0's seed, so a one-cluster ensemble
    /// trains exactly the monolithic model.
    pub fn monolithic_seed(&self) -> u64 {
        self.train_seed
    }

    pub fn router_seed(&self) -> u64 {
        self.train_seed.wrapping_add(ROUTER_SEED_OFFSET)
    }

    pub fn heldout_seed(&self) -> u64 {
        self.data_seed ^ HELDOUT_SEED_SALT
    }

    pub fn low_noise_time(&self) -> TimeSampling {
        match self.high_noise_time {
            TimeSampling::Beta { alpha, beta } => TimeSampling::Beta {
                alpha: beta,
                beta: alpha,
            },
            TimeSampling::Uniform => TimeSampling::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate().map_err(|e| Error::Config(e.to_string()))?;
        let positive = [
            ("n_train_per_cluster", self.n_train_per_cluster),
            ("n_eval", self.n_eval),
            ("batch_size", self.batch_size),
            ("n_steps", self.n_steps),
            ("top_k", self.top_k),
            ("switching_prompts", self.switching_prompts),
            ("router_steps", self.router_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be at least 1")));
            }
        }
        if self.top_k > self.data.clusters {
            return Err(Error::Config(format!(
                "`top_k` = {} exceeds the {} clusters",
                self.top_k, self.data.clusters
            )));
        }
        if stratified_counts(self.n_eval, self.data.clusters).contains(&0) {
            return Err(Error::Config(format!(
                "`n_eval` = {} cannot cover {} clusters",
                self.n_eval, self.data.clusters
            )));
        }
        if self.n_train_per_cluster * self.data.clusters <= self.data.clip_len() {
            return Err(Error::Config(format!(
                "the alignment probe needs more than {} training items",
                self.data.clip_len()
            )));
        }
        flow::iso_flop_split(self.total_steps, self.data.clusters)
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::Config(format!("`p_drop` = {} outside [0, 1)", self.p_drop)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("`lr` = {} must be positive", self.lr)));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::Config(format!("`cfg_scale` = {} must be >= 0", self.cfg_scale)));
        }
        if !(self.probe_lambda > 0.0 && self.probe_lambda.is_finite()) {
            return Err(Error::Config(format!(
                "`probe_lambda` = {} must be positive",
                self.probe_lambda
            )));
        }
        if self.expert_hidden.is_empty() || self.expert_hidden.contains(&0) {
            return Err(Error::Config("`expert_hidden` needs positive widths".into()));
        }
        if let TimeSampling::Beta { alpha, beta } = self.high_noise_time {
            if !(alpha > 0.0 && beta > 0.0) {
                return Err(Error::Config("`high_noise_beta` needs positive shapes".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form (output directory excluded).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex_digest(&json)
    }
}

/// Lowercase hex SHA-256.
pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn type_err(key: &str, want: &str) -> Error {
    Error::Config(format!("`{key}` must be {want}"))
}

fn as_count(key: &str, v: &Value) -> Result<usize> {
    let i = v.as_integer().ok_or_else(|| type_err(key, "an integer"))?;
    usize::try_from(i).map_err(|_| Error::Config(format!("`{key}` = {i} must be non-negative")))
}

fn as_seed(key: &str, v: &Value) -> Result<u64> {
    let i = v.as_integer().ok_or_else(|| type_err(key, "an integer"))?;
    u64::try_from(i).map_err(|_| Error::Config(format!("`{key}` = {i} must be non-negative")))
}

fn as_real(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(type_err(key, "a number")),
    }
}

fn as_counts(key: &str, v: &Value) -> Result<Vec<usize>> {
    v.as_array()
        .ok_or_else(|| type_err(key, "an array of integers"))?
        .iter()
        .map(|x| as_count(key, x))
        .collect()
}

/// Parses configuration text. `seed` is required; every other key is optional.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let seed = table
        .get("seed")
        .ok_or_else(|| Error::Config("missing required key `seed`".into()))
        .and_then(|v| as_seed("seed", v))?;
    let mut c = ExperimentConfig::with_seed(seed);
    for (key, v) in &table {
        let k = key.as_str();
        match k {
            "seed" => {}
            "clusters" => c.data.clusters = as_count(k, v)?,
            "frames" => c.data.frames = as_count(k, v)?,
            "dim" => c.data.dim = as_count(k, v)?,
            "cond_dim" => c.data.cond_dim = as_count(k, v)?,
            "pooled_dim" => c.data.pooled_dim = as_count(k, v)?,
            "sigma_c" => c.data.sigma_c = as_real(k, v)?,
            "n_train_per_cluster" => c.n_train_per_cluster = as_count(k, v)?,
            "n_eval" => c.n_eval = as_count(k, v)?,
            "total_steps" => c.total_steps = as_count(k, v)?,
            "batch_size" => c.batch_size = as_count(k, v)?,
            "p_drop" => c.p_drop = as_real(k, v)?,
            "lr" => c.lr = as_real(k, v)?,
            "expert_hidden" => c.expert_hidden = as_counts(k, v)?,
            "router_steps" => c.router_steps = as_count(k, v)?,
            "n_steps" => c.n_steps = as_count(k, v)?,
            "cfg_scale" => c.cfg_scale = as_real(k, v)?,
            "top_k" => c.top_k = as_count(k, v)?,
            "guidance" => {
                c.guidance = match v.as_str() {
                    Some("per_expert") => GuidancePlacement::PerExpert,
                    Some("after_mixing") => GuidancePlacement::AfterMixing,
                    _ => return Err(type_err(k, "\"per_expert\" or \"after_mixing\"")),
                }
            }
            "probe_lambda" => c.probe_lambda = as_real(k, v)?,
            "switching_prompts" => c.switching_prompts = as_count(k, v)?,
            "high_noise_beta" => {
                let arr = v
                    .as_array()
                    .filter(|a| a.len() == 2)
                    .ok_or_else(|| type_err(k, "a pair [alpha, beta]"))?;
                c.high_noise_time = TimeSampling::Beta {
                    alpha: as_real(k, &arr[0])?,
                    beta: as_real(k, &arr[1])?,
                };
            }
            "data_seed" => c.data_seed = as_seed(k, v)?,
            "train_seed" => c.train_seed = as_seed(k, v)?,
            "eval_seed" => c.eval_seed = as_seed(k, v)?,
            "out_dir" => {
                c.out_dir = PathBuf::from(v.as_str().ok_or_else(|| type_err(k, "a string"))?)
            }
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let c = parse_config("seed = 3\n").unwrap();
        assert_eq!(c, ExperimentConfig::with_seed(3));
        assert_eq!(c.n_steps, 50);
        assert_eq!(c.cfg_scale, 7.5);
        assert_eq!(c.top_k, 1);
        assert_eq!(c.switching_prompts, 40);
        assert_eq!(c.data, GenParams::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config("seed = 1\nfoo = 2\n").unwrap_err().to_string();
        assert!(err.contains("unknown key `foo`"), "{err}");
    }

    #[test]
    fn validation_errors() {
        let err = parse_config("seed = 1\nn_steps = -5\n").unwrap_err().to_string();
        assert!(err.contains("n_steps"), "{err}");
        assert!(parse_config("seed = 1\nn_steps = 0\n").is_err());
        assert!(parse_config("seed = 1\ntotal_steps = 3001\n").is_err());
        assert!(parse_config("seed = 1\ncfg_scale = \"big\"\n").is_err());
        assert!(parse_config("seed = 1\ntop_k = 4\n").is_err());
        let missing = parse_config("n_steps = 5\n").unwrap_err().to_string();
        assert!(missing.contains("seed"), "{missing}");
    }

    #[test]
    fn overrides_apply() {
        let c = parse_config(
            "seed = 9\nclusters = 1\ntotal_steps = 120\nhigh_noise_beta = [4, 1.5]\nguidance = \"after_mixing\"\nout_dir = \"x/y\"\n",
        )
        .unwrap();
        assert_eq!(c.data.clusters, 1);
        assert_eq!(c.total_steps, 120);
        assert_eq!(c.high_noise_time, TimeSampling::Beta { alpha: 4.0, beta: 1.5 });
        assert_eq!(c.low_noise_time(), TimeSampling::Beta { alpha: 1.5, beta: 4.0 });
        assert_eq!(c.guidance, GuidancePlacement::AfterMixing);
        assert_eq!(c.out_dir, PathBuf::from("x/y"));
    }

    #[test]
    fn hash_ignores_output_directory() {
        let mut a = ExperimentConfig::with_seed(1);
        let mut b = a.clone();
        b.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        a.n_eval += 3;
        assert_ne!(a.hash(), b.hash());
    }
}
