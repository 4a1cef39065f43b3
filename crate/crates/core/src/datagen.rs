//! Synthetic clustered trajectory data standing in for cached video latents
//! and their text embeddings.
//!
//! Each cluster is a procedural motion family over an `F × D` frame sequence:
//!
//! * cluster 0, linear drift: `frame_f = start + f * drift`
//! * cluster 1, planar rotation of `start` by `f * omega` in dims 0 and 1
//! * cluster 2, oscillation: `frame_f = start + sin(f * omega) * amp`

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Header};
use crate::error::{Error, FormatError, Result};
use crate::rng::{self, Stream};

pub const DATASET_MAGIC: &str = "DDMLAB-DS";

/// Number of procedural motion families the generator knows.
pub const NUM_FAMILIES: usize = 3;

/// Scale of the one-hot cluster marker in the full condition.
pub const CLUSTER_GAIN: f64 = 8.0;

/// An `F × D` frame sequence stored row-major (frame-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Clip {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if frames < 1 || dim < 1 {
            return Err(Error::invalid(format!("clip shape {frames}x{dim}")));
        }
        if data.len() != frames * dim {
            return Err(Error::shape("clip", frames * dim, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("clip"));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        &self.data[f * self.dim..(f + 1) * self.dim]
    }

    /// Flattened row-major view, the layout every network consumes.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    /// Expert-side condition, width `C`.
    pub full: Vec<f64>,
    /// Router-side block-mean of `full`, width `P`.
    pub pooled: Vec<f64>,
    pub cluster: usize,
}

/// Shape and noise parameters shared by every item of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub clusters: usize,
    pub frames: usize,
    pub dim: usize,
    pub cond_dim: usize,
    pub pooled_dim: usize,
    pub sigma_c: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            clusters: 3,
            frames: 8,
            dim: 4,
            cond_dim: 16,
            pooled_dim: 4,
            sigma_c: 0.05,
        }
    }
}

impl GenParams {
    pub fn clip_len(&self) -> usize {
        self.frames * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.clusters > NUM_FAMILIES {
            return Err(Error::invalid(format!(
                "clusters must be in 1..={NUM_FAMILIES}, got {}",
                self.clusters
            )));
        }
        if self.frames < 2 || self.dim < 2 {
            return Err(Error::invalid(format!(
                "need frames >= 2 and dim >= 2, got {}x{}",
                self.frames, self.dim
            )));
        }
        if self.pooled_dim == 0 || self.pooled_dim >= self.cond_dim {
            return Err(Error::invalid(format!(
                "pooled_dim must be in 1..cond_dim, got {} (cond_dim {})",
                self.pooled_dim, self.cond_dim
            )));
        }
        if !self.cond_dim.is_multiple_of(self.pooled_dim) {
            return Err(Error::invalid(format!(
                "cond_dim {} is not divisible by pooled_dim {}",
                self.cond_dim, self.pooled_dim
            )));
        }
        if self.clusters > self.pooled_dim {
            return Err(Error::invalid(format!(
                "{} clusters need at least as many pooled blocks, got {}",
                self.clusters, self.pooled_dim
            )));
        }
        if !(self.sigma_c.is_finite() && self.sigma_c >= 0.0) {
            return Err(Error::invalid(format!("sigma_c = {}", self.sigma_c)));
        }
        Ok(())
    }
}

/// Length of the per-sample parameter vector of `cluster`.
pub fn param_len(cluster: usize, dim: usize) -> Option<usize> {
    match cluster {
        0 => Some(2 * dim),     // start, drift
        1 => Some(dim + 1),     // start, omega
        2 => Some(2 * dim + 1), // start, amp, omega
        _ => None,
    }
}

pub fn generate_clip(cluster: usize, params: &[f64], frames: usize, dim: usize) -> Result<Clip> {
    let expected = param_len(cluster, dim)
        .ok_or_else(|| Error::invalid(format!("unknown cluster index {cluster}")))?;
    if frames < 2 || dim < 2 {
        return Err(Error::invalid(format!("clip shape {frames}x{dim}")));
    }
    if params.len() != expected {
        return Err(Error::shape("cluster parameters", expected, params.len()));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("cluster parameters"));
    }
    let start = &params[..dim];
    let mut data = Vec::with_capacity(frames * dim);
    for f in 0..frames {
        let fl = f as f64;
        match cluster {
            0 => {
                let drift = &params[dim..];
                data.extend(start.iter().zip(drift).map(|(s, d)| s + fl * d));
            }
            1 => {
                let (sin, cos) = (fl * params[dim]).sin_cos();
                data.push(cos * start[0] - sin * start[1]);
                data.push(sin * start[0] + cos * start[1]);
                data.extend_from_slice(&start[2..]);
            }
            _ => {
                let amp = &params[dim..2 * dim];
                let s = (fl * params[2 * dim]).sin();
                data.extend(start.iter().zip(amp).map(|(st, a)| st + s * a));
            }
        }
    }
    Clip::new(frames, dim, data)
}

/// Draws per-sample parameters from the cluster's ranges.
pub fn sample_params(cluster: usize, dim: usize, rng: &mut Stream) -> Result<Vec<f64>> {
    let len = param_len(cluster, dim)
        .ok_or_else(|| Error::invalid(format!("unknown cluster index {cluster}")))?;
    let mut p = Vec::with_capacity(len);
    p.extend((0..dim).map(|_| rng.random_range(-1.0..=1.0)));
    match cluster {
        0 => p.extend((0..dim).map(|_| rng.random_range(-0.5..=0.5))),
        1 => p.push(rng.random_range(PI / 8.0..=PI / 2.0)),
        _ => {
            p.extend((0..dim).map(|_| rng.random_range(0.5..=1.5)));
            p.push(rng.random_range(PI / 8.0..=PI / 2.0));
        }
    }
    Ok(p)
}

/// Block means of `full` with block size `full.len() / pooled_dim`.
pub fn pool(full: &[f64], pooled_dim: usize) -> Result<Vec<f64>> {
    if pooled_dim == 0 || !full.len().is_multiple_of(pooled_dim) {
        return Err(Error::invalid(format!(
            "condition width {} is not divisible by pooled width {pooled_dim}",
            full.len()
        )));
    }
    let block = full.len() / pooled_dim;
    Ok(full
        .chunks_exact(block)
        .map(|c| c.iter().sum::<f64>() / block as f64)
        .collect())
}

/// Noise-free full condition: the cluster marker sits at the first slot of
/// block `cluster`; the per-sample parameters fill the remaining slots in
/// order (truncated if they do not fit), and the rest is zero.
pub fn condition_template(cluster: usize, params: &[f64], cond_dim: usize, pooled_dim: usize) -> Vec<f64> {
    let block = cond_dim / pooled_dim;
    let mut full = vec![0.0; cond_dim];
    full[cluster * block] = CLUSTER_GAIN;
    let free = (0..cond_dim).filter(|i| i % block != 0);
    for (slot, &p) in free.zip(params) {
        full[slot] = p;
    }
    full
}

pub fn make_condition(
    cluster: usize,
    params: &[f64],
    sigma_c: f64,
    cond_dim: usize,
    pooled_dim: usize,
    rng: &mut Stream,
) -> Result<Condition> {
    if !(sigma_c.is_finite() && sigma_c >= 0.0) {
        return Err(Error::invalid(format!("sigma_c = {sigma_c}")));
    }
    if pooled_dim == 0 || !cond_dim.is_multiple_of(pooled_dim) {
        return Err(Error::invalid(format!(
            "condition width {cond_dim} is not divisible by pooled width {pooled_dim}"
        )));
    }
    if cluster >= pooled_dim {
        return Err(Error::invalid(format!(
            "cluster {cluster} has no pooled block (pooled width {pooled_dim})"
        )));
    }
    let mut full = condition_template(cluster, params, cond_dim, pooled_dim);
    for v in &mut full {
        let z: f64 = rng.sample(StandardNormal);
        *v += sigma_c * z;
    }
    let pooled = pool(&full, pooled_dim)?;
    Ok(Condition {
        full,
        pooled,
        cluster,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub clip: Clip,
    pub cond: Condition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub params: GenParams,
    pub seed: u64,
    pub items: Vec<Item>,
    pub cluster_counts: Vec<usize>,
}

/// Per-cluster counts for `n` items over `k` clusters; the remainder goes one
/// each to the lowest cluster indices.
pub fn stratified_counts(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|c| n / k + usize::from(c < n % k)).collect()
}

/// `n_per_cluster` items for each of the configured clusters.
pub fn build_dataset(params: &GenParams, n_per_cluster: usize, seed: u64) -> Result<Dataset> {
    if n_per_cluster == 0 {
        return Err(Error::invalid("n_per_cluster must be at least 1"));
    }
    build_stratified(params, n_per_cluster * params.clusters, seed)
}

/// `n_total` items assigned round-robin over clusters, so item `i` belongs to
/// cluster `i mod K` and counts follow [`stratified_counts`].
pub fn build_stratified(params: &GenParams, n_total: usize, seed: u64) -> Result<Dataset> {
    params.validate()?;
    if n_total == 0 {
        return Err(Error::invalid("dataset must contain at least one item"));
    }
    let k = params.clusters;
    let mut rng = rng::stream(seed, rng::tags::DATASET);
    let mut items = Vec::with_capacity(n_total);
    for i in 0..n_total {
        let cluster = i % k;
        let p = sample_params(cluster, params.dim, &mut rng)?;
        let clip = generate_clip(cluster, &p, params.frames, params.dim)?;
        let cond = make_condition(
            cluster,
            &p,
            params.sigma_c,
            params.cond_dim,
            params.pooled_dim,
            &mut rng,
        )?;
        items.push(Item { clip, cond });
    }
    Ok(Dataset {
        params: *params,
        seed,
        items,
        cluster_counts: stratified_counts(n_total, k),
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn conditions(&self) -> Vec<Condition> {
        self.items.iter().map(|it| it.cond.clone()).collect()
    }

    /// Items of a single cluster, in dataset order.
    pub fn cluster_items(&self, cluster: usize) -> Vec<Item> {
        self.items
            .iter()
            .filter(|it| it.cond.cluster == cluster)
            .cloned()
            .collect()
    }

    fn item_width(&self) -> usize {
        self.params.clip_len() + self.params.cond_dim + self.params.pooled_dim + 1
    }

    /// Serializes with `kind` and any extra header fields (used by sample files
    /// to echo sampler settings).
    pub fn to_bytes_with(&self, kind: &str, extra: &[(&str, String)]) -> Vec<u8> {
        let p = &self.params;
        let mut h = Header::new(DATASET_MAGIC);
        h.set("kind", kind)
            .set("clusters", p.clusters)
            .set("frames", p.frames)
            .set("dim", p.dim)
            .set("cond_dim", p.cond_dim)
            .set("pooled_dim", p.pooled_dim)
            .set("sigma_c", p.sigma_c)
            .set("seed", self.seed)
            .set("items", self.items.len())
            .set("cluster_counts", codec::join_list(&self.cluster_counts));
        for (k, v) in extra {
            h.set(k, v);
        }
        let mut blob = Vec::with_capacity(self.items.len() * self.item_width());
        for it in &self.items {
            blob.extend_from_slice(it.clip.as_slice());
            blob.extend_from_slice(&it.cond.full);
            blob.extend_from_slice(&it.cond.pooled);
            blob.push(it.cond.cluster as f64);
        }
        codec::encode(&h, &blob)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_bytes_with("dataset", &[])
    }

    /// Parses and validates a cache file image.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Header)> {
        let (h, blob) = codec::decode(bytes, DATASET_MAGIC)?;
        let params = GenParams {
            clusters: h.parse("clusters")?,
            frames: h.parse("frames")?,
            dim: h.parse("dim")?,
            cond_dim: h.parse("cond_dim")?,
            pooled_dim: h.parse("pooled_dim")?,
            sigma_c: h.parse("sigma_c")?,
        };
        params.validate()?;
        let seed: u64 = h.parse("seed")?;
        let n: usize = h.parse("items")?;
        let cluster_counts: Vec<usize> = h.parse_list("cluster_counts")?;
        if cluster_counts.len() != params.clusters {
            return Err(Error::shape(
                "cluster_counts",
                params.clusters,
                cluster_counts.len(),
            ));
        }
        let width = params.clip_len() + params.cond_dim + params.pooled_dim + 1;
        if Some(blob.len()) != n.checked_mul(width) {
            return Err(Error::shape("dataset blob", format!("{n} x {width}"), blob.len()));
        }
        let mut items = Vec::with_capacity(n);
        let mut seen = vec![0usize; params.clusters];
        for chunk in blob.chunks_exact(width) {
            let (clip, rest) = chunk.split_at(params.clip_len());
            let (full, rest) = rest.split_at(params.cond_dim);
            let (pooled, label) = rest.split_at(params.pooled_dim);
            let label = label[0];
            if !(label >= 0.0 && label < params.clusters as f64 && label.fract() == 0.0) {
                return Err(FormatError::InvalidField {
                    key: "cluster".into(),
                    value: label.to_string(),
                }
                .into());
            }
            let cluster = label as usize;
            seen[cluster] += 1;
            if pool(full, params.pooled_dim)? != pooled {
                return Err(Error::invalid("pooled condition is not the block mean of full"));
            }
            items.push(Item {
                clip: Clip::new(params.frames, params.dim, clip.to_vec())?,
                cond: Condition {
                    full: full.to_vec(),
                    pooled: pooled.to_vec(),
                    cluster,
                },
            });
        }
        if seen != cluster_counts {
            return Err(Error::invalid(format!(
                "cluster_counts {cluster_counts:?} disagree with item labels {seen:?}"
            )));
        }
        Ok((
            Self {
                params,
                seed,
                items,
                cluster_counts,
            },
            h,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_bytes(&fs::read(path)?)?.0)
    }
}

/// Writes `dataset` to `path` and reads it back.
pub fn cache_roundtrip(dataset: &Dataset, path: &Path) -> Result<Dataset> {
    dataset.save(path)?;
    Dataset::load(path)
}
