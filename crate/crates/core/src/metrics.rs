//! Evaluation metrics over generated clips: Fréchet distance between Gaussian
//! summaries of flattened clips, a ridge-probe alignment score between a clip
//! and its pooled condition, per-frame motion magnitude, and the statistics
//! used by the ablations.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::datagen::Clip;
use crate::error::{Error, Result};

/// Ridge added to both covariances before matrix square roots in harness
/// evaluations.
pub const EVAL_COVARIANCE_RIDGE: f64 = 1e-6;
pub const DEFAULT_PROBE_LAMBDA: f64 = 1e-3;

const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub n: usize,
}

impl GaussianSummary {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased, symmetrized covariance.
pub fn fit_gaussian<S: AsRef<[f64]>>(samples: &[S]) -> Result<GaussianSummary> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "a Gaussian fit needs at least 2 samples, got {n}"
        )));
    }
    let d = samples[0].as_ref().len();
    let mut x = Array2::zeros((n, d));
    for (i, s) in samples.iter().enumerate() {
        let s = s.as_ref();
        if s.len() != d {
            return Err(Error::shape("Gaussian sample", d, s.len()));
        }
        x.row_mut(i).assign(&ndarray::ArrayView1::from(s));
    }
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    x -= &mean;
    let mut cov = x.t().dot(&x) / (n - 1) as f64;
    symmetrize(&mut cov);
    Ok(GaussianSummary { mean, cov, n })
}

fn symmetrize(m: &mut Array2<f64>) {
    let t = m.t().to_owned();
    *m += &t;
    *m *= 0.5;
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and eigenvectors as columns.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::shape("symmetric matrix", format!("{n}x{n}"), format!("{n}x{}", a.ncols())));
    }
    let mut m = a.clone();
    symmetrize(&mut m);
    let mut v = Array2::eye(n);
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        return Ok((vec![0.0; n], v));
    }
    let tol = (1e-14 * scale).powi(2);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum();
        if off <= tol {
            let vals = (0..n).map(|i| m[[i, i]]).collect();
            return Ok((vals, v));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::NotConverged(JACOBI_MAX_SWEEPS))
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues are
/// floored at zero.
pub fn sqrt_psd(a: &Array2<f64>) -> Result<Array2<f64>> {
    let (vals, vecs) = symmetric_eigen(a)?;
    let roots = Array1::from_iter(vals.iter().map(|l| l.max(0.0).sqrt()));
    let scaled = &vecs * &roots;
    let mut out = scaled.dot(&vecs.t());
    symmetrize(&mut out);
    Ok(out)
}

/// `|μ₁−μ₂|² + tr(Σ₁ + Σ₂ − 2(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`, computed exactly
/// (no covariance ridge).
pub fn frechet_distance(p: &GaussianSummary, q: &GaussianSummary) -> Result<f64> {
    frechet_distance_with_ridge(p, q, 0.0)
}

/// [`frechet_distance`] with `ridge·I` added to both covariances.
pub fn frechet_distance_with_ridge(p: &GaussianSummary, q: &GaussianSummary, ridge: f64) -> Result<f64> {
    if p.dim() != q.dim() || p.cov.dim() != (p.dim(), p.dim()) || q.cov.dim() != (q.dim(), q.dim()) {
        return Err(Error::shape("Gaussian summaries", p.dim(), q.dim()));
    }
    let d = p.dim();
    let eye = Array2::<f64>::eye(d);
    let s1 = &p.cov + &(&eye * ridge);
    let s2 = &q.cov + &(&eye * ridge);
    let diff = &p.mean - &q.mean;
    let mean_term = diff.dot(&diff);
    let root1 = sqrt_psd(&s1)?;
    let mut inner = root1.dot(&s2).dot(&root1);
    symmetrize(&mut inner);
    let (vals, _) = symmetric_eigen(&inner)?;
    let cross: f64 = vals.iter().map(|l| l.max(0.0).sqrt()).sum();
    let value = mean_term + s1.diag().sum() + s2.diag().sum() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Linear map from flattened clip to pooled condition.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentProbe {
    /// `P × (F·D)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl AlignmentProbe {
    pub fn predict(&self, x: &[f64]) -> Result<Array1<f64>> {
        if x.len() != self.weight.ncols() {
            return Err(Error::shape("probe input", self.weight.ncols(), x.len()));
        }
        Ok(self.weight.dot(&ndarray::ArrayView1::from(x)) + &self.bias)
    }
}

/// Solves `A x = b` for symmetric positive-definite `A` by Cholesky.
pub fn cholesky_solve(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum();
            if i == j {
                let d = a[[i, i]] - s;
                if d <= 0.0 || !d.is_finite() {
                    return Err(Error::invalid("matrix is not positive definite"));
                }
                l[[i, i]] = d.sqrt();
            } else {
                l[[i, j]] = (a[[i, j]] - s) / l[[j, j]];
            }
        }
    }
    let mut x = b.clone();
    for mut col in x.columns_mut() {
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[[i, k]] * col[k]).sum();
            col[i] = (col[i] - s) / l[[i, i]];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[[k, i]] * col[k]).sum();
            col[i] = (col[i] - s) / l[[i, i]];
        }
    }
    Ok(x)
}

/// Closed-form ridge regression from flattened clips to pooled conditions,
/// minimizing the per-pair mean squared error plus `lambda * |W|^2`. The bias
/// is not penalized: inputs and targets are centered first.
pub fn fit_alignment_probe<C: AsRef<[f64]>, P: AsRef<[f64]>>(
    clips: &[C],
    pooled: &[P],
    lambda: f64,
) -> Result<AlignmentProbe> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("probe ridge lambda must be positive, got {lambda}")));
    }
    if clips.len() != pooled.len() {
        return Err(Error::shape("probe pairs", clips.len(), pooled.len()));
    }
    let n = clips.len();
    let d = clips.first().map_or(0, |c| c.as_ref().len());
    let p = pooled.first().map_or(0, |c| c.as_ref().len());
    if n < d + 1 || d == 0 || p == 0 {
        return Err(Error::invalid(format!(
            "probe needs at least {} pairs, got {n}",
            d + 1
        )));
    }
    let mut x = Array2::zeros((n, d));
    let mut y = Array2::zeros((n, p));
    for i in 0..n {
        let (c, t) = (clips[i].as_ref(), pooled[i].as_ref());
        if c.len() != d || t.len() != p {
            return Err(Error::shape("probe pair", format!("{d}/{p}"), format!("{}/{}", c.len(), t.len())));
        }
        x.row_mut(i).assign(&ndarray::ArrayView1::from(c));
        y.row_mut(i).assign(&ndarray::ArrayView1::from(t));
    }
    let x_mean = x.mean_axis(Axis(0)).expect("n > 0");
    let y_mean = y.mean_axis(Axis(0)).expect("n > 0");
    x -= &x_mean;
    y -= &y_mean;
    let inv_n = 1.0 / n as f64;
    let mut gram = x.t().dot(&x) * inv_n;
    gram.diag_mut().mapv_inplace(|v| v + lambda);
    let rhs = x.t().dot(&y) * inv_n;
    let w = cholesky_solve(&gram, &rhs)?; // d × p
    let weight = w.t().to_owned();
    let bias = &y_mean - &weight.dot(&x_mean);
    Ok(AlignmentProbe { weight, bias })
}

/// Cosine similarity; a zero vector on either side scores 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

pub fn alignment_score(probe: &AlignmentProbe, clip: &Clip, pooled: &[f64]) -> Result<f64> {
    let pred = probe.predict(clip.as_slice())?;
    if pred.len() != pooled.len() {
        return Err(Error::shape("pooled condition", pred.len(), pooled.len()));
    }
    Ok(cosine(pred.as_slice().expect("contiguous"), pooled))
}

/// Mean Euclidean norm of consecutive frame differences.
pub fn motion_magnitude(clip: &Clip) -> Result<f64> {
    let f = clip.frames();
    if f < 2 {
        return Err(Error::invalid("motion needs at least two frames"));
    }
    let total: f64 = (1..f)
        .map(|i| {
            clip.frame(i)
                .iter()
                .zip(clip.frame(i - 1))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / (f - 1) as f64)
}

/// Mean and standard error (sample sd / √n; zero for a single value).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecializationGap {
    pub gap: f64,
    pub in_mean: f64,
    pub out_mean: f64,
    /// Standard error of the gap, `sqrt(se_in² + se_out²)`.
    pub se: f64,
}

pub fn specialization_gap(in_scores: &[f64], out_scores: &[f64]) -> Result<SpecializationGap> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(Error::invalid("specialization gap needs non-empty score lists"));
    }
    let (in_mean, in_se) = mean_se(in_scores);
    let (out_mean, out_se) = mean_se(out_scores);
    Ok(SpecializationGap {
        gap: in_mean - out_mean,
        in_mean,
        out_mean,
        se: (in_se * in_se + out_se * out_se).sqrt(),
    })
}

/// Number of prompts whose best-scoring schedule lies outside `baseline`.
/// Ties go to the baseline.
pub fn schedule_preference(
    per_prompt: &BTreeMap<String, Vec<f64>>,
    baseline: &BTreeSet<String>,
) -> Result<usize> {
    if let Some(missing) = baseline.iter().find(|b| !per_prompt.contains_key(*b)) {
        return Err(Error::invalid(format!("baseline schedule {missing:?} has no scores")));
    }
    let n = per_prompt.values().next().map_or(0, Vec::len);
    if let Some((name, v)) = per_prompt.iter().find(|(_, v)| v.len() != n) {
        return Err(Error::shape("per-prompt scores", n, format!("{} for {name:?}", v.len())));
    }
    let mut count = 0;
    for i in 0..n {
        let best_base = per_prompt
            .iter()
            .filter(|(k, _)| baseline.contains(*k))
            .map(|(_, v)| v[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let best_other = per_prompt
            .iter()
            .filter(|(k, _)| !baseline.contains(*k))
            .map(|(_, v)| v[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if best_other > best_base {
            count += 1;
        }
    }
    Ok(count)
}

/// One arm's metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frechet: f64,
    pub alignment_mean: f64,
    pub alignment_se: f64,
    pub motion_mean: f64,
    pub motion_se: f64,
    /// Alignment score of each evaluated prompt, in prompt order.
    pub per_prompt: Vec<f64>,
    /// Learned aesthetic scoring has no desk-scale analog.
    pub aesthetic: String,
}

pub const NOT_COMPUTED: &str = "not computed";

/// Scores generated clips against the reference clips and their prompts.
pub fn evaluate_clips(
    generated: &[Clip],
    prompts_pooled: &[Vec<f64>],
    reference: &[Clip],
    probe: &AlignmentProbe,
) -> Result<MetricReport> {
    if generated.len() != prompts_pooled.len() {
        return Err(Error::shape("evaluated prompts", generated.len(), prompts_pooled.len()));
    }
    let gen_summary = fit_gaussian(&generated.iter().map(Clip::as_slice).collect::<Vec<_>>())?;
    let ref_summary = fit_gaussian(&reference.iter().map(Clip::as_slice).collect::<Vec<_>>())?;
    let frechet = frechet_distance_with_ridge(&gen_summary, &ref_summary, EVAL_COVARIANCE_RIDGE)?;
    let per_prompt = generated
        .iter()
        .zip(prompts_pooled)
        .map(|(c, p)| alignment_score(probe, c, p))
        .collect::<Result<Vec<_>>>()?;
    let motion = generated
        .iter()
        .map(motion_magnitude)
        .collect::<Result<Vec<_>>>()?;
    let (alignment_mean, alignment_se) = mean_se(&per_prompt);
    let (motion_mean, motion_se) = mean_se(&motion);
    Ok(MetricReport {
        frechet,
        alignment_mean,
        alignment_se,
        motion_mean,
        motion_se,
        per_prompt,
        aesthetic: NOT_COMPUTED.to_string(),
    })
}
