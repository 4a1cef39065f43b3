//! Comparison report assembly and on-disk emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{MetricReport, NOT_COMPUTED};

/// Which way a metric improves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Down,
    Up,
    None,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Down => "down",
            Direction::Up => "up",
            Direction::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeImprovement {
    pub metric: String,
    pub direction: Direction,
    pub ddm: Option<f64>,
    pub baseline: Option<f64>,
    /// Positive means the ensemble is better; for undirected metrics this is
    /// the plain signed relative difference.
    pub improvement: Option<f64>,
}

/// Relative improvement of `ours` over `baseline`. The denominator is
/// `|baseline|` so the sign reads the same for negative baselines.
pub fn relative_improvement(ours: f64, baseline: f64, direction: Direction) -> f64 {
    let diff = match direction {
        Direction::Down => baseline - ours,
        Direction::Up | Direction::None => ours - baseline,
    };
    diff / baseline.abs()
}

fn row(metric: &str, direction: Direction, ddm: f64, baseline: f64) -> RelativeImprovement {
    RelativeImprovement {
        metric: metric.into(),
        direction,
        ddm: Some(ddm),
        baseline: Some(baseline),
        improvement: Some(relative_improvement(ddm, baseline, direction)),
    }
}

pub fn improvement_table(ddm: &MetricReport, baseline: &MetricReport) -> Vec<RelativeImprovement> {
    vec![
        row("frechet", Direction::Down, ddm.frechet, baseline.frechet),
        row("alignment", Direction::Up, ddm.alignment_mean, baseline.alignment_mean),
        row("motion", Direction::None, ddm.motion_mean, baseline.motion_mean),
        RelativeImprovement {
            metric: "aesthetic".into(),
            direction: Direction::Up,
            ddm: None,
            baseline: None,
            improvement: None,
        },
    ]
}

/// Training-data accounting per arm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsoAudit {
    pub monolithic_items: usize,
    pub expert_items: Vec<usize>,
    /// Per expert, how many consumed items came from each cluster.
    pub expert_cluster_audit: Vec<Vec<usize>>,
}

impl IsoAudit {
    pub fn total_expert_items(&self) -> usize {
        self.expert_items.iter().sum()
    }

    /// Whether every expert saw only its own cluster.
    pub fn experts_isolated(&self) -> bool {
        self.expert_cluster_audit
            .iter()
            .enumerate()
            .all(|(k, counts)| counts.iter().enumerate().all(|(c, &n)| c == k || n == 0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub dataset_hashes: BTreeMap<String, String>,
    pub checkpoint_hashes: BTreeMap<String, String>,
    /// Per arm, a hash of prompts, seed, step count and guidance scale.
    pub protocol: BTreeMap<String, String>,
    pub expert_init: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub ddm: MetricReport,
    pub monolithic: MetricReport,
    pub experts: Vec<MetricReport>,
    pub relative: Vec<RelativeImprovement>,
    /// Cluster of each evaluation prompt, aligned with `per_prompt`.
    pub prompt_clusters: Vec<usize>,
    pub router_heldout_accuracy: f64,
    pub iso: IsoAudit,
    pub provenance: Provenance,
}

pub fn build_comparison(
    ddm: MetricReport,
    monolithic: MetricReport,
    experts: Vec<MetricReport>,
    prompt_clusters: Vec<usize>,
    router_heldout_accuracy: f64,
    iso: IsoAudit,
    provenance: Provenance,
) -> ComparisonReport {
    let relative = improvement_table(&ddm, &monolithic);
    ComparisonReport {
        ddm,
        monolithic,
        experts,
        relative,
        prompt_clusters,
        router_heldout_accuracy,
        iso,
        provenance,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

pub fn relative_improvement_csv(rows: &[RelativeImprovement]) -> String {
    let mut s = String::from("metric,direction,ddm,baseline,improvement\n");
    for r in rows {
        let improvement = match r.improvement {
            Some(v) => format!("{v}"),
            None => NOT_COMPUTED.to_string(),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.metric,
            r.direction.as_str(),
            opt(r.ddm),
            opt(r.baseline),
            improvement
        );
    }
    s
}

pub fn per_prompt_csv(report: &ComparisonReport) -> String {
    let mut s = String::from("prompt,cluster,ddm,monolithic");
    for k in 0..report.experts.len() {
        let _ = write!(s, ",expert_{k}");
    }
    s.push('\n');
    for (i, &c) in report.prompt_clusters.iter().enumerate() {
        let _ = write!(s, "{i},{c},{},{}", report.ddm.per_prompt[i], report.monolithic.per_prompt[i]);
        for e in &report.experts {
            let _ = write!(s, ",{}", e.per_prompt[i]);
        }
        s.push('\n');
    }
    s
}

/// Writes `report.json`, `per_prompt.csv` and `relative_improvement.csv`.
pub fn emit_report(report: &ComparisonReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report).expect("report is serializable");
    fs::write(dir.join("report.json"), json)?;
    fs::write(dir.join("per_prompt.csv"), per_prompt_csv(report))?;
    fs::write(dir.join("relative_improvement.csv"), relative_improvement_csv(&report.relative))?;
    Ok(())
}

pub fn load_report(dir: &Path) -> Result<ComparisonReport> {
    let text = fs::read_to_string(dir.join("report.json"))?;
    serde_json::from_str(&text).map_err(|e| crate::Error::Config(format!("report.json: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frechet_improvement_example() {
        let r = relative_improvement(279.01, 561.04, Direction::Down);
        assert!((r - 0.5027).abs() < 5e-5, "{r}");
    }

    #[test]
    fn directions() {
        assert!(relative_improvement(2.0, 1.0, Direction::Up) > 0.0);
        assert!(relative_improvement(2.0, 1.0, Direction::Down) < 0.0);
        assert_eq!(relative_improvement(1.5, 1.0, Direction::None), 0.5);
        assert!(relative_improvement(-0.1, -0.2, Direction::Up) > 0.0);
    }

    #[test]
    fn csv_marks_aesthetic_not_computed() {
        let m = MetricReport {
            frechet: 2.0,
            alignment_mean: 0.5,
            alignment_se: 0.0,
            motion_mean: 1.0,
            motion_se: 0.0,
            per_prompt: vec![],
            aesthetic: NOT_COMPUTED.into(),
        };
        let csv = relative_improvement_csv(&improvement_table(&m, &m));
        assert!(csv.contains("aesthetic,up,,,not computed"));
        assert!(csv.contains("motion,none,1,1,0"));
    }

    #[test]
    fn isolation_audit() {
        let iso = IsoAudit {
            monolithic_items: 10,
            expert_items: vec![5, 5],
            expert_cluster_audit: vec![vec![5, 0], vec![0, 5]],
        };
        assert!(iso.experts_isolated());
        assert_eq!(iso.total_expert_items(), 10);
        let leaky = IsoAudit {
            expert_cluster_audit: vec![vec![4, 1], vec![0, 5]],
            ..iso
        };
        assert!(!leaky.experts_isolated());
    }
}
