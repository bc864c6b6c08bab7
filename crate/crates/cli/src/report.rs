//! Metrics reports and multi-report comparison.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use rlkd_core::trainer::SelectionProfile;

use crate::stats::{mean, stdev, welch_t_test};

pub const REPORT_SCHEMA: &str = "rlkd-report/1";
pub const COMPARISON_SCHEMA: &str = "rlkd-comparison/1";
pub const SIGNIFICANCE_THRESHOLD: f64 = 0.05;

/// Teacher quality on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub single_test_accuracy: Vec<f64>,
    pub uniform_test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub test_accuracy: f64,
    /// Dev accuracy of the returned (epoch-best) student.
    pub dev_accuracy: f64,
    pub best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teachers: Option<TeacherSummary>,
    /// Learned selection probabilities on the test split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub test_mean: f64,
    pub test_stdev: f64,
    pub dev_mean: f64,
    pub dev_stdev: f64,
}

impl Summary {
    pub fn of(runs: &[RunRecord]) -> Self {
        let test: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
        let dev: Vec<f64> = runs.iter().map(|r| r.dev_accuracy).collect();
        Summary {
            test_mean: mean(&test),
            test_stdev: stdev(&test),
            dev_mean: mean(&dev),
            dev_stdev: stdev(&dev),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub schema: String,
    pub method: String,
    pub config_hash: String,
    pub benchmark_hash: String,
    pub runs: Vec<RunRecord>,
    pub summary: Summary,
    pub wall_clock_seconds: f64,
}

impl MetricsReport {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read report {}", path.display()))?;
        let report: MetricsReport =
            serde_json::from_str(&text).with_context(|| format!("malformed report {}", path.display()))?;
        report.check().with_context(|| format!("invalid report {}", path.display()))?;
        Ok(report)
    }

    /// Schema checks beyond what deserialization enforces.
    pub fn check(&self) -> anyhow::Result<()> {
        if self.schema != REPORT_SCHEMA {
            bail!("unsupported schema `{}`", self.schema);
        }
        if self.runs.is_empty() {
            bail!("report has no runs");
        }
        for r in &self.runs {
            for (name, v) in [("test_accuracy", r.test_accuracy), ("dev_accuracy", r.dev_accuracy)] {
                if !(0.0..=1.0).contains(&v) {
                    bail!("seed {}: {name} {v} outside [0, 1]", r.seed);
                }
            }
        }
        if self.summary.test_stdev < 0.0 || self.summary.dev_stdev < 0.0 {
            bail!("negative stdev");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub source: PathBuf,
    pub seeds: Vec<u64>,
    /// Test accuracies in percentage points.
    pub test_pct: Vec<f64>,
    pub mean_pct: f64,
    pub stdev_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub a: String,
    pub b: String,
    pub common_seeds: usize,
    pub t: Option<f64>,
    pub df: Option<f64>,
    pub p_value: Option<f64>,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub schema: String,
    pub benchmark_hash: String,
    pub threshold: f64,
    pub methods: Vec<MethodRow>,
    pub pairs: Vec<PairRow>,
}

/// Per-method statistics and pairwise two-sided Welch tests over the seeds
/// shared by each pair.
pub fn compare(reports: &[(PathBuf, MetricsReport)]) -> anyhow::Result<Comparison> {
    if reports.len() < 2 {
        bail!("compare needs at least two reports");
    }
    let benchmark = &reports[0].1.benchmark_hash;
    for (path, r) in reports {
        if &r.benchmark_hash != benchmark {
            bail!(
                "incompatible reports: {} uses benchmark {} but {} uses {}",
                path.display(),
                r.benchmark_hash,
                reports[0].0.display(),
                benchmark
            );
        }
    }
    let methods: Vec<MethodRow> = reports
        .iter()
        .map(|(path, r)| {
            let test_pct: Vec<f64> = r.runs.iter().map(|x| 100.0 * x.test_accuracy).collect();
            MethodRow {
                method: r.method.clone(),
                source: path.clone(),
                seeds: r.runs.iter().map(|x| x.seed).collect(),
                mean_pct: mean(&test_pct),
                stdev_pct: stdev(&test_pct),
                test_pct,
            }
        })
        .collect();
    let mut pairs = Vec::new();
    for i in 0..methods.len() {
        for j in i + 1..methods.len() {
            let (a, b) = (&methods[i], &methods[j]);
            let common: BTreeSet<u64> = a
                .seeds
                .iter()
                .copied()
                .collect::<BTreeSet<_>>()
                .intersection(&b.seeds.iter().copied().collect())
                .copied()
                .collect();
            let pick = |m: &MethodRow| -> Vec<f64> {
                m.seeds
                    .iter()
                    .zip(&m.test_pct)
                    .filter(|(s, _)| common.contains(s))
                    .map(|(_, v)| *v)
                    .collect()
            };
            let test = welch_t_test(&pick(a), &pick(b));
            pairs.push(PairRow {
                a: a.method.clone(),
                b: b.method.clone(),
                common_seeds: common.len(),
                t: test.map(|w| w.t),
                df: test.map(|w| w.df),
                p_value: test.map(|w| w.p),
                significant: test.is_some_and(|w| w.p < SIGNIFICANCE_THRESHOLD),
            });
        }
    }
    Ok(Comparison {
        schema: COMPARISON_SCHEMA.into(),
        benchmark_hash: benchmark.clone(),
        threshold: SIGNIFICANCE_THRESHOLD,
        methods,
        pairs,
    })
}

impl Comparison {
    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let width = self
            .methods
            .iter()
            .map(|m| m.method.len())
            .chain(["method".len()])
            .max()
            .unwrap_or(6);
        let mut out = String::new();
        writeln!(out, "{:<width$}  {:>5}  {:>8}  {:>8}  runs", "method", "n", "mean", "stdev").unwrap();
        for m in &self.methods {
            let runs: Vec<String> = m.test_pct.iter().map(|v| format!("{v:.1}")).collect();
            writeln!(
                out,
                "{:<width$}  {:>5}  {:>8.2}  {:>8.3}  {}",
                m.method,
                m.test_pct.len(),
                m.mean_pct,
                m.stdev_pct,
                runs.join(", ")
            )
            .unwrap();
        }
        writeln!(out).unwrap();
        writeln!(out, "{:<width$}  {:<width$}  {:>12}  sig (p < {})", "a", "b", "p-value", self.threshold).unwrap();
        for p in &self.pairs {
            let pv = p.p_value.map_or("n/a".to_string(), |v| format!("{v:.3e}"));
            writeln!(
                out,
                "{:<width$}  {:<width$}  {:>12}  {}",
                p.a,
                p.b,
                pv,
                if p.significant { "yes" } else { "no" }
            )
            .unwrap();
        }
        out
    }
}
