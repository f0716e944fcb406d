//! P-value adjustments and the per-replication scoring behind the benchmark tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::InferenceReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correction {
    None,
    #[default]
    Holm,
    Bh,
    Bonferroni,
}

impl std::str::FromStr for Correction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Correction::None),
            "holm" => Ok(Correction::Holm),
            "bh" | "fdr" => Ok(Correction::Bh),
            "bonferroni" => Ok(Correction::Bonferroni),
            other => Err(Error::Validation(format!("unknown correction '{other}'"))),
        }
    }
}

fn ascending_order(p: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    order
}

pub fn bonferroni_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len() as f64;
    p.iter().map(|v| (v * m).min(1.0)).collect()
}

/// Holm step-down adjustment.
pub fn holm_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let order = ascending_order(p);
    let mut out = vec![0.0; m];
    let mut running = 0.0_f64;
    for (rank, &i) in order.iter().enumerate() {
        running = running.max(((m - rank) as f64 * p[i]).min(1.0));
        out[i] = running;
    }
    out
}

/// Benjamini-Hochberg step-up adjustment.
pub fn bh_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let order = ascending_order(p);
    let mut out = vec![0.0; m];
    let mut running = 1.0_f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        // ratio first so the largest p-value maps to itself exactly
        running = running.min(p[i] * (m as f64 / (rank + 1) as f64));
        out[i] = running.min(1.0);
    }
    out
}

pub fn adjust(p: &[f64], correction: Correction) -> Vec<f64> {
    match correction {
        Correction::None => p.to_vec(),
        Correction::Holm => holm_adjust(p),
        Correction::Bh => bh_adjust(p),
        Correction::Bonferroni => bonferroni_adjust(p),
    }
}

/// Counts from scoring one report against the truth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplicationTally {
    pub true_rejections: usize,
    pub false_rejections: usize,
    pub signals: usize,
    pub any_false_rejection: bool,
    pub false_discovery_proportion: f64,
    pub covered_signal: usize,
    pub scored_signal: usize,
    pub covered_noise: usize,
    pub scored_noise: usize,
    pub ci_lengths: Vec<f64>,
    pub failed: usize,
    pub entries: usize,
    pub accepted: usize,
    pub sampled: usize,
}

impl ReplicationTally {
    pub fn tpr(&self) -> f64 {
        if self.signals == 0 {
            0.0
        } else {
            self.true_rejections as f64 / self.signals as f64
        }
    }
}

/// Score one report. `targets[k]` is the true value of the quantity covered by
/// `report.entries[k]` (projection coefficient or population coefficient).
pub fn score_replication(
    report: &InferenceReport,
    signal_mask: &[bool],
    targets: &[f64],
    correction: Correction,
    alpha: f64,
) -> Result<ReplicationTally> {
    if targets.len() != report.entries.len() {
        return Err(Error::Validation(format!(
            "{} targets for {} report entries",
            targets.len(),
            report.entries.len()
        )));
    }
    if let Some(e) = report.entries.iter().find(|e| e.column >= signal_mask.len()) {
        return Err(Error::Validation(format!(
            "entry for column {} outside a signal mask of length {}",
            e.column,
            signal_mask.len()
        )));
    }
    let adjusted = adjust(&report.p_values(), correction);
    let mut t = ReplicationTally {
        signals: signal_mask.iter().filter(|&&s| s).count(),
        entries: report.entries.len(),
        accepted: report.diagnostics.accepted.unwrap_or(0),
        sampled: report.diagnostics.sampled.unwrap_or(0),
        ..ReplicationTally::default()
    };
    for ((entry, &p_adj), &target) in report.entries.iter().zip(&adjusted).zip(targets) {
        let signal = signal_mask[entry.column];
        if entry.failed {
            t.failed += 1;
            continue;
        }
        if p_adj <= alpha {
            if signal {
                t.true_rejections += 1;
            } else {
                t.false_rejections += 1;
            }
        }
        let covered = entry.covers(target);
        if signal {
            t.scored_signal += 1;
            t.covered_signal += covered as usize;
        } else {
            t.scored_noise += 1;
            t.covered_noise += covered as usize;
        }
        let len = entry.ci_upper - entry.ci_lower;
        if len.is_finite() {
            t.ci_lengths.push(len);
        }
    }
    let rejections = t.true_rejections + t.false_rejections;
    t.any_false_rejection = t.false_rejections > 0;
    t.false_discovery_proportion = t.false_rejections as f64 / rejections.max(1) as f64;
    Ok(t)
}

/// Benchmark metrics aggregated over replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub tpr: f64,
    pub fwer: f64,
    pub fdr: f64,
    pub coverage_signal: f64,
    pub coverage_noise: f64,
    pub ci_mean_length: f64,
    pub ci_length_sd: f64,
    pub replication_count: usize,
    pub failure_rate: f64,
    pub acceptance_rate: f64,
}

impl MetricSummary {
    /// Order-free aggregation; NaN marks a metric with an empty denominator.
    pub fn aggregate(tallies: &[ReplicationTally]) -> Self {
        let r = tallies.len();
        let mean = |f: &dyn Fn(&ReplicationTally) -> f64| {
            if r == 0 {
                f64::NAN
            } else {
                // sorted so the floating-point sum does not depend on replication order
                let mut v: Vec<f64> = tallies.iter().map(f).collect();
                v.sort_by(f64::total_cmp);
                v.iter().sum::<f64>() / r as f64
            }
        };
        let ratio = |num: usize, den: usize| if den == 0 { f64::NAN } else { num as f64 / den as f64 };
        let sum = |f: &dyn Fn(&ReplicationTally) -> usize| tallies.iter().map(f).sum::<usize>();
        let mut lengths: Vec<f64> = tallies.iter().flat_map(|t| t.ci_lengths.iter().copied()).collect();
        lengths.sort_by(f64::total_cmp);
        let (ci_mean_length, ci_length_sd) = if lengths.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let m = lengths.iter().sum::<f64>() / lengths.len() as f64;
            let var = if lengths.len() > 1 {
                lengths.iter().map(|l| (l - m).powi(2)).sum::<f64>() / (lengths.len() - 1) as f64
            } else {
                0.0
            };
            (m, var.sqrt())
        };
        MetricSummary {
            tpr: mean(&|t| t.tpr()),
            fwer: mean(&|t| t.any_false_rejection as u8 as f64),
            fdr: mean(&|t| t.false_discovery_proportion),
            coverage_signal: ratio(sum(&|t| t.covered_signal), sum(&|t| t.scored_signal)),
            coverage_noise: ratio(sum(&|t| t.covered_noise), sum(&|t| t.scored_noise)),
            ci_mean_length,
            ci_length_sd,
            replication_count: r,
            failure_rate: ratio(sum(&|t| t.failed), sum(&|t| t.entries)),
            acceptance_rate: ratio(sum(&|t| t.accepted), sum(&|t| t.sampled)),
        }
    }
}
