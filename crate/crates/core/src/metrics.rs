//! AUC, transferability, gain decomposition, calibration error and the
//! per-run CSV report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::fmt_sig9;

/// Teacher advantages smaller than this leave η undefined.
pub const ETA_FLOOR: f64 = 1e-4;

/// Probability that a random positive outscores a random negative, ties
/// counted as one half. Computed from average ranks.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auc scores".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        let tied_positives = order[i..j].iter().filter(|&&k| labels[k]).count();
        positive_rank_sum += mean_rank * tied_positives as f64;
        i = j;
    }
    let p = positives as f64;
    let u = positive_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// `η = (P_S_distill − P_S_raw) / (P_T − P_S_raw)`, or `None` when the
/// teacher's advantage is below [`ETA_FLOOR`].
pub fn transferability(p_t: f64, p_s_raw: f64, p_s_distill: f64) -> Option<f64> {
    let scale = p_t - p_s_raw;
    (scale > ETA_FLOOR).then(|| (p_s_distill - p_s_raw) / scale)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainDecomposition {
    pub gain_scale: f64,
    pub eta: Option<f64>,
    pub gain_distill: f64,
}

/// `ΔGain_distill = ΔGain_scale × η`. The distill gain is reported even when
/// η is undefined.
pub fn gain_decomposition(p_t: f64, p_s_raw: f64, p_s_distill: f64) -> GainDecomposition {
    let gain_scale = p_t - p_s_raw;
    let eta = transferability(p_t, p_s_raw, p_s_distill);
    let gain_distill = match eta {
        Some(e) => gain_scale * e,
        None => p_s_distill - p_s_raw,
    };
    GainDecomposition {
        gain_scale,
        eta,
        gain_distill,
    }
}

/// Mean absolute gap between predictions and oracle posteriors.
pub fn calibration_mae(predicted: &[f64], posteriors: &[f64]) -> Result<f64> {
    if predicted.len() != posteriors.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} posteriors",
            predicted.len(),
            posteriors.len()
        )));
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = predicted.iter().zip(posteriors).map(|(p, q)| (p - q).abs()).sum();
    Ok(total / predicted.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSnapshot {
    pub step: u64,
    pub model: String,
    pub auc: f64,
    pub calibration_mae: f64,
    pub sample_count: usize,
}

/// One CSV row. `None` values are written as `undefined`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub arm: String,
    pub seed: u64,
    pub step: u64,
    pub metric: String,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std_err: f64,
    /// Seeds with a defined value.
    pub count: usize,
}

/// Metric rows for one experiment plus the order its arms were declared in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub experiment: String,
    pub arms: Vec<String>,
    pub rows: Vec<MetricRow>,
}

pub const CSV_HEADER: &str = "experiment,arm,seed,step,metric,value";

impl MetricsReport {
    pub fn new(experiment: impl Into<String>, arms: Vec<String>) -> Self {
        Self {
            experiment: experiment.into(),
            arms,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, arm: &str, seed: u64, step: u64, metric: &str, value: Option<f64>) {
        self.rows.push(MetricRow {
            arm: arm.to_string(),
            seed,
            step,
            metric: metric.to_string(),
            value,
        });
    }

    fn arm_index(&self, arm: &str) -> usize {
        self.arms.iter().position(|a| a == arm).unwrap_or(self.arms.len())
    }

    /// Rows in (arm declaration order, seed, step, metric name) order.
    pub fn sorted_rows(&self) -> Vec<&MetricRow> {
        let mut rows: Vec<&MetricRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| {
            (self.arm_index(&a.arm), &a.arm, a.seed, a.step, &a.metric)
                .cmp(&(self.arm_index(&b.arm), &b.arm, b.seed, b.step, &b.metric))
        });
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in self.sorted_rows() {
            let value = r.value.map_or_else(|| "undefined".to_string(), fmt_sig9);
            writeln!(out, "{},{},{},{},{},{}", self.experiment, r.arm, r.seed, r.step, r.metric, value)
                .expect("writing to a String");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(self.to_csv().as_bytes())?;
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    }

    /// Value of `metric` for each seed at that seed's last recorded step.
    pub fn final_values(&self, arm: &str, metric: &str) -> Vec<(u64, Option<f64>)> {
        let mut last: BTreeMap<u64, (u64, Option<f64>)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.arm == arm && r.metric == metric) {
            let slot = last.entry(r.seed).or_insert((r.step, r.value));
            if r.step >= slot.0 {
                *slot = (r.step, r.value);
            }
        }
        last.into_iter().map(|(seed, (_, v))| (seed, v)).collect()
    }

    /// Mean and standard error across seeds of the final value.
    pub fn aggregate(&self, arm: &str, metric: &str) -> Option<Aggregate> {
        let values: Vec<f64> = self
            .final_values(arm, metric)
            .into_iter()
            .filter_map(|(_, v)| v)
            .collect();
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std_err = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Some(Aggregate {
            mean,
            std_err,
            count: values.len(),
        })
    }

    /// Table of final-step means and standard errors, one row per arm and
    /// metric. Arm labels show `_` as a space; the standard error is blank
    /// when fewer than two seeds define the value.
    pub fn summary(&self) -> String {
        let mut metrics: Vec<&str> = self.rows.iter().map(|r| r.metric.as_str()).collect();
        metrics.sort_unstable();
        metrics.dedup();
        let mut out = format!("experiment {}\n", self.experiment);
        writeln!(out, "{:<24} {:<26} {:>12} {:>10} {:>3}", "arm", "metric", "mean", "stderr", "n").unwrap();
        for arm in &self.arms {
            let label = arm.replace('_', " ");
            for m in &metrics {
                match self.aggregate(arm, m) {
                    Some(a) => {
                        let se = if a.count > 1 { format!("{:.6}", a.std_err) } else { String::new() };
                        writeln!(out, "{label:<24} {m:<26} {:>12.6} {se:>10} {:>3}", a.mean, a.count).unwrap()
                    }
                    None if self.rows.iter().any(|r| &r.arm == arm && r.metric == *m) => {
                        writeln!(out, "{label:<24} {m:<26} {:>12} {:>10} {:>3}", "undefined", "", 0).unwrap()
                    }
                    None => {}
                }
            }
        }
        out
    }
}
