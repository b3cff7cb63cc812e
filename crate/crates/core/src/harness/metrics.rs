//! Aggregation of slot records into per-scheme summaries.

use serde::Serialize;
use std::collections::BTreeMap;

use crate::bdomain::TransitionKind;
use crate::harness::sim::{Scheme, SlotRecord};

pub const PERCENTILES: [f64; 4] = [50.0, 80.0, 90.0, 95.0];

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Empirical CDF of `data` at `x`.
pub fn ecdf(data: &[f64], x: f64) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    data.iter().filter(|&&d| d <= x).count() as f64 / data.len() as f64
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathSummary {
    pub path_id: usize,
    pub samples: usize,
    pub mean_error_deg: Option<f64>,
    pub median_error_deg: Option<f64>,
    /// `p50`, `p80`, `p90`, `p95` of the pooled AoA error (degrees).
    pub percentiles_deg: BTreeMap<String, f64>,
    /// Fraction of slots with zero error (exact grid hits).
    pub cdf_at_zero: Option<f64>,
    /// Mean error keyed by transition kind `I`/`II`/`III`.
    pub mean_error_by_kind: BTreeMap<String, f64>,
    pub misaligned_slots: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SchemeSummary {
    pub scheme: Scheme,
    pub runs: usize,
    pub slots: usize,
    /// Position RMSE across runs, one entry per slot.
    pub rmse_per_slot: Vec<f64>,
    pub final_rmse: f64,
    pub mean_rmse: f64,
    pub paths: Vec<PathSummary>,
    pub los_absent_slots: usize,
    pub regularized_slots: usize,
    pub missed_slots: usize,
}

impl SchemeSummary {
    /// Mean of the per-slot RMSE over slots `lo..=hi` (clamped to the run).
    pub fn mean_rmse_over(&self, lo: usize, hi: usize) -> f64 {
        let hi = hi.min(self.rmse_per_slot.len() - 1);
        let s = &self.rmse_per_slot[lo..=hi];
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// Summary of one scheme from its records.
pub fn summarize(scheme: Scheme, records: &[SlotRecord]) -> SchemeSummary {
    let recs: Vec<&SlotRecord> = records.iter().filter(|r| r.scheme == scheme).collect();
    let n_slots = recs.iter().map(|r| r.slot + 1).max().unwrap_or(0);
    let runs = recs.iter().map(|r| r.run).collect::<std::collections::BTreeSet<_>>().len();
    let mut sq = vec![0.0; n_slots];
    let mut cnt = vec![0usize; n_slots];
    for r in &recs {
        sq[r.slot] += r.position_error * r.position_error;
        cnt[r.slot] += 1;
    }
    let rmse: Vec<f64> = sq
        .iter()
        .zip(&cnt)
        .map(|(s, &c)| if c == 0 { f64::NAN } else { (s / c as f64).sqrt() })
        .collect();
    let n_paths = recs.first().map_or(0, |r| r.paths.len());
    let paths = (0..n_paths)
        .map(|i| {
            let mut errs = Vec::new();
            let mut by_kind: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            let mut misaligned = 0;
            for r in &recs {
                let p = &r.paths[i];
                if p.misaligned {
                    misaligned += 1;
                }
                if let Some(e) = p.error_deg() {
                    errs.push(e);
                    by_kind.entry(p.kind.label()).or_default().push(e);
                }
            }
            let mut sorted = errs.clone();
            sorted.sort_by(f64::total_cmp);
            let percentiles_deg = if sorted.is_empty() {
                BTreeMap::new()
            } else {
                PERCENTILES
                    .iter()
                    .map(|&q| (format!("p{}", q as u32), percentile(&sorted, q)))
                    .collect()
            };
            PathSummary {
                path_id: i + 1,
                samples: errs.len(),
                mean_error_deg: mean(&errs),
                median_error_deg: if sorted.is_empty() { None } else { Some(percentile(&sorted, 50.0)) },
                percentiles_deg,
                cdf_at_zero: if sorted.is_empty() { None } else { Some(ecdf(&sorted, 0.0)) },
                mean_error_by_kind: [TransitionKind::Stationary, TransitionKind::Predictable, TransitionKind::Unpredictable]
                    .iter()
                    .filter_map(|k| {
                        by_kind
                            .get(k.label())
                            .and_then(|v| mean(v))
                            .map(|m| (k.label().to_string(), m))
                    })
                    .collect(),
                misaligned_slots: misaligned,
            }
        })
        .collect();
    SchemeSummary {
        scheme,
        runs,
        slots: n_slots,
        final_rmse: rmse.last().copied().unwrap_or(f64::NAN),
        mean_rmse: mean(&rmse).unwrap_or(f64::NAN),
        rmse_per_slot: rmse,
        paths,
        los_absent_slots: recs.iter().filter(|r| !r.los_present).count(),
        regularized_slots: recs.iter().filter(|r| r.regularized).count(),
        missed_slots: recs.iter().filter(|r| r.missed).count(),
    }
}
