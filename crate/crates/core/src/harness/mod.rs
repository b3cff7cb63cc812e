//! Monte Carlo driver: configuration, per-slot simulation, metrics and output files.

pub mod config;
pub mod metrics;
pub mod sim;

use rayon::prelude::*;
use serde_json::{json, Value};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::Error;
use crate::Result;
pub use config::{CkmConfig, GainSource, SchemeSelection, SimConfig};
pub use metrics::{summarize, PathSummary, SchemeSummary};
pub use sim::{PathRecord, Regime, Scheme, SlotRecord, World};

/// Records and summaries of a full experiment.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: SimConfig,
    pub records: Vec<SlotRecord>,
    pub summaries: Vec<SchemeSummary>,
}

impl Experiment {
    pub fn summary(&self, scheme: Scheme) -> Option<&SchemeSummary> {
        self.summaries.iter().find(|s| s.scheme == scheme)
    }
}

/// Runs every Monte Carlo run of `cfg`. Runs execute in parallel; records
/// come back ordered by run, scheme, slot.
pub fn run_experiment(cfg: &SimConfig) -> Result<Experiment> {
    cfg.validate()?;
    let map = sim::build_map(cfg)?;
    let ctx = sim::Context::new(cfg, &map)?;
    let per_run: Vec<Result<Vec<SlotRecord>>> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let world = sim::generate_world(cfg, run);
            let mut recs = Vec::new();
            if cfg.scheme.includes_proposed() {
                recs.extend(sim::run_proposed(&ctx, &world, run)?);
            }
            if cfg.scheme.includes_baseline() {
                recs.extend(sim::run_baseline(&ctx, &world, run)?);
            }
            Ok(recs)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_run {
        records.extend(r?);
    }
    let mut summaries = Vec::new();
    if cfg.scheme.includes_proposed() {
        summaries.push(summarize(Scheme::Proposed, &records));
    }
    if cfg.scheme.includes_baseline() {
        summaries.push(summarize(Scheme::Baseline, &records));
    }
    Ok(Experiment {
        config: cfg.clone(),
        records,
        summaries,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

/// Header of `slots.csv` for `n_paths` paths.
pub fn csv_header(n_paths: usize) -> String {
    let mut h = String::from(
        "run,slot,scheme,true_qx,true_qy,true_v,est_qx,est_qy,est_v,pos_err,los_present,regime,regularized,missed",
    );
    for p in 1..=n_paths {
        for f in ["alive", "observed", "kind", "true_deg", "est_deg", "err_deg", "misaligned"] {
            let _ = write!(h, ",p{p}_{f}");
        }
    }
    h.push_str(",bf_mode,gamma,beam_deg");
    h
}

fn csv_row(r: &SlotRecord) -> String {
    let mut s = format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.run,
        r.slot,
        r.scheme.as_str(),
        r.truth.qx,
        r.truth.qy,
        r.truth.v,
        r.estimate.qx,
        r.estimate.qy,
        r.estimate.v,
        r.position_error,
        r.los_present as u8,
        r.regime.as_str(),
        r.regularized as u8,
        r.missed as u8
    );
    for p in &r.paths {
        let _ = write!(
            s,
            ",{},{},{},{},{},{},{}",
            p.alive as u8,
            p.observed as u8,
            p.kind.label(),
            p.true_aoa.to_degrees(),
            fmt_opt(p.est_aoa.map(f64::to_degrees)),
            fmt_opt(p.error_deg()),
            p.misaligned as u8
        );
    }
    let join = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(";");
    let deg: Vec<f64> = r.beam_angles.iter().map(|a| a.to_degrees()).collect();
    let _ = write!(s, ",{},{},{}", r.bf_mode.as_str(), join(&r.gamma), join(&deg));
    s
}

/// JSON value with non-finite numbers mapped to null.
fn finite(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn summary_json(s: &SchemeSummary) -> Value {
    let paths: Vec<Value> = s
        .paths
        .iter()
        .map(|p| {
            json!({
                "path_id": p.path_id,
                "samples": p.samples,
                "mean_error_deg": p.mean_error_deg.map_or(Value::Null, finite),
                "median_error_deg": p.median_error_deg.map_or(Value::Null, finite),
                "percentiles_deg": p.percentiles_deg,
                "cdf_at_zero": p.cdf_at_zero,
                "mean_error_by_kind": p.mean_error_by_kind,
                "misaligned_slots": p.misaligned_slots,
            })
        })
        .collect();
    json!({
        "scheme": s.scheme.as_str(),
        "runs": s.runs,
        "slots": s.slots,
        "rmse_per_slot": s.rmse_per_slot.iter().map(|&x| finite(x)).collect::<Vec<_>>(),
        "final_rmse": finite(s.final_rmse),
        "mean_rmse": finite(s.mean_rmse),
        "los_absent_slots": s.los_absent_slots,
        "regularized_slots": s.regularized_slots,
        "missed_slots": s.missed_slots,
        "paths": paths,
    })
}

/// Writes `slots.csv`, `summary.json` and the resolved `config.txt` into `dir`.
pub fn write_outputs(exp: &Experiment, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n_paths = exp.config.scene.n_paths();
    let mut csv = csv_header(n_paths);
    csv.push('\n');
    for r in &exp.records {
        csv.push_str(&csv_row(r));
        csv.push('\n');
    }
    fs::write(dir.join("slots.csv"), csv)?;
    let summary = json!({
        "config": exp.config.entries(),
        "schemes": exp.summaries.iter().map(summary_json).collect::<Vec<_>>(),
    });
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    fs::write(dir.join("config.txt"), exp.config.to_text())?;
    Ok(())
}

/// One point of a parameter sweep.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub value: f64,
    pub summaries: Vec<SchemeSummary>,
}

/// Runs `cfg` once per value of the numeric key `key`.
pub fn sweep(cfg: &SimConfig, key: &str, values: &[f64]) -> Result<Vec<SweepPoint>> {
    if !config::NUMERIC_KEYS.contains(&key) {
        return Err(Error::config(key, "not a numeric sweep parameter"));
    }
    values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.set(key, &format!("{v}"))?;
            let exp = run_experiment(&c)?;
            Ok(SweepPoint {
                value: v,
                summaries: exp.summaries,
            })
        })
        .collect()
}

/// Writes `sweep.csv` and `sweep.json` into `dir`.
pub fn write_sweep(points: &[SweepPoint], key: &str, n_paths: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = format!("{key},scheme,final_rmse,mean_rmse");
    for p in 1..=n_paths {
        let _ = write!(csv, ",p{p}_mean_err_deg");
    }
    csv.push('\n');
    let mut rows = Vec::new();
    for pt in points {
        for s in &pt.summaries {
            let _ = write!(csv, "{},{},{},{}", pt.value, s.scheme.as_str(), s.final_rmse, s.mean_rmse);
            for p in &s.paths {
                let _ = write!(csv, ",{}", fmt_opt(p.mean_error_deg));
            }
            csv.push('\n');
            rows.push(json!({
                "value": pt.value,
                "summary": summary_json(s),
            }));
        }
    }
    fs::write(dir.join("sweep.csv"), csv)?;
    let doc = json!({ "param": key, "points": rows });
    fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}
