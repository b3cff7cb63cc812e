//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::beamform::BfMode;
use crate::cdomain::NoiseModel;
use crate::env::{BlockageConfig, FrameTiming, Reflector, Scene, VehicleState};
use crate::signal::DelayDopplerGrid;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchemeSelection {
    Proposed,
    Baseline,
    Both,
}

impl SchemeSelection {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemeSelection::Proposed => "proposed",
            SchemeSelection::Baseline => "baseline",
            SchemeSelection::Both => "both",
        }
    }

    pub fn includes_proposed(self) -> bool {
        self != SchemeSelection::Baseline
    }

    pub fn includes_baseline(self) -> bool {
        self != SchemeSelection::Proposed
    }
}

impl FromStr for SchemeSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(SchemeSelection::Proposed),
            "baseline" => Ok(SchemeSelection::Baseline),
            "both" => Ok(SchemeSelection::Both),
            other => Err(Error::config("scheme", format!("unknown scheme '{other}'"))),
        }
    }
}

/// Where the beam designer takes path gain magnitudes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GainSource {
    /// Map gain at the predicted position.
    Ckm,
    /// Least-squares gain estimated in the previous slot.
    Estimate,
}

impl FromStr for GainSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ckm" => Ok(GainSource::Ckm),
            "estimate" => Ok(GainSource::Estimate),
            other => Err(Error::config("bf.gain_source", format!("unknown source '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CkmConfig {
    pub cols: usize,
    pub rows: usize,
    pub x_range: (f64, f64),
    /// Half-height of the sampled strip around the road line.
    pub y_half: f64,
    pub k: usize,
    pub idw_power: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub scene: Scene,
    pub initial_state: VehicleState,
    /// Variance of the initial estimate error per state component.
    pub init_var: f64,
    pub t_max: f64,
    pub timing: FrameTiming,
    pub p_t: f64,
    pub n_theta: usize,
    pub grid: DelayDopplerGrid,
    pub noise_var: f64,
    /// Standard deviations `(σ_qx, σ_qy, σ_v)` of the state evolution.
    pub process_std: [f64; 3],
    /// Standard deviations `(σ_τ, σ_μ, σ_cosθ)` of the measurements.
    pub measurement_std: [f64; 3],
    pub xi: f64,
    pub c_pi: f64,
    pub sigma_ckm: f64,
    pub blockage: BlockageConfig,
    pub ckm: CkmConfig,
    pub runs: usize,
    pub seed: u64,
    pub bf_mode: BfMode,
    pub gain_source: GainSource,
    pub scheme: SchemeSelection,
    /// Delay-index gate around the predicted path when associating peaks.
    pub delay_gate: usize,
    /// Doppler-bin gate around the predicted path when associating peaks.
    pub doppler_gate: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            scene: Scene::default(),
            initial_state: VehicleState::new(-20.0, 10.0, 10.0),
            init_var: 0.25,
            t_max: 4.0,
            timing: FrameTiming::default(),
            p_t: 16.0,
            n_theta: 7200,
            grid: DelayDopplerGrid::default(),
            noise_var: 1e-9,
            process_std: [1e-3, 1e-3, 1e-3],
            measurement_std: [1e-8, 20.0, 0.01],
            xi: 0.8,
            c_pi: 0.6,
            sigma_ckm: 1e-3,
            blockage: BlockageConfig {
                p_blk: 0.15,
                static_window: Some((140, 175)),
            },
            ckm: CkmConfig {
                cols: 400,
                rows: 8,
                x_range: (-24.0, 24.0),
                y_half: 1.0,
                k: 4,
                idw_power: 2.0,
            },
            runs: 100,
            seed: 1,
            bf_mode: BfMode::Optimized,
            gain_source: GainSource::Ckm,
            scheme: SchemeSelection::Both,
            delay_gate: 3,
            doppler_gate: 5,
        }
    }
}

/// Keys whose values are plain numbers (valid sweep targets).
pub const NUMERIC_KEYS: &[&str] = &[
    "scene.nt",
    "scene.nr",
    "scene.ns",
    "scene.carrier_freq",
    "scene.road_y",
    "scene.reflection_coeff",
    "scene.gain_ref",
    "scene.rsu_x",
    "scene.rsu_y",
    "init.qx",
    "init.qy",
    "init.v",
    "init.var",
    "time.t_max",
    "time.slot",
    "time.frame_len",
    "time.sample_interval",
    "power.p_t",
    "grid.n_theta",
    "grid.max_delay",
    "grid.max_doppler_bin",
    "noise.sigma_z2",
    "noise.sigma_qx",
    "noise.sigma_qy",
    "noise.sigma_v",
    "noise.sigma_tau",
    "noise.sigma_mu",
    "noise.sigma_cos",
    "tpm.xi",
    "tpm.c_pi",
    "tpm.sigma_ckm",
    "blockage.p_blk",
    "ckm.cols",
    "ckm.rows",
    "ckm.x_min",
    "ckm.x_max",
    "ckm.y_half",
    "ckm.k",
    "ckm.idw_power",
    "mc.runs",
    "mc.seed",
    "assoc.delay_gate",
    "assoc.doppler_gate",
];

/// Keys with structured or enumerated values.
pub const TEXT_KEYS: &[&str] = &[
    "scene.reflectors",
    "blockage.window",
    "bf_mode",
    "bf.gain_source",
    "scheme",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::config(key, format!("cannot parse '{value}' as a number")))
}

fn fmt_f(x: f64) -> String {
    format!("{x:?}")
}

impl SimConfig {
    pub fn n_slots(&self) -> usize {
        (self.t_max / self.timing.slot_duration).round() as usize
    }

    /// Per-beam power budget `P_t / nt`.
    pub fn budget(&self) -> f64 {
        self.p_t / self.scene.nt as f64
    }

    pub fn noise_model(&self) -> NoiseModel {
        NoiseModel {
            process: self.process_std.map(|s| s * s),
            measurement: self.measurement_std.map(|s| s * s),
        }
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "scene.nt" => self.scene.nt = num(key, v)?,
            "scene.nr" => self.scene.nr = num(key, v)?,
            "scene.ns" => self.scene.ns = num(key, v)?,
            "scene.carrier_freq" => self.scene.carrier_freq = num(key, v)?,
            "scene.road_y" => self.scene.road_y = num(key, v)?,
            "scene.reflection_coeff" => self.scene.reflection_coeff = num(key, v)?,
            "scene.gain_ref" => self.scene.gain_ref = num(key, v)?,
            "scene.rsu_x" => self.scene.rsu_position[0] = num(key, v)?,
            "scene.rsu_y" => self.scene.rsu_position[1] = num(key, v)?,
            "scene.reflectors" => self.scene.reflectors = parse_reflectors(v)?,
            "init.qx" => self.initial_state.qx = num(key, v)?,
            "init.qy" => self.initial_state.qy = num(key, v)?,
            "init.v" => self.initial_state.v = num(key, v)?,
            "init.var" => self.init_var = num(key, v)?,
            "time.t_max" => self.t_max = num(key, v)?,
            "time.slot" => self.timing.slot_duration = num(key, v)?,
            "time.frame_len" => self.timing.frame_len = num(key, v)?,
            "time.sample_interval" => self.timing.sample_interval = num(key, v)?,
            "power.p_t" => self.p_t = num(key, v)?,
            "grid.n_theta" => self.n_theta = num(key, v)?,
            "grid.max_delay" => self.grid.max_delay = num(key, v)?,
            "grid.max_doppler_bin" => {
                let m: i32 = num(key, v)?;
                self.grid.min_bin = -m;
                self.grid.max_bin = m;
            }
            "noise.sigma_z2" => self.noise_var = num(key, v)?,
            "noise.sigma_qx" => self.process_std[0] = num(key, v)?,
            "noise.sigma_qy" => self.process_std[1] = num(key, v)?,
            "noise.sigma_v" => self.process_std[2] = num(key, v)?,
            "noise.sigma_tau" => self.measurement_std[0] = num(key, v)?,
            "noise.sigma_mu" => self.measurement_std[1] = num(key, v)?,
            "noise.sigma_cos" => self.measurement_std[2] = num(key, v)?,
            "tpm.xi" => self.xi = num(key, v)?,
            "tpm.c_pi" => self.c_pi = num(key, v)?,
            "tpm.sigma_ckm" => self.sigma_ckm = num(key, v)?,
            "blockage.p_blk" => self.blockage.p_blk = num(key, v)?,
            "blockage.window" => self.blockage.static_window = parse_window(v)?,
            "ckm.cols" => self.ckm.cols = num(key, v)?,
            "ckm.rows" => self.ckm.rows = num(key, v)?,
            "ckm.x_min" => self.ckm.x_range.0 = num(key, v)?,
            "ckm.x_max" => self.ckm.x_range.1 = num(key, v)?,
            "ckm.y_half" => self.ckm.y_half = num(key, v)?,
            "ckm.k" => self.ckm.k = num(key, v)?,
            "ckm.idw_power" => self.ckm.idw_power = num(key, v)?,
            "mc.runs" => self.runs = num(key, v)?,
            "mc.seed" => self.seed = num(key, v)?,
            "assoc.delay_gate" => self.delay_gate = num(key, v)?,
            "assoc.doppler_gate" => self.doppler_gate = num(key, v)?,
            "bf_mode" => self.bf_mode = v.parse()?,
            "bf.gain_source" => self.gain_source = v.parse()?,
            "scheme" => self.scheme = v.parse()?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Canonical text of every key, sorted.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let s = &self.scene;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("scene.nt", s.nt.to_string());
        put("scene.nr", s.nr.to_string());
        put("scene.ns", s.ns.to_string());
        put("scene.carrier_freq", fmt_f(s.carrier_freq));
        put("scene.road_y", fmt_f(s.road_y));
        put("scene.reflection_coeff", fmt_f(s.reflection_coeff));
        put("scene.gain_ref", fmt_f(s.gain_ref));
        put("scene.rsu_x", fmt_f(s.rsu_position[0]));
        put("scene.rsu_y", fmt_f(s.rsu_position[1]));
        put(
            "scene.reflectors",
            s.reflectors
                .iter()
                .map(|r| format!("{}:{}", fmt_f(r.y), fmt_f(r.loss)))
                .collect::<Vec<_>>()
                .join(","),
        );
        put("init.qx", fmt_f(self.initial_state.qx));
        put("init.qy", fmt_f(self.initial_state.qy));
        put("init.v", fmt_f(self.initial_state.v));
        put("init.var", fmt_f(self.init_var));
        put("time.t_max", fmt_f(self.t_max));
        put("time.slot", fmt_f(self.timing.slot_duration));
        put("time.frame_len", self.timing.frame_len.to_string());
        put("time.sample_interval", fmt_f(self.timing.sample_interval));
        put("power.p_t", fmt_f(self.p_t));
        put("grid.n_theta", self.n_theta.to_string());
        put("grid.max_delay", self.grid.max_delay.to_string());
        put("grid.max_doppler_bin", self.grid.max_bin.to_string());
        put("noise.sigma_z2", fmt_f(self.noise_var));
        put("noise.sigma_qx", fmt_f(self.process_std[0]));
        put("noise.sigma_qy", fmt_f(self.process_std[1]));
        put("noise.sigma_v", fmt_f(self.process_std[2]));
        put("noise.sigma_tau", fmt_f(self.measurement_std[0]));
        put("noise.sigma_mu", fmt_f(self.measurement_std[1]));
        put("noise.sigma_cos", fmt_f(self.measurement_std[2]));
        put("tpm.xi", fmt_f(self.xi));
        put("tpm.c_pi", fmt_f(self.c_pi));
        put("tpm.sigma_ckm", fmt_f(self.sigma_ckm));
        put("blockage.p_blk", fmt_f(self.blockage.p_blk));
        put(
            "blockage.window",
            match self.blockage.static_window {
                Some((a, b)) => format!("{a}-{b}"),
                None => "none".into(),
            },
        );
        put("ckm.cols", self.ckm.cols.to_string());
        put("ckm.rows", self.ckm.rows.to_string());
        put("ckm.x_min", fmt_f(self.ckm.x_range.0));
        put("ckm.x_max", fmt_f(self.ckm.x_range.1));
        put("ckm.y_half", fmt_f(self.ckm.y_half));
        put("ckm.k", self.ckm.k.to_string());
        put("ckm.idw_power", fmt_f(self.ckm.idw_power));
        put("mc.runs", self.runs.to_string());
        put("mc.seed", self.seed.to_string());
        put("assoc.delay_gate", self.delay_gate.to_string());
        put("assoc.doppler_gate", self.doppler_gate.to_string());
        put("bf_mode", self.bf_mode.as_str().into());
        put(
            "bf.gain_source",
            match self.gain_source {
                GainSource::Ckm => "ckm",
                GainSource::Estimate => "estimate",
            }
            .into(),
        );
        put("scheme", self.scheme.as_str().into());
        m
    }

    /// Parses the text format: `key = value` lines, `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: no + 1,
                reason: format!("expected `key = value`, got '{line}'"),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Serializes in the same format `parse` reads.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        let pos = |key: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be > 0, got {x}")))
            }
        };
        pos("time.t_max", self.t_max)?;
        pos("time.slot", self.timing.slot_duration)?;
        pos("time.sample_interval", self.timing.sample_interval)?;
        pos("power.p_t", self.p_t)?;
        pos("init.var", self.init_var)?;
        pos("tpm.sigma_ckm", self.sigma_ckm)?;
        pos("ckm.idw_power", self.ckm.idw_power)?;
        if self.timing.frame_len == 0 {
            return Err(Error::config("time.frame_len", "must be >= 1"));
        }
        if self.n_theta == 0 {
            return Err(Error::config("grid.n_theta", "must be >= 1"));
        }
        if !(self.noise_var >= 0.0) {
            return Err(Error::config("noise.sigma_z2", "must be >= 0"));
        }
        for (k, s) in ["noise.sigma_qx", "noise.sigma_qy", "noise.sigma_v"]
            .iter()
            .zip(self.process_std)
        {
            pos(k, s)?;
        }
        for (k, s) in ["noise.sigma_tau", "noise.sigma_mu", "noise.sigma_cos"]
            .iter()
            .zip(self.measurement_std)
        {
            pos(k, s)?;
        }
        for (k, x) in [("tpm.xi", self.xi), ("tpm.c_pi", self.c_pi), ("blockage.p_blk", self.blockage.p_blk)] {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::config(k, format!("must lie in [0, 1], got {x}")));
            }
        }
        if self.ckm.cols * self.ckm.rows == 0 {
            return Err(Error::config("ckm.cols", "map needs at least one sample"));
        }
        if self.ckm.k == 0 {
            return Err(Error::config("ckm.k", "must be >= 1"));
        }
        if self.runs == 0 {
            return Err(Error::config("mc.runs", "must be >= 1"));
        }
        if self.n_slots() == 0 {
            return Err(Error::config("time.t_max", "shorter than one slot"));
        }
        if !(self.initial_state.qy > 0.0) {
            return Err(Error::config("init.qy", "vehicle must start in front of the array"));
        }
        Ok(())
    }
}

/// `y:loss` pairs separated by commas; empty means no reflectors.
pub fn parse_reflectors(v: &str) -> Result<Vec<Reflector>> {
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|item| {
            let (y, loss) = item
                .split_once(':')
                .ok_or_else(|| Error::config("scene.reflectors", format!("expected y:loss, got '{item}'")))?;
            Ok(Reflector {
                y: num("scene.reflectors", y.trim())?,
                loss: num("scene.reflectors", loss.trim())?,
            })
        })
        .collect()
}

/// `start-end` (inclusive) or `none`.
pub fn parse_window(v: &str) -> Result<Option<(usize, usize)>> {
    if v == "none" {
        return Ok(None);
    }
    let (a, b) = v
        .split_once('-')
        .ok_or_else(|| Error::config("blockage.window", format!("expected start-end, got '{v}'")))?;
    let a: usize = num("blockage.window", a.trim())?;
    let b: usize = num("blockage.window", b.trim())?;
    if b < a {
        return Err(Error::config("blockage.window", "end before start"));
    }
    Ok(Some((a, b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_give_two_hundred_slots() {
        let c = SimConfig::default();
        assert_eq!(c.n_slots(), 200);
        assert!((c.budget() - 0.5).abs() < 1e-15);
        c.validate().unwrap();
    }

    #[test]
    fn parse_and_round_trip() {
        let text = "# comment\nscene.nt = 16 # trailing\ntpm.c_pi=0.2\nscene.reflectors = 20:0.7, 35:0.5\nblockage.window = none\nbf_mode = equal\n";
        let c = SimConfig::parse(text).unwrap();
        assert_eq!(c.scene.nt, 16);
        assert_eq!(c.c_pi, 0.2);
        assert_eq!(c.scene.reflectors.len(), 2);
        assert_eq!(c.blockage.static_window, None);
        assert_eq!(c.bf_mode, BfMode::Equal);
        let back = SimConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_named() {
        match SimConfig::parse("tpm.cpi = 0.3\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "tpm.cpi"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(SimConfig::parse("just words\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(SimConfig::parse("tpm.c_pi = 1.5\n"), Err(Error::Config { .. })));
    }

    #[test]
    fn every_key_is_listed() {
        let c = SimConfig::default();
        let keys: Vec<String> = c.entries().into_keys().collect();
        let mut listed: Vec<String> = NUMERIC_KEYS.iter().chain(TEXT_KEYS).map(|s| s.to_string()).collect();
        listed.sort();
        assert_eq!(keys, listed);
    }
}
