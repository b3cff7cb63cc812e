//! Synthetic propagation scene and ground truth.
//!
//! The scene is a roadside unit (RSU) with co-located transmit/receive ULAs, a
//! straight road parallel to the array, and a set of infinite axis-parallel
//! specular reflectors `y = const`. Each reflector contributes one single-bounce
//! path whose geometry follows from mirroring the vehicle across the reflector
//! line. Path 1 is always the line-of-sight path.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::{Error, Result, SPEED_OF_LIGHT};

/// A specular reflector occupying the line `y = y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reflector {
    pub y: f64,
    /// Amplitude loss factor applied to the reflected path, in (0, 1].
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub rsu_position: [f64; 2],
    pub nt: usize,
    pub nr: usize,
    pub ns: usize,
    pub carrier_freq: f64,
    pub road_y: f64,
    pub reflectors: Vec<Reflector>,
    /// Vehicle reflection coefficient ε in `|β| = ε α²`.
    pub reflection_coeff: f64,
    /// Amplitude scale of the free-space law `α = gain_ref · loss / (2d)`.
    pub gain_ref: f64,
}

impl Default for Scene {
    fn default() -> Self {
        Self {
            rsu_position: [0.0, 0.0],
            nt: 32,
            nr: 32,
            ns: 2,
            carrier_freq: 30e9,
            road_y: 10.0,
            reflectors: vec![Reflector { y: 20.0, loss: 0.7 }],
            reflection_coeff: 1.0,
            gain_ref: 0.5,
        }
    }
}

impl Scene {
    /// Number of propagation paths (LoS plus one per reflector).
    pub fn n_paths(&self) -> usize {
        1 + self.reflectors.len()
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScene(m));
        if self.nt == 0 || self.nr == 0 || self.ns == 0 {
            return bad("antenna and stream counts must be >= 1".into());
        }
        if self.ns > self.nt {
            return bad(format!("ns = {} exceeds nt = {}", self.ns, self.nt));
        }
        if !(self.carrier_freq > 0.0 && self.carrier_freq.is_finite()) {
            return bad("carrier frequency must be positive".into());
        }
        let road = self.road_y - self.rsu_position[1];
        if !(road > 0.0) {
            return bad("road must lie on the positive-y side of the RSU".into());
        }
        if !(self.gain_ref > 0.0) || !self.reflection_coeff.is_finite() {
            return bad("gain_ref must be positive and reflection_coeff finite".into());
        }
        for (j, r) in self.reflectors.iter().enumerate() {
            if !(r.loss > 0.0 && r.loss <= 1.0) {
                return bad(format!("reflector {} loss {} outside (0, 1]", j + 1, r.loss));
            }
            if (r.y - self.road_y).abs() < 1e-9 {
                return bad(format!("reflector {} coincides with the road", j + 1));
            }
            // The mirrored vehicle must stay in front of the array, otherwise the
            // arrival angle leaves (0, π).
            if 2.0 * r.y - self.road_y - self.rsu_position[1] <= 0.0 {
                return bad(format!(
                    "reflector {} at y = {} mirrors the road behind the array",
                    j + 1,
                    r.y
                ));
            }
        }
        Ok(())
    }
}

/// Vehicle position (m) and signed along-road speed (m/s).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub qx: f64,
    pub qy: f64,
    pub v: f64,
}

impl VehicleState {
    pub fn new(qx: f64, qy: f64, v: f64) -> Self {
        Self { qx, qy, v }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.qx, self.qy]
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.qx, self.qy, self.v]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn is_finite(&self) -> bool {
        self.qx.is_finite() && self.qy.is_finite() && self.v.is_finite()
    }
}

/// Time bases of one slot.
///
/// Delays are resolved on the fast sampling interval `sample_interval`
/// (`l = round(τ / T_p)`), while Doppler accumulates across the `frame_len`
/// symbols that span the whole slot, so the per-symbol normalized Doppler is
/// `k = μ · slot_duration / frame_len` and one Doppler bin is `1 / slot_duration` Hz.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub sample_interval: f64,
    pub slot_duration: f64,
    pub frame_len: usize,
}

impl FrameTiming {
    pub fn symbol_period(&self) -> f64 {
        self.slot_duration / self.frame_len as f64
    }

    pub fn delay_index(&self, delay: f64) -> usize {
        (delay / self.sample_interval).round().max(0.0) as usize
    }

    pub fn doppler_index(&self, doppler: f64) -> f64 {
        doppler * self.symbol_period()
    }

    /// Doppler (Hz) of an integer Doppler bin.
    pub fn bin_doppler(&self, bin: i32) -> f64 {
        bin as f64 / self.slot_duration
    }
}

impl Default for FrameTiming {
    fn default() -> Self {
        Self {
            sample_interval: 1e-8,
            slot_duration: 0.02,
            frame_len: 128,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    /// 1 is the line-of-sight path, `j + 1` the bounce off reflector `j`.
    pub path_id: usize,
    pub gain: Complex64,
    pub amp_loss: f64,
    pub aoa: f64,
    pub delay: f64,
    pub doppler: f64,
    pub alive: bool,
    pub delay_index: usize,
    pub doppler_index: f64,
}

/// Geometry of one path before timing quantization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathGeometry {
    /// One-way length (m).
    pub length: f64,
    pub cos_aoa: f64,
    /// Doppler (Hz).
    pub doppler: f64,
    /// Amplitude loss α.
    pub amp_loss: f64,
}

impl PathGeometry {
    pub fn delay(&self) -> f64 {
        2.0 * self.length / SPEED_OF_LIGHT
    }

    pub fn aoa(&self) -> f64 {
        self.cos_aoa.clamp(-1.0, 1.0).acos()
    }
}

fn relative(scene: &Scene, p: [f64; 2]) -> (f64, f64) {
    (p[0] - scene.rsu_position[0], p[1] - scene.rsu_position[1])
}

/// Noiseless line-of-sight measurement model `[τ, μ, cos θ]`.
///
/// The Doppler follows the tracker's measurement model `μ = −2 v q_y f_c / (c‖q‖)`,
/// which the simulator reproduces exactly so that truth and filter agree.
pub fn los_measurement(scene: &Scene, state: &VehicleState) -> [f64; 3] {
    let (x, y) = relative(scene, state.position());
    let r = x.hypot(y);
    let c = SPEED_OF_LIGHT;
    [
        2.0 * r / c,
        -2.0 * state.v * y * scene.carrier_freq / (c * r),
        x / r,
    ]
}

/// Per-path geometry for every path in the scene, in path-id order.
pub fn path_geometry(scene: &Scene, state: &VehicleState) -> Result<Vec<PathGeometry>> {
    let (x, y) = relative(scene, state.position());
    if !(y > 0.0) || !state.is_finite() {
        return Err(Error::DegenerateGeometry(format!(
            "vehicle at ({}, {}) is not in front of the array",
            state.qx, state.qy
        )));
    }
    let fc = scene.carrier_freq;
    let c = SPEED_OF_LIGHT;
    let mut out = Vec::with_capacity(scene.n_paths());

    let [_, mu, cos] = los_measurement(scene, state);
    let r = x.hypot(y);
    out.push(PathGeometry {
        length: r,
        cos_aoa: cos,
        doppler: mu,
        amp_loss: scene.gain_ref / (2.0 * r),
    });

    for refl in &scene.reflectors {
        // Mirror image of the vehicle across the reflector line.
        let my = 2.0 * refl.y - state.qy - scene.rsu_position[1];
        if !(my > 0.0) {
            return Err(Error::DegenerateGeometry(format!(
                "mirror image across y = {} falls behind the array",
                refl.y
            )));
        }
        let d = x.hypot(my);
        // The image moves with (v, 0), so d' = x v / d.
        let d_dot = x * state.v / d;
        out.push(PathGeometry {
            length: d,
            cos_aoa: x / d,
            doppler: -2.0 * fc / c * d_dot,
            amp_loss: scene.gain_ref * refl.loss / (2.0 * d),
        });
    }
    Ok(out)
}

/// Ground-truth path parameters for `state`, sorted by path id, all alive.
pub fn ground_truth_paths(
    scene: &Scene,
    state: &VehicleState,
    timing: &FrameTiming,
) -> Result<Vec<PathParams>> {
    let geo = path_geometry(scene, state)?;
    Ok(geo
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let delay = g.delay();
            let mag = scene.reflection_coeff * g.amp_loss * g.amp_loss;
            let phase = -2.0 * PI * scene.carrier_freq * delay;
            PathParams {
                path_id: i + 1,
                gain: Complex64::from_polar(mag, phase),
                amp_loss: g.amp_loss,
                aoa: g.aoa(),
                delay,
                doppler: g.doppler,
                alive: true,
                delay_index: timing.delay_index(delay),
                doppler_index: timing.doppler_index(g.doppler),
            }
        })
        .collect())
}

/// Constant-velocity step `qx += dt·v` plus additive noise `[w_qx, w_qy, w_v]`.
pub fn evolve_state(state: &VehicleState, dt: f64, noise: [f64; 3]) -> VehicleState {
    VehicleState {
        qx: state.qx + dt * state.v + noise[0],
        qy: state.qy + noise[1],
        v: state.v + noise[2],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockageConfig {
    /// Per-slot blockage probability of the LoS path.
    pub p_blk: f64,
    /// Inclusive slot interval during which the LoS path is always blocked.
    pub static_window: Option<(usize, usize)>,
}

impl BlockageConfig {
    pub fn nlos_blockage_prob(&self) -> f64 {
        1.0 - (1.0 - self.p_blk).powi(2)
    }

    pub fn in_static_window(&self, slot: usize) -> bool {
        matches!(self.static_window, Some((a, b)) if slot >= a && slot <= b)
    }
}

impl Default for BlockageConfig {
    fn default() -> Self {
        Self {
            p_blk: 0.0,
            static_window: None,
        }
    }
}

/// Per-path alive flags for one slot.
///
/// One uniform draw is consumed per path, in path-id order, regardless of the
/// static window, so the stream position depends only on the slot count.
pub fn blockage_step<R: Rng + ?Sized>(
    cfg: &BlockageConfig,
    slot: usize,
    n_paths: usize,
    rng: &mut R,
) -> Vec<bool> {
    let nlos_alive = (1.0 - cfg.p_blk).powi(2);
    (0..n_paths)
        .map(|i| {
            let u: f64 = rng.gen();
            if i == 0 {
                !cfg.in_static_window(slot) && u >= cfg.p_blk
            } else {
                u < nlos_alive
            }
        })
        .collect()
}

/// AoA error in degrees, folded so that near-π wraparounds count as small errors.
pub fn aoa_error_deg(estimate: f64, truth: f64) -> f64 {
    let d = (estimate - truth).abs() % PI;
    d.min(PI - d).to_degrees()
}
