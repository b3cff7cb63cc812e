//! Per-slot dual-domain loop and the line-of-sight-only baseline.

use nalgebra::{DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bdomain::{
    band_halfwidth, hard_predict, map_update, propagate_belief, AngularBelief, AngularGrid, TransitionKind,
    TransitionSpec,
};
use crate::beamform::{build_plan, BeamformingPlan, BfMode, PredictedPath};
use crate::cdomain::{predict, update_los, update_nlos, CState, EkfUpdate, NoiseModel};
use crate::ckm::{build_ckm, grid_locations, ChannelKnowledgeMap, JacobianSteps, PathPrediction};
use crate::env::{
    aoa_error_deg, blockage_step, evolve_state, ground_truth_paths, los_measurement, path_geometry, Scene,
    VehicleState,
};
use crate::harness::config::{GainSource, SimConfig};
use crate::signal::{
    is_low_confidence, matched_filter_search, separate_path, synthesize_echo, MfPeak,
    ProfileLikelihood, TxFrame,
};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Proposed,
    Baseline,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Proposed => "proposed",
            Scheme::Baseline => "baseline",
        }
    }
}

/// Which measurement model updated the filter in a slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Los,
    Nlos,
    /// No usable measurement; prediction only.
    Predict,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Los => "los",
            Regime::Nlos => "nlos",
            Regime::Predict => "predict",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathRecord {
    pub alive: bool,
    /// A measurement of this path entered the slot update.
    pub observed: bool,
    pub kind: TransitionKind,
    pub true_aoa: f64,
    /// `None` when the scheme does not track this path.
    pub est_aoa: Option<f64>,
    pub misaligned: bool,
}

impl PathRecord {
    pub fn error_deg(&self) -> Option<f64> {
        self.est_aoa.map(|e| aoa_error_deg(e, self.true_aoa))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotRecord {
    pub run: usize,
    pub slot: usize,
    pub scheme: Scheme,
    pub truth: VehicleState,
    pub estimate: VehicleState,
    pub position_error: f64,
    pub los_present: bool,
    pub regime: Regime,
    /// Innovation covariance was regularized.
    pub regularized: bool,
    /// An alive path produced no confident matched-filter peak.
    pub missed: bool,
    pub paths: Vec<PathRecord>,
    pub bf_mode: BfMode,
    pub gamma: Vec<f64>,
    pub beam_angles: Vec<f64>,
}

/// Pre-drawn randomness shared by both schemes of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub truth: Vec<VehicleState>,
    pub alive: Vec<Vec<bool>>,
    pub init_estimate: VehicleState,
}

/// Matched-filter candidates requested per tracked path. Doppler sidelobes of
/// a strong path can outrank a weak one, so association needs more than P.
pub const CANDIDATES_PER_PATH: usize = 4;

const STREAM_TRUTH: u64 = 1;
const STREAM_BLOCKAGE: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_ECHO: u64 = 4;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, run, purpose, slot)`.
pub fn stream(seed: u64, run: usize, purpose: u64, slot: usize) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for x in [run as u64, purpose, slot as u64] {
        h = splitmix(h ^ x);
    }
    ChaCha8Rng::seed_from_u64(h)
}

pub fn generate_world(cfg: &SimConfig, run: usize) -> World {
    let n = cfg.n_slots();
    let p = cfg.scene.n_paths();
    let mut rng = stream(cfg.seed, run, STREAM_TRUTH, 0);
    let mut truth = Vec::with_capacity(n);
    let mut s = cfg.initial_state;
    for k in 0..n {
        if k > 0 {
            let w = cfg.process_std.map(|sd| sd * gaussian(&mut rng));
            s = evolve_state(&s, cfg.timing.slot_duration, w);
        }
        truth.push(s);
    }
    let mut brng = stream(cfg.seed, run, STREAM_BLOCKAGE, 0);
    let alive = (0..n).map(|k| blockage_step(&cfg.blockage, k, p, &mut brng)).collect();
    let mut irng = stream(cfg.seed, run, STREAM_INIT, 0);
    let sd = cfg.init_var.sqrt();
    let i = cfg.initial_state;
    let init_estimate = VehicleState::new(
        i.qx + sd * gaussian(&mut irng),
        i.qy + sd * gaussian(&mut irng),
        i.v + sd * gaussian(&mut irng),
    );
    World {
        truth,
        alive,
        init_estimate,
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Map sampled on the configured strip around the road.
pub fn build_map(cfg: &SimConfig) -> Result<ChannelKnowledgeMap> {
    let y = cfg.scene.road_y;
    let locs = grid_locations(
        cfg.ckm.x_range,
        (y - cfg.ckm.y_half, y + cfg.ckm.y_half),
        cfg.ckm.cols,
        cfg.ckm.rows,
    );
    build_ckm(&cfg.scene, &locs, cfg.ckm.k, cfg.ckm.idw_power)
}

/// Static inputs shared by every run.
pub struct Context<'a> {
    pub cfg: &'a SimConfig,
    pub map: &'a ChannelKnowledgeMap,
    pub grid: AngularGrid,
    pub noise: NoiseModel,
}

impl<'a> Context<'a> {
    pub fn new(cfg: &'a SimConfig, map: &'a ChannelKnowledgeMap) -> Result<Self> {
        Ok(Self {
            cfg,
            map,
            grid: AngularGrid::new(cfg.n_theta)?,
            noise: cfg.noise_model(),
        })
    }

    fn scene(&self) -> &Scene {
        &self.cfg.scene
    }
}

fn true_angles(scene: &Scene, s: &VehicleState) -> Result<Vec<f64>> {
    Ok(path_geometry(scene, s)?.iter().map(|g| g.aoa()).collect())
}

/// Transition kind of each path for the step `slot → slot + 1`, from ground truth.
fn oracle_kinds(
    scene: &Scene,
    world: &World,
    slot: usize,
    band: usize,
    grid: &AngularGrid,
) -> Result<Vec<TransitionKind>> {
    let now = true_angles(scene, &world.truth[slot])?;
    let next = true_angles(scene, &world.truth[slot + 1])?;
    Ok((0..now.len())
        .map(|i| {
            if !world.alive[slot][i] && world.alive[slot + 1][i] {
                TransitionKind::Unpredictable
            } else if ((next[i] - now[i]).abs() / grid.step()) > band as f64 {
                TransitionKind::Predictable
            } else {
                TransitionKind::Stationary
            }
        })
        .collect())
}

/// A flat belief (after rebirth with no detection) carries no pointing
/// information; such paths fall back to the map angle.
fn informative(b: &AngularBelief) -> bool {
    let n = b.pmf.len() as f64;
    b.pmf.iter().cloned().fold(0.0, f64::max) > 2.0 / n
}

fn point(b: &AngularBelief, grid: &AngularGrid, fallback: f64) -> f64 {
    if informative(b) {
        hard_predict(b, grid)
    } else {
        fallback
    }
}

fn gain_abs(scene: &Scene, p: &PathPrediction) -> f64 {
    scene.reflection_coeff * p.amp_loss * p.amp_loss
}

fn geometric_los_angle(scene: &Scene, s: &VehicleState) -> f64 {
    los_measurement(scene, s)[2].clamp(-1.0, 1.0).acos()
}

struct ProposedState {
    c: CState,
    beliefs: Vec<AngularBelief>,
    kinds: Vec<TransitionKind>,
    plan: BeamformingPlan,
    last_gain: Vec<Option<f64>>,
}

fn nearest_peak(
    peaks: &[MfPeak],
    used: &[bool],
    l_pred: i64,
    m_pred: i64,
    cfg: &SimConfig,
    nr: usize,
    ns: usize,
) -> Option<usize> {
    let mut best: Option<(usize, i64)> = None;
    for (j, p) in peaks.iter().enumerate() {
        if used[j] || is_low_confidence(p, cfg.noise_var, cfg.timing.frame_len, nr, ns) {
            continue;
        }
        let dl = (p.delay_index as i64 - l_pred).abs();
        let dm = (p.doppler_bin as i64 - m_pred).abs();
        if dl > cfg.delay_gate as i64 || dm > cfg.doppler_gate as i64 {
            continue;
        }
        let score = dl + dm;
        if best.map_or(true, |(_, b)| score < b) {
            best = Some((j, score));
        }
    }
    best.map(|(j, _)| j)
}

fn echo_for_slot(
    ctx: &Context,
    world: &World,
    run: usize,
    slot: usize,
    plan: &BeamformingPlan,
) -> Result<(nalgebra::DMatrix<num_complex::Complex64>, TxFrame, Vec<crate::env::PathParams>)> {
    let cfg = ctx.cfg;
    let mut rng = stream(cfg.seed, run, STREAM_ECHO, slot);
    let mut paths = ground_truth_paths(ctx.scene(), &world.truth[slot], &cfg.timing)?;
    for (p, &a) in paths.iter_mut().zip(&world.alive[slot]) {
        p.alive = a;
    }
    let frame = TxFrame::random(cfg.scene.ns, cfg.timing.frame_len, &mut rng);
    let r = synthesize_echo(
        &paths,
        cfg.scene.nr,
        &plan.beamformer,
        &frame,
        cfg.noise_var,
        cfg.grid.max_delay,
        &mut rng,
    )?;
    Ok((r, frame, paths))
}

fn plan_from(
    ctx: &Context,
    angles: &[f64],
    gains: &[f64],
    mode: BfMode,
) -> Result<BeamformingPlan> {
    let s = ctx.scene();
    let paths: Vec<PredictedPath> = angles
        .iter()
        .zip(gains)
        .enumerate()
        .map(|(i, (&theta, &gain_abs))| PredictedPath {
            path_id: i + 1,
            theta,
            gain_abs,
        })
        .collect();
    build_plan(&paths, s.ns, s.nt, s.nr, ctx.cfg.budget(), mode)
}

fn position_error(truth: &VehicleState, est: &VehicleState) -> f64 {
    (truth.qx - est.qx).hypot(truth.qy - est.qy)
}

fn initial_cstate(cfg: &SimConfig, world: &World) -> CState {
    CState {
        mean: world.init_estimate,
        cov: Matrix3::from_diagonal_element(cfg.init_var),
    }
}

/// Runs the dual-domain tracker over every slot of one run.
pub fn run_proposed(ctx: &Context, world: &World, run: usize) -> Result<Vec<SlotRecord>> {
    let cfg = ctx.cfg;
    let scene = ctx.scene();
    let p = scene.n_paths();
    let n = cfg.n_slots();
    let t = cfg.timing;
    let c0 = initial_cstate(cfg, world);
    let pred0 = ctx.map.query(c0.mean.position(), c0.mean.v);
    let mut st = ProposedState {
        c: c0,
        beliefs: vec![AngularBelief::uniform(ctx.grid.len()); p],
        kinds: vec![TransitionKind::Unpredictable; p],
        plan: plan_from(
            ctx,
            &pred0.iter().map(|q| q.aoa).collect::<Vec<_>>(),
            &pred0.iter().map(|q| gain_abs(scene, q)).collect::<Vec<_>>(),
            cfg.bf_mode,
        )?,
        last_gain: vec![None; p],
    };
    let mut out = Vec::with_capacity(n);
    for slot in 0..n {
        let truth = world.truth[slot];
        let alive = &world.alive[slot];
        let (r, frame, gt) = echo_for_slot(ctx, world, run, slot, &st.plan)?;
        let bf = st.plan.beamformer.clone();

        let pred = ctx.map.query(st.c.mean.position(), st.c.mean.v);
        let search = matched_filter_search(&r, &frame, cfg.grid, CANDIDATES_PER_PATH * p)?;
        let mut used = vec![false; search.peaks.len()];
        let mut observed = vec![false; p];
        let mut missed = false;
        let mut est_aoa = vec![0.0; p];
        let mut misaligned = vec![false; p];
        let mut meas: Vec<Option<[f64; 3]>> = vec![None; p];
        let mut posteriors = st.beliefs.clone();
        for i in 0..p {
            est_aoa[i] = point(&st.beliefs[i], &ctx.grid, pred[i].aoa);
            if !alive[i] {
                continue;
            }
            let l_pred = t.delay_index(pred[i].delay) as i64;
            let m_pred = (pred[i].doppler * t.slot_duration).round() as i64;
            let Some(j) = nearest_peak(&search.peaks, &used, l_pred, m_pred, cfg, scene.nr, scene.ns) else {
                missed = true;
                continue;
            };
            used[j] = true;
            let pk = search.peaks[j];
            let k = pk.doppler_bin as f64 / t.frame_len as f64;
            let block = separate_path(&r, &frame, pk.delay_index, k)?;
            let lk = ProfileLikelihood::new(&block, &bf, t.frame_len, cfg.noise_var);
            let est = map_update(&st.beliefs[i], &lk, st.kinds[i], &ctx.grid);
            est_aoa[i] = est.theta;
            if est.degenerate {
                misaligned[i] = true;
                continue;
            }
            posteriors[i] = est.posterior;
            st.last_gain[i] = Some(lk.gain(est.theta, t.frame_len).norm());
            observed[i] = true;
            meas[i] = Some([
                pk.delay_index as f64 * t.sample_interval,
                t.bin_doppler(pk.doppler_bin),
                est.theta.cos(),
            ]);
        }

        let mut regime = Regime::Predict;
        let mut regularized = false;
        let mut post = st.c;
        let update: Option<Result<EkfUpdate>> = if let Some(z) = meas[0] {
            regime = Regime::Los;
            Some(update_los(&st.c, z, scene, &ctx.noise))
        } else {
            let ids: Vec<usize> = (1..p).filter(|&i| meas[i].is_some()).map(|i| i + 1).collect();
            if ids.is_empty() {
                None
            } else {
                regime = Regime::Nlos;
                let m = ids.len();
                let mut z = DVector::zeros(3 * m);
                for (j, &id) in ids.iter().enumerate() {
                    let v = meas[id - 1].expect("selected");
                    z[j] = v[0];
                    z[m + j] = v[1];
                    z[2 * m + j] = v[2];
                }
                Some(update_nlos(&st.c, &z, ctx.map, &ids, JacobianSteps::default(), &ctx.noise))
            }
        };
        match update {
            Some(Ok(u)) => {
                regularized = u.regularized;
                post = u.state;
            }
            Some(Err(_)) => {
                regime = Regime::Predict;
                regularized = true;
            }
            None => {}
        }

        out.push(SlotRecord {
            run,
            slot,
            scheme: Scheme::Proposed,
            truth,
            estimate: post.mean,
            position_error: position_error(&truth, &post.mean),
            los_present: alive[0],
            regime,
            regularized,
            missed,
            paths: (0..p)
                .map(|i| PathRecord {
                    alive: alive[i],
                    observed: observed[i],
                    kind: st.kinds[i],
                    true_aoa: gt[i].aoa,
                    est_aoa: Some(est_aoa[i]),
                    misaligned: misaligned[i],
                })
                .collect(),
            bf_mode: st.plan.mode,
            gamma: st.plan.beamformer.gamma.clone(),
            beam_angles: st.plan.angles.clone(),
        });

        if slot + 1 == n {
            break;
        }
        let c_next = predict(&post, &ctx.noise, t.slot_duration);
        let pred_next = ctx.map.query(c_next.mean.position(), c_next.mean.v);
        let band = band_halfwidth(c_next.mean.v, t.slot_duration, pred_next[0].aoa, ctx.grid.len());
        let kinds = oracle_kinds(scene, world, slot, band, &ctx.grid)?;
        let mut angles = Vec::with_capacity(p);
        let mut gains = Vec::with_capacity(p);
        for i in 0..p {
            let spec = TransitionSpec {
                kind: kinds[i],
                c_pi: cfg.c_pi,
                xi: cfg.xi,
                band,
                sigma_ckm: cfg.sigma_ckm,
                predicted_angle: pred_next[i].aoa,
            };
            st.beliefs[i] = propagate_belief(&posteriors[i], &spec, &ctx.grid);
            angles.push(point(&st.beliefs[i], &ctx.grid, pred_next[i].aoa));
            gains.push(match (cfg.gain_source, st.last_gain[i]) {
                (GainSource::Estimate, Some(g)) => g,
                _ => gain_abs(scene, &pred_next[i]),
            });
        }
        st.kinds = kinds;
        st.plan = plan_from(ctx, &angles, &gains, cfg.bf_mode)?;
        st.c = c_next;
    }
    Ok(out)
}

/// Line-of-sight-only tracker: single beam, no map, prediction only while
/// the line-of-sight path is absent.
pub fn run_baseline(ctx: &Context, world: &World, run: usize) -> Result<Vec<SlotRecord>> {
    let cfg = ctx.cfg;
    let scene = ctx.scene();
    let p = scene.n_paths();
    let n = cfg.n_slots();
    let t = cfg.timing;
    let mut c = initial_cstate(cfg, world);
    let mut belief = AngularBelief::uniform(ctx.grid.len());
    let mut kind = TransitionKind::Unpredictable;
    let single_beam = |angle: f64| -> Result<BeamformingPlan> {
        let angles = vec![angle; p];
        let gains: Vec<f64> = (0..p).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
        plan_from(ctx, &angles, &gains, BfMode::None)
    };
    let mut plan = single_beam(geometric_los_angle(scene, &c.mean))?;
    let mut out = Vec::with_capacity(n);
    for slot in 0..n {
        let truth = world.truth[slot];
        let alive = &world.alive[slot];
        let (r, frame, gt) = echo_for_slot(ctx, world, run, slot, &plan)?;
        let mut post = c;
        let mut regime = Regime::Predict;
        let mut regularized = false;
        let mut misaligned = false;
        let mut posterior = belief.clone();
        let los_est;
        if alive[0] {
            // Oracle separation at the true delay and nearest Doppler bin.
            let l = gt[0].delay_index;
            let m = (gt[0].doppler * t.slot_duration).round() as i32;
            let block = separate_path(&r, &frame, l, m as f64 / t.frame_len as f64)?;
            let lk = ProfileLikelihood::new(&block, &plan.beamformer, t.frame_len, cfg.noise_var);
            let est = map_update(&belief, &lk, kind, &ctx.grid);
            los_est = est.theta;
            if est.degenerate {
                misaligned = true;
            } else {
                posterior = est.posterior;
                let z = [l as f64 * t.sample_interval, t.bin_doppler(m), est.theta.cos()];
                match update_los(&c, z, scene, &ctx.noise) {
                    Ok(u) => {
                        regime = Regime::Los;
                        regularized = u.regularized;
                        post = u.state;
                    }
                    Err(_) => regularized = true,
                }
            }
        } else {
            los_est = geometric_los_angle(scene, &c.mean);
        }

        out.push(SlotRecord {
            run,
            slot,
            scheme: Scheme::Baseline,
            truth,
            estimate: post.mean,
            position_error: position_error(&truth, &post.mean),
            los_present: alive[0],
            regime,
            regularized,
            missed: false,
            paths: (0..p)
                .map(|i| PathRecord {
                    alive: alive[i],
                    observed: i == 0 && regime == Regime::Los,
                    kind: if i == 0 { kind } else { TransitionKind::Stationary },
                    true_aoa: gt[i].aoa,
                    est_aoa: if i == 0 { Some(los_est) } else { None },
                    misaligned: i == 0 && misaligned,
                })
                .collect(),
            bf_mode: plan.mode,
            gamma: plan.beamformer.gamma.clone(),
            beam_angles: plan.angles.clone(),
        });

        if slot + 1 == n {
            break;
        }
        let c_next = predict(&post, &ctx.noise, t.slot_duration);
        let los_next = geometric_los_angle(scene, &c_next.mean);
        let band = band_halfwidth(c_next.mean.v, t.slot_duration, los_next, ctx.grid.len());
        kind = if !alive[0] && world.alive[slot + 1][0] {
            TransitionKind::Unpredictable
        } else {
            TransitionKind::Stationary
        };
        let spec = TransitionSpec {
            kind,
            c_pi: 0.0,
            xi: cfg.xi,
            band,
            sigma_ckm: cfg.sigma_ckm,
            predicted_angle: los_next,
        };
        belief = propagate_belief(&posterior, &spec, &ctx.grid);
        plan = single_beam(los_next)?;
        c = c_next;
    }
    Ok(out)
}
