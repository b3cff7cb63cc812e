//! Beam-domain tracking: a Markov chain over a uniform angular grid per path.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::signal::ProfileLikelihood;
use crate::{Error, Result};

/// Prior entries at or below this are left out of the MAP search.
pub const SUPPORT_THRESHOLD: f64 = 1e-12;

/// `θ_κ = π κ / n` for `κ = 0..n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AngularGrid {
    n: usize,
}

impl AngularGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("n_theta", "must be >= 1"));
        }
        Ok(Self { n })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn step(&self) -> f64 {
        PI / self.n as f64
    }

    pub fn angle(&self, k: usize) -> f64 {
        PI * k as f64 / self.n as f64
    }

    /// Grid index nearest to `theta`, clamped to the grid.
    pub fn nearest(&self, theta: f64) -> usize {
        let k = (theta / self.step()).round();
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.n - 1)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AngularBelief {
    pub pmf: Vec<f64>,
}

impl AngularBelief {
    pub fn uniform(n: usize) -> Self {
        Self {
            pmf: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut pmf = vec![0.0; n];
        pmf[k] = 1.0;
        Self { pmf }
    }

    /// Normalizes arbitrary nonnegative weights; all-zero input gives the uniform PMF.
    pub fn from_weights(mut w: Vec<f64>) -> Self {
        let total: f64 = w.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            let n = w.len();
            return Self::uniform(n);
        }
        for x in &mut w {
            *x /= total;
        }
        Self { pmf: w }
    }

    pub fn len(&self) -> usize {
        self.pmf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pmf.is_empty()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.pmf
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.pmf.iter().all(|&p| p >= 0.0 && p.is_finite())
            && (self.pmf.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransitionKind {
    Stationary,
    Predictable,
    Unpredictable,
}

impl TransitionKind {
    pub fn label(self) -> &'static str {
        match self {
            TransitionKind::Stationary => "I",
            TransitionKind::Predictable => "II",
            TransitionKind::Unpredictable => "III",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionSpec {
    pub kind: TransitionKind,
    pub c_pi: f64,
    pub xi: f64,
    /// Band half-width ε in grid cells.
    pub band: usize,
    pub sigma_ckm: f64,
    pub predicted_angle: f64,
}

/// `ζ ξ^|o|` for offsets `o = −ε..=ε`, normalized over the full band.
pub fn tpm_temporal_row_weights(xi: f64, eps: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..=2 * eps)
        .map(|i| {
            let o = i.abs_diff(eps) as i32;
            if o == 0 {
                1.0
            } else {
                xi.powi(o)
            }
        })
        .collect();
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    w
}

/// Discretized Gaussian around `predicted_angle`; the single row shared by
/// every source state of the map-driven TPM.
pub fn tpm_ckm_row(predicted_angle: f64, sigma_ckm: f64, grid: &AngularGrid) -> AngularBelief {
    let n = grid.len();
    let d2: Vec<f64> = (0..n)
        .map(|k| (grid.angle(k) - predicted_angle).powi(2))
        .collect();
    let dmin = d2.iter().cloned().fold(f64::INFINITY, f64::min);
    let s2 = 2.0 * sigma_ckm * sigma_ckm;
    // Shifting by the nearest distance keeps the peak at 1 as σ → 0.
    let w: Vec<f64> = d2
        .iter()
        .map(|&d| if d == dmin { 1.0 } else { (-(d - dmin) / s2).exp() })
        .collect();
    AngularBelief::from_weights(w)
}

/// `bᵀ Π` for the banded temporal TPM, rows renormalized over the band
/// truncated at the grid edges.
pub fn banded_propagate(belief: &AngularBelief, weights: &[f64]) -> AngularBelief {
    let n = belief.len();
    let eps = weights.len() / 2;
    let full: f64 = weights.iter().sum();
    let mut out = vec![0.0; n];
    for (i, &b) in belief.pmf.iter().enumerate() {
        if b == 0.0 {
            continue;
        }
        let lo = i.saturating_sub(eps);
        let hi = (i + eps).min(n - 1);
        let row_sum = if lo + eps == i && i + eps == hi {
            full
        } else {
            weights[lo + eps - i..=hi + eps - i].iter().sum()
        };
        let s = b / row_sum;
        for k in lo..=hi {
            out[k] += s * weights[k + eps - i];
        }
    }
    AngularBelief::from_weights(out)
}

/// One Markov step of the belief.
pub fn propagate_belief(belief: &AngularBelief, spec: &TransitionSpec, grid: &AngularGrid) -> AngularBelief {
    let n = grid.len();
    match spec.kind {
        TransitionKind::Unpredictable => AngularBelief::uniform(n),
        TransitionKind::Predictable => tpm_ckm_row(spec.predicted_angle, spec.sigma_ckm, grid),
        TransitionKind::Stationary => {
            let c = spec.c_pi;
            let band = if c < 1.0 {
                Some(banded_propagate(belief, &tpm_temporal_row_weights(spec.xi, spec.band)))
            } else {
                None
            };
            let row = if c > 0.0 {
                Some(tpm_ckm_row(spec.predicted_angle, spec.sigma_ckm, grid))
            } else {
                None
            };
            match (band, row) {
                (Some(b), None) => b,
                (None, Some(r)) => r,
                (Some(b), Some(r)) => AngularBelief::from_weights(
                    b.pmf
                        .iter()
                        .zip(&r.pmf)
                        .map(|(x, y)| (1.0 - c) * x + c * y)
                        .collect(),
                ),
                (None, None) => unreachable!("c_pi is either below 1 or above 0"),
            }
        }
    }
}

/// Grid angle of the most probable entry; ties go to the lowest index.
pub fn hard_predict(belief: &AngularBelief, grid: &AngularGrid) -> f64 {
    grid.angle(argmax(&belief.pmf))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Band half-width `ε = v̂ ΔT sin θ̂₁ N_θ / 20` in cells, at least one.
pub fn band_halfwidth(speed: f64, slot_duration: f64, los_angle: f64, n_theta: usize) -> usize {
    let e = (speed * slot_duration * los_angle.sin()).abs() * n_theta as f64 / 20.0;
    (e.round() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapEstimate {
    pub theta: f64,
    pub posterior: AngularBelief,
    /// Every candidate had zero likelihood (beam misaligned).
    pub degenerate: bool,
}

/// MAP angle from a separated echo block.
///
/// Unpredictable transitions search the full grid under a uniform prior;
/// the other kinds search only where the prior exceeds [`SUPPORT_THRESHOLD`].
pub fn map_update(
    prior: &AngularBelief,
    likelihood: &ProfileLikelihood,
    kind: TransitionKind,
    grid: &AngularGrid,
) -> MapEstimate {
    let n = grid.len();
    let uniform;
    let (prior, candidates): (&AngularBelief, Vec<usize>) = if kind == TransitionKind::Unpredictable {
        uniform = AngularBelief::uniform(n);
        (&uniform, (0..n).collect())
    } else {
        let c = (0..n).filter(|&k| prior.pmf[k] > SUPPORT_THRESHOLD).collect();
        (prior, c)
    };
    let scores: Vec<f64> = candidates
        .iter()
        .map(|&k| prior.pmf[k].ln() + likelihood.eval(grid.angle(k)))
        .collect();
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return MapEstimate {
            theta: hard_predict(prior, grid),
            posterior: prior.clone(),
            degenerate: true,
        };
    }
    let mut post = vec![0.0; n];
    let mut best_k = candidates[0];
    let mut best_s = f64::NEG_INFINITY;
    for (&k, &s) in candidates.iter().zip(&scores) {
        post[k] = (s - best).exp();
        if s > best_s {
            best_s = s;
            best_k = k;
        }
    }
    MapEstimate {
        theta: grid.angle(best_k),
        posterior: AngularBelief::from_weights(post),
        degenerate: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{steering_vector, Beamformer};
    use nalgebra::DMatrix;
    use num_complex::Complex64;

    fn grid() -> AngularGrid {
        AngularGrid::new(7200).unwrap()
    }

    fn spec(kind: TransitionKind, c_pi: f64, xi: f64, band: usize, center: f64) -> TransitionSpec {
        TransitionSpec {
            kind,
            c_pi,
            xi,
            band,
            sigma_ckm: 1e-3,
            predicted_angle: center,
        }
    }

    #[test]
    fn grid_layout() {
        let g = grid();
        assert_eq!(g.angle(0), 0.0);
        assert!((g.step() - PI / 7200.0).abs() < 1e-18);
        assert_eq!(g.nearest(g.angle(1234) + 0.3 * g.step()), 1234);
        assert_eq!(g.nearest(PI), 7199);
        assert_eq!(g.nearest(-0.1), 0);
    }

    #[test]
    fn temporal_weights_examples() {
        assert_eq!(tpm_temporal_row_weights(0.0, 3), vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let w = tpm_temporal_row_weights(0.8, 2);
        let expect = [0.16495, 0.20619, 0.25773, 0.20619, 0.16495];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ckm_row_limits() {
        let g = AngularGrid::new(360).unwrap();
        let r = tpm_ckm_row(g.angle(100) + 0.2 * g.step(), 1e-9, &g);
        assert_eq!(r.pmf[100], 1.0);
        let r = tpm_ckm_row(g.angle(100), 1e-2, &g);
        for d in 1..20 {
            assert!((r.pmf[100 - d] - r.pmf[100 + d]).abs() < 1e-9 * r.pmf[100]);
        }
        assert!((r.pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn propagation_special_cases() {
        let g = AngularGrid::new(500).unwrap();
        let b = AngularBelief::from_weights((0..500).map(|k| ((k * 7919) % 13) as f64).collect());
        let same = propagate_belief(&b, &spec(TransitionKind::Stationary, 0.0, 0.0, 4, 1.0), &g);
        for (x, y) in same.pmf.iter().zip(&b.pmf) {
            assert!((x - y).abs() < 1e-15);
        }
        let absorbed = propagate_belief(&b, &spec(TransitionKind::Stationary, 1.0, 0.8, 4, 1.0), &g);
        assert_eq!(absorbed, tpm_ckm_row(1.0, 1e-3, &g));
        let pred = propagate_belief(&b, &spec(TransitionKind::Predictable, 0.3, 0.8, 4, 1.0), &g);
        assert_eq!(pred, tpm_ckm_row(1.0, 1e-3, &g));
        let u = propagate_belief(&b, &spec(TransitionKind::Unpredictable, 0.6, 0.8, 4, 1.0), &grid());
        assert!(u.pmf.iter().all(|&p| p == 1.0 / 7200.0));
    }

    #[test]
    fn banded_boundary_rows_conserve_mass() {
        let g = AngularGrid::new(50).unwrap();
        let b = AngularBelief::one_hot(50, 0);
        let out = banded_propagate(&b, &tpm_temporal_row_weights(0.8, 3));
        assert!((out.pmf.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(out.pmf[4] == 0.0 && out.pmf[3] > 0.0);
        // Truncated row renormalized: 1, ξ, ξ², ξ³ over their sum.
        let s = 1.0 + 0.8 + 0.64 + 0.512;
        assert!((out.pmf[0] - 1.0 / s).abs() < 1e-12);
        let _ = g;
    }

    #[test]
    fn band_halfwidth_reading() {
        // 10 m/s, broadside, 7200 cells → 72 cells.
        assert_eq!(band_halfwidth(10.0, 0.02, PI / 2.0, 7200), 72);
        assert_eq!(band_halfwidth(0.0, 0.02, 1.0, 7200), 1);
    }

    #[test]
    fn hard_predict_rules() {
        let g = AngularGrid::new(10).unwrap();
        assert_eq!(hard_predict(&AngularBelief::one_hot(10, 7), &g), g.angle(7));
        assert_eq!(hard_predict(&AngularBelief::uniform(10), &g), 0.0);
        let mut w = vec![0.0; 10];
        w[2] = 0.4;
        w[5] = 0.6;
        assert_eq!(hard_predict(&AngularBelief::from_weights(w), &g), g.angle(5));
    }

    fn block(theta: f64, bf: &Beamformer, nr: usize, len: usize) -> DMatrix<Complex64> {
        steering_vector(theta, nr) * steering_vector(theta, bf.nt()).adjoint() * bf.matrix()
            * Complex64::new(0.01 * len as f64, 0.005 * len as f64)
    }

    #[test]
    fn map_noiseless_uniform_prior_hits_truth() {
        let g = grid();
        let th = g.angle(2345);
        let bf = Beamformer::from_angles(&[th], vec![0.5], 16).unwrap();
        let lk = ProfileLikelihood::new(&block(th, &bf, 16, 128), &bf, 128, 0.0);
        let est = map_update(&AngularBelief::uniform(7200), &lk, TransitionKind::Unpredictable, &g);
        assert_eq!(est.theta, th);
        assert!(!est.degenerate);
        assert!(est.posterior.is_valid(1e-12));
    }

    #[test]
    fn map_one_hot_prior_wins() {
        let g = grid();
        let bf = Beamformer::from_angles(&[1.0], vec![0.5], 16).unwrap();
        let lk = ProfileLikelihood::new(&block(1.0, &bf, 16, 128), &bf, 128, 1e-6);
        let prior = AngularBelief::one_hot(7200, 100);
        let est = map_update(&prior, &lk, TransitionKind::Stationary, &g);
        assert_eq!(est.theta, g.angle(100));
    }

    #[test]
    fn map_posterior_argmax_consistent() {
        let g = AngularGrid::new(720).unwrap();
        let bf = Beamformer::from_angles(&[1.3], vec![0.5], 8).unwrap();
        let lk = ProfileLikelihood::new(&block(1.31, &bf, 8, 64), &bf, 64, 1e-2);
        let prior = propagate_belief(
            &AngularBelief::one_hot(720, g.nearest(1.28)),
            &spec(TransitionKind::Stationary, 0.6, 0.8, 10, 1.3),
            &g,
        );
        let est = map_update(&prior, &lk, TransitionKind::Stationary, &g);
        let k = g.nearest(est.theta);
        assert!(est.posterior.pmf.iter().all(|&p| p <= est.posterior.pmf[k]));
    }

    #[test]
    fn map_all_null_is_degenerate() {
        let g = AngularGrid::new(8).unwrap();
        // Zero beam power: every signature vanishes.
        let bf = Beamformer::from_angles(&[1.0], vec![0.0], 4).unwrap();
        let lk = ProfileLikelihood::new(&DMatrix::from_element(4, 1, Complex64::new(1.0, 0.0)), &bf, 4, 1.0);
        let mut w = vec![0.0; 8];
        w[3] = 1.0;
        let prior = AngularBelief::from_weights(w);
        let est = map_update(&prior, &lk, TransitionKind::Stationary, &g);
        assert!(est.degenerate);
        assert_eq!(est.theta, g.angle(3));
    }
}
