//! Fisher information, CRB, beam selection and min-max power allocation.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::str::FromStr;

use crate::signal::{signature, steering_derivative, steering_vector, Beamformer};
use crate::{Error, Result};

/// Power of `L` in the Fisher information.
///
/// `Squared` is the `L²` form used for beam design; `Linear` matches the
/// separated-block covariance `σ²L I` used by the angle likelihood.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FisherScaling {
    Squared,
    Linear,
}

/// `‖(Fᵀ ⊗ ∂b/∂θ) a*(θ)‖²`.
pub fn fisher_kernel(theta: f64, bf: &Beamformer, nr: usize) -> f64 {
    let u = bf.beam_response(theta);
    u.norm_squared() * steering_derivative(theta, nr).norm_squared()
}

pub fn fisher_info_scaled(
    theta: f64,
    beta_abs: f64,
    bf: &Beamformer,
    len: usize,
    noise_var: f64,
    nr: usize,
    scaling: FisherScaling,
) -> f64 {
    let l = len as f64;
    let lf = match scaling {
        FisherScaling::Squared => l * l,
        FisherScaling::Linear => l,
    };
    lf * beta_abs * beta_abs / noise_var * fisher_kernel(theta, bf, nr)
}

/// `J = L²|β|²/σ² · ‖(Fᵀ ⊗ ∂b/∂θ) a*(θ)‖²`.
pub fn fisher_info(theta: f64, beta_abs: f64, bf: &Beamformer, len: usize, noise_var: f64, nr: usize) -> f64 {
    fisher_info_scaled(theta, beta_abs, bf, len, noise_var, nr, FisherScaling::Squared)
}

/// `1/J`, or `+∞` when `J = 0`.
pub fn crb_from_info(j: f64) -> f64 {
    if j > 0.0 {
        1.0 / j
    } else {
        f64::INFINITY
    }
}

pub fn crb(theta: f64, beta_abs: f64, bf: &Beamformer, len: usize, noise_var: f64, nr: usize) -> f64 {
    crb_from_info(fisher_info(theta, beta_abs, bf, len, noise_var, nr))
}

/// One path as seen by the beam designer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictedPath {
    pub path_id: usize,
    pub theta: f64,
    pub gain_abs: f64,
}

/// Path ids chosen for the `ns` beams.
///
/// With fewer beams than paths the strongest paths win (ties toward the lower
/// id); otherwise every path gets a beam and the strongest fills the rest.
/// Beams are listed in path-id order, fills last.
pub fn select_paths(paths: &[PredictedPath], ns: usize) -> Vec<usize> {
    let mut by_gain: Vec<&PredictedPath> = paths.iter().collect();
    by_gain.sort_by(|a, b| b.gain_abs.total_cmp(&a.gain_abs).then(a.path_id.cmp(&b.path_id)));
    if ns < paths.len() {
        let mut ids: Vec<usize> = by_gain[..ns].iter().map(|p| p.path_id).collect();
        ids.sort_unstable();
        ids
    } else {
        let mut ids: Vec<usize> = paths.iter().map(|p| p.path_id).collect();
        ids.sort_unstable();
        while ids.len() < ns {
            ids.push(by_gain[0].path_id);
        }
        ids
    }
}

/// Steering matrix `A` (`nt × ns`) for the selected beams.
pub fn select_beams(paths: &[PredictedPath], ns: usize, nt: usize) -> Result<(DMatrix<Complex64>, Vec<usize>)> {
    if paths.is_empty() {
        return Err(Error::InvalidSignal("beam selection needs at least one path".into()));
    }
    let ids = select_paths(paths, ns);
    let mut a = DMatrix::zeros(nt, ns);
    for (j, id) in ids.iter().enumerate() {
        let p = paths.iter().find(|p| p.path_id == *id).expect("selected id exists");
        a.set_column(j, &steering_vector(p.theta, nt));
    }
    Ok((a, ids))
}

/// `c_{i,s} = Σ_g |c(θ_i)_{(s−1)nr+g}|² (g−1)²` with `c(θ) = (Aᵀ ⊗ b(θ)) a*(θ)`.
pub fn allocation_coeffs(a: &DMatrix<Complex64>, angles: &[f64], nr: usize) -> DMatrix<f64> {
    let ns = a.ncols();
    let mut out = DMatrix::zeros(angles.len(), ns);
    for (i, &th) in angles.iter().enumerate() {
        let c = signature(a, th, nr);
        for s in 0..ns {
            out[(i, s)] = (0..nr)
                .map(|g| c[s * nr + g].norm_sqr() * (g * g) as f64)
                .sum();
        }
    }
    out
}

/// `max t  s.t.  t ≤ a_i² Σ_s γ_s c_{i,s}  ∀i,  Σ γ ≤ budget,  γ ≥ 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct AllocationProblem {
    /// `P × ns`, nonnegative.
    pub coeffs: DMatrix<f64>,
    pub amplitudes: Vec<f64>,
    pub budget: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    pub gamma: Vec<f64>,
    pub t: f64,
    /// Some path had no usable coefficient; the budget was split equally.
    pub degenerate: bool,
}

impl AllocationProblem {
    /// `min_i a_i² Σ_s γ_s c_{i,s}` for a given allocation.
    pub fn objective(&self, gamma: &[f64]) -> f64 {
        (0..self.coeffs.nrows())
            .map(|i| {
                let a2 = self.amplitudes[i] * self.amplitudes[i];
                a2 * (0..self.coeffs.ncols())
                    .map(|s| gamma[s] * self.coeffs[(i, s)])
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn equal_split(&self) -> Vec<f64> {
        let ns = self.coeffs.ncols();
        vec![self.budget / ns as f64; ns]
    }
}

pub fn allocate_power(problem: &AllocationProblem) -> Result<Allocation> {
    let (p, ns) = problem.coeffs.shape();
    if !(problem.budget > 0.0) || !problem.budget.is_finite() {
        return Err(Error::InvalidSignal(format!("budget {} must be > 0", problem.budget)));
    }
    if problem.amplitudes.len() != p || ns == 0 {
        return Err(Error::InvalidSignal("amplitudes do not match coefficient rows".into()));
    }
    if problem.coeffs.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
        return Err(Error::InvalidSignal("coefficients must be finite and >= 0".into()));
    }
    let d = DMatrix::from_fn(p, ns, |i, s| {
        problem.amplitudes[i] * problem.amplitudes[i] * problem.coeffs[(i, s)]
    });
    if p == 0 || (0..p).any(|i| d.row(i).iter().all(|&x| x == 0.0)) {
        return Ok(Allocation {
            gamma: problem.equal_split(),
            t: 0.0,
            degenerate: true,
        });
    }
    // Work on a unit budget and unit largest coefficient.
    let scale = d.max();
    let dn = d / scale;
    let x = maximin_simplex(&dn);
    let gamma: Vec<f64> = x.iter().map(|g| g * problem.budget).collect();
    let t = problem.objective(&gamma);
    Ok(Allocation {
        gamma,
        t,
        degenerate: false,
    })
}

/// Solves `max t s.t. t ≤ (D γ)_i, Σγ ≤ 1, γ ≥ 0` by the tableau simplex
/// with Bland's rule. The origin is feasible, so no phase one is needed.
fn maximin_simplex(d: &DMatrix<f64>) -> Vec<f64> {
    let (p, ns) = d.shape();
    // Variables: γ_0..γ_{ns-1}, t, then one slack per row.
    let nv = ns + 1;
    let rows = p + 1;
    let cols = nv + rows + 1;
    let mut tab = vec![vec![0.0; cols]; rows + 1];
    for i in 0..p {
        for s in 0..ns {
            tab[i][s] = -d[(i, s)];
        }
        tab[i][ns] = 1.0;
        tab[i][nv + i] = 1.0;
    }
    for s in 0..ns {
        tab[p][s] = 1.0;
    }
    tab[p][nv + p] = 1.0;
    tab[p][cols - 1] = 1.0;
    // Objective row holds reduced costs of −t.
    tab[rows][ns] = -1.0;
    let mut basis: Vec<usize> = (0..rows).map(|i| nv + i).collect();
    const EPS: f64 = 1e-12;
    for _ in 0..10_000 {
        let Some(enter) = (0..cols - 1).find(|&j| tab[rows][j] < -EPS) else {
            break;
        };
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..rows {
            let a = tab[i][enter];
            if a > EPS {
                let ratio = tab[i][cols - 1] / a;
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((li, lr)) => {
                        if ratio < lr - EPS || (ratio <= lr + EPS && basis[i] < basis[li]) {
                            Some((i, ratio))
                        } else {
                            Some((li, lr))
                        }
                    }
                };
            }
        }
        // Bounded by Σγ ≤ 1, so some row always limits the step.
        let Some((r, _)) = leave else { break };
        let piv = tab[r][enter];
        for v in tab[r].iter_mut() {
            *v /= piv;
        }
        for i in 0..=rows {
            if i != r {
                let f = tab[i][enter];
                if f != 0.0 {
                    for j in 0..cols {
                        tab[i][j] -= f * tab[r][j];
                    }
                }
            }
        }
        basis[r] = enter;
    }
    let mut x = vec![0.0; ns];
    for (i, &b) in basis.iter().enumerate() {
        if b < ns {
            x[b] = tab[i][cols - 1].max(0.0);
        }
    }
    x
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BfMode {
    None,
    Equal,
    Optimized,
}

impl BfMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BfMode::None => "none",
            BfMode::Equal => "equal",
            BfMode::Optimized => "optimized",
        }
    }
}

impl FromStr for BfMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(BfMode::None),
            "equal" => Ok(BfMode::Equal),
            "optimized" => Ok(BfMode::Optimized),
            other => Err(Error::config("bf_mode", format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamformingPlan {
    pub beamformer: Beamformer,
    /// Path id steered by each beam.
    pub beam_paths: Vec<usize>,
    /// Predicted angles the beams were built from.
    pub angles: Vec<f64>,
    pub mode: BfMode,
    /// Min-max objective `min_i a_i² Σγc` of the chosen allocation.
    pub t: f64,
}

/// Builds `F = A Γ` for the next slot from predicted path angles and gains.
pub fn build_plan(
    paths: &[PredictedPath],
    ns: usize,
    nt: usize,
    nr: usize,
    budget: f64,
    mode: BfMode,
) -> Result<BeamformingPlan> {
    let (a, ids) = select_beams(paths, ns, nt)?;
    let angles: Vec<f64> = ids
        .iter()
        .map(|id| paths.iter().find(|p| p.path_id == *id).expect("selected").theta)
        .collect();
    let path_angles: Vec<f64> = paths.iter().map(|p| p.theta).collect();
    let problem = AllocationProblem {
        coeffs: allocation_coeffs(&a, &path_angles, nr),
        amplitudes: paths.iter().map(|p| p.gain_abs * p.theta.sin()).collect(),
        budget,
    };
    let gamma = match mode {
        BfMode::None => {
            let strongest = select_paths(paths, 1)[0];
            let col = ids.iter().position(|&id| id == strongest).expect("strongest has a beam");
            let mut g = vec![0.0; ns];
            g[col] = budget;
            g
        }
        BfMode::Equal => problem.equal_split(),
        BfMode::Optimized => allocate_power(&problem)?.gamma,
    };
    let t = problem.objective(&gamma);
    Ok(BeamformingPlan {
        beamformer: Beamformer::new(a, gamma)?,
        beam_paths: ids,
        angles,
        mode,
        t,
    })
}

/// `J` through the allocation coefficients: `L²π²a²/σ² Σ_s γ_s c_s`.
pub fn fisher_from_coeffs(amplitude: f64, gamma: &[f64], coeffs: &[f64], len: usize, noise_var: f64) -> f64 {
    let l = len as f64;
    l * l * PI * PI * amplitude * amplitude / noise_var
        * gamma.iter().zip(coeffs).map(|(g, c)| g * c).sum::<f64>()
}
