//! Channel knowledge map: sampled per-path parameters with IDW-KNN lookup.
//!
//! Angles are interpolated through their cosine and Doppler is stored per unit
//! velocity, so one map answers queries at any speed.

use nalgebra::{DMatrix, DVector};
use std::collections::HashSet;
use std::io::{BufRead, Write};

use crate::env::{path_geometry, Scene, VehicleState};
use crate::{Error, Result};

/// Queries closer than this to a stored sample return the sample itself.
pub const EXACT_HIT_RADIUS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CkmEntry {
    pub amp_loss: f64,
    pub aoa: f64,
    pub delay: f64,
    /// Doppler per unit velocity (Hz per m/s).
    pub doppler_per_velocity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CkmSample {
    pub location: [f64; 2],
    /// One entry per path, indexed by `path_id - 1`.
    pub paths: Vec<CkmEntry>,
}

/// Interpolated parameters of one path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathPrediction {
    pub amp_loss: f64,
    pub aoa: f64,
    pub delay: f64,
    pub doppler: f64,
}

#[derive(Clone, Debug)]
pub struct ChannelKnowledgeMap {
    samples: Vec<CkmSample>,
    k: usize,
    idw_power: f64,
    n_paths: usize,
}

/// Finite-difference steps for the map Jacobian along (qx, qy, v).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JacobianSteps {
    pub qx: f64,
    pub qy: f64,
    pub v: f64,
}

impl Default for JacobianSteps {
    fn default() -> Self {
        Self {
            qx: 0.01,
            qy: 0.01,
            v: 0.01,
        }
    }
}

impl ChannelKnowledgeMap {
    pub fn from_samples(samples: Vec<CkmSample>, k: usize, idw_power: f64) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidMap("map needs at least one sample".into()))?;
        let n_paths = first.paths.len();
        if n_paths == 0 {
            return Err(Error::InvalidMap("samples carry no paths".into()));
        }
        if !(idw_power > 0.0) {
            return Err(Error::InvalidMap(format!("idw_power {idw_power} must be > 0")));
        }
        if k == 0 {
            return Err(Error::InvalidMap("k must be >= 1".into()));
        }
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.paths.len() != n_paths {
                return Err(Error::InvalidMap("samples disagree on the path set".into()));
            }
            if !seen.insert((s.location[0].to_bits(), s.location[1].to_bits())) {
                return Err(Error::InvalidMap(format!(
                    "duplicate sample location ({}, {})",
                    s.location[0], s.location[1]
                )));
            }
        }
        let k = k.min(samples.len());
        Ok(Self {
            samples,
            k,
            idw_power,
            n_paths,
        })
    }

    pub fn samples(&self) -> &[CkmSample] {
        &self.samples
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn idw_power(&self) -> f64 {
        self.idw_power
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// Indices and distances of the k nearest samples, nearest first.
    fn nearest(&self, q: [f64; 2]) -> Vec<(usize, f64)> {
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(self.k + 1);
        for (i, s) in self.samples.iter().enumerate() {
            let d2 = (s.location[0] - q[0]).powi(2) + (s.location[1] - q[1]).powi(2);
            if best.len() == self.k && d2 >= best[self.k - 1].1 {
                continue;
            }
            let pos = best.partition_point(|&(_, b)| b <= d2);
            best.insert(pos, (i, d2));
            best.truncate(self.k);
        }
        best.into_iter().map(|(i, d2)| (i, d2.sqrt())).collect()
    }

    /// Normalized IDW weights over the k nearest samples.
    pub fn weights(&self, q: [f64; 2]) -> Vec<(usize, f64)> {
        let nn = self.nearest(q);
        if let Some(&(i, d)) = nn.first() {
            if d < EXACT_HIT_RADIUS {
                return vec![(i, 1.0)];
            }
        }
        let raw: Vec<(usize, f64)> = nn
            .iter()
            .map(|&(i, d)| (i, d.powf(-self.idw_power)))
            .collect();
        let total: f64 = raw.iter().map(|(_, w)| w).sum();
        raw.into_iter().map(|(i, w)| (i, w / total)).collect()
    }

    /// Per-path parameters at location `q` and speed `v`, in path-id order.
    pub fn query(&self, q: [f64; 2], v: f64) -> Vec<PathPrediction> {
        let w = self.weights(q);
        (0..self.n_paths)
            .map(|p| {
                let (mut a, mut c, mut t, mut d) = (0.0, 0.0, 0.0, 0.0);
                for &(i, wi) in &w {
                    let e = &self.samples[i].paths[p];
                    a += wi * e.amp_loss;
                    c += wi * e.aoa.cos();
                    t += wi * e.delay;
                    d += wi * e.doppler_per_velocity;
                }
                PathPrediction {
                    amp_loss: a,
                    aoa: c.clamp(-1.0, 1.0).acos(),
                    delay: t,
                    doppler: d * v,
                }
            })
            .collect()
    }

    /// Map-based measurement function: `[τ; μ; cos θ]` blocks over `paths`
    /// (1-based path ids), each block in the given path order.
    pub fn measure(&self, state: &VehicleState, paths: &[usize]) -> DVector<f64> {
        let pred = self.query(state.position(), state.v);
        let n = paths.len();
        let mut z = DVector::zeros(3 * n);
        for (j, &id) in paths.iter().enumerate() {
            let p = &pred[id - 1];
            z[j] = p.delay;
            z[n + j] = p.doppler;
            z[2 * n + j] = p.aoa.cos();
        }
        z
    }

    /// `measure` over all paths of the map.
    pub fn measure_all(&self, state: &VehicleState) -> DVector<f64> {
        let ids: Vec<usize> = (1..=self.n_paths).collect();
        self.measure(state, &ids)
    }

    /// Forward-difference Jacobian of [`measure`](Self::measure), columns (qx, qy, v).
    pub fn jacobian(&self, state: &VehicleState, steps: JacobianSteps, paths: &[usize]) -> DMatrix<f64> {
        let base = self.measure(state, paths);
        let mut jac = DMatrix::zeros(base.len(), 3);
        let perturbed = [
            (VehicleState::new(state.qx + steps.qx, state.qy, state.v), steps.qx),
            (VehicleState::new(state.qx, state.qy + steps.qy, state.v), steps.qy),
            (VehicleState::new(state.qx, state.qy, state.v + steps.v), steps.v),
        ];
        for (col, (s, h)) in perturbed.iter().enumerate() {
            let diff = (self.measure(s, paths) - &base) / *h;
            jac.set_column(col, &diff);
        }
        jac
    }

    /// Writes the flat text table: one row per sample, `x y` then
    /// `alpha theta tau d` for each path.
    pub fn write_table<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "# x y")?;
        for p in 1..=self.n_paths {
            write!(w, " alpha{p} theta{p} tau{p} d{p}")?;
        }
        writeln!(w)?;
        for s in &self.samples {
            write!(w, "{:e} {:e}", s.location[0], s.location[1])?;
            for e in &s.paths {
                write!(
                    w,
                    " {:e} {:e} {:e} {:e}",
                    e.amp_loss, e.aoa, e.delay, e.doppler_per_velocity
                )?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_table<R: BufRead>(r: R, k: usize, idw_power: f64) -> Result<Self> {
        let mut samples = Vec::new();
        for (no, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: no + 1,
                    reason: e.to_string(),
                })?;
            if vals.len() < 6 || (vals.len() - 2) % 4 != 0 {
                return Err(Error::Parse {
                    line: no + 1,
                    reason: format!("expected 2 + 4·P columns, found {}", vals.len()),
                });
            }
            let paths = vals[2..]
                .chunks_exact(4)
                .map(|c| CkmEntry {
                    amp_loss: c[0],
                    aoa: c[1],
                    delay: c[2],
                    doppler_per_velocity: c[3],
                })
                .collect();
            samples.push(CkmSample {
                location: [vals[0], vals[1]],
                paths,
            });
        }
        Self::from_samples(samples, k, idw_power)
    }
}

/// Samples the analytic scene at every location (Doppler at unit speed).
pub fn build_ckm(
    scene: &Scene,
    locations: &[[f64; 2]],
    k: usize,
    idw_power: f64,
) -> Result<ChannelKnowledgeMap> {
    let samples = locations
        .iter()
        .map(|&loc| {
            let geo = path_geometry(scene, &VehicleState::new(loc[0], loc[1], 1.0))?;
            Ok(CkmSample {
                location: loc,
                paths: geo
                    .iter()
                    .map(|g| CkmEntry {
                        amp_loss: g.amp_loss,
                        aoa: g.aoa(),
                        delay: g.delay(),
                        doppler_per_velocity: g.doppler,
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ChannelKnowledgeMap::from_samples(samples, k, idw_power)
}

/// Regular `cols × rows` lattice over `[x0, x1] × [y0, y1]`.
pub fn grid_locations(x: (f64, f64), y: (f64, f64), cols: usize, rows: usize) -> Vec<[f64; 2]> {
    let step = |lo: f64, hi: f64, n: usize, i: usize| {
        if n <= 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        for c in 0..cols {
            out.push([step(x.0, x.1, cols, c), step(y.0, y.1, rows, r)]);
        }
    }
    out
}
