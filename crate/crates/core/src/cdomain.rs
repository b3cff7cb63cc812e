//! Coordinate-domain EKF over `(qx, qy, v)`.
//!
//! Two measurement regimes: the analytic line-of-sight model and the map-based
//! model over whichever paths were observed in the slot.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::ckm::{ChannelKnowledgeMap, JacobianSteps};
use crate::env::{los_measurement, Scene, VehicleState};
use crate::{Error, Result, SPEED_OF_LIGHT};

/// Diagonal added to a whitened innovation covariance that fails to factor.
pub const INNOVATION_REGULARIZER: f64 = 1e-12;

/// Smallest range at which the line-of-sight Jacobian is evaluated.
pub const MIN_RANGE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CState {
    pub mean: VehicleState,
    pub cov: Matrix3<f64>,
}

impl CState {
    pub fn mean_vector(&self) -> Vector3<f64> {
        Vector3::from(self.mean.to_array())
    }
}

/// Noise variances of the state evolution and of the per-path measurements.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    /// `(σ²_qx, σ²_qy, σ²_v)`.
    pub process: [f64; 3],
    /// `(σ²_τ, σ²_μ, σ²_cosθ)`, shared by both regimes.
    pub measurement: [f64; 3],
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            process: [1e-6, 1e-6, 1e-6],
            measurement: [1e-16, 400.0, 1e-4],
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if self
            .process
            .iter()
            .chain(&self.measurement)
            .any(|v| !(*v > 0.0) || !v.is_finite())
        {
            return Err(Error::InvalidScene("noise variances must be finite and > 0".into()));
        }
        Ok(())
    }

    pub fn q_alpha(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.process))
    }

    pub fn q_beta1(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.measurement))
    }

    /// `diag(σ²_τ I_P, σ²_μ I_P, σ²_cosθ I_P)`.
    pub fn q_beta2(&self, p: usize) -> DMatrix<f64> {
        let d = DVector::from_fn(3 * p, |i, _| self.measurement[i / p]);
        DMatrix::from_diagonal(&d)
    }
}

/// Constant-velocity transition, `qx += dt·v`.
pub fn transition(dt: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, dt, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)
}

pub fn predict(s: &CState, noise: &NoiseModel, dt: f64) -> CState {
    let e = transition(dt);
    let m = e * s.mean_vector();
    CState {
        mean: VehicleState::new(m[0], m[1], m[2]),
        cov: symmetrize(&(e * s.cov * e.transpose() + noise.q_alpha())),
    }
}

/// Analytic Jacobian of the line-of-sight model `[τ, μ, cos θ]`, columns `(qx, qy, v)`.
pub fn jacobian_g1(scene: &Scene, state: &VehicleState) -> Result<Matrix3<f64>> {
    let x = state.qx - scene.rsu_position[0];
    let y = state.qy - scene.rsu_position[1];
    let r = x.hypot(y);
    if !(r >= MIN_RANGE) {
        return Err(Error::DegenerateGeometry(format!(
            "range {r} m below {MIN_RANGE} m"
        )));
    }
    let c = SPEED_OF_LIGHT;
    let kd = -2.0 * scene.carrier_freq / c;
    let v = state.v;
    let r3 = r * r * r;
    Ok(Matrix3::new(
        2.0 * x / (c * r),
        2.0 * y / (c * r),
        0.0,
        -kd * v * x * y / r3,
        kd * v * x * x / r3,
        kd * y / r,
        y * y / r3,
        -x * y / r3,
        0.0,
    ))
}

/// Result of one measurement update.
#[derive(Clone, Debug, PartialEq)]
pub struct EkfUpdate {
    pub state: CState,
    /// `z − g(mean_pred)`.
    pub innovation: DVector<f64>,
    pub gain: DMatrix<f64>,
    /// True when the innovation covariance had to be regularized.
    pub regularized: bool,
}

/// Generic EKF update with measurement `z`, prediction `h = g(mean_pred)`,
/// Jacobian `g` and diagonal measurement variances `q_diag`.
///
/// Rows are whitened by the measurement standard deviations first, which
/// leaves the estimate unchanged but keeps the innovation covariance at unit
/// scale even though delays and Doppler differ by many orders of magnitude.
pub fn ekf_update(
    pred: &CState,
    z: &DVector<f64>,
    h: &DVector<f64>,
    g: &DMatrix<f64>,
    q_diag: &DVector<f64>,
) -> Result<EkfUpdate> {
    let m = z.len();
    if h.len() != m || g.nrows() != m || g.ncols() != 3 || q_diag.len() != m {
        return Err(Error::InvalidSignal(format!(
            "measurement of length {m} with model rows {}/{} and {} variances",
            h.len(),
            g.nrows(),
            q_diag.len()
        )));
    }
    let w = q_diag.map(|q| 1.0 / q.sqrt());
    let innovation = z - h;
    let nu = innovation.component_mul(&w);
    let mut gw = g.clone();
    for (i, wi) in w.iter().enumerate() {
        gw.row_mut(i).scale_mut(*wi);
    }
    let c = DMatrix::from_column_slice(3, 3, pred.cov.as_slice());
    let cgt = &c * gw.transpose();
    let mut s = &gw * &cgt + DMatrix::identity(m, m);
    let mut regularized = false;
    let chol = match s.clone().cholesky() {
        Some(ch) => ch,
        None => {
            regularized = true;
            for i in 0..m {
                s[(i, i)] += INNOVATION_REGULARIZER;
            }
            s.clone().cholesky().ok_or_else(|| {
                Error::InvalidSignal("innovation covariance is not positive definite".into())
            })?
        }
    };
    // K_w = C G_wᵀ S⁻¹, so K = K_w · diag(w).
    let kw = chol.solve(&cgt.transpose()).transpose();
    let dx = &kw * &nu;
    let mut gain = kw.clone();
    for (j, wj) in w.iter().enumerate() {
        gain.column_mut(j).scale_mut(*wj);
    }
    // Joseph form: equal to (I − KG)C at the optimal gain, but keeps the
    // covariance from collapsing into round-off when measurements are sharp.
    let ikg = DMatrix::identity(3, 3) - &kw * &gw;
    let post = &ikg * &c * ikg.transpose() + &kw * kw.transpose();
    let cov = clamp_psd(&symmetrize(&Matrix3::from_column_slice(post.as_slice())));
    let mv = pred.mean_vector();
    Ok(EkfUpdate {
        state: CState {
            mean: VehicleState::new(mv[0] + dx[0], mv[1] + dx[1], mv[2] + dx[2]),
            cov,
        },
        innovation,
        gain,
        regularized,
    })
}

/// Line-of-sight regime: `z = [τ, μ, cos θ]` of path 1.
pub fn update_los(pred: &CState, z: [f64; 3], scene: &Scene, noise: &NoiseModel) -> Result<EkfUpdate> {
    let h = los_measurement(scene, &pred.mean);
    let g = jacobian_g1(scene, &pred.mean)?;
    ekf_update(
        pred,
        &DVector::from_column_slice(&z),
        &DVector::from_column_slice(&h),
        &DMatrix::from_column_slice(3, 3, g.as_slice()),
        &DVector::from_column_slice(&noise.measurement),
    )
}

/// Map regime: `z` stacks `[τ; μ; cos θ]` blocks over `paths` (1-based ids).
pub fn update_nlos(
    pred: &CState,
    z: &DVector<f64>,
    map: &ChannelKnowledgeMap,
    paths: &[usize],
    steps: JacobianSteps,
    noise: &NoiseModel,
) -> Result<EkfUpdate> {
    if paths.is_empty() || paths.iter().any(|&p| p == 0 || p > map.n_paths()) {
        return Err(Error::InvalidMap(format!("path subset {paths:?} not in map")));
    }
    let h = map.measure(&pred.mean, paths);
    let g = map.jacobian(&pred.mean, steps, paths);
    ekf_update(pred, z, &h, &g, &noise.q_beta2(paths.len()).diagonal())
}

pub fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// Sets negative eigenvalues of a symmetric matrix to zero.
pub fn clamp_psd(m: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = m.symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return *m;
    }
    let d = eig.eigenvalues.map(|l| l.max(0.0));
    symmetrize(&(eig.eigenvectors * Matrix3::from_diagonal(&d) * eig.eigenvectors.transpose()))
}
