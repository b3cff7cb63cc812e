//! Transmit frames, multipath echoes, matched filtering, path separation and
//! the per-path angle likelihood.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use std::f64::consts::PI;

use crate::env::PathParams;
use crate::{Error, Result};

/// Noise variance used in place of an exact zero so likelihoods stay finite.
pub const NOISE_VAR_FLOOR: f64 = 1e-30;

/// Half-wavelength ULA response, element `m` = `exp(jπ m cos θ)`.
pub fn steering_vector(theta: f64, n: usize) -> DVector<Complex64> {
    let phase = PI * theta.cos();
    DVector::from_iterator(n, (0..n).map(|m| Complex64::cis(phase * m as f64)))
}

/// Derivative of [`steering_vector`] with respect to θ.
pub fn steering_derivative(theta: f64, n: usize) -> DVector<Complex64> {
    let b = steering_vector(theta, n);
    let s = -PI * theta.sin();
    DVector::from_iterator(
        n,
        b.iter()
            .enumerate()
            .map(|(m, &x)| Complex64::new(0.0, s * m as f64) * x),
    )
}

/// Draws one circular Gaussian sample with variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (0.5 * var).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TxFrame {
    /// `ns × L` symbols.
    pub symbols: DMatrix<Complex64>,
}

impl TxFrame {
    pub fn random<R: Rng + ?Sized>(ns: usize, len: usize, rng: &mut R) -> Self {
        let mut symbols = DMatrix::zeros(ns, len);
        for n in 0..len {
            for s in 0..ns {
                symbols[(s, n)] = complex_gaussian(rng, 1.0);
            }
        }
        Self { symbols }
    }

    pub fn streams(&self) -> usize {
        self.symbols.nrows()
    }

    pub fn len(&self) -> usize {
        self.symbols.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.ncols() == 0
    }
}

/// `F = A · diag(√γ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Beamformer {
    /// `nt × ns` steering matrix.
    pub steering: DMatrix<Complex64>,
    pub gamma: Vec<f64>,
}

impl Beamformer {
    pub fn new(steering: DMatrix<Complex64>, gamma: Vec<f64>) -> Result<Self> {
        if steering.ncols() != gamma.len() {
            return Err(Error::InvalidSignal(format!(
                "{} beams but {} power weights",
                steering.ncols(),
                gamma.len()
            )));
        }
        if gamma.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
            return Err(Error::InvalidSignal("power weights must be finite and >= 0".into()));
        }
        Ok(Self { steering, gamma })
    }

    /// Beams from steering angles.
    pub fn from_angles(angles: &[f64], gamma: Vec<f64>, nt: usize) -> Result<Self> {
        let mut a = DMatrix::zeros(nt, angles.len());
        for (j, &t) in angles.iter().enumerate() {
            a.set_column(j, &steering_vector(t, nt));
        }
        Self::new(a, gamma)
    }

    pub fn nt(&self) -> usize {
        self.steering.nrows()
    }

    pub fn ns(&self) -> usize {
        self.steering.ncols()
    }

    pub fn matrix(&self) -> DMatrix<Complex64> {
        let mut f = self.steering.clone();
        for (j, g) in self.gamma.iter().enumerate() {
            f.column_mut(j).scale_mut(g.sqrt());
        }
        f
    }

    /// `‖F‖_F²`.
    pub fn power(&self) -> f64 {
        self.matrix().norm_squared()
    }

    /// `Fᵀ a*(θ)`, i.e. the transposed row `a(θ)ᴴ F`.
    pub fn beam_response(&self, theta: f64) -> DVector<Complex64> {
        beam_response(&self.matrix(), theta)
    }
}

fn beam_response(f: &DMatrix<Complex64>, theta: f64) -> DVector<Complex64> {
    let a = steering_vector(theta, f.nrows());
    f.tr_mul(&a.map(|x| x.conj()))
}

/// Synthesizes the received echo, `nr × (L + l_max)`.
///
/// Each alive path adds `β b(θ) a(θ)ᴴ F S` delayed by `l` columns with the
/// per-symbol phase ramp `exp(j2π k n)`.
pub fn synthesize_echo<R: Rng + ?Sized>(
    paths: &[PathParams],
    nr: usize,
    bf: &Beamformer,
    frame: &TxFrame,
    noise_var: f64,
    l_max: usize,
    rng: &mut R,
) -> Result<DMatrix<Complex64>> {
    let len = frame.len();
    if frame.streams() != bf.ns() {
        return Err(Error::InvalidSignal(format!(
            "frame has {} streams, beamformer {}",
            frame.streams(),
            bf.ns()
        )));
    }
    if !(noise_var >= 0.0) {
        return Err(Error::InvalidSignal(format!("noise variance {noise_var} < 0")));
    }
    let width = len + l_max;
    let mut r = DMatrix::zeros(nr, width);
    let f = bf.matrix();
    for p in paths.iter().filter(|p| p.alive) {
        if p.delay_index > l_max {
            return Err(Error::InvalidSignal(format!(
                "path {} delay index {} exceeds l_max {l_max}",
                p.path_id, p.delay_index
            )));
        }
        let b = steering_vector(p.aoa, nr);
        let w = beam_response(&f, p.aoa);
        for n in 0..len {
            let mut x = Complex64::new(0.0, 0.0);
            for s in 0..w.len() {
                x += w[s] * frame.symbols[(s, n)];
            }
            x *= p.gain * Complex64::cis(2.0 * PI * p.doppler_index * n as f64);
            let col = p.delay_index + n;
            for m in 0..nr {
                r[(m, col)] += b[m] * x;
            }
        }
    }
    if noise_var > 0.0 {
        for c in 0..width {
            for m in 0..nr {
                r[(m, c)] += complex_gaussian(rng, noise_var);
            }
        }
    }
    Ok(r)
}

/// `R Λ_kᴴ S_lᴴ`: correlates the echo against the transmit frame delayed by
/// `l` and Doppler-shifted by the normalized index `k`. Returns `nr × ns`.
pub fn separate_path(r: &DMatrix<Complex64>, frame: &TxFrame, l: usize, k: f64) -> Result<DMatrix<Complex64>> {
    let len = frame.len();
    if l + len > r.ncols() {
        return Err(Error::InvalidSignal(format!(
            "delay {l} + frame {len} exceeds echo width {}",
            r.ncols()
        )));
    }
    let ns = frame.streams();
    let nr = r.nrows();
    let mut out = DMatrix::zeros(nr, ns);
    for n in 0..len {
        let rot = Complex64::cis(-2.0 * PI * k * n as f64);
        for s in 0..ns {
            let w = frame.symbols[(s, n)].conj() * rot;
            for m in 0..nr {
                out[(m, s)] += r[(m, l + n)] * w;
            }
        }
    }
    Ok(out)
}

/// Matched-filter power `‖R Λ_kᴴ S_lᴴ‖_F²` at one cell, evaluated directly.
pub fn mf_power(r: &DMatrix<Complex64>, frame: &TxFrame, l: usize, k: f64) -> Result<f64> {
    Ok(separate_path(r, frame, l, k)?.norm_squared())
}

/// Search grid: delay indices `0..=max_delay` and integer Doppler bins
/// `min_bin..=max_bin`, bin `m` standing for the normalized index `m / L`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DelayDopplerGrid {
    pub max_delay: usize,
    pub min_bin: i32,
    pub max_bin: i32,
}

impl Default for DelayDopplerGrid {
    fn default() -> Self {
        Self {
            max_delay: 100,
            min_bin: -50,
            max_bin: 50,
        }
    }
}

impl DelayDopplerGrid {
    pub fn n_delays(&self) -> usize {
        self.max_delay + 1
    }

    pub fn n_bins(&self) -> usize {
        (self.max_bin - self.min_bin + 1).max(0) as usize
    }

    pub fn bin_at(&self, j: usize) -> i32 {
        self.min_bin + j as i32
    }
}

/// Matched-filter output over a grid, row-major by delay.
#[derive(Clone, Debug, PartialEq)]
pub struct MfSurface {
    pub grid: DelayDopplerGrid,
    pub power: Vec<f64>,
}

impl MfSurface {
    pub fn at(&self, l: usize, j: usize) -> f64 {
        self.power[l * self.grid.n_bins() + j]
    }
}

/// Evaluates the matched filter on every grid cell. Uses one FFT per
/// (delay, receive element, stream) when the frame is long enough to hold
/// all Doppler bins without aliasing, otherwise evaluates cells directly.
pub fn mf_surface(r: &DMatrix<Complex64>, frame: &TxFrame, grid: DelayDopplerGrid) -> Result<MfSurface> {
    let len = frame.len();
    if grid.max_delay + len > r.ncols() {
        return Err(Error::InvalidSignal(format!(
            "delay grid up to {} needs echo width {}, got {}",
            grid.max_delay,
            grid.max_delay + len,
            r.ncols()
        )));
    }
    let nb = grid.n_bins();
    let mut power = vec![0.0; grid.n_delays() * nb];
    if len < nb {
        for l in 0..grid.n_delays() {
            for j in 0..nb {
                let k = grid.bin_at(j) as f64 / len as f64;
                power[l * nb + j] = mf_power(r, frame, l, k)?;
            }
        }
        return Ok(MfSurface { grid, power });
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(len);
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let conj_s = frame.symbols.map(|x| x.conj());
    let bins: Vec<usize> = (0..nb)
        .map(|j| grid.bin_at(j).rem_euclid(len as i32) as usize)
        .collect();
    for l in 0..grid.n_delays() {
        let row = &mut power[l * nb..(l + 1) * nb];
        for s in 0..frame.streams() {
            for m in 0..r.nrows() {
                for (n, x) in buf.iter_mut().enumerate() {
                    *x = r[(m, l + n)] * conj_s[(s, n)];
                }
                fft.process_with_scratch(&mut buf, &mut scratch);
                for (p, &b) in row.iter_mut().zip(&bins) {
                    *p += buf[b].norm_sqr();
                }
            }
        }
    }
    Ok(MfSurface { grid, power })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MfPeak {
    pub delay_index: usize,
    pub doppler_bin: i32,
    pub power: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MfSearch {
    /// Strongest first.
    pub peaks: Vec<MfPeak>,
    /// False when fewer separated peaks than requested were found.
    pub complete: bool,
}

/// Picks the `n_peaks` strongest local maxima of the surface with ±1-cell
/// non-maximum suppression.
pub fn find_peaks(surface: &MfSurface, n_peaks: usize) -> MfSearch {
    let nd = surface.grid.n_delays();
    let nb = surface.grid.n_bins();
    let idx = |l: usize, j: usize| l * nb + j;
    let mut cands = Vec::new();
    for l in 0..nd {
        for j in 0..nb {
            let p = surface.power[idx(l, j)];
            if !(p > 0.0) {
                continue;
            }
            let mut is_max = true;
            'nb: for dl in -1i64..=1 {
                for dj in -1i64..=1 {
                    if dl == 0 && dj == 0 {
                        continue;
                    }
                    let (ll, jj) = (l as i64 + dl, j as i64 + dj);
                    if ll < 0 || jj < 0 || ll >= nd as i64 || jj >= nb as i64 {
                        continue;
                    }
                    let q = surface.power[idx(ll as usize, jj as usize)];
                    // Ties go to the lower flat index.
                    if q > p || (q == p && idx(ll as usize, jj as usize) < idx(l, j)) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                cands.push((l, j, p));
            }
        }
    }
    cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(idx(a.0, a.1).cmp(&idx(b.0, b.1))));
    let mut peaks: Vec<MfPeak> = Vec::with_capacity(n_peaks);
    let mut taken: Vec<(usize, usize)> = Vec::new();
    for (l, j, p) in cands {
        if peaks.len() == n_peaks {
            break;
        }
        if taken.iter().any(|&(tl, tj)| tl.abs_diff(l) <= 1 && tj.abs_diff(j) <= 1) {
            continue;
        }
        taken.push((l, j));
        peaks.push(MfPeak {
            delay_index: l,
            doppler_bin: surface.grid.bin_at(j),
            power: p,
        });
    }
    MfSearch {
        complete: peaks.len() == n_peaks,
        peaks,
    }
}

/// Full-grid matched-filter search for the `n_peaks` strongest paths.
pub fn matched_filter_search(
    r: &DMatrix<Complex64>,
    frame: &TxFrame,
    grid: DelayDopplerGrid,
    n_peaks: usize,
) -> Result<MfSearch> {
    Ok(find_peaks(&mf_surface(r, frame, grid)?, n_peaks))
}

/// Power below which a matched-filter peak is indistinguishable from noise.
///
/// A noise-only cell is a sum of `nr·ns` exponentials of mean `σ²L`; the gate
/// `σ²L(√(nr·ns) + 3)²` sits well above the largest of ~10⁴ such cells.
pub fn noise_gate(noise_var: f64, len: usize, nr: usize, ns: usize) -> f64 {
    let n = (nr * ns) as f64;
    noise_var * len as f64 * (n.sqrt() + 3.0).powi(2)
}

pub fn is_low_confidence(peak: &MfPeak, noise_var: f64, len: usize, nr: usize, ns: usize) -> bool {
    peak.power < noise_gate(noise_var, len, nr, ns)
}

/// Column-major `vec(R_i)`, index `s·nr + r`.
pub fn vectorize(m: &DMatrix<Complex64>) -> DVector<Complex64> {
    DVector::from_column_slice(m.as_slice())
}

/// `c(θ) = (Fᵀ ⊗ b(θ)) a*(θ)`, length `ns·nr`.
pub fn signature(f: &DMatrix<Complex64>, theta: f64, nr: usize) -> DVector<Complex64> {
    let u = beam_response(f, theta);
    let b = steering_vector(theta, nr);
    let ns = u.len();
    DVector::from_iterator(ns * nr, (0..ns).flat_map(|s| {
        let us = u[s];
        b.iter().map(move |&x| us * x).collect::<Vec<_>>()
    }))
}

/// Concentrated angle likelihood of one separated path block.
///
/// Precomputes what does not depend on θ so grid scans cost
/// `O((nt + nr)·ns)` per angle.
#[derive(Clone, Debug)]
pub struct ProfileLikelihood {
    block: DMatrix<Complex64>,
    f: DMatrix<Complex64>,
    energy: f64,
    scale: f64,
    /// `‖c‖²` below this counts as an exact null.
    null_level: f64,
}

impl ProfileLikelihood {
    pub fn new(block: &DMatrix<Complex64>, bf: &Beamformer, len: usize, noise_var: f64) -> Self {
        let f = bf.matrix();
        let null_level = 1e-24 * (block.nrows() * f.nrows()) as f64 * f.norm_squared();
        Self {
            block: block.clone(),
            f,
            null_level,
            energy: block.norm_squared(),
            scale: 1.0 / (len as f64 * noise_var.max(NOISE_VAR_FLOOR)),
        }
    }

    /// `(cᴴr, ‖c‖²)` at θ.
    fn projection(&self, theta: f64) -> (Complex64, f64) {
        let nt = self.f.nrows();
        let nr = self.block.nrows();
        let ns = self.f.ncols();
        let z = Complex64::cis(PI * theta.cos());
        let zc = z.conj();
        // u_s = Σ_t F[t,s] conj(a_t)
        let mut u_norm = 0.0;
        let mut u = [Complex64::new(0.0, 0.0); 16];
        let mut u_vec = Vec::new();
        let u: &mut [Complex64] = if ns <= 16 {
            &mut u[..ns]
        } else {
            u_vec.resize(ns, Complex64::new(0.0, 0.0));
            &mut u_vec
        };
        let mut w = Complex64::new(1.0, 0.0);
        for t in 0..nt {
            for s in 0..ns {
                u[s] += self.f[(t, s)] * w;
            }
            w *= zc;
        }
        let mut dot = Complex64::new(0.0, 0.0);
        for s in 0..ns {
            u_norm += u[s].norm_sqr();
            // (bᴴ R_i)_s
            let mut acc = Complex64::new(0.0, 0.0);
            let mut w = Complex64::new(1.0, 0.0);
            for m in 0..nr {
                acc += w * self.block[(m, s)];
                w *= zc;
            }
            dot += u[s].conj() * acc;
        }
        (dot, u_norm * nr as f64)
    }

    /// Log-likelihood up to a constant, `−∞` when the signature vanishes.
    pub fn eval(&self, theta: f64) -> f64 {
        let (dot, cn) = self.projection(theta);
        if !(cn > self.null_level) {
            return f64::NEG_INFINITY;
        }
        let resid = (self.energy - dot.norm_sqr() / cn).max(0.0);
        -resid * self.scale
    }

    /// Least-squares path gain at θ.
    pub fn gain(&self, theta: f64, len: usize) -> Complex64 {
        let (dot, cn) = self.projection(theta);
        if !(cn > self.null_level) {
            return Complex64::new(0.0, 0.0);
        }
        dot / (len as f64 * cn)
    }
}

/// `−‖r − L β̂ c(θ)‖² / (L σ²)` with the least-squares gain `β̂`.
pub fn profile_loglik(block: &DMatrix<Complex64>, theta: f64, bf: &Beamformer, len: usize, noise_var: f64) -> f64 {
    ProfileLikelihood::new(block, bf, len, noise_var).eval(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path(id: usize, gain: Complex64, aoa: f64, l: usize, k: f64) -> PathParams {
        PathParams {
            path_id: id,
            gain,
            amp_loss: gain.norm().sqrt(),
            aoa,
            delay: 0.0,
            doppler: 0.0,
            alive: true,
            delay_index: l,
            doppler_index: k,
        }
    }

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn steering_examples() {
        let v = steering_vector(PI / 2.0, 4);
        assert!(v.iter().all(|x| close(*x, Complex64::new(1.0, 0.0), 1e-12)));
        let v = steering_vector(0.0, 2);
        assert!(close(v[1], Complex64::new(-1.0, 0.0), 1e-12));
        for t in [0.1, 1.0, 2.5] {
            assert!((steering_vector(t, 7).norm_squared() - 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn steering_derivative_matches_difference() {
        let (t, h) = (1.1, 1e-6);
        let d = steering_derivative(t, 5);
        let fd = (steering_vector(t + h, 5) - steering_vector(t - h, 5)) / Complex64::new(2.0 * h, 0.0);
        assert!((d - fd).norm() < 1e-6);
    }

    #[test]
    fn tx_frame_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = TxFrame::random(2, 20000, &mut rng);
        let g = &s.symbols * s.symbols.adjoint() / Complex64::new(20000.0, 0.0);
        assert!((g[(0, 0)].re - 1.0).abs() < 0.05);
        assert!((g[(1, 1)].re - 1.0).abs() < 0.05);
        assert!(g[(0, 1)].norm() < 0.05);
    }

    #[test]
    fn power_is_nt_sum_gamma() {
        let bf = Beamformer::from_angles(&[0.4, 1.9], vec![0.2, 0.3], 8).unwrap();
        assert!((bf.power() - 8.0 * 0.5).abs() < 1e-12);
        assert!(Beamformer::from_angles(&[0.4], vec![-1.0], 8).is_err());
    }

    #[test]
    fn pure_noise_echo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bf = Beamformer::from_angles(&[1.0], vec![1.0], 4).unwrap();
        let s = TxFrame::random(1, 2000, &mut rng);
        let r = synthesize_echo(&[], 4, &bf, &s, 0.3, 10, &mut rng).unwrap();
        assert_eq!(r.shape(), (4, 2010));
        let var = r.norm_squared() / (4.0 * 2010.0);
        assert!((var - 0.3).abs() < 0.02, "{var}");
    }

    #[test]
    fn single_path_no_noise_is_direct_substitution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bf = Beamformer::from_angles(&[1.0, 2.0], vec![0.5, 0.25], 6).unwrap();
        let s = TxFrame::random(2, 16, &mut rng);
        let beta = Complex64::new(0.3, -0.4);
        let th = 1.2;
        let r = synthesize_echo(&[path(1, beta, th, 0, 0.0)], 5, &bf, &s, 0.0, 3, &mut rng).unwrap();
        let expect = steering_vector(th, 5) * steering_vector(th, 6).adjoint() * bf.matrix() * &s.symbols
            * beta;
        assert!((r.columns(0, 16) - expect).norm() < 1e-12);
        assert!(r.columns(16, 3).norm() == 0.0);
    }

    #[test]
    fn dead_paths_contribute_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bf = Beamformer::from_angles(&[1.0], vec![1.0], 4).unwrap();
        let s = TxFrame::random(1, 8, &mut rng);
        let mut p = path(1, Complex64::new(1.0, 0.0), 1.0, 2, 0.01);
        p.alive = false;
        let r = synthesize_echo(&[p], 4, &bf, &s, 0.0, 4, &mut rng).unwrap();
        assert_eq!(r.norm(), 0.0);
        p.alive = true;
        p.delay_index = 5;
        assert!(synthesize_echo(&[p], 4, &bf, &s, 0.0, 4, &mut rng).is_err());
    }

    #[test]
    fn echo_energy_matches_path_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (nt, nr, len) = (8, 8, 4096);
        let bf = Beamformer::from_angles(&[1.0, 2.0], vec![0.5, 0.5], nt).unwrap();
        let s = TxFrame::random(2, len, &mut rng);
        let paths = [
            path(1, Complex64::new(1.0, 0.5), 1.0, 3, 0.002),
            path(2, Complex64::new(-0.4, 0.2), 2.0, 9, -0.004),
        ];
        let noise = 0.01;
        let r = synthesize_echo(&paths, nr, &bf, &s, noise, 20, &mut rng).unwrap();
        let f = bf.matrix();
        let expect: f64 = paths
            .iter()
            .map(|p| {
                let w = steering_vector(p.aoa, nt).adjoint() * &f;
                let w = w.transpose();
                len as f64 * p.gain.norm_sqr() * nr as f64 * w.norm_squared()
            })
            .sum::<f64>()
            + noise * (nr * (len + 20)) as f64;
        let got = r.norm_squared();
        assert!((got / expect - 1.0).abs() < 0.05, "{got} vs {expect}");
    }

    #[test]
    fn mf_surface_fft_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bf = Beamformer::from_angles(&[1.0, 2.0], vec![0.5, 0.5], 4).unwrap();
        let s = TxFrame::random(2, 64, &mut rng);
        let r = synthesize_echo(&[path(1, Complex64::new(1.0, 0.0), 1.1, 2, 3.0 / 64.0)], 3, &bf, &s, 0.1, 6, &mut rng)
            .unwrap();
        let grid = DelayDopplerGrid { max_delay: 6, min_bin: -5, max_bin: 5 };
        let surf = mf_surface(&r, &s, grid).unwrap();
        for l in 0..grid.n_delays() {
            for j in 0..grid.n_bins() {
                let k = grid.bin_at(j) as f64 / 64.0;
                let d = mf_power(&r, &s, l, k).unwrap();
                assert!((surf.at(l, j) - d).abs() < 1e-9 * d.max(1.0));
            }
        }
        // Short frames fall back to direct evaluation.
        let s2 = TxFrame::random(2, 8, &mut rng);
        let r2 = synthesize_echo(&[], 3, &bf, &s2, 1.0, 6, &mut rng).unwrap();
        let surf2 = mf_surface(&r2, &s2, grid).unwrap();
        let d = mf_power(&r2, &s2, 4, -3.0 / 8.0).unwrap();
        assert!((surf2.at(4, 2) - d).abs() < 1e-12);
    }

    #[test]
    fn mf_single_path_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bf = Beamformer::from_angles(&[1.3], vec![1.0], 8).unwrap();
        let s = TxFrame::random(1, 256, &mut rng);
        let p = path(1, Complex64::new(0.2, 0.1), 1.3, 17, -12.0 / 256.0);
        let r = synthesize_echo(&[p], 8, &bf, &s, 0.0, 100, &mut rng).unwrap();
        let res = matched_filter_search(&r, &s, DelayDopplerGrid::default(), 1).unwrap();
        assert!(res.complete);
        assert_eq!(res.peaks[0].delay_index, 17);
        assert_eq!(res.peaks[0].doppler_bin, -12);
    }

    #[test]
    fn mf_two_paths_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let len = 1024;
        let bf = Beamformer::from_angles(&[1.0, 2.0], vec![0.5, 0.5], 8).unwrap();
        let s = TxFrame::random(2, len, &mut rng);
        let paths = [
            path(1, Complex64::new(1.0, 0.0), 1.0, 15, 9.0 / len as f64),
            path(2, Complex64::new(0.0, 0.5), 2.0, 17, -20.0 / len as f64),
        ];
        let r = synthesize_echo(&paths, 8, &bf, &s, 0.0, 100, &mut rng).unwrap();
        let res = matched_filter_search(&r, &s, DelayDopplerGrid::default(), 2).unwrap();
        let mut got: Vec<(usize, i32)> = res.peaks.iter().map(|p| (p.delay_index, p.doppler_bin)).collect();
        got.sort();
        assert_eq!(got, vec![(15, 9), (17, -20)]);
    }

    #[test]
    fn noise_peaks_are_low_confidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (nr, ns, len, var) = (4, 2, 128, 1e-3);
        let bf = Beamformer::from_angles(&[1.0, 2.0], vec![0.5, 0.5], 4).unwrap();
        let mut flagged = 0;
        let mut ratio = 0.0;
        for _ in 0..100 {
            let s = TxFrame::random(ns, len, &mut rng);
            let r = synthesize_echo(&[], nr, &bf, &s, var, 100, &mut rng).unwrap();
            let res = matched_filter_search(&r, &s, DelayDopplerGrid::default(), 2).unwrap();
            ratio += res.peaks[0].power / (var * (len * nr * ns) as f64);
            flagged += res.peaks.iter().filter(|p| is_low_confidence(p, var, len, nr, ns)).count();
        }
        assert_eq!(flagged, 200);
        let ratio = ratio / 100.0;
        assert!(ratio > 1.0 && ratio < 4.0, "{ratio}");
    }

    #[test]
    fn separation_single_path_l4096() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let len = 4096;
        let bf = Beamformer::from_angles(&[0.9, 2.1], vec![0.5, 0.5], 8).unwrap();
        let s = TxFrame::random(2, len, &mut rng);
        let beta = Complex64::new(0.7, -0.2);
        let p = path(1, beta, 0.9, 12, 0.01);
        let r = synthesize_echo(&[p], 8, &bf, &s, 0.0, 20, &mut rng).unwrap();
        let ri = separate_path(&r, &s, 12, 0.01).unwrap() / Complex64::new(len as f64, 0.0);
        let truth = steering_vector(0.9, 8) * steering_vector(0.9, 8).adjoint() * bf.matrix() * beta;
        let err = (ri - &truth).norm() / truth.norm();
        assert!(err <= 0.05, "{err}");
    }

    #[test]
    fn separation_cross_leakage() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let len = 1024;
        // One stream: the expected leakage ratio is ns/L.
        let bf = Beamformer::from_angles(&[1.5], vec![1.0], 8).unwrap();
        let mut worst: f64 = 0.0;
        let mut mean = 0.0;
        for _ in 0..100 {
            let s = TxFrame::random(1, len, &mut rng);
            let p2 = path(2, Complex64::new(1.0, 0.0), 2.0, 20, 0.003);
            let r2 = synthesize_echo(&[p2], 8, &bf, &s, 0.0, 30, &mut rng).unwrap();
            let p1 = path(1, Complex64::new(1.0, 0.0), 1.0, 15, 0.007);
            let r1 = synthesize_echo(&[p1], 8, &bf, &s, 0.0, 30, &mut rng).unwrap();
            let matched = separate_path(&r1, &s, 15, 0.007).unwrap().norm_squared();
            let leak = separate_path(&r2, &s, 15, 0.007).unwrap().norm_squared();
            // Normalize by the leaking path's own matched power.
            let own = separate_path(&r2, &s, 20, 0.003).unwrap().norm_squared();
            worst = worst.max(leak / own);
            mean += leak / own;
            assert!(matched > 0.0);
        }
        assert!(mean / 100.0 <= 2.0 / len as f64, "{} {}", mean / 100.0, worst);
    }

    #[test]
    fn noise_only_separation_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (nr, ns, len, var) = (4, 2, 256, 0.5);
        let bf = Beamformer::from_angles(&[1.0, 2.0], vec![0.5, 0.5], 4).unwrap();
        let mut acc = 0.0;
        for _ in 0..200 {
            let s = TxFrame::random(ns, len, &mut rng);
            let r = synthesize_echo(&[], nr, &bf, &s, var, 10, &mut rng).unwrap();
            acc += separate_path(&r, &s, 5, 0.02).unwrap().norm_squared();
        }
        let expect = var * (len * nr * ns) as f64;
        assert!((acc / 200.0 / expect - 1.0).abs() < 0.05, "{}", acc / 200.0 / expect);
    }

    #[test]
    fn signature_layout_matches_kron() {
        let bf = Beamformer::from_angles(&[0.5, 1.5], vec![0.3, 0.7], 5).unwrap();
        let th = 1.0;
        let c = signature(&bf.matrix(), th, 3);
        let u = bf.beam_response(th);
        let b = steering_vector(th, 3);
        for s in 0..2 {
            for m in 0..3 {
                assert!(close(c[s * 3 + m], u[s] * b[m], 1e-12));
            }
        }
        // vec(b aᴴ F) equals c.
        let blk = &b * steering_vector(th, 5).adjoint() * bf.matrix();
        assert!((vectorize(&blk) - c).norm() < 1e-12);
    }

    #[test]
    fn profile_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let bf = Beamformer::from_angles(&[0.8, 1.7], vec![0.4, 0.6], 6).unwrap();
        let blk = DMatrix::from_fn(5, 2, |_, _| complex_gaussian(&mut rng, 1.0));
        let (len, var) = (64, 0.2);
        for th in [0.3, 0.8, 1.4, 2.9] {
            let c = signature(&bf.matrix(), th, 5);
            let r = vectorize(&blk);
            let beta = c.dotc(&r) / Complex64::new(len as f64 * c.norm_squared(), 0.0);
            let resid = (&r - &c * (beta * len as f64)).norm_squared();
            let direct = -resid / (len as f64 * var);
            let got = profile_loglik(&blk, th, &bf, len, var);
            assert!((got - direct).abs() < 1e-9 * direct.abs().max(1.0), "{got} {direct}");
            let pl = ProfileLikelihood::new(&blk, &bf, len, var);
            assert!(close(pl.gain(th, len), beta, 1e-12));
        }
    }

    #[test]
    fn profile_noiseless_max_at_truth_and_phase_invariant() {
        let bf = Beamformer::from_angles(&[1.0], vec![1.0], 8).unwrap();
        let th = 1.05;
        let beta = Complex64::new(0.01, 0.02);
        let len = 128;
        let blk = steering_vector(th, 8) * steering_vector(th, 8).adjoint() * bf.matrix()
            * (beta * len as f64);
        let pl = ProfileLikelihood::new(&blk, &bf, len, 1e-6);
        // Rounding floor relative to the block energy.
        let tol = 1e-12 * blk.norm_squared() / (len as f64 * 1e-6);
        assert!(pl.eval(th).abs() < tol);
        for k in 0..720 {
            let t = PI * k as f64 / 720.0;
            assert!(pl.eval(t) <= pl.eval(th) + tol);
        }
        let rot = Complex64::cis(0.77);
        let pl2 = ProfileLikelihood::new(&(blk.clone() * rot), &bf, len, 1e-6);
        for t in [0.5, 1.0, 2.0] {
            assert!((pl.eval(t) - pl2.eval(t)).abs() < 1e-9 * pl.eval(t).abs().max(1.0));
        }
    }

    #[test]
    fn profile_orthogonal_beam_is_neg_infinity() {
        // Two-element array steered broadside has a null at cos θ = ±1.
        let bf = Beamformer::from_angles(&[PI / 2.0], vec![1.0], 2).unwrap();
        let blk = DMatrix::from_element(2, 1, Complex64::new(1.0, 0.0));
        assert_eq!(profile_loglik(&blk, 0.0, &bf, 4, 1.0), f64::NEG_INFINITY);
    }
}
