//! IMU mean integration and error-state covariance propagation.

use nalgebra::{DMatrix, SMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SwfError};
use crate::geometry::{skew, Mat3, Rot3, Vec3, GRAVITY};
use crate::linalg::symmetrize;
use crate::state::{ImuState, IMU_DIM};

pub type Mat15 = SMatrix<f64, IMU_DIM, IMU_DIM>;

/// Step used for the numerically filled bias-coupling columns of Φ.
const BIAS_FD_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub stamp: f64,
    pub omega_m: Vec3,
    pub accel_m: Vec3,
}

impl ImuSample {
    pub fn is_finite(&self) -> bool {
        self.stamp.is_finite()
            && self.omega_m.iter().all(|v| v.is_finite())
            && self.accel_m.iter().all(|v| v.is_finite())
    }
}

/// Continuous-time IMU noise densities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseParams {
    /// Gyroscope white noise (rad/s/√Hz).
    pub sigma_g: f64,
    /// Accelerometer white noise (m/s²/√Hz).
    pub sigma_a: f64,
    /// Gyroscope bias random walk (rad/s²/√Hz).
    pub sigma_wg: f64,
    /// Accelerometer bias random walk (m/s³/√Hz).
    pub sigma_wa: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams { sigma_g: 1.70e-4, sigma_a: 2.00e-3, sigma_wg: 2.00e-5, sigma_wa: 3.00e-3 }
    }
}

impl NoiseParams {
    pub fn zero() -> Self {
        NoiseParams { sigma_g: 0.0, sigma_a: 0.0, sigma_wg: 0.0, sigma_wa: 0.0 }
    }
}

/// Output of one IMU propagation interval.
#[derive(Clone, Debug)]
pub struct PropResult {
    pub imu_next: ImuState,
    pub phi: Mat15,
    pub qd: Mat15,
}

/// Weights of the 4-point Lagrange interpolant through `nodes` at `x`.
fn lagrange4(nodes: [f64; 4], x: f64) -> [f64; 4] {
    let mut w = [1.0; 4];
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                w[i] *= (x - nodes[j]) / (nodes[i] - nodes[j]);
            }
        }
    }
    w
}

/// Bias-corrected (ω, a) at the midpoint of interval `k` of the sample list.
fn midpoint_input(samples: &[ImuSample], k: usize, bg: &Vec3, ba: &Vec3) -> (Vec3, Vec3) {
    let n = samples.len();
    let (w, a) = if n < 4 {
        (
            0.5 * (samples[k].omega_m + samples[k + 1].omega_m),
            0.5 * (samples[k].accel_m + samples[k + 1].accel_m),
        )
    } else {
        let first = k.saturating_sub(1).min(n - 4);
        let nodes: [f64; 4] = std::array::from_fn(|i| samples[first + i].stamp);
        let t = 0.5 * (samples[k].stamp + samples[k + 1].stamp);
        let wts = lagrange4(nodes, t);
        let mut w = Vec3::zeros();
        let mut a = Vec3::zeros();
        for i in 0..4 {
            w += wts[i] * samples[first + i].omega_m;
            a += wts[i] * samples[first + i].accel_m;
        }
        (w, a)
    };
    (w - bg, a - ba)
}

/// One RK4 step of `Ṙ = R[ω]×, ṗ = v, v̇ = R·a + g` with inputs at the start,
/// midpoint and end of the step.
fn rk4_step(
    r: &Mat3,
    p: &Vec3,
    v: &Vec3,
    h: f64,
    inputs: [(Vec3, Vec3); 3],
) -> (Mat3, Vec3, Vec3) {
    let f = |r: &Mat3, v: &Vec3, (w, a): &(Vec3, Vec3)| (r * skew(w), *v, r * a + GRAVITY);
    let (k1r, k1p, k1v) = f(r, v, &inputs[0]);
    let (k2r, k2p, k2v) = f(&(r + 0.5 * h * k1r), &(v + 0.5 * h * k1v), &inputs[1]);
    let (k3r, k3p, k3v) = f(&(r + 0.5 * h * k2r), &(v + 0.5 * h * k2v), &inputs[1]);
    let (k4r, k4p, k4v) = f(&(r + h * k3r), &(v + h * k3v), &inputs[2]);
    let s = h / 6.0;
    (
        r + s * (k1r + 2.0 * k2r + 2.0 * k3r + k4r),
        p + s * (k1p + 2.0 * k2p + 2.0 * k3p + k4p),
        v + s * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
    )
}

/// Integrates the noise-free IMU dynamics across the samples.
///
/// With two or more samples the integration runs from the first to the last
/// stamp, one RK4 step per sample interval, and `dt` is ignored. A single
/// sample is held constant over one step of length `dt`. Biases stay
/// constant and the output rotation is projected back onto SO(3).
pub fn integrate_mean(imu: &ImuState, samples: &[ImuSample], dt: f64) -> Result<ImuState> {
    if samples.is_empty() {
        return Err(SwfError::InvalidInput("no IMU samples to integrate".into()));
    }
    if let Some(bad) = samples.iter().find(|s| !s.is_finite()) {
        return Err(SwfError::NonFiniteSample(bad.stamp));
    }
    let mut r = *imu.rot.matrix();
    let mut p = imu.pos;
    let mut v = imu.vel;
    if samples.len() == 1 {
        if !(dt > 0.0) {
            return Err(SwfError::InvalidInput(format!("non-positive step {dt}")));
        }
        let u = (samples[0].omega_m - imu.bg, samples[0].accel_m - imu.ba);
        (r, p, v) = rk4_step(&r, &p, &v, dt, [u, u, u]);
    } else {
        for k in 0..samples.len() - 1 {
            let h = samples[k + 1].stamp - samples[k].stamp;
            if !(h > 0.0) {
                return Err(SwfError::InvalidInput(format!(
                    "IMU stamps not increasing at t = {}",
                    samples[k].stamp
                )));
            }
            let start = (samples[k].omega_m - imu.bg, samples[k].accel_m - imu.ba);
            let end = (samples[k + 1].omega_m - imu.bg, samples[k + 1].accel_m - imu.ba);
            let mid = midpoint_input(samples, k, &imu.bg, &imu.ba);
            (r, p, v) = rk4_step(&r, &p, &v, h, [start, mid, end]);
        }
    }
    Ok(ImuState {
        rot: Rot3::from_matrix_orthonormalized(&r),
        pos: p,
        vel: v,
        bg: imu.bg,
        ba: imu.ba,
    })
}

/// Total time covered by a sample list under [`integrate_mean`]'s rules.
pub fn interval(samples: &[ImuSample], dt: f64) -> f64 {
    if samples.len() < 2 {
        dt
    } else {
        samples[samples.len() - 1].stamp - samples[0].stamp
    }
}

/// Error-state transition between two IMU states `dt` apart.
///
/// The position/velocity/orientation block is analytic. Bias-coupling
/// columns are left at zero (identity on the bias diagonal); see
/// [`fill_bias_columns`].
pub fn state_transition(prev: &ImuState, next: &ImuState, dt: f64) -> Mat15 {
    let r0 = prev.rot.matrix();
    let r0t = r0.transpose();
    let dp = r0t * (next.pos - prev.pos - prev.vel * dt - 0.5 * GRAVITY * dt * dt);
    let dv = r0t * (next.vel - prev.vel - GRAVITY * dt);
    let mut phi = Mat15::identity();
    phi.fixed_view_mut::<3, 3>(0, 0).copy_from(&(next.rot.matrix().transpose() * r0));
    phi.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-r0 * skew(&dp)));
    phi.fixed_view_mut::<3, 3>(3, 6).copy_from(&(Mat3::identity() * dt));
    phi.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-r0 * skew(&dv)));
    phi
}

/// Fills columns 9..15 (gyro and accelerometer bias) of `phi` by central
/// differences of the integration map around `imu`.
pub fn fill_bias_columns(
    phi: &mut Mat15,
    imu: &ImuState,
    samples: &[ImuSample],
    dt: f64,
) -> Result<()> {
    let nominal = integrate_mean(imu, samples, dt)?;
    for col in 9..15 {
        let mut plus = *imu;
        let mut minus = *imu;
        let axis = col % 3;
        if col < 12 {
            plus.bg[axis] += BIAS_FD_STEP;
            minus.bg[axis] -= BIAS_FD_STEP;
        } else {
            plus.ba[axis] += BIAS_FD_STEP;
            minus.ba[axis] -= BIAS_FD_STEP;
        }
        let ep = integrate_mean(&plus, samples, dt)?.boxminus(&nominal);
        let em = integrate_mean(&minus, samples, dt)?.boxminus(&nominal);
        for row in 0..9 {
            phi[(row, col)] = (ep[row] - em[row]) / (2.0 * BIAS_FD_STEP);
        }
    }
    Ok(())
}

/// First-order discrete noise `G·diag(σ²)·Gᵀ·dt`.
pub fn discrete_noise(imu_prev: &ImuState, noise: &NoiseParams, dt: f64) -> Mat15 {
    let _ = imu_prev;
    let mut q = Mat15::zeros();
    let blocks = [
        (0, noise.sigma_g),
        (6, noise.sigma_a),
        (9, noise.sigma_wg),
        (12, noise.sigma_wa),
    ];
    // The velocity block is R·σ_a²·Rᵀ, which is isotropic for any rotation.
    for (start, sigma) in blocks {
        for k in 0..3 {
            q[(start + k, start + k)] = sigma * sigma * dt;
        }
    }
    q
}

/// Mean, transition and noise for one interval. `lin` optionally overrides
/// the endpoints used for the analytic transition block (first-estimate
/// Jacobians); the mean always integrates from `imu`.
pub fn propagate(
    imu: &ImuState,
    samples: &[ImuSample],
    dt: f64,
    noise: &NoiseParams,
    lin: Option<&ImuState>,
) -> Result<PropResult> {
    let imu_next = integrate_mean(imu, samples, dt)?;
    let span = interval(samples, dt);
    let mut phi = state_transition(lin.unwrap_or(imu), &imu_next, span);
    fill_bias_columns(&mut phi, imu, samples, dt)?;
    Ok(PropResult { imu_next, phi, qd: discrete_noise(imu, noise, span) })
}

/// `P ← Φ P Φᵀ + Q` with `Φ = blockdiag(Φ_I, I)`; only the IMU rows and
/// columns change.
pub fn propagate_cov(p: &mut DMatrix<f64>, phi: &Mat15, qd: &Mat15) {
    let n = p.nrows();
    let pii = p.fixed_view::<IMU_DIM, IMU_DIM>(0, 0).into_owned();
    let new_ii = phi * pii * phi.transpose() + qd;
    p.fixed_view_mut::<IMU_DIM, IMU_DIM>(0, 0).copy_from(&new_ii);
    if n > IMU_DIM {
        let rest = n - IMU_DIM;
        let pir = p.view((0, IMU_DIM), (IMU_DIM, rest)).into_owned();
        let new_ir = phi * pir;
        p.view_mut((0, IMU_DIM), (IMU_DIM, rest)).copy_from(&new_ir);
        p.view_mut((IMU_DIM, 0), (rest, IMU_DIM)).copy_from(&new_ir.transpose());
    }
    symmetrize(p);
}

/// Dense `blockdiag(Φ_I, I)` of size `n`.
pub fn full_transition(phi: &Mat15, n: usize) -> DMatrix<f64> {
    let mut f = DMatrix::identity(n, n);
    f.view_mut((0, 0), (IMU_DIM, IMU_DIM)).copy_from(phi);
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use crate::testutil::{random_imu, rv};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_samples(n: usize, dt: f64, w: Vec3, a: Vec3) -> Vec<ImuSample> {
        (0..n).map(|k| ImuSample { stamp: k as f64 * dt, omega_m: w, accel_m: a }).collect()
    }

    #[test]
    fn hover_is_ballistic_in_position_only() {
        let rot = exp_so3(&Vec3::new(0.2, -0.1, 0.7));
        let mut imu = ImuState::new(rot, Vec3::new(1.0, 2.0, 3.0), Vec3::new(0.5, -0.2, 0.1));
        imu.bg = Vec3::new(0.01, 0.0, 0.0);
        imu.ba = Vec3::new(0.0, 0.1, 0.0);
        let a = -(rot.transpose() * GRAVITY) + imu.ba;
        let s = constant_samples(21, 0.005, imu.bg, a);
        let out = integrate_mean(&imu, &s, 0.005).unwrap();
        assert_relative_eq!(*out.rot.matrix(), *rot.matrix(), epsilon = 1e-12);
        assert_relative_eq!(out.vel, imu.vel, epsilon = 1e-12);
        assert_relative_eq!(out.pos, imu.pos + imu.vel * 0.1, epsilon = 1e-12);
    }

    #[test]
    fn constant_yaw_rate_matches_closed_form() {
        let rot = exp_so3(&Vec3::new(0.3, 0.2, 0.1));
        let imu = ImuState::new(rot, Vec3::zeros(), Vec3::zeros());
        let w = 0.8;
        let a = -(rot.transpose() * GRAVITY);
        // Stationary only if the specific force co-rotates; check rotation only.
        let s = constant_samples(201, 0.005, Vec3::new(0.0, 0.0, w), a);
        let out = integrate_mean(&imu, &s, 0.005).unwrap();
        let expected = rot * exp_so3(&Vec3::new(0.0, 0.0, w * 1.0));
        assert_relative_eq!(*out.rot.matrix(), *expected.matrix(), epsilon = 1e-9);
    }

    #[test]
    fn single_sample_holds_input() {
        let imu = ImuState::new(Rot3::identity(), Vec3::zeros(), Vec3::zeros());
        let s = [ImuSample { stamp: 0.0, omega_m: Vec3::zeros(), accel_m: Vec3::new(1.0, 0.0, 9.81) }];
        let out = integrate_mean(&imu, &s, 0.5).unwrap();
        assert_relative_eq!(out.vel, Vec3::new(0.5, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(out.pos, Vec3::new(0.125, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn rejects_non_finite_sample() {
        let imu = ImuState::new(Rot3::identity(), Vec3::zeros(), Vec3::zeros());
        let mut s = constant_samples(3, 0.005, Vec3::zeros(), Vec3::zeros());
        s[1].accel_m.x = f64::NAN;
        assert_eq!(integrate_mean(&imu, &s, 0.005), Err(SwfError::NonFiniteSample(0.005)));
    }

    #[test]
    fn transition_at_rest() {
        let imu = ImuState::new(Rot3::identity(), Vec3::zeros(), Vec3::zeros());
        let dt = 1e-3;
        let phi = state_transition(&imu, &imu, dt);
        assert_relative_eq!(phi.fixed_view::<3, 3>(0, 0).into_owned(), Mat3::identity());
        assert_relative_eq!(phi.fixed_view::<3, 3>(3, 6).into_owned(), Mat3::identity() * dt);
        // At rest the velocity block sees only gravity: Δv = -g·dt.
        let expected_vtheta = -skew(&(-GRAVITY * dt));
        assert_relative_eq!(phi.fixed_view::<3, 3>(6, 0).into_owned(), expected_vtheta, epsilon = 1e-15);
    }

    #[test]
    fn noise_model_properties() {
        let imu = ImuState::new(Rot3::identity(), Vec3::zeros(), Vec3::zeros());
        assert_eq!(discrete_noise(&imu, &NoiseParams::zero(), 0.1), Mat15::zeros());
        let n = NoiseParams::default();
        let q1 = discrete_noise(&imu, &n, 0.1);
        let q2 = discrete_noise(&imu, &n, 0.2);
        assert_relative_eq!(q2, q1 * 2.0, epsilon = 1e-18);
        assert_relative_eq!(q1[(9, 9)], n.sigma_wg * n.sigma_wg * 0.1);
        assert_relative_eq!(q1[(14, 14)], n.sigma_wa * n.sigma_wa * 0.1);
        assert_eq!(q1[(3, 3)], 0.0);
    }

    fn random_samples(rng: &mut ChaCha8Rng, n: usize, dt: f64) -> Vec<ImuSample> {
        let w0 = rv(rng, 0.5);
        let a0 = rv(rng, 3.0) + Vec3::new(0.0, 0.0, 9.81);
        (0..n)
            .map(|k| {
                let t = k as f64 * dt;
                ImuSample {
                    stamp: t,
                    omega_m: w0 + Vec3::new((3.0 * t).sin(), 0.2 * t, (2.0 * t).cos()) * 0.3,
                    accel_m: a0 + Vec3::new(t.cos(), (4.0 * t).sin(), 0.5 * t),
                }
            })
            .collect()
    }

    #[test]
    fn transition_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dt = 0.005;
        for _ in 0..20 {
            let imu = random_imu(&mut rng);
            let s = random_samples(&mut rng, 21, dt);
            let res = propagate(&imu, &s, dt, &NoiseParams::default(), None).unwrap();
            let h = 1e-6;
            for col in 0..15 {
                let mut dp = [0.0; 15];
                let mut dm = [0.0; 15];
                dp[col] = h;
                dm[col] = -h;
                let ep = integrate_mean(&imu.boxplus(&dp), &s, dt).unwrap().boxminus(&res.imu_next);
                let em = integrate_mean(&imu.boxplus(&dm), &s, dt).unwrap().boxminus(&res.imu_next);
                for row in 0..15 {
                    let fd = (ep[row] - em[row]) / (2.0 * h);
                    let an = res.phi[(row, col)];
                    assert!((fd - an).abs() <= 1e-4 * (1.0 + an.abs()), "({row},{col}): {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn covariance_propagation_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 15 + 6 * 5 + 3 * 7;
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let p0 = &a * a.transpose();
        let phi = Mat15::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let b = Mat15::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let q = b * b.transpose();
        let mut p = p0.clone();
        propagate_cov(&mut p, &phi, &q);
        let f = full_transition(&phi, n);
        let mut qf = DMatrix::zeros(n, n);
        qf.view_mut((0, 0), (15, 15)).copy_from(&q);
        let dense = &f * &p0 * f.transpose() + qf;
        assert!((p - dense).abs().max() < 1e-12 * (1.0 + p0.abs().max() * 10.0));
    }

    #[test]
    fn covariance_propagation_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 27;
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let p0 = &a * a.transpose();
        let mut p = p0.clone();
        propagate_cov(&mut p, &Mat15::identity(), &Mat15::zeros());
        assert!((p - &p0).abs().max() < 1e-15);
        let q = discrete_noise(&random_imu(&mut rng), &NoiseParams::default(), 0.1);
        let mut z = DMatrix::zeros(n, n);
        propagate_cov(&mut z, &Mat15::identity(), &q);
        assert_eq!(z.view((0, 0), (15, 15)).into_owned(), DMatrix::from_column_slice(15, 15, q.as_slice()));
        assert_eq!(z.view((15, 15), (12, 12)).abs().max(), 0.0);
    }
}
