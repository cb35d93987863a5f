//! Analytic ground-truth trajectory with synthetic IMU and camera streams.

use nalgebra::{DMatrix, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SwfError};
use crate::geometry::{gravity, Rot3, Vec3};
use crate::propagation::{ImuSample, NoiseParams};
use crate::state::{ImuState, IMU_DIM};
use crate::vision::{project_pose, Extrinsics};

const STREAM_IMU: u64 = 1;
const STREAM_LANDMARKS: u64 = 2;
const STREAM_PRIOR: u64 = 3;
const STREAM_FRAME_BASE: u64 = 1 << 32;

/// Per-axis sinusoid `offset + amp · sin(2π freq · t + phase)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid3 {
    pub offset: [f64; 3],
    pub amp: [f64; 3],
    pub freq: [f64; 3],
    pub phase: [f64; 3],
}

impl Sinusoid3 {
    fn eval(&self) -> impl Fn(f64) -> ([f64; 3], [f64; 3], [f64; 3]) + '_ {
        move |t| {
            let mut v = [0.0; 3];
            let mut d = [0.0; 3];
            let mut dd = [0.0; 3];
            for k in 0..3 {
                let w = 2.0 * std::f64::consts::PI * self.freq[k];
                let arg = w * t + self.phase[k];
                v[k] = self.offset[k] + self.amp[k] * arg.sin();
                d[k] = self.amp[k] * w * arg.cos();
                dd[k] = -self.amp[k] * w * w * arg.sin();
            }
            (v, d, dd)
        }
    }

    fn radius(&self) -> f64 {
        Vec3::from(self.amp).norm()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Global position of the IMU (m).
    pub position: Sinusoid3,
    /// Roll, pitch, yaw (rad), composed as Rz(yaw) Ry(pitch) Rx(roll).
    pub euler: Sinusoid3,
    pub duration: f64,
    pub imu_hz: f64,
    pub cam_hz: f64,
    pub noise: NoiseParams,
    /// Pixel noise standard deviation (px).
    pub pixel_sigma: f64,
    pub focal: f64,
    pub width: f64,
    pub height: f64,
    pub landmarks: usize,
    /// Shell around the trajectory envelope in which landmarks are placed (m).
    pub min_range: f64,
    pub max_range: f64,
    pub bias_g0: [f64; 3],
    pub bias_a0: [f64; 3],
    pub extrinsics: Extrinsics,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            position: Sinusoid3 {
                offset: [0.0, 0.0, 1.5],
                amp: [4.0, 3.0, 1.0],
                freq: [0.1, 0.15, 0.2],
                phase: [0.0, 0.5 * std::f64::consts::PI, 0.3],
            },
            euler: Sinusoid3 {
                offset: [0.0, 0.0, 0.0],
                amp: [0.15, 0.15, 0.4],
                freq: [0.13, 0.11, 0.07],
                phase: [0.0, 0.7, 0.2],
            },
            duration: 60.0,
            imu_hz: 200.0,
            cam_hz: 10.0,
            noise: NoiseParams::default(),
            pixel_sigma: 2.0,
            focal: 458.0,
            width: 720.0,
            height: 480.0,
            landmarks: 1500,
            min_range: 1.0,
            max_range: 10.0,
            bias_g0: [0.002; 3],
            bias_a0: [0.02; 3],
            extrinsics: Extrinsics::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.imu_hz > 0.0 && self.cam_hz > 0.0 && self.duration > 0.0) {
            return Err(SwfError::InvalidInput("rates and duration must be positive".into()));
        }
        let ratio = self.imu_hz / self.cam_hz;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(SwfError::InvalidInput("imu_hz must be a multiple of cam_hz".into()));
        }
        if !(self.focal > 0.0 && self.width > 0.0 && self.height > 0.0) {
            return Err(SwfError::InvalidInput("camera intrinsics must be positive".into()));
        }
        if !(self.min_range >= 0.0 && self.max_range > self.min_range) {
            return Err(SwfError::InvalidInput("landmark shell must satisfy 0 ≤ min < max".into()));
        }
        Ok(())
    }

    /// Pixel noise in normalized image units.
    pub fn sigma_uv(&self) -> f64 {
        self.pixel_sigma / self.focal
    }

    /// Half-extent of the field of view in normalized image units.
    pub fn fov(&self) -> (f64, f64) {
        (0.5 * self.width / self.focal, 0.5 * self.height / self.focal)
    }

    pub fn imu_per_frame(&self) -> usize {
        (self.imu_hz / self.cam_hz).round() as usize
    }

    pub fn imu_count(&self) -> usize {
        (self.duration * self.imu_hz).round() as usize
    }

    /// Camera epochs after t = 0 that are covered by IMU samples.
    pub fn frame_count(&self) -> usize {
        (self.imu_count().saturating_sub(1)) / self.imu_per_frame()
    }

    /// All noise sources switched off.
    pub fn noiseless(mut self) -> Self {
        self.noise = NoiseParams::zero();
        self.pixel_sigma = 0.0;
        self
    }

    /// Landmark shell radii about the trajectory center.
    pub fn shell(&self) -> (Vec3, f64, f64) {
        let r = self.position.radius();
        (Vec3::from(self.position.offset), r + self.min_range, r + self.max_range)
    }
}

/// Ground truth at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthSample {
    pub rot: Rot3,
    pub pos: Vec3,
    pub vel: Vec3,
    /// Body angular rate (rad/s).
    pub omega: Vec3,
    /// Specific force in the body frame (m/s²).
    pub accel: Vec3,
}

fn euler_rot(roll: f64, pitch: f64, yaw: f64) -> Rot3 {
    Rot3::about_z(yaw) * Rot3::about_y(pitch) * Rot3::about_x(roll)
}

/// Closed-form pose, velocity and IMU-frame rates at time `t`.
pub fn truth_at(cfg: &SimConfig, t: f64) -> Result<TruthSample> {
    if !(0.0..=cfg.duration + 1e-9).contains(&t) {
        return Err(SwfError::TimeOutOfRange { t, duration: cfg.duration });
    }
    let (p, dp, ddp) = cfg.position.eval()(t);
    let (e, de, _) = cfg.euler.eval()(t);
    let (roll, pitch, yaw) = (e[0], e[1], e[2]);
    let (dr, dpi, dy) = (de[0], de[1], de[2]);
    let rot = euler_rot(roll, pitch, yaw);
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let omega = Vec3::new(dr - dy * sp, dpi * cr + dy * sr * cp, -dpi * sr + dy * cr * cp);
    let acc_global = Vec3::from(ddp);
    let accel = rot.transpose().rotate(&(acc_global - gravity()));
    Ok(TruthSample { rot, pos: Vec3::from(p), vel: Vec3::from(dp), omega, accel })
}

/// Synthesized IMU stream with the true bias at every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuStream {
    pub samples: Vec<ImuSample>,
    pub bias_g: Vec<Vec3>,
    pub bias_a: Vec<Vec3>,
}

fn gaussian3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Samples at `k / imu_hz` for `k = 0..imu_count`. Measurements are the true
/// rates plus bias and white noise; biases follow discretized random walks.
pub fn gen_imu(cfg: &SimConfig, seed: u64) -> Result<ImuStream> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, STREAM_IMU);
    let n = cfg.imu_count();
    let dt = 1.0 / cfg.imu_hz;
    let sq = dt.sqrt();
    let nz = &cfg.noise;
    let mut bg = Vec3::from(cfg.bias_g0);
    let mut ba = Vec3::from(cfg.bias_a0);
    let mut out = ImuStream {
        samples: Vec::with_capacity(n),
        bias_g: Vec::with_capacity(n),
        bias_a: Vec::with_capacity(n),
    };
    for k in 0..n {
        let t = k as f64 * dt;
        let truth = truth_at(cfg, t)?;
        let ng = gaussian3(&mut rng) * (nz.sigma_g / sq);
        let na = gaussian3(&mut rng) * (nz.sigma_a / sq);
        out.samples.push(ImuSample { stamp: t, omega_m: truth.omega + bg + ng, accel_m: truth.accel + ba + na });
        out.bias_g.push(bg);
        out.bias_a.push(ba);
        bg += gaussian3(&mut rng) * (nz.sigma_wg * sq);
        ba += gaussian3(&mut rng) * (nz.sigma_wa * sq);
    }
    Ok(out)
}

/// Landmarks drawn uniformly (by volume) from a spherical shell around the
/// trajectory envelope.
pub fn gen_landmarks(cfg: &SimConfig, seed: u64) -> Vec<Vec3> {
    let mut rng = stream_rng(seed, STREAM_LANDMARKS);
    let (c, r0, r1) = cfg.shell();
    (0..cfg.landmarks)
        .map(|_| {
            let d: [f64; 3] = UnitSphere.sample(&mut rng);
            let u: f64 = rng.gen();
            let r = (r0.powi(3) + u * (r1.powi(3) - r0.powi(3))).cbrt();
            c + Vec3::from(d) * r
        })
        .collect()
}

/// Visible landmarks at time `t`, projected through the true pose with
/// Gaussian pixel noise, ordered by landmark id.
pub fn gen_frame(cfg: &SimConfig, t: f64, landmarks: &[Vec3], seed: u64) -> Result<Vec<(u64, Vector2<f64>)>> {
    let truth = truth_at(cfg, t)?;
    let frame_index = (t * cfg.cam_hz).round() as u64;
    let mut rng = stream_rng(seed, STREAM_FRAME_BASE + frame_index);
    let (umax, vmax) = cfg.fov();
    let sigma = cfg.sigma_uv();
    let mut out = Vec::new();
    for (id, lm) in landmarks.iter().enumerate() {
        let Ok(uv) = project_pose(&truth.rot, &truth.pos, &cfg.extrinsics, lm) else { continue };
        if uv.x.abs() > umax || uv.y.abs() > vmax {
            continue;
        }
        let noise = Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)) * sigma;
        out.push((id as u64, uv + noise));
    }
    Ok(out)
}

/// One camera epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub stamp: f64,
    /// Index of the IMU sample at this stamp.
    pub imu_index: usize,
    pub obs: Vec<(u64, Vector2<f64>)>,
}

/// Everything one Monte-Carlo run consumes.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub cfg: SimConfig,
    pub seed: u64,
    pub imu: ImuStream,
    pub landmarks: Vec<Vec3>,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn generate(cfg: &SimConfig, seed: u64) -> Result<Self> {
        let imu = gen_imu(cfg, seed)?;
        let landmarks = gen_landmarks(cfg, seed);
        let per = cfg.imu_per_frame();
        let frames = (1..=cfg.frame_count())
            .map(|k| {
                let imu_index = k * per;
                let stamp = imu.samples[imu_index].stamp;
                gen_frame(cfg, stamp, &landmarks, seed).map(|obs| Frame { stamp, imu_index, obs })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { cfg: cfg.clone(), seed, imu, landmarks, frames })
    }

    /// IMU samples covering frame `k` (both endpoints included).
    pub fn imu_for_frame(&self, k: usize) -> &[ImuSample] {
        let end = self.frames[k].imu_index;
        let start = if k == 0 { 0 } else { self.frames[k - 1].imu_index };
        &self.imu.samples[start..=end]
    }

    /// True IMU state at IMU sample `index`.
    pub fn truth_state(&self, index: usize) -> Result<ImuState> {
        let s = &self.imu.samples[index];
        let tr = truth_at(&self.cfg, s.stamp)?;
        Ok(ImuState { rot: tr.rot, pos: tr.pos, vel: tr.vel, bg: self.imu.bias_g[index], ba: self.imu.bias_a[index] })
    }
}

/// Initial-prior standard deviations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub sigma_rot: f64,
    pub sigma_pos: f64,
    pub sigma_vel: f64,
    pub sigma_bg: f64,
    pub sigma_ba: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        let n = NoiseParams::default();
        PriorConfig {
            sigma_rot: 0.3f64.to_radians(),
            sigma_pos: 0.02,
            sigma_vel: 0.02,
            sigma_bg: 10.0 * n.sigma_wg,
            sigma_ba: 10.0 * n.sigma_wa,
        }
    }
}

impl PriorConfig {
    pub fn covariance(&self) -> DMatrix<f64> {
        let s = [self.sigma_rot, self.sigma_pos, self.sigma_vel, self.sigma_bg, self.sigma_ba];
        DMatrix::from_diagonal(&nalgebra::DVector::from_fn(IMU_DIM, |i, _| s[i / 3] * s[i / 3]))
    }

    /// Truth perturbed by a draw from the prior covariance. With `perturb`
    /// false the truth itself is returned.
    pub fn sample(&self, truth: &ImuState, seed: u64, perturb: bool) -> (ImuState, DMatrix<f64>) {
        let p0 = self.covariance();
        if !perturb {
            return (*truth, p0);
        }
        let mut rng = stream_rng(seed, STREAM_PRIOR);
        let d: Vec<f64> = (0..IMU_DIM).map(|i| p0[(i, i)].sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
        (truth.boxplus(&d), p0)
    }
}
