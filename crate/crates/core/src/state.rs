//! Estimator state, error-state layout and the ⊞/⊟ retraction.
//!
//! The error state is ordered as
//! `[θ, p, v, b_g, b_a | (θ_1, p_1) … (θ_n, p_n) | p_f1 … p_fm]` and
//! orientation errors are local: `R = R̂ · Exp(θ̃)`.

use std::ops::Range;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SwfError};
use crate::geometry::{exp_so3, log_so3, Rot3, Vec3};

pub const IMU_DIM: usize = 15;
pub const CLONE_DIM: usize = 6;
pub const FEATURE_DIM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuState {
    /// Body-to-global orientation.
    pub rot: Rot3,
    pub pos: Vec3,
    pub vel: Vec3,
    pub bg: Vec3,
    pub ba: Vec3,
}

impl ImuState {
    pub fn new(rot: Rot3, pos: Vec3, vel: Vec3) -> Self {
        ImuState { rot, pos, vel, bg: Vec3::zeros(), ba: Vec3::zeros() }
    }

    pub fn is_finite(&self) -> bool {
        self.rot.matrix().iter().all(|v| v.is_finite())
            && [self.pos, self.vel, self.bg, self.ba].iter().all(|v| v.iter().all(|c| c.is_finite()))
    }

    /// Applies a 15-dimensional error vector.
    pub fn boxplus(&self, d: &[f64]) -> ImuState {
        let v = |k: usize| Vec3::new(d[k], d[k + 1], d[k + 2]);
        ImuState {
            rot: self.rot * exp_so3(&v(0)),
            pos: self.pos + v(3),
            vel: self.vel + v(6),
            bg: self.bg + v(9),
            ba: self.ba + v(12),
        }
    }

    /// 15-dimensional error `self ⊟ other`.
    pub fn boxminus(&self, other: &ImuState) -> [f64; IMU_DIM] {
        let mut out = [0.0; IMU_DIM];
        let blocks = [
            log_so3(&(other.rot.transpose() * self.rot)),
            self.pos - other.pos,
            self.vel - other.vel,
            self.bg - other.bg,
            self.ba - other.ba,
        ];
        for (b, v) in blocks.iter().enumerate() {
            out[3 * b..3 * b + 3].copy_from_slice(v.as_slice());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClonePose {
    pub rot: Rot3,
    pub pos: Vec3,
    pub stamp: f64,
    /// First-estimate anchors, written once when the clone is created.
    pub first_rot: Option<Rot3>,
    pub first_pos: Option<Vec3>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureState {
    pub id: u64,
    pub pos: Vec3,
    pub first_pos: Option<Vec3>,
}

/// Index ranges of every block in the error state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ErrorLayout {
    pub n_clones: usize,
    pub n_features: usize,
}

impl ErrorLayout {
    pub fn new(n_clones: usize, n_features: usize) -> Self {
        ErrorLayout { n_clones, n_features }
    }

    pub fn dim(&self) -> usize {
        IMU_DIM + CLONE_DIM * self.n_clones + FEATURE_DIM * self.n_features
    }

    pub fn theta(&self) -> Range<usize> {
        0..3
    }
    pub fn pos(&self) -> Range<usize> {
        3..6
    }
    pub fn vel(&self) -> Range<usize> {
        6..9
    }
    pub fn bg(&self) -> Range<usize> {
        9..12
    }
    pub fn ba(&self) -> Range<usize> {
        12..15
    }

    pub fn clone_start(&self, i: usize) -> usize {
        debug_assert!(i < self.n_clones);
        IMU_DIM + CLONE_DIM * i
    }
    pub fn clone_theta(&self, i: usize) -> Range<usize> {
        let s = self.clone_start(i);
        s..s + 3
    }
    pub fn clone_pos(&self, i: usize) -> Range<usize> {
        let s = self.clone_start(i) + 3;
        s..s + 3
    }

    pub fn feature_start(&self, j: usize) -> usize {
        debug_assert!(j < self.n_features);
        IMU_DIM + CLONE_DIM * self.n_clones + FEATURE_DIM * j
    }
    pub fn feature(&self, j: usize) -> Range<usize> {
        let s = self.feature_start(j);
        s..s + 3
    }

    /// Every block range in layout order.
    pub fn blocks(&self) -> Vec<Range<usize>> {
        let mut out = vec![self.theta(), self.pos(), self.vel(), self.bg(), self.ba()];
        for i in 0..self.n_clones {
            out.push(self.clone_theta(i));
            out.push(self.clone_pos(i));
        }
        for j in 0..self.n_features {
            out.push(self.feature(j));
        }
        out
    }
}

/// Full sliding-window state: current IMU, cloned poses (oldest first) and
/// global-frame point features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwfState {
    pub stamp: f64,
    pub imu: ImuState,
    /// Linearization point of the current IMU block under first-estimate
    /// Jacobians: the most recent propagated (pre-update) value.
    pub imu_first: ImuState,
    pub clones: Vec<ClonePose>,
    pub features: Vec<FeatureState>,
}

impl SwfState {
    pub fn new(stamp: f64, imu: ImuState) -> Self {
        SwfState { stamp, imu, imu_first: imu, clones: Vec::new(), features: Vec::new() }
    }

    pub fn layout(&self) -> ErrorLayout {
        ErrorLayout::new(self.clones.len(), self.features.len())
    }

    pub fn dim(&self) -> usize {
        self.layout().dim()
    }

    pub fn feature_index(&self, id: u64) -> Option<usize> {
        self.features.iter().position(|f| f.id == id)
    }

    pub fn is_finite(&self) -> bool {
        self.imu.is_finite()
            && self.clones.iter().all(|c| c.pos.iter().all(|v| v.is_finite()))
            && self.features.iter().all(|f| f.pos.iter().all(|v| v.is_finite()))
    }

    fn check_same_layout(&self, other: &SwfState) -> Result<()> {
        if self.clones.len() != other.clones.len() || self.features.len() != other.features.len() {
            return Err(SwfError::LayoutMismatch(format!(
                "({} clones, {} features) vs ({} clones, {} features)",
                self.clones.len(),
                self.features.len(),
                other.clones.len(),
                other.features.len()
            )));
        }
        for (a, b) in self.features.iter().zip(&other.features) {
            if a.id != b.id {
                return Err(SwfError::LayoutMismatch(format!("feature id {} vs {}", a.id, b.id)));
            }
        }
        Ok(())
    }
}

fn v3(d: &DVector<f64>, s: usize) -> Vec3 {
    Vec3::new(d[s], d[s + 1], d[s + 2])
}

/// `x ⊞ δ`: rotations retracted on the right, vector blocks added. First
/// estimate anchors are carried over untouched.
pub fn boxplus(x: &SwfState, delta: &DVector<f64>) -> Result<SwfState> {
    let layout = x.layout();
    if delta.len() != layout.dim() {
        return Err(SwfError::DimensionMismatch { expected: layout.dim(), got: delta.len() });
    }
    let mut out = x.clone();
    out.imu = x.imu.boxplus(&delta.as_slice()[0..IMU_DIM]);
    for (i, c) in out.clones.iter_mut().enumerate() {
        let s = layout.clone_start(i);
        c.rot = c.rot * exp_so3(&v3(delta, s));
        c.pos += v3(delta, s + 3);
    }
    for (j, f) in out.features.iter_mut().enumerate() {
        f.pos += v3(delta, layout.feature_start(j));
    }
    Ok(out)
}

/// `x ⊟ x̂`, the error that maps `x̂` onto `x` through [`boxplus`].
pub fn boxminus(x: &SwfState, xhat: &SwfState) -> Result<DVector<f64>> {
    x.check_same_layout(xhat)?;
    let layout = x.layout();
    let mut d = DVector::zeros(layout.dim());
    d.as_mut_slice()[0..IMU_DIM].copy_from_slice(&x.imu.boxminus(&xhat.imu));
    for (i, (c, ch)) in x.clones.iter().zip(&xhat.clones).enumerate() {
        let s = layout.clone_start(i);
        d.fixed_rows_mut::<3>(s).copy_from(&log_so3(&(ch.rot.transpose() * c.rot)));
        d.fixed_rows_mut::<3>(s + 3).copy_from(&(c.pos - ch.pos));
    }
    for (j, (f, fh)) in x.features.iter().zip(&xhat.features).enumerate() {
        d.fixed_rows_mut::<3>(layout.feature_start(j)).copy_from(&(f.pos - fh.pos));
    }
    Ok(d)
}

/// Orientation error of the current IMU expressed in the global frame,
/// `Log(R · R̂ᵀ)`. Its third component is the error about gravity.
pub fn global_orientation_error(x: &SwfState, xhat: &SwfState) -> Vec3 {
    imu_global_orientation_error(&x.imu, &xhat.imu)
}

pub fn imu_global_orientation_error(x: &ImuState, xhat: &ImuState) -> Vec3 {
    log_so3(&(x.rot * xhat.rot.transpose()))
}
