//! Rotation algebra on SO(3) shared by every other module.
//!
//! Orientations are stored as plain rotation matrices. `exp_so3`/`log_so3`
//! switch to Taylor expansions below [`SMALL_ANGLE`] so neither divides by a
//! vanishing angle.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Gravity in the global frame (m/s²), z up.
pub const GRAVITY: Vec3 = Vec3::new(0.0, 0.0, -9.81);

/// Angle below which exp/log use their series expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

pub fn gravity() -> Vec3 {
    GRAVITY
}

/// A proper rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rot3(Mat3);

impl Rot3 {
    pub fn identity() -> Self {
        Rot3(Mat3::identity())
    }

    /// Wraps a matrix without checking orthonormality.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Rot3(m)
    }

    /// Projects an arbitrary (near-rotation) matrix onto SO(3) via the polar
    /// factor of its SVD.
    pub fn from_matrix_orthonormalized(m: &Mat3) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * v_t;
        }
        Rot3(r)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Rot3 {
        Rot3(self.0.transpose())
    }

    pub fn inverse(&self) -> Rot3 {
        self.transpose()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Largest deviation of `RᵀR` from identity plus `|det R - 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.0.transpose() * self.0 - Mat3::identity()).abs().max();
        e.max((self.0.determinant() - 1.0).abs())
    }

    pub fn about_x(angle: f64) -> Rot3 {
        exp_so3(&Vec3::new(angle, 0.0, 0.0))
    }

    pub fn about_y(angle: f64) -> Rot3 {
        exp_so3(&Vec3::new(0.0, angle, 0.0))
    }

    pub fn about_z(angle: f64) -> Rot3 {
        exp_so3(&Vec3::new(0.0, 0.0, angle))
    }
}

impl std::ops::Mul for Rot3 {
    type Output = Rot3;
    fn mul(self, rhs: Rot3) -> Rot3 {
        Rot3(self.0 * rhs.0)
    }
}

impl std::ops::Mul<&Rot3> for &Rot3 {
    type Output = Rot3;
    fn mul(self, rhs: &Rot3) -> Rot3 {
        Rot3(self.0 * rhs.0)
    }
}

impl std::ops::Mul<Vec3> for Rot3 {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

impl std::ops::Mul<&Vec3> for &Rot3 {
    type Output = Vec3;
    fn mul(self, rhs: &Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// Antisymmetric matrix with `skew(a) * b == a.cross(b)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] on the antisymmetric part of `m`.
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues' formula.
pub fn exp_so3(theta: &Vec3) -> Rot3 {
    let angle = theta.norm();
    let k = skew(theta);
    let k2 = k * k;
    if angle < SMALL_ANGLE {
        return Rot3(Mat3::identity() + k + 0.5 * k2);
    }
    let a = angle.sin() / angle;
    let b = (1.0 - angle.cos()) / (angle * angle);
    Rot3(Mat3::identity() + a * k + b * k2)
}

/// Principal logarithm, `‖result‖ ≤ π`.
pub fn log_so3(r: &Rot3) -> Vec3 {
    let m = r.matrix();
    let cos_angle = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = cos_angle.acos();
    if angle < SMALL_ANGLE {
        // R ≈ I + [θ]× + ½[θ]×², whose antisymmetric part is [θ]×.
        return vee(m);
    }
    if std::f64::consts::PI - angle < 1e-4 {
        // Near π the antisymmetric part vanishes; recover the axis from the
        // symmetric part R + Rᵀ = 2cosθ I + 2(1 - cosθ) a aᵀ.
        let s = (m + m.transpose()) * 0.5;
        let one_minus_cos = 1.0 - cos_angle;
        let diag = Vec3::new(
            ((s[(0, 0)] - cos_angle) / one_minus_cos).max(0.0).sqrt(),
            ((s[(1, 1)] - cos_angle) / one_minus_cos).max(0.0).sqrt(),
            ((s[(2, 2)] - cos_angle) / one_minus_cos).max(0.0).sqrt(),
        );
        let i = diag.imax();
        let mut axis = Vec3::zeros();
        axis[i] = diag[i];
        for j in 0..3 {
            if j != i {
                axis[j] = s[(i, j)] / (one_minus_cos * diag[i]);
            }
        }
        axis.normalize_mut();
        // Pick the sign consistent with the (small) antisymmetric part.
        let w = vee(m);
        if w.dot(&axis) < 0.0 {
            axis = -axis;
        }
        return axis * angle;
    }
    vee(m) * (angle / angle.sin())
}
