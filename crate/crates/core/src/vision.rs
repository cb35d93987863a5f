//! Pinhole measurement model in normalized coordinates, its Jacobians,
//! triangulation and the feature nullspace projection.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SymmetricEigen, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SwfError};
use crate::geometry::{skew, Mat3, Rot3, Vec3};
use crate::state::{ClonePose, ErrorLayout};

/// Minimum camera-frame depth for a point to count as visible (m).
pub const Z_MIN: f64 = 1e-3;

/// Camera-from-IMU rigid transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    /// Rotation taking IMU-frame vectors into the camera frame.
    pub rot: Rot3,
    /// IMU origin expressed in the camera frame (m).
    pub pos: Vec3,
}

impl Default for Extrinsics {
    /// Camera looking along body x, image x along body −y, 5 cm lever arm.
    fn default() -> Self {
        Extrinsics {
            rot: Rot3::from_matrix_unchecked(Mat3::new(
                0.0, -1.0, 0.0, //
                0.0, 0.0, -1.0, //
                1.0, 0.0, 0.0,
            )),
            pos: Vec3::new(0.03, 0.0, 0.04),
        }
    }
}

impl Extrinsics {
    pub fn identity() -> Self {
        Extrinsics { rot: Rot3::identity(), pos: Vec3::zeros() }
    }

    /// Camera center in the global frame for an IMU pose.
    pub fn camera_center(&self, rot: &Rot3, pos: &Vec3) -> Vec3 {
        pos - rot.matrix() * self.rot.matrix().transpose() * self.pos
    }

    /// Camera-to-global rotation for an IMU pose.
    pub fn camera_rotation(&self, rot: &Rot3) -> Mat3 {
        rot.matrix() * self.rot.matrix().transpose()
    }
}

/// A single normalized-coordinate observation of a feature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obs {
    pub clone_index: usize,
    pub uv: Vector2<f64>,
    pub sigma: f64,
}

/// Point expressed in the camera frame of the given IMU pose.
pub fn camera_point(rot: &Rot3, pos: &Vec3, ext: &Extrinsics, pf: &Vec3) -> Vec3 {
    ext.rot.matrix() * (rot.matrix().transpose() * (pf - pos)) + ext.pos
}

pub fn project_pose(rot: &Rot3, pos: &Vec3, ext: &Extrinsics, pf: &Vec3) -> Result<Vector2<f64>> {
    let c = camera_point(rot, pos, ext, pf);
    if !(c.z > Z_MIN) {
        return Err(SwfError::BehindCamera(c.z));
    }
    Ok(Vector2::new(c.x / c.z, c.y / c.z))
}

pub fn project(clone: &ClonePose, ext: &Extrinsics, pf: &Vec3) -> Result<Vector2<f64>> {
    project_pose(&clone.rot, &clone.pos, ext, pf)
}

/// Derivatives of one projection with respect to the clone orientation
/// error, clone position and feature position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointJacobian {
    pub d_theta: Matrix2x3<f64>,
    pub d_pos: Matrix2x3<f64>,
    pub d_feat: Matrix2x3<f64>,
}

pub fn point_jacobian(rot: &Rot3, pos: &Vec3, ext: &Extrinsics, pf: &Vec3) -> Result<PointJacobian> {
    let c = camera_point(rot, pos, ext, pf);
    if !(c.z > Z_MIN) {
        return Err(SwfError::BehindCamera(c.z));
    }
    let iz = 1.0 / c.z;
    let dproj = Matrix2x3::new(iz, 0.0, -c.x * iz * iz, 0.0, iz, -c.y * iz * iz);
    let rt = rot.matrix().transpose();
    let cr = ext.rot.matrix();
    let d_feat_cam = cr * rt;
    Ok(PointJacobian {
        d_theta: dproj * cr * skew(&(rt * (pf - pos))),
        d_pos: -(dproj * d_feat_cam),
        d_feat: dproj * d_feat_cam,
    })
}

/// Stacked linearized measurements of one feature over several clones.
///
/// `hx` is stored compactly: its columns correspond to the global error
/// indices listed in `cols` (clone θ/p blocks, ordered by clone index); every
/// other column of the full Jacobian is zero.
#[derive(Clone, Debug)]
pub struct StackedJac {
    pub hx: DMatrix<f64>,
    pub cols: Vec<usize>,
    pub hf: DMatrix<f64>,
    pub resid: DVector<f64>,
    pub rdiag: DVector<f64>,
}

impl StackedJac {
    pub fn rows(&self) -> usize {
        self.hx.nrows()
    }

    /// Expands `hx` to a dense `rows × n` matrix.
    pub fn hx_dense(&self, n: usize) -> DMatrix<f64> {
        scatter_columns(&self.hx, &self.cols, n)
    }
}

/// Places the columns of a compact matrix at global column indices.
pub fn scatter_columns(h: &DMatrix<f64>, cols: &[usize], n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(h.nrows(), n);
    for (k, &c) in cols.iter().enumerate() {
        out.set_column(c, &h.column(k));
    }
    out
}

/// Pose pair used for one clone: the live estimate (residuals) and the
/// linearization point (Jacobians).
#[derive(Clone, Copy, Debug)]
pub struct PosePair {
    pub est: (Rot3, Vec3),
    pub lin: (Rot3, Vec3),
}

/// Builds the stacked system for one feature. Observations whose projection
/// fails at either the estimate or the linearization point are dropped.
pub fn stack_jacobians(
    poses: &[PosePair],
    layout: &ErrorLayout,
    ext: &Extrinsics,
    obs: &[Obs],
    pf_est: &Vec3,
    pf_lin: &Vec3,
) -> StackedJac {
    let mut kept = Vec::with_capacity(obs.len());
    for o in obs {
        let pp = &poses[o.clone_index];
        let pred = project_pose(&pp.est.0, &pp.est.1, ext, pf_est);
        let jac = point_jacobian(&pp.lin.0, &pp.lin.1, ext, pf_lin);
        if let (Ok(pred), Ok(jac)) = (pred, jac) {
            kept.push((o, pred, jac));
        }
    }
    let mut clone_ids: Vec<usize> = kept.iter().map(|(o, _, _)| o.clone_index).collect();
    clone_ids.sort_unstable();
    clone_ids.dedup();
    let mut cols = Vec::with_capacity(6 * clone_ids.len());
    for &i in &clone_ids {
        cols.extend(layout.clone_theta(i));
        cols.extend(layout.clone_pos(i));
    }
    let m = 2 * kept.len();
    let mut hx = DMatrix::zeros(m, cols.len());
    let mut hf = DMatrix::zeros(m, 3);
    let mut resid = DVector::zeros(m);
    let mut rdiag = DVector::zeros(m);
    for (k, (o, pred, jac)) in kept.iter().enumerate() {
        let c = 6 * clone_ids.binary_search(&o.clone_index).expect("listed clone");
        hx.fixed_view_mut::<2, 3>(2 * k, c).copy_from(&jac.d_theta);
        hx.fixed_view_mut::<2, 3>(2 * k, c + 3).copy_from(&jac.d_pos);
        hf.fixed_view_mut::<2, 3>(2 * k, 0).copy_from(&jac.d_feat);
        resid.fixed_rows_mut::<2>(2 * k).copy_from(&(o.uv - pred));
        rdiag[2 * k] = o.sigma * o.sigma;
        rdiag[2 * k + 1] = o.sigma * o.sigma;
    }
    StackedJac { hx, cols, hf, resid, rdiag }
}

/// Condition number threshold shared by triangulation and feature splits.
pub const MAX_CONDITION: f64 = 1e8;
const MIN_BASELINE: f64 = 1e-3;
const GN_STEPS: usize = 5;

/// Triangulates a global point from observations at the given IMU poses
/// (`obs[k].clone_index` indexes `poses`). Linear least-squares ray
/// intersection followed by a few Gauss–Newton steps on reprojection error.
pub fn triangulate(poses: &[(Rot3, Vec3)], ext: &Extrinsics, obs: &[Obs]) -> Result<Vec3> {
    if obs.len() < 2 {
        return Err(SwfError::TriangulationFailed("fewer than two observations"));
    }
    let centers: Vec<Vec3> = obs
        .iter()
        .map(|o| {
            let (r, p) = &poses[o.clone_index];
            ext.camera_center(r, p)
        })
        .collect();
    let baseline = centers.iter().map(|c| (c - centers[0]).norm()).fold(0.0, f64::max);
    if baseline < MIN_BASELINE {
        return Err(SwfError::TriangulationFailed("baseline too small"));
    }
    let mut a = Matrix3::zeros();
    let mut b = Vec3::zeros();
    for (o, c) in obs.iter().zip(&centers) {
        let (r, _) = &poses[o.clone_index];
        let bearing = (ext.camera_rotation(r) * Vec3::new(o.uv.x, o.uv.y, 1.0)).normalize();
        let proj = Matrix3::identity() - bearing * bearing.transpose();
        a += proj;
        b += proj * c;
    }
    let eig = SymmetricEigen::new(a);
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    if !(lmin > 0.0) || lmax / lmin > MAX_CONDITION {
        return Err(SwfError::TriangulationFailed("ill-conditioned ray intersection"));
    }
    let mut pf = a.lu().solve(&b).ok_or(SwfError::TriangulationFailed("singular system"))?;

    for _ in 0..GN_STEPS {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vec3::zeros();
        for o in obs {
            let (r, p) = &poses[o.clone_index];
            let pred = project_pose(r, p, ext, &pf)
                .map_err(|_| SwfError::TriangulationFailed("point behind a camera"))?;
            let j = point_jacobian(r, p, ext, &pf)
                .map_err(|_| SwfError::TriangulationFailed("point behind a camera"))?
                .d_feat;
            jtj += j.transpose() * j;
            jtr += j.transpose() * (o.uv - pred);
        }
        let step = match jtj.cholesky() {
            Some(ch) => ch.solve(&jtr),
            None => break,
        };
        pf += step;
        if step.norm() < 1e-12 * (1.0 + pf.norm()) {
            break;
        }
    }
    for o in obs {
        let (r, p) = &poses[o.clone_index];
        if camera_point(r, p, ext, &pf).z <= Z_MIN {
            return Err(SwfError::TriangulationFailed("point behind a camera"));
        }
    }
    Ok(pf)
}

/// Applies Givens rotations that bring `hf` to upper-triangular form,
/// rotating the rows of `others` identically.
pub fn givens_triangularize(hf: &mut DMatrix<f64>, others: &mut [&mut DMatrix<f64>]) {
    let m = hf.nrows();
    for col in 0..hf.ncols().min(m) {
        for i in (col + 1..m).rev() {
            let a = hf[(i - 1, col)];
            let b = hf[(i, col)];
            if b == 0.0 {
                continue;
            }
            let r = a.hypot(b);
            let (c, s) = (a / r, b / r);
            rotate_rows(hf, i - 1, i, c, s);
            hf[(i, col)] = 0.0;
            for o in others.iter_mut() {
                rotate_rows(o, i - 1, i, c, s);
            }
        }
    }
}

fn rotate_rows(m: &mut DMatrix<f64>, top: usize, bottom: usize, c: f64, s: f64) {
    for k in 0..m.ncols() {
        let x = m[(top, k)];
        let y = m[(bottom, k)];
        m[(top, k)] = c * x + s * y;
        m[(bottom, k)] = -s * x + c * y;
    }
}

/// Feature-dependent part of a split system: three rows whose feature block
/// `hf1` is upper triangular and invertible.
#[derive(Clone, Debug)]
pub struct FeatureSubsystem {
    pub hx1: DMatrix<f64>,
    pub hf1: Matrix3<f64>,
    pub r1: Vec3,
    /// Per-row noise variance (identical on all rows).
    pub sigma2: f64,
    pub cond: f64,
}

/// Feature-independent rows left after eliminating the feature block.
#[derive(Clone, Debug)]
pub struct ProjectedSystem {
    pub hx: DMatrix<f64>,
    pub cols: Vec<usize>,
    pub resid: DVector<f64>,
    pub rdiag: DVector<f64>,
}

impl ProjectedSystem {
    pub fn hx_dense(&self, n: usize) -> DMatrix<f64> {
        scatter_columns(&self.hx, &self.cols, n)
    }
}

/// Rotates the stacked system so the first three rows carry the feature and
/// the rest are independent of it.
pub fn split_subsystems(j: &StackedJac) -> Result<(FeatureSubsystem, ProjectedSystem)> {
    let m = j.rows();
    if m <= 3 {
        return Err(SwfError::ProjectionFailed);
    }
    let mut hf = j.hf.clone();
    let mut hx = j.hx.clone();
    let mut r = DMatrix::from_column_slice(m, 1, j.resid.as_slice());
    // Whiten when the noise is not uniform so the rotated noise stays
    // isotropic.
    let s0 = j.rdiag[0];
    let uniform = j.rdiag.iter().all(|&v| (v - s0).abs() <= 1e-15 * s0.abs());
    let sigma2 = if uniform {
        s0
    } else {
        for i in 0..m {
            let w = 1.0 / j.rdiag[i].sqrt();
            hf.row_mut(i).scale_mut(w);
            hx.row_mut(i).scale_mut(w);
            r[(i, 0)] *= w;
        }
        1.0
    };
    givens_triangularize(&mut hf, &mut [&mut hx, &mut r]);
    let hf1: Matrix3<f64> = hf.fixed_view::<3, 3>(0, 0).into_owned();
    let scale = j.hf.abs().max();
    let dmin = (0..3).map(|k| hf1[(k, k)].abs()).fold(f64::INFINITY, f64::min);
    if !(scale > 0.0) || dmin <= 1e-12 * scale {
        return Err(SwfError::ProjectionFailed);
    }
    let sv = hf1.singular_values();
    let cond = sv.max() / sv.min();
    let sub1 = FeatureSubsystem {
        hx1: hx.rows(0, 3).into_owned(),
        hf1,
        r1: Vec3::new(r[(0, 0)], r[(1, 0)], r[(2, 0)]),
        sigma2,
        cond,
    };
    let sub2 = ProjectedSystem {
        hx: hx.rows(3, m - 3).into_owned(),
        cols: j.cols.clone(),
        resid: DVector::from_column_slice(&r.as_slice()[3..]),
        rdiag: DVector::from_element(m - 3, sigma2),
    };
    Ok((sub1, sub2))
}

/// Feature-independent rows of a stacked system (the lower part of
/// [`split_subsystems`]).
pub fn nullspace_project(j: &StackedJac) -> Result<ProjectedSystem> {
    split_subsystems(j).map(|(_, sub2)| sub2)
}
