//! Unobservable-subspace bases, the auxiliary matrix that makes them
//! constant, and the auditor that follows the estimator's subspace through
//! every filter step.

use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SwfError};
use crate::geometry::{skew, Mat3, Vec3, GRAVITY};
use crate::linalg::{nullspace, orthonormalize, pinv_symmetric, principal_angle};
use crate::propagation::{full_transition, Mat15};
use crate::state::{ErrorLayout, SwfState, IMU_DIM};

/// Basis of the four unobservable directions: three global translations and
/// yaw about gravity (last column).
#[derive(Clone, Debug)]
pub struct UnobservableBasis {
    pub n: DMatrix<f64>,
    pub layout: ErrorLayout,
    /// Timestamp of the state the basis was evaluated at.
    pub stamp: f64,
}

impl UnobservableBasis {
    pub fn yaw_column(&self) -> DVector<f64> {
        self.n.column(3).into_owned()
    }
}

/// `[I₃ | [p]×g]` for a point feature.
pub fn feature_sub_basis(p: &Vec3) -> SMatrix<f64, 3, 4> {
    let mut m = SMatrix::<f64, 3, 4>::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&Mat3::identity());
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(skew(p) * GRAVITY));
    m
}

fn set_block(n: &mut DMatrix<f64>, row: usize, pos: bool, yaw: &Vec3) {
    if pos {
        n.view_mut((row, 0), (3, 3)).copy_from(&Mat3::identity());
    }
    n.view_mut((row, 3), (3, 1)).copy_from(yaw);
}

fn basis_matrix(x: &SwfState) -> DMatrix<f64> {
    let layout = x.layout();
    let g = GRAVITY;
    let mut n = DMatrix::zeros(layout.dim(), 4);
    let rt = x.imu.rot.matrix().transpose();
    set_block(&mut n, 0, false, &(-(rt * g)));
    set_block(&mut n, 3, true, &(skew(&x.imu.pos) * g));
    set_block(&mut n, 6, false, &(skew(&x.imu.vel) * g));
    for (i, c) in x.clones.iter().enumerate() {
        let s = layout.clone_start(i);
        set_block(&mut n, s, false, &(-(c.rot.matrix().transpose() * g)));
        set_block(&mut n, s + 3, true, &(skew(&c.pos) * g));
    }
    for (j, f) in x.features.iter().enumerate() {
        set_block(&mut n, layout.feature_start(j), true, &(skew(&f.pos) * g));
    }
    n
}

/// Analytic unobservable basis evaluated at `x`.
pub fn build_basis(x: &SwfState) -> UnobservableBasis {
    UnobservableBasis { n: basis_matrix(x), layout: x.layout(), stamp: x.stamp }
}

/// Basis restricted to the current IMU and clone blocks, the subspace of a
/// filter that never keeps features in its state.
pub fn build_top_blocks(x: &SwfState) -> Result<DMatrix<f64>> {
    if !x.features.is_empty() {
        return Err(SwfError::InvalidInput(format!(
            "top-block basis requires a feature-free state, found {} features",
            x.features.len()
        )));
    }
    Ok(basis_matrix(x))
}

/// The state-independent basis that [`build_aux`] maps every `N(x)` onto:
/// `−g` in each orientation row's yaw column and identity stacks on every
/// position-like block.
pub fn constant_basis(layout: &ErrorLayout) -> DMatrix<f64> {
    let g = GRAVITY;
    let mut n = DMatrix::zeros(layout.dim(), 4);
    set_block(&mut n, 0, false, &(-g));
    set_block(&mut n, 3, true, &Vec3::zeros());
    for i in 0..layout.n_clones {
        let s = layout.clone_start(i);
        set_block(&mut n, s, false, &(-g));
        set_block(&mut n, s + 3, true, &Vec3::zeros());
    }
    for j in 0..layout.n_features {
        set_block(&mut n, layout.feature_start(j), true, &Vec3::zeros());
    }
    n
}

/// Dense auxiliary matrix `𝕋(x)` with `𝕋(x)·N(x) = N_const`.
pub fn build_aux(x: &SwfState) -> DMatrix<f64> {
    let layout = x.layout();
    let dim = layout.dim();
    let mut t = DMatrix::identity(dim, dim);
    let r = *x.imu.rot.matrix();
    t.view_mut((0, 0), (3, 3)).copy_from(&r);
    t.view_mut((3, 0), (3, 3)).copy_from(&(skew(&x.imu.pos) * r));
    t.view_mut((6, 0), (3, 3)).copy_from(&(skew(&x.imu.vel) * r));
    for (i, c) in x.clones.iter().enumerate() {
        let s = layout.clone_start(i);
        let ri = *c.rot.matrix();
        t.view_mut((s, s), (3, 3)).copy_from(&ri);
        t.view_mut((s + 3, s), (3, 3)).copy_from(&(skew(&c.pos) * ri));
    }
    for (j, f) in x.features.iter().enumerate() {
        t.view_mut((layout.feature_start(j), 0), (3, 3)).copy_from(&(skew(&f.pos) * r));
    }
    t
}

/// Solves `𝕋(x)·y = b` by block forward substitution.
pub fn aux_solve(x: &SwfState, b: &DVector<f64>) -> DVector<f64> {
    let layout = x.layout();
    let mut y = b.clone();
    let r = x.imu.rot.matrix();
    let th: Vec3 = r.transpose() * b.fixed_rows::<3>(0);
    y.fixed_rows_mut::<3>(0).copy_from(&th);
    let rth = r * th;
    let yp = b.fixed_rows::<3>(3) - skew(&x.imu.pos) * rth;
    let yv = b.fixed_rows::<3>(6) - skew(&x.imu.vel) * rth;
    y.fixed_rows_mut::<3>(3).copy_from(&yp);
    y.fixed_rows_mut::<3>(6).copy_from(&yv);
    for (i, c) in x.clones.iter().enumerate() {
        let s = layout.clone_start(i);
        let ri = c.rot.matrix();
        let ti: Vec3 = ri.transpose() * b.fixed_rows::<3>(s);
        let pi = b.fixed_rows::<3>(s + 3) - skew(&c.pos) * (ri * ti);
        y.fixed_rows_mut::<3>(s).copy_from(&ti);
        y.fixed_rows_mut::<3>(s + 3).copy_from(&pi);
    }
    for (j, f) in x.features.iter().enumerate() {
        let s = layout.feature_start(j);
        let yf = b.fixed_rows::<3>(s) - skew(&f.pos) * rth;
        y.fixed_rows_mut::<3>(s).copy_from(&yf);
    }
    y
}

/// Largest principal angle between two column spans (radians).
pub fn subspace_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    principal_angle(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Aligned,
    Misaligned,
    Mismatched,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Aligned => "aligned",
            Status::Misaligned => "misaligned",
            Status::Mismatched => "mismatched",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceStatus {
    pub status: Status,
    pub dim: usize,
    /// Largest principal angle to `N(x*)` (radians).
    pub angle: f64,
}

/// Classifies an estimator subspace against the analytic basis at `xstar`.
pub fn classify(basis: &DMatrix<f64>, xstar: &SwfState, tol_angle: f64) -> SubspaceStatus {
    let reference = basis_matrix(xstar);
    let dim = basis.ncols();
    let angle = if dim == 0 || basis.nrows() != reference.nrows() {
        f64::NAN
    } else {
        principal_angle(basis, &reference).unwrap_or(f64::NAN)
    };
    let status = if dim != 4 {
        Status::Mismatched
    } else if angle < tol_angle {
        Status::Aligned
    } else {
        Status::Misaligned
    };
    SubspaceStatus { status, dim, angle }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Predict,
    Augment,
    Slam,
    Msckf,
    Init,
    Marginalize,
    Usa,
}

impl StepKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepKind::Predict => "predict",
            StepKind::Augment => "augment",
            StepKind::Slam => "slam",
            StepKind::Msckf => "msckf",
            StepKind::Init => "init",
            StepKind::Marginalize => "marginalize",
            StepKind::Usa => "usa",
        }
    }
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub stamp: f64,
    pub step: StepKind,
    pub status: SubspaceStatus,
    /// The rank decision at this step was not clear-cut.
    pub inconclusive: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    /// Principal-angle tolerance for the aligned status (radians).
    pub tol_angle: f64,
    /// Relative singular-value threshold for nullspace intersections.
    pub rank_tol: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig { tol_angle: 1e-6, rank_tol: 1e-8 }
    }
}

/// One step of the estimator as seen by the information-form cross-check.
#[derive(Clone, Debug)]
pub enum LoggedStep {
    Propagate(Mat15),
    /// Measurement rows (compact columns) with unit weight.
    Update { cols: Vec<usize>, h: DMatrix<f64> },
    Augment,
    Marginalize { keep: Vec<usize> },
    /// Dense forward transform `T`; the information maps as `TᵀΛT`.
    Usa(DMatrix<f64>),
    /// New feature appended with rows `[hx1 | hf1]`.
    Init { cols: Vec<usize>, hx1: DMatrix<f64>, hf1: Matrix3<f64> },
}

/// Follows the estimator's unobservable subspace step by step.
///
/// Propagation maps the basis through `Φ`, updates intersect it with the
/// nullspace of the measurement Jacobian, augmentation copies pose rows,
/// marginalization deletes rows, and alignment applies `T⁻¹`.
#[derive(Clone, Debug)]
pub struct Auditor {
    basis: DMatrix<f64>,
    layout: ErrorLayout,
    cfg: AuditConfig,
    pending_inconclusive: bool,
    records: Vec<AuditRecord>,
    log: Option<Vec<LoggedStep>>,
}

impl Auditor {
    /// Starts aligned with the analytic basis at `x`.
    pub fn new(x: &SwfState, cfg: AuditConfig) -> Self {
        let basis = orthonormalize(&basis_matrix(x)).expect("analytic basis has full rank");
        Auditor {
            basis,
            layout: x.layout(),
            cfg,
            pending_inconclusive: false,
            records: Vec::new(),
            log: None,
        }
    }

    /// Also keeps every step for [`info_nullspace_crosscheck`].
    pub fn with_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn layout(&self) -> ErrorLayout {
        self.layout
    }

    pub fn config(&self) -> &AuditConfig {
        &self.cfg
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn take_records(&mut self) -> Vec<AuditRecord> {
        std::mem::take(&mut self.records)
    }

    pub fn log(&self) -> Option<&[LoggedStep]> {
        self.log.as_deref()
    }

    /// Resets the basis to the analytic one at `x` (status aligned).
    pub fn reseed(&mut self, x: &SwfState) {
        self.basis = orthonormalize(&basis_matrix(x)).expect("analytic basis has full rank");
        self.layout = x.layout();
    }

    fn push_log(&mut self, step: LoggedStep) {
        if let Some(log) = self.log.as_mut() {
            log.push(step);
        }
    }

    fn reorthonormalize(&mut self) {
        if self.basis.ncols() > 0 {
            if let Ok(q) = orthonormalize(&self.basis) {
                self.basis = q;
            }
        }
    }

    pub fn propagate(&mut self, phi: &Mat15) {
        let top = self.basis.rows(0, IMU_DIM).into_owned();
        self.basis.rows_mut(0, IMU_DIM).copy_from(&(phi * top));
        self.reorthonormalize();
        self.push_log(LoggedStep::Propagate(*phi));
    }

    /// Intersects the basis with the nullspace of `h` (compact columns).
    pub fn update(&mut self, cols: &[usize], h: &DMatrix<f64>) {
        if h.nrows() > 0 && self.basis.ncols() > 0 {
            let hb = h * self.basis.select_rows(cols);
            let threshold = self.cfg.rank_tol * h.norm();
            let ns = nullspace(&hb, threshold);
            self.pending_inconclusive |= ns.inconclusive;
            self.basis = &self.basis * ns.basis;
            self.reorthonormalize();
        }
        self.push_log(LoggedStep::Update { cols: cols.to_vec(), h: h.clone() });
    }

    /// Appends a clone of the current pose rows.
    pub fn augment(&mut self) {
        let at = self.layout.clone_start_for_append();
        let k = self.basis.ncols();
        let mut b = DMatrix::zeros(self.basis.nrows() + 6, k);
        b.rows_mut(0, at).copy_from(&self.basis.rows(0, at));
        b.rows_mut(at, 6).copy_from(&self.basis.rows(0, 6));
        let tail = self.basis.nrows() - at;
        b.rows_mut(at + 6, tail).copy_from(&self.basis.rows(at, tail));
        self.basis = b;
        self.layout.n_clones += 1;
        self.reorthonormalize();
        self.push_log(LoggedStep::Augment);
    }

    /// Keeps only the listed rows.
    pub fn marginalize(&mut self, keep: &[usize], new_layout: ErrorLayout) -> Result<()> {
        if keep.len() != new_layout.dim() {
            return Err(SwfError::AuditAborted(format!(
                "kept {} rows for a layout of dimension {}",
                keep.len(),
                new_layout.dim()
            )));
        }
        self.basis = self.basis.select_rows(keep);
        self.layout = new_layout;
        self.reorthonormalize();
        self.push_log(LoggedStep::Marginalize { keep: keep.to_vec() });
        Ok(())
    }

    /// Applies an alignment, given as an in-place left multiplication by
    /// `T⁻¹`, and optionally logs its dense forward transform.
    pub fn usa(&mut self, apply_inverse: impl Fn(&mut DMatrix<f64>), dense_forward: Option<DMatrix<f64>>) {
        apply_inverse(&mut self.basis);
        self.reorthonormalize();
        if let Some(t) = dense_forward {
            self.push_log(LoggedStep::Usa(t));
        }
    }

    /// Appends rows for a new feature initialized from `[hx1 | hf1]`.
    pub fn init_feature(&mut self, cols: &[usize], hx1: &DMatrix<f64>, hf1: &Matrix3<f64>) -> Result<()> {
        let inv = hf1.try_inverse().ok_or(SwfError::ProjectionFailed)?;
        let k = self.basis.ncols();
        let rows = -(DMatrix::from_column_slice(3, 3, inv.as_slice()) * hx1 * self.basis.select_rows(cols));
        let mut b = DMatrix::zeros(self.basis.nrows() + 3, k);
        b.rows_mut(0, self.basis.nrows()).copy_from(&self.basis);
        b.rows_mut(self.basis.nrows(), 3).copy_from(&rows);
        self.basis = b;
        self.layout.n_features += 1;
        self.reorthonormalize();
        self.push_log(LoggedStep::Init { cols: cols.to_vec(), hx1: hx1.clone(), hf1: *hf1 });
        Ok(())
    }

    /// Classifies the current basis against `x` and stores the record.
    pub fn record(&mut self, step: StepKind, x: &SwfState) -> Result<AuditRecord> {
        if x.layout() != self.layout {
            return Err(SwfError::AuditAborted(format!(
                "auditor layout {:?} differs from state layout {:?}",
                self.layout,
                x.layout()
            )));
        }
        let rec = AuditRecord {
            stamp: x.stamp,
            step,
            status: classify(&self.basis, x, self.cfg.tol_angle),
            inconclusive: std::mem::take(&mut self.pending_inconclusive),
        };
        self.records.push(rec);
        Ok(rec)
    }
}

impl ErrorLayout {
    /// Row index where the next clone block will be inserted.
    pub fn clone_start_for_append(&self) -> usize {
        IMU_DIM + 6 * self.n_clones
    }
}

/// Prior information for the cross-check.
#[derive(Clone, Debug)]
pub enum InfoPrior {
    /// No information at all.
    Zero,
    /// Unit information everywhere except the span of the given columns.
    ComplementOf(DMatrix<f64>),
}

#[derive(Clone, Debug)]
pub struct CrosscheckResult {
    pub basis: DMatrix<f64>,
    pub inconclusive: bool,
    pub information: DMatrix<f64>,
}

/// Accumulates the information matrix explicitly over a logged run and
/// returns its numerical nullspace.
pub fn info_nullspace_crosscheck(dim0: usize, prior: &InfoPrior, log: &[LoggedStep], rank_tol: f64) -> CrosscheckResult {
    let mut lam = match prior {
        InfoPrior::Zero => DMatrix::zeros(dim0, dim0),
        InfoPrior::ComplementOf(b) => {
            let q = orthonormalize(b).expect("prior basis has full rank");
            DMatrix::identity(dim0, dim0) - &q * q.transpose()
        }
    };
    // Row where the clone blocks end and the feature blocks begin. The log
    // starts from a clone-free state.
    let mut clone_end = IMU_DIM;
    for step in log {
        match step {
            LoggedStep::Propagate(phi) => {
                let n = lam.nrows();
                let f = full_transition(phi, n);
                let finv = f.try_inverse().expect("transition is invertible");
                lam = finv.transpose() * &lam * finv;
            }
            LoggedStep::Update { cols, h } => {
                let hd = crate::vision::scatter_columns(h, cols, lam.nrows());
                lam += hd.transpose() * hd;
            }
            LoggedStep::Augment => {
                let n = lam.nrows();
                let mut big = DMatrix::zeros(n + 6, n + 6);
                let at = clone_end;
                let map = |i: usize| if i < at { i } else { i + 6 };
                for i in 0..n {
                    for j in 0..n {
                        big[(map(i), map(j))] = lam[(i, j)];
                    }
                }
                // Exact-copy constraint x_clone − x_pose = 0 with unit weight.
                let mut h = DMatrix::zeros(6, n + 6);
                for k in 0..6 {
                    h[(k, k)] = -1.0;
                    h[(k, at + k)] = 1.0;
                }
                lam = big + h.transpose() * h;
                clone_end += 6;
            }
            LoggedStep::Marginalize { keep } => {
                let n = lam.nrows();
                let drop: Vec<usize> = (0..n).filter(|i| !keep.contains(i)).collect();
                let lkk = lam.select_rows(keep).select_columns(keep);
                let lkm = lam.select_rows(keep).select_columns(&drop);
                let lmm = lam.select_rows(&drop).select_columns(&drop);
                lam = &lkk - &lkm * pinv_symmetric(&lmm, 1e-12) * lkm.transpose();
                let dropped_clone_rows = drop.iter().filter(|&&i| i >= IMU_DIM && i < clone_end).count();
                clone_end -= dropped_clone_rows;
            }
            LoggedStep::Usa(t) => {
                lam = t.transpose() * &lam * t;
            }
            LoggedStep::Init { cols, hx1, hf1 } => {
                let n = lam.nrows();
                let mut big = DMatrix::zeros(n + 3, n + 3);
                big.view_mut((0, 0), (n, n)).copy_from(&lam);
                let mut h = DMatrix::zeros(3, n + 3);
                for (k, &c) in cols.iter().enumerate() {
                    h.column_mut(c).copy_from(&hx1.column(k));
                }
                h.view_mut((0, n), (3, 3)).copy_from(hf1);
                lam = big + h.transpose() * h;
            }
        }
        crate::linalg::symmetrize(&mut lam);
    }
    let eig = lam.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
    let threshold = if lmax > 0.0 { rank_tol * lmax } else { f64::MIN_POSITIVE };
    let mut cols = Vec::new();
    let mut inconclusive = false;
    for k in 0..eig.eigenvalues.len() {
        let l = eig.eigenvalues[k];
        if l < threshold {
            cols.push(k);
        } else if l < 10.0 * threshold {
            inconclusive = true;
        }
    }
    CrosscheckResult { basis: eig.eigenvectors.select_columns(&cols), inconclusive, information: lam }
}
