//! Small dense linear-algebra helpers used across the filter and auditor.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Result, SwfError};

const TILE: usize = 32;

/// Replaces `p` by `(p + pᵀ) / 2` in place. Works tile by tile so both
/// triangles stay in cache.
pub fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    debug_assert_eq!(n, p.ncols());
    let a = p.as_mut_slice();
    for bj in (0..n).step_by(TILE) {
        for bi in (0..=bj).step_by(TILE) {
            for j in bj..(bj + TILE).min(n) {
                for i in bi..(bi + TILE).min(j) {
                    let m = 0.5 * (a[i + j * n] + a[j + i * n]);
                    a[i + j * n] = m;
                    a[j + i * n] = m;
                }
            }
        }
    }
}

/// Largest absolute entry of `p - pᵀ`.
pub fn asymmetry(p: &DMatrix<f64>) -> f64 {
    let n = p.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((p[(i, j)] - p[(j, i)]).abs());
        }
    }
    worst
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(p: &DMatrix<f64>) -> f64 {
    p.clone().symmetric_eigenvalues().min()
}

/// Symmetrizes and, if a diagonal probe reveals negative variance, adds a
/// small multiple of the identity.
pub fn repair_psd(p: &mut DMatrix<f64>) {
    symmetrize(p);
    let n = p.nrows();
    if n == 0 {
        return;
    }
    let min_diag = (0..n).map(|i| p[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_diag < -1e-9 {
        let jitter = 1e-12 * p.trace().abs() / n as f64 - min_diag;
        for i in 0..n {
            p[(i, i)] += jitter;
        }
    }
}

/// Thin SVD that also works for matrices with fewer rows than columns by
/// zero-padding to a square system first. Returns singular values (descending)
/// and the full right singular vectors as columns.
pub fn right_singular(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (r, c) = a.shape();
    let padded;
    let m = if r < c {
        padded = {
            let mut z = DMatrix::zeros(c, c);
            z.view_mut((0, 0), (r, c)).copy_from(a);
            z
        };
        &padded
    } else {
        a
    };
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested v_t");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s = DVector::from_iterator(idx.len(), idx.iter().map(|&i| svd.singular_values[i]));
    let mut v = DMatrix::zeros(c, idx.len());
    for (k, &i) in idx.iter().enumerate() {
        v.set_column(k, &v_t.row(i).transpose());
    }
    (s, v)
}

/// Outcome of a numerical-rank decision.
#[derive(Clone, Debug)]
pub struct NullspaceResult {
    /// Orthonormal columns spanning the numerical nullspace.
    pub basis: DMatrix<f64>,
    /// True when a singular value fell between the threshold and ten times
    /// the threshold, so the rank decision is not clear-cut.
    pub inconclusive: bool,
}

/// Right nullspace of `a` with singular values below `threshold` treated as
/// zero.
pub fn nullspace(a: &DMatrix<f64>, threshold: f64) -> NullspaceResult {
    let c = a.ncols();
    if a.nrows() == 0 {
        return NullspaceResult { basis: DMatrix::identity(c, c), inconclusive: false };
    }
    let (s, v) = right_singular(a);
    let mut null_cols = Vec::new();
    let mut inconclusive = false;
    for k in 0..c {
        let sk = if k < s.len() { s[k] } else { 0.0 };
        if sk < threshold {
            null_cols.push(k);
        } else if sk < 10.0 * threshold {
            inconclusive = true;
        }
    }
    let basis = v.select_columns(&null_cols);
    NullspaceResult { basis, inconclusive }
}

/// Orthonormal basis of the column span of `a`. Fails if `a` is numerically
/// rank deficient relative to its largest singular value.
pub fn orthonormalize(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = a.ncols();
    if k == 0 {
        return Ok(a.clone());
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("requested u");
    let smax = svd.singular_values.max();
    if smax == 0.0 || svd.singular_values.iter().any(|&s| s < 1e-12 * smax) {
        return Err(SwfError::RankDeficient);
    }
    Ok(u.columns(0, k).into_owned())
}

/// Largest principal angle between the column spans of `a` and `b`.
///
/// Computed from the sine formulation `‖(I - QaQaᵀ)Qb‖₂` which stays accurate
/// for tiny angles. When the dimensions differ, measures how far the smaller
/// span is from lying inside the larger one.
pub fn principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(SwfError::DimensionMismatch { expected: a.nrows(), got: b.nrows() });
    }
    let qa = orthonormalize(a)?;
    let qb = orthonormalize(b)?;
    let (big, small) = if qa.ncols() >= qb.ncols() { (qa, qb) } else { (qb, qa) };
    if small.ncols() == 0 {
        return Ok(0.0);
    }
    let resid = &small - &big * (big.transpose() * &small);
    let s = resid.singular_values().max();
    Ok(s.clamp(0.0, 1.0).asin())
}

/// Pseudo-inverse of a symmetric PSD matrix with eigenvalues below
/// `rel_tol * λ_max` dropped.
pub fn pinv_symmetric(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = a.nrows();
    if n == 0 {
        return a.clone();
    }
    let eig = a.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
    let mut out = DMatrix::zeros(n, n);
    if lmax == 0.0 {
        return out;
    }
    for k in 0..n {
        let l = eig.eigenvalues[k];
        if l.abs() > rel_tol * lmax {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / l;
        }
    }
    out
}

const CHI2_TABLE_SIZE: usize = 1024;

/// 95% quantile of the chi-square distribution with `dof` degrees of freedom.
pub fn chi2_95(dof: usize) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        (0..CHI2_TABLE_SIZE)
            .map(|k| if k == 0 { 0.0 } else { chi2_quantile(k, 0.95) })
            .collect()
    });
    if dof < CHI2_TABLE_SIZE {
        table[dof]
    } else {
        chi2_quantile(dof, 0.95)
    }
}

pub fn chi2_quantile(dof: usize, prob: f64) -> f64 {
    ChiSquared::new(dof as f64).expect("positive dof").inverse_cdf(prob)
}
