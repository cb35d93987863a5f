use nalgebra::{DMatrix, DVector, Vector2};

use super::{Filter, FeatureTrack};
use crate::error::{Result, SwfError};
use crate::linalg::{chi2_95, symmetrize};
use crate::observability::StepKind;
use crate::state::{boxplus, SwfState};
use crate::vision::{split_subsystems, stack_jacobians, triangulate, Obs, ProjectedSystem};

/// Linearized measurement rows over a sparse set of error-state columns.
#[derive(Clone, Debug)]
pub struct UpdateRows {
    pub cols: Vec<usize>,
    pub h: DMatrix<f64>,
    pub resid: DVector<f64>,
    pub rdiag: DVector<f64>,
}

impl UpdateRows {
    pub fn rows(&self) -> usize {
        self.h.nrows()
    }

    /// Stacks blocks with possibly different column sets onto the sorted
    /// union of their columns.
    pub fn stack(blocks: &[UpdateRows]) -> UpdateRows {
        let mut cols: Vec<usize> = blocks.iter().flat_map(|b| b.cols.iter().copied()).collect();
        cols.sort_unstable();
        cols.dedup();
        let m: usize = blocks.iter().map(|b| b.rows()).sum();
        let mut h = DMatrix::zeros(m, cols.len());
        let mut resid = DVector::zeros(m);
        let mut rdiag = DVector::zeros(m);
        let mut r0 = 0;
        for b in blocks {
            for (k, c) in b.cols.iter().enumerate() {
                let dst = cols.binary_search(c).expect("column in union");
                h.view_mut((r0, dst), (b.rows(), 1)).copy_from(&b.h.column(k));
            }
            resid.rows_mut(r0, b.rows()).copy_from(&b.resid);
            rdiag.rows_mut(r0, b.rows()).copy_from(&b.rdiag);
            r0 += b.rows();
        }
        UpdateRows { cols, h, resid, rdiag }
    }

    /// Whitens the rows and, when there are more rows than columns, replaces
    /// them by the triangular factor of a QR decomposition (same information,
    /// same least-squares residual).
    pub fn compress(&self) -> UpdateRows {
        let m = self.rows();
        let c = self.cols.len();
        let mut a = DMatrix::zeros(m, c + 1);
        for i in 0..m {
            let w = 1.0 / self.rdiag[i].sqrt();
            for j in 0..c {
                a[(i, j)] = self.h[(i, j)] * w;
            }
            a[(i, c)] = self.resid[i] * w;
        }
        if m <= c {
            return UpdateRows {
                cols: self.cols.clone(),
                h: a.columns(0, c).into_owned(),
                resid: a.column(c).into_owned(),
                rdiag: DVector::from_element(m, 1.0),
            };
        }
        let r = a.qr().r();
        UpdateRows {
            cols: self.cols.clone(),
            h: r.view((0, 0), (c, c)).into_owned(),
            resid: r.view((0, c), (c, 1)).column(0).into_owned(),
            rdiag: DVector::from_element(c, 1.0),
        }
    }

    /// Normalized innovation squared against covariance `p`.
    pub fn innovation_test(&self, p: &DMatrix<f64>) -> Result<f64> {
        let pcc = p.select_rows(&self.cols).select_columns(&self.cols);
        let mut s = &self.h * pcc * self.h.transpose();
        for i in 0..self.rows() {
            s[(i, i)] += self.rdiag[i];
        }
        let chol = s.cholesky().ok_or(SwfError::NotPositiveDefinite)?;
        Ok(self.resid.dot(&chol.solve(&self.resid)))
    }
}

/// EKF correction touching only the listed columns of `p`. Returns the full
/// error-state correction. The covariance is updated in Joseph form.
pub fn ekf_update(p: &mut DMatrix<f64>, rows: &UpdateRows) -> Result<DVector<f64>> {
    let n = p.nrows();
    if rows.rows() == 0 {
        return Ok(DVector::zeros(n));
    }
    let pht = p.select_columns(&rows.cols) * rows.h.transpose();
    let mut s = &rows.h * pht.select_rows(&rows.cols);
    for i in 0..rows.rows() {
        s[(i, i)] += rows.rdiag[i];
    }
    symmetrize(&mut s);
    // The innovation block is small; an explicit inverse keeps the large
    // products in matrix-matrix form.
    let mut s_inv = s.clone().cholesky().ok_or(SwfError::NotPositiveDefinite)?.inverse();
    symmetrize(&mut s_inv);
    let k = &pht * s_inv;
    let dx = &k * &rows.resid;
    // (I − KH) P (I − KH)ᵀ + K R Kᵀ with KR Kᵀ + KHPHᵀKᵀ = K S Kᵀ.
    let pht_t = pht.transpose();
    let khp = &k * &pht_t;
    let ksk = (&k * &s) * k.transpose();
    *p -= &khp;
    *p -= khp.transpose();
    *p += ksk;
    symmetrize(p);
    Ok(dx)
}

pub(crate) fn projected_rows(sub: ProjectedSystem) -> UpdateRows {
    UpdateRows { cols: sub.cols, h: sub.hx, resid: sub.resid, rdiag: sub.rdiag }
}

impl Filter {
    /// Clone index of every observation in a track that still has a clone.
    pub(crate) fn track_obs(&self, track: &FeatureTrack) -> Vec<Obs> {
        let sigma = self.cfg.sigma_uv;
        track
            .obs
            .iter()
            .filter_map(|(stamp, uv)| {
                self.est
                    .x
                    .clones
                    .iter()
                    .position(|c| c.stamp == *stamp)
                    .map(|clone_index| Obs { clone_index, uv: *uv, sigma })
            })
            .collect()
    }

    /// Applies a batched update and the strategy's post-update hook, then
    /// records the step.
    pub(crate) fn apply_update(&mut self, blocks: &[UpdateRows], step: StepKind) -> Result<()> {
        self.apply_update_aligned_from(blocks, step, None)
    }

    /// As [`Filter::apply_update`], aligning from `align_from` instead of the
    /// pre-update estimate when given.
    pub(crate) fn apply_update_aligned_from(
        &mut self,
        blocks: &[UpdateRows],
        step: StepKind,
        align_from: Option<&SwfState>,
    ) -> Result<()> {
        if blocks.is_empty() {
            return Ok(());
        }
        let stacked = UpdateRows::stack(blocks).compress();
        let x_minus = self.est.x.clone();
        let dx = ekf_update(&mut self.est.p, &stacked)?;
        self.est.x = boxplus(&x_minus, &dx)?;
        if let Some(a) = self.est.auditor.as_mut() {
            a.update(&stacked.cols, &stacked.h);
        }
        if self.cfg.strategy.aligns() {
            self.align(align_from.unwrap_or(&x_minus))?;
        }
        self.record(step)
    }

    /// MSCKF update with feature tracks that are not kept in the state.
    pub fn msckf_update(&mut self, tracks: &[FeatureTrack]) -> Result<()> {
        let poses = self.pose_pairs();
        let est_poses = self.clone_poses();
        let layout = self.est.x.layout();
        let mut blocks = Vec::new();
        for t in tracks.iter().take(self.cfg.max_msckf_features) {
            let obs = self.track_obs(t);
            if obs.len() < self.cfg.min_obs {
                continue;
            }
            let pf = match triangulate(&est_poses, &self.cfg.extrinsics, &obs) {
                Ok(pf) => pf,
                Err(_) => {
                    self.stats.msckf_triangulation_failed += 1;
                    continue;
                }
            };
            let j = stack_jacobians(&poses, &layout, &self.cfg.extrinsics, &obs, &pf, &pf);
            let sub2 = match split_subsystems(&j) {
                Ok((_, sub2)) => sub2,
                Err(_) => {
                    self.stats.msckf_triangulation_failed += 1;
                    continue;
                }
            };
            let rows = projected_rows(sub2);
            if self.cfg.chi2_gate && rows.innovation_test(&self.est.p)? > chi2_95(rows.rows()) {
                self.stats.msckf_gated += 1;
                continue;
            }
            self.stats.msckf_tracks_used += 1;
            blocks.push(rows);
        }
        self.apply_update(&blocks, StepKind::Msckf)
    }

    /// Update with the newest-frame observations of features in the state.
    pub fn slam_update(&mut self, obs: &[(u64, Vector2<f64>)]) -> Result<()> {
        let poses = self.pose_pairs();
        let layout = self.est.x.layout();
        let newest = layout.n_clones.checked_sub(1).ok_or_else(|| SwfError::InvalidInput("no clone".into()))?;
        let fej = self.cfg.strategy.uses_first_estimates();
        let mut blocks = Vec::new();
        for (id, uv) in obs {
            let Some(j) = self.est.x.feature_index(*id) else { continue };
            let f = &self.est.x.features[j];
            let pf_lin = if fej { f.first_pos.unwrap_or(f.pos) } else { f.pos };
            let o = [Obs { clone_index: newest, uv: *uv, sigma: self.cfg.sigma_uv }];
            let sj = stack_jacobians(&poses, &layout, &self.cfg.extrinsics, &o, &f.pos, &pf_lin);
            if sj.rows() == 0 {
                continue;
            }
            let mut cols = sj.cols.clone();
            cols.extend(layout.feature(j));
            let mut h = DMatrix::zeros(sj.rows(), cols.len());
            h.columns_mut(0, sj.cols.len()).copy_from(&sj.hx);
            h.columns_mut(sj.cols.len(), 3).copy_from(&sj.hf);
            let rows = UpdateRows { cols, h, resid: sj.resid, rdiag: sj.rdiag };
            if self.cfg.chi2_gate && rows.innovation_test(&self.est.p)? > chi2_95(rows.rows()) {
                self.stats.slam_gated += 1;
                continue;
            }
            self.stats.slam_observations_used += 1;
            blocks.push(rows);
        }
        self.apply_update(&blocks, StepKind::Slam)
    }
}
