use nalgebra::{DMatrix, Matrix3};

use super::update::projected_rows;
use super::{Filter, FeatureTrack, InitVariant};
use crate::error::{Result, SwfError};
use crate::geometry::Vec3;
use crate::linalg::chi2_95;
use crate::observability::StepKind;
use crate::state::FeatureState;
use crate::vision::{split_subsystems, stack_jacobians, triangulate, FeatureSubsystem, MAX_CONDITION};

/// Grows `p` by one feature block given the feature-dependent subsystem
/// `hx1 x̃ + hf1 f̃ = n` over the columns `cols`, where the feature has no
/// prior information.
pub fn init_feature_covariance(
    p: &DMatrix<f64>,
    cols: &[usize],
    hx1: &DMatrix<f64>,
    hf1: &Matrix3<f64>,
    sigma2: f64,
) -> Result<DMatrix<f64>> {
    let hf1_inv = hf1.try_inverse().ok_or(SwfError::RankDeficient)?;
    let n = p.nrows();
    let a = hf1_inv * hx1;
    let pc = p.select_columns(cols);
    let pcc = pc.select_rows(cols);
    let pxf = -(&pc * a.transpose());
    let mut pff = &a * pcc * a.transpose() + hf1_inv * hf1_inv.transpose() * sigma2;
    pff = (pff + pff.transpose()) * 0.5;
    let mut out = DMatrix::zeros(n + 3, n + 3);
    out.view_mut((0, 0), (n, n)).copy_from(p);
    out.view_mut((0, n), (n, 3)).copy_from(&pxf);
    out.view_mut((n, 0), (3, n)).copy_from(&pxf.transpose());
    out.view_mut((n, n), (3, 3)).copy_from(&pff);
    Ok(out)
}

impl Filter {
    /// Moves tracked features into the state. Each feature is triangulated,
    /// its stacked system split into a feature-dependent part (which
    /// initializes the feature and its covariance) and a feature-independent
    /// part (which updates everything else in one batch). Returns tracks that
    /// were too poorly conditioned to initialize.
    pub fn delayed_init(&mut self, tracks: &[FeatureTrack]) -> Result<Vec<FeatureTrack>> {
        let poses = self.pose_pairs();
        let est_poses = self.clone_poses();
        let layout = self.est.x.layout();
        let ext = self.cfg.extrinsics;
        let strategy = self.cfg.strategy;
        let separate = matches!(self.cfg.init_variant, InitVariant::Separate) || strategy.re_evaluates();
        let mut demoted = Vec::new();
        let mut blocks = Vec::new();
        let mut pre_init: Vec<(u64, Vec3)> = Vec::new();
        for t in tracks {
            let obs = self.track_obs(t);
            if obs.len() < self.cfg.min_obs {
                continue;
            }
            let Ok(pf_minus) = triangulate(&est_poses, &ext, &obs) else {
                demoted.push(t.clone());
                self.stats.init_demoted += 1;
                continue;
            };
            let j = stack_jacobians(&poses, &layout, &ext, &obs, &pf_minus, &pf_minus);
            let (sub1, sub2) = match split_subsystems(&j) {
                Ok(s) if s.0.cond <= MAX_CONDITION => s,
                _ => {
                    demoted.push(t.clone());
                    self.stats.init_demoted += 1;
                    continue;
                }
            };
            let rows2 = projected_rows(sub2);
            if self.cfg.chi2_gate && rows2.innovation_test(&self.est.p)? > chi2_95(rows2.rows()) {
                self.stats.init_gated += 1;
                continue;
            }
            let hf1_inv = sub1.hf1.try_inverse().ok_or(SwfError::RankDeficient)?;
            let pf_plus = pf_minus + hf1_inv * sub1.r1;
            let lin1: FeatureSubsystem = if strategy.re_evaluates() {
                let jr = stack_jacobians(&poses, &layout, &ext, &obs, &pf_plus, &pf_plus);
                match split_subsystems(&jr) {
                    Ok((s, _)) if s.cond <= MAX_CONDITION => s,
                    _ => sub1,
                }
            } else {
                sub1
            };
            self.est.p = init_feature_covariance(&self.est.p, &j.cols, &lin1.hx1, &lin1.hf1, lin1.sigma2)?;
            self.est.x.features.push(FeatureState { id: t.id, pos: pf_plus, first_pos: Some(pf_plus) });
            if let Some(a) = self.est.auditor.as_mut() {
                a.init_feature(&j.cols, &lin1.hx1, &lin1.hf1)?;
            }
            if strategy.aligns() && separate && !strategy.re_evaluates() {
                // Only the new feature moved, so only its rows need aligning.
                let mut x_minus = self.est.x.clone();
                x_minus.features.last_mut().expect("just pushed").pos = pf_minus;
                self.align(&x_minus)?;
            }
            self.record(StepKind::Init)?;
            pre_init.push((t.id, pf_minus));
            blocks.push(rows2);
            self.stats.features_initialized += 1;
        }
        if blocks.is_empty() {
            return Ok(demoted);
        }
        if strategy.aligns() && !separate {
            let mut from = self.est.x.clone();
            for (id, pf) in &pre_init {
                let j = from.feature_index(*id).expect("initialized feature");
                from.features[j].pos = *pf;
            }
            self.apply_update_aligned_from(&blocks, StepKind::Init, Some(&from))?;
        } else {
            self.apply_update(&blocks, StepKind::Init)?;
        }
        Ok(demoted)
    }
}
