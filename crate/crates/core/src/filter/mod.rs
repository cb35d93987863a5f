//! Sliding-window filter pipeline: predict, clone augmentation, MSCKF and
//! SLAM updates, delayed feature initialization and marginalization, with
//! the consistency strategy deciding Jacobian evaluation points and
//! covariance alignment.

mod init;
mod tracks;
mod update;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, Vector2};
use serde::{Deserialize, Serialize};

use crate::alignment::Alignment;
use crate::error::{Result, SwfError};
use crate::geometry::{Rot3, Vec3};
use crate::observability::{AuditConfig, AuditRecord, Auditor, StepKind};
use crate::propagation::{propagate, propagate_cov, ImuSample, NoiseParams};
use crate::state::{ClonePose, ErrorLayout, SwfState, IMU_DIM};
use crate::vision::{Extrinsics, PosePair};

pub use init::init_feature_covariance;
pub use tracks::FeatureTrack;
pub use update::{ekf_update, UpdateRows};

/// Consistency strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Jacobians at the current estimate, no correction.
    Std,
    /// Jacobians at first estimates.
    Fej,
    /// Indirect (auxiliary-matrix) alignment after every update.
    UsaIt,
    /// Direct rank-one alignment after every update.
    UsaDt,
    /// Direct alignment plus re-evaluated Jacobians when a feature is
    /// initialized.
    UsaDtr,
}

impl Strategy {
    pub const ALL: [Strategy; 5] =
        [Strategy::Std, Strategy::Fej, Strategy::UsaIt, Strategy::UsaDt, Strategy::UsaDtr];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Std => "std",
            Strategy::Fej => "fej",
            Strategy::UsaIt => "usa-it",
            Strategy::UsaDt => "usa-dt",
            Strategy::UsaDtr => "usa-dtr",
        }
    }

    pub fn uses_first_estimates(&self) -> bool {
        matches!(self, Strategy::Fej)
    }

    pub fn aligns(&self) -> bool {
        matches!(self, Strategy::UsaIt | Strategy::UsaDt | Strategy::UsaDtr)
    }

    pub fn re_evaluates(&self) -> bool {
        matches!(self, Strategy::UsaDtr)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = SwfError;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| SwfError::InvalidInput(format!("unknown strategy '{s}'")))
    }
}

/// Which feature families the filter uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Only MSCKF updates; no features are kept in the state.
    Msckf,
    /// Only features kept in the state.
    Slam,
    /// Both.
    Hybrid,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Msckf => "msckf",
            Mode::Slam => "slam",
            Mode::Hybrid => "hybrid",
        }
    }
    fn uses_msckf(&self) -> bool {
        !matches!(self, Mode::Slam)
    }
    fn uses_slam(&self) -> bool {
        !matches!(self, Mode::Msckf)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = SwfError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "msckf" => Ok(Mode::Msckf),
            "slam" => Ok(Mode::Slam),
            "hybrid" => Ok(Mode::Hybrid),
            _ => Err(SwfError::InvalidInput(format!("unknown mode '{s}'"))),
        }
    }
}

/// How alignment is scheduled around delayed feature initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitVariant {
    /// Align the new feature right after it is added, then align again after
    /// the feature-independent update.
    Separate,
    /// One alignment after both substeps.
    Batch,
}

impl FromStr for InitVariant {
    type Err = SwfError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "separate" => Ok(InitVariant::Separate),
            "batch" => Ok(InitVariant::Batch),
            _ => Err(SwfError::InvalidInput(format!("unknown init variant '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub mode: Mode,
    pub strategy: Strategy,
    pub max_clones: usize,
    pub max_slam_features: usize,
    pub max_msckf_features: usize,
    /// Minimum observations for an MSCKF track.
    pub min_obs: usize,
    /// Observations needed before a still-tracked feature is moved into the
    /// state; `None` means `max_clones - 1`.
    pub init_min_obs: Option<usize>,
    /// Measurement noise in normalized image units.
    pub sigma_uv: f64,
    pub noise: NoiseParams,
    pub extrinsics: Extrinsics,
    pub init_variant: InitVariant,
    /// Reject tracks whose innovation fails the 95% chi-square test.
    pub chi2_gate: bool,
    /// Enables the subspace auditor.
    pub audit: Option<AuditConfig>,
    /// Keeps a step log for the information-form cross-check (small runs
    /// only).
    pub audit_log: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            mode: Mode::Hybrid,
            strategy: Strategy::Std,
            max_clones: 11,
            max_slam_features: 40,
            max_msckf_features: 40,
            min_obs: 3,
            init_min_obs: None,
            sigma_uv: 2.0 / 458.0,
            noise: NoiseParams::default(),
            extrinsics: Extrinsics::default(),
            init_variant: InitVariant::Separate,
            chi2_gate: true,
            audit: None,
            audit_log: false,
        }
    }
}

impl FilterConfig {
    pub fn init_threshold(&self) -> usize {
        self.init_min_obs.unwrap_or(self.max_clones.saturating_sub(1)).max(self.min_obs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_clones < 2 {
            return Err(SwfError::InvalidInput("max_clones must be at least 2".into()));
        }
        if self.min_obs < 2 {
            return Err(SwfError::InvalidInput("min_obs must be at least 2".into()));
        }
        if !(self.sigma_uv > 0.0) {
            return Err(SwfError::InvalidInput("sigma_uv must be positive".into()));
        }
        Ok(())
    }
}

/// Estimate, covariance and optional auditor.
#[derive(Clone, Debug)]
pub struct FilterEstimate {
    pub x: SwfState,
    pub p: DMatrix<f64>,
    pub auditor: Option<Auditor>,
}

/// Counters collected over a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub frames: usize,
    pub msckf_tracks_used: usize,
    pub msckf_triangulation_failed: usize,
    pub msckf_gated: usize,
    pub slam_observations_used: usize,
    pub slam_gated: usize,
    pub features_initialized: usize,
    pub init_demoted: usize,
    pub init_gated: usize,
    pub alignments: usize,
    pub alignments_skipped: usize,
}

pub struct Filter {
    cfg: FilterConfig,
    est: FilterEstimate,
    tracks: BTreeMap<u64, FeatureTrack>,
    stats: FilterStats,
}

impl Filter {
    /// Creates a filter from an initial estimate and covariance. Any features
    /// already in `x0` are treated as initialized state features.
    pub fn new(cfg: FilterConfig, mut x0: SwfState, p0: DMatrix<f64>) -> Result<Self> {
        cfg.validate()?;
        let n = x0.dim();
        if p0.nrows() != n || p0.ncols() != n {
            return Err(SwfError::DimensionMismatch { expected: n, got: p0.nrows() });
        }
        if !cfg.mode.uses_slam() && !x0.features.is_empty() {
            return Err(SwfError::InvalidInput("MSCKF mode keeps no features in the state".into()));
        }
        x0.imu_first = x0.imu;
        for c in &mut x0.clones {
            c.first_rot.get_or_insert(c.rot);
            c.first_pos.get_or_insert(c.pos);
        }
        for f in &mut x0.features {
            f.first_pos.get_or_insert(f.pos);
        }
        let auditor = cfg.audit.map(|a| {
            let aud = Auditor::new(&x0, a);
            if cfg.audit_log {
                aud.with_log()
            } else {
                aud
            }
        });
        Ok(Filter {
            cfg,
            est: FilterEstimate { x: x0, p: p0, auditor },
            tracks: BTreeMap::new(),
            stats: FilterStats::default(),
        })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }

    pub fn estimate(&self) -> &FilterEstimate {
        &self.est
    }

    pub fn estimate_mut(&mut self) -> &mut FilterEstimate {
        &mut self.est
    }

    pub fn stats(&self) -> &FilterStats {
        &self.stats
    }

    pub fn tracks(&self) -> &BTreeMap<u64, FeatureTrack> {
        &self.tracks
    }

    pub fn audit_records(&self) -> &[AuditRecord] {
        self.est.auditor.as_ref().map(|a| a.records()).unwrap_or(&[])
    }

    pub fn auditor_mut(&mut self) -> Option<&mut Auditor> {
        self.est.auditor.as_mut()
    }

    fn record(&mut self, step: StepKind) -> Result<()> {
        if let Some(a) = self.est.auditor.as_mut() {
            a.record(step, &self.est.x)?;
        }
        Ok(())
    }

    /// Estimate and linearization point for every clone.
    pub(crate) fn pose_pairs(&self) -> Vec<PosePair> {
        let fej = self.cfg.strategy.uses_first_estimates();
        self.est
            .x
            .clones
            .iter()
            .map(|c| {
                let est = (c.rot, c.pos);
                let lin = if fej {
                    (c.first_rot.unwrap_or(c.rot), c.first_pos.unwrap_or(c.pos))
                } else {
                    est
                };
                PosePair { est, lin }
            })
            .collect()
    }

    pub(crate) fn clone_poses(&self) -> Vec<(Rot3, Vec3)> {
        self.est.x.clones.iter().map(|c| (c.rot, c.pos)).collect()
    }

    /// Propagates mean and covariance through IMU samples covering the
    /// interval from the current stamp to the last sample's stamp.
    pub fn predict(&mut self, samples: &[ImuSample]) -> Result<()> {
        if samples.is_empty() {
            return Err(SwfError::InvalidInput("no IMU samples for prediction".into()));
        }
        let dt = samples.last().map(|s| s.stamp).unwrap_or(self.est.x.stamp) - self.est.x.stamp;
        let lin = self.cfg.strategy.uses_first_estimates().then_some(self.est.x.imu_first);
        let res = propagate(&self.est.x.imu, samples, dt.max(1e-9), &self.cfg.noise, lin.as_ref())?;
        self.est.x.imu = res.imu_next;
        self.est.x.imu_first = res.imu_next;
        if samples.len() >= 2 {
            self.est.x.stamp = samples[samples.len() - 1].stamp;
        } else {
            self.est.x.stamp += dt;
        }
        propagate_cov(&mut self.est.p, &res.phi, &res.qd);
        if let Some(a) = self.est.auditor.as_mut() {
            a.propagate(&res.phi);
        }
        self.record(StepKind::Predict)
    }

    /// Appends a clone of the current pose; the new covariance rows copy the
    /// current pose rows.
    pub fn augment_clone(&mut self) -> Result<()> {
        if self.est.x.clones.len() >= self.cfg.max_clones {
            return Err(SwfError::InvalidInput("clone window full; marginalize first".into()));
        }
        let layout = self.est.x.layout();
        let at = layout.clone_start_for_append();
        let n = layout.dim();
        let src: Vec<usize> = (0..at).chain(0..6).chain(at..n).collect();
        self.est.p = self.est.p.select_rows(&src).select_columns(&src);
        let imu = self.est.x.imu;
        let first = self.est.x.imu_first;
        self.est.x.clones.push(ClonePose {
            rot: imu.rot,
            pos: imu.pos,
            stamp: self.est.x.stamp,
            first_rot: Some(first.rot),
            first_pos: Some(first.pos),
        });
        if let Some(a) = self.est.auditor.as_mut() {
            a.augment();
        }
        self.record(StepKind::Augment)
    }

    /// Removes the listed clones (by index) and features (by id) from the
    /// state and covariance.
    pub fn marginalize(&mut self, clone_indices: &[usize], feature_ids: &[u64]) -> Result<()> {
        if clone_indices.is_empty() && feature_ids.is_empty() {
            return Ok(());
        }
        let layout = self.est.x.layout();
        let mut drop = vec![false; layout.dim()];
        for &i in clone_indices {
            if i >= layout.n_clones {
                return Err(SwfError::InvalidInput(format!("no clone {i} to marginalize")));
            }
            for k in layout.clone_theta(i).start..layout.clone_pos(i).end {
                drop[k] = true;
            }
        }
        for id in feature_ids {
            let j = self
                .est
                .x
                .feature_index(*id)
                .ok_or_else(|| SwfError::InvalidInput(format!("no feature {id} to marginalize")))?;
            for k in layout.feature(j) {
                drop[k] = true;
            }
        }
        debug_assert!(drop[..IMU_DIM].iter().all(|d| !d));
        let keep: Vec<usize> = (0..layout.dim()).filter(|&k| !drop[k]).collect();
        self.est.p = self.est.p.select_rows(&keep).select_columns(&keep);
        let removed_stamps: Vec<f64> = clone_indices.iter().map(|&i| self.est.x.clones[i].stamp).collect();
        let mut idx = 0;
        self.est.x.clones.retain(|_| {
            let k = idx;
            idx += 1;
            !clone_indices.contains(&k)
        });
        self.est.x.features.retain(|f| !feature_ids.contains(&f.id));
        let new_layout = self.est.x.layout();
        if let Some(a) = self.est.auditor.as_mut() {
            a.marginalize(&keep, new_layout)?;
        }
        for t in self.tracks.values_mut() {
            t.obs.retain(|(s, _)| !removed_stamps.contains(s));
        }
        self.record(StepKind::Marginalize)
    }

    /// Applies the strategy's alignment for a step that moved the estimate
    /// from `x_minus` to the current estimate.
    pub(crate) fn align(&mut self, x_minus: &SwfState) -> Result<bool> {
        let x_plus = &self.est.x;
        let alignment = match self.cfg.strategy {
            Strategy::UsaIt => Alignment::indirect(x_minus, x_plus),
            Strategy::UsaDt | Strategy::UsaDtr => Alignment::direct(x_minus, x_plus),
            Strategy::Std | Strategy::Fej => return Ok(false),
        };
        let alignment = match alignment {
            Ok(a) => a,
            Err(SwfError::SingularTransform(_)) => {
                self.stats.alignments_skipped += 1;
                return Ok(false);
            }
            Err(e) => return Err(e),
        };
        alignment.apply_cov(&mut self.est.p);
        if let Some(a) = self.est.auditor.as_mut() {
            let dense = a.log().is_some().then(|| alignment.dense_forward());
            a.usa(|m| alignment.apply_left(m), dense);
        }
        self.stats.alignments += 1;
        Ok(true)
    }

    /// One full cycle at a camera frame: predict, augment, bookkeeping,
    /// MSCKF update, SLAM update, delayed initialization, marginalization.
    pub fn process_frame(&mut self, stamp: f64, obs: &[(u64, Vector2<f64>)], imu: &[ImuSample]) -> Result<()> {
        if stamp < self.est.x.stamp {
            return Err(SwfError::InvalidInput(format!(
                "frame at {stamp} precedes filter time {}",
                self.est.x.stamp
            )));
        }
        self.stats.frames += 1;
        self.predict(imu)?;
        self.est.x.stamp = stamp;
        self.augment_clone()?;

        let plan = self.plan_frame(stamp, obs);

        if self.cfg.mode.uses_msckf() && !plan.msckf.is_empty() {
            self.msckf_update(&plan.msckf)?;
        }
        if self.cfg.mode.uses_slam() && !plan.slam.is_empty() {
            self.slam_update(&plan.slam)?;
        }
        if self.cfg.mode.uses_slam() && !plan.init.is_empty() {
            let demoted = self.delayed_init(&plan.init)?;
            if self.cfg.mode.uses_msckf() && !demoted.is_empty() {
                self.msckf_update(&demoted)?;
            }
        }

        let window_full = self.est.x.clones.len() >= self.cfg.max_clones;
        let drop_clones: Vec<usize> = if window_full { vec![0] } else { Vec::new() };
        self.marginalize(&drop_clones, &plan.lost_slam)?;
        Ok(())
    }

    pub fn layout(&self) -> ErrorLayout {
        self.est.x.layout()
    }
}
