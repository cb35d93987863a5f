//! Error metrics, NEES and Monte-Carlo aggregation.

use nalgebra::{DMatrix, Matrix3, Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, Continuous};

use crate::error::{Result, SwfError};
use crate::geometry::Vec3;
use crate::observability::{AuditRecord, Status};
use crate::state::{imu_global_orientation_error, ImuState};

/// Errors and normalized errors of the current IMU pose at one epoch.
/// NEES values are divided by their degrees of freedom; they are NaN when the
/// covariance block is singular (`flagged`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub t: f64,
    pub ori_err_deg: f64,
    pub pos_err_m: f64,
    pub ori_nees: f64,
    pub pos_nees: f64,
    /// Joint orientation and position NEES over six degrees of freedom.
    pub pose_nees: f64,
    pub yaw_nees: f64,
    pub flagged: bool,
}

fn nees3(p: &Matrix3<f64>, e: &Vec3) -> Option<f64> {
    p.cholesky().map(|c| e.dot(&c.solve(e)) / 3.0)
}

/// Compares an estimate (`est`, covariance `p` with the IMU block first)
/// against the truth.
pub fn epoch_errors(t: f64, est: &ImuState, p: &DMatrix<f64>, truth: &ImuState) -> Result<EpochMetrics> {
    if p.nrows() < 6 || p.ncols() < 6 {
        return Err(SwfError::DimensionMismatch { expected: 6, got: p.nrows() });
    }
    let d = truth.boxminus(est);
    let th = Vec3::new(d[0], d[1], d[2]);
    let dp = Vec3::new(d[3], d[4], d[5]);
    let ptt: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    let ppp: Matrix3<f64> = p.fixed_view::<3, 3>(3, 3).into_owned();
    let ori = nees3(&ptt, &th);
    let pos = nees3(&ppp, &dp);
    let e6 = Vector6::new(d[0], d[1], d[2], d[3], d[4], d[5]);
    let p6: Matrix6<f64> = p.fixed_view::<6, 6>(0, 0).into_owned();
    let pose = p6.cholesky().map(|c| e6.dot(&c.solve(&e6)) / 6.0);
    // Yaw about gravity uses the globally defined orientation error, whose
    // covariance is the local one rotated into the global frame.
    let r = est.rot.matrix();
    let yaw_var = (r * ptt * r.transpose())[(2, 2)];
    let yaw_err = imu_global_orientation_error(truth, est).z;
    let yaw = (yaw_var > 0.0).then(|| yaw_err * yaw_err / yaw_var);
    Ok(EpochMetrics {
        t,
        ori_err_deg: th.norm().to_degrees(),
        pos_err_m: dp.norm(),
        ori_nees: ori.unwrap_or(f64::NAN),
        pos_nees: pos.unwrap_or(f64::NAN),
        pose_nees: pose.unwrap_or(f64::NAN),
        yaw_nees: yaw.unwrap_or(f64::NAN),
        flagged: ori.is_none() || pos.is_none() || pose.is_none() || yaw.is_none(),
    })
}

/// Per-epoch metrics of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: usize,
    pub epochs: Vec<EpochMetrics>,
    /// Set when the run diverged or errored; such runs are excluded from
    /// averages.
    pub failed: bool,
}

/// Across-run statistics at one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub t: f64,
    pub ori_rmse_deg: f64,
    pub pos_rmse_m: f64,
    pub ori_nees: f64,
    pub pos_nees: f64,
    pub pose_nees: f64,
    pub yaw_nees: f64,
}

/// Histogram of per-epoch orientation NEES with the scaled chi-square(3)
/// density as reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeesHistogram {
    pub edges: Vec<f64>,
    /// Normalized to a density.
    pub density: Vec<f64>,
    /// Density of χ²(3)/3 at the bin centers.
    pub reference: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusTally {
    pub aligned: usize,
    pub misaligned: usize,
    pub mismatched: usize,
    pub inconclusive: usize,
}

impl StatusTally {
    pub fn from_records(records: &[AuditRecord]) -> Self {
        let mut t = StatusTally::default();
        t.add(records);
        t
    }

    pub fn add(&mut self, records: &[AuditRecord]) {
        for r in records {
            match r.status.status {
                Status::Aligned => self.aligned += 1,
                Status::Misaligned => self.misaligned += 1,
                Status::Mismatched => self.mismatched += 1,
            }
            if r.inconclusive {
                self.inconclusive += 1;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub runs: usize,
    pub failed: usize,
    pub epochs: Vec<EpochSummary>,
    /// Time average of the per-epoch RMSE.
    pub ori_rmse_deg: f64,
    pub pos_rmse_m: f64,
    /// Time average of the per-epoch mean NEES.
    pub ori_nees: f64,
    pub pos_nees: f64,
    pub pose_nees: f64,
    pub yaw_nees: f64,
    pub histogram: NeesHistogram,
    pub audit: StatusTally,
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.filter(|v| v.is_finite()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

const HIST_BINS: usize = 30;
const HIST_MAX: f64 = 6.0;

fn histogram(values: impl Iterator<Item = f64>) -> NeesHistogram {
    let w = HIST_MAX / HIST_BINS as f64;
    let mut counts = vec![0usize; HIST_BINS];
    let mut total = 0usize;
    for v in values.filter(|v| v.is_finite()) {
        total += 1;
        let k = (v / w).floor();
        if k >= 0.0 && (k as usize) < HIST_BINS {
            counts[k as usize] += 1;
        }
    }
    let chi = ChiSquared::new(3.0).expect("valid dof");
    let edges = (0..=HIST_BINS).map(|k| k as f64 * w).collect();
    let density = counts.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / (total as f64 * w) }).collect();
    let reference = (0..HIST_BINS).map(|k| 3.0 * chi.pdf(3.0 * (k as f64 + 0.5) * w)).collect();
    NeesHistogram { edges, density, reference }
}

/// Aggregates completed runs epoch by epoch. Runs are aligned by epoch index
/// and truncated to the shortest completed run.
pub fn aggregate(runs: &[RunMetrics]) -> Result<McSummary> {
    if runs.is_empty() {
        return Err(SwfError::InvalidInput("no runs to aggregate".into()));
    }
    let ok: Vec<&RunMetrics> = runs.iter().filter(|r| !r.failed).collect();
    let failed = runs.len() - ok.len();
    let len = ok.iter().map(|r| r.epochs.len()).min().unwrap_or(0);
    let epochs: Vec<EpochSummary> = (0..len)
        .map(|k| {
            let at = |f: fn(&EpochMetrics) -> f64| ok.iter().map(move |r| f(&r.epochs[k]));
            EpochSummary {
                t: ok[0].epochs[k].t,
                ori_rmse_deg: mean(at(|e| e.ori_err_deg * e.ori_err_deg)).sqrt(),
                pos_rmse_m: mean(at(|e| e.pos_err_m * e.pos_err_m)).sqrt(),
                ori_nees: mean(at(|e| e.ori_nees)),
                pos_nees: mean(at(|e| e.pos_nees)),
                pose_nees: mean(at(|e| e.pose_nees)),
                yaw_nees: mean(at(|e| e.yaw_nees)),
            }
        })
        .collect();
    let hist = histogram(ok.iter().flat_map(|r| r.epochs[..len].iter().map(|e| e.ori_nees)));
    Ok(McSummary {
        runs: ok.len(),
        failed,
        ori_rmse_deg: mean(epochs.iter().map(|e| e.ori_rmse_deg)),
        pos_rmse_m: mean(epochs.iter().map(|e| e.pos_rmse_m)),
        ori_nees: mean(epochs.iter().map(|e| e.ori_nees)),
        pos_nees: mean(epochs.iter().map(|e| e.pos_nees)),
        pose_nees: mean(epochs.iter().map(|e| e.pose_nees)),
        yaw_nees: mean(epochs.iter().map(|e| e.yaw_nees)),
        epochs,
        histogram: hist,
        audit: StatusTally::default(),
    })
}

impl McSummary {
    /// Mean of a per-epoch field over the epochs whose time falls in the
    /// fraction `[from, to]` of the run.
    pub fn window_mean(&self, from: f64, to: f64, f: impl Fn(&EpochSummary) -> f64) -> f64 {
        let n = self.epochs.len();
        let a = ((from * n as f64).floor() as usize).min(n);
        let b = ((to * n as f64).ceil() as usize).clamp(a, n);
        mean(self.epochs[a..b].iter().map(f))
    }
}

/// Relative RMSE improvement of `other` over `baseline`.
pub fn improvement(baseline: f64, other: f64) -> f64 {
    (baseline - other) / baseline
}
