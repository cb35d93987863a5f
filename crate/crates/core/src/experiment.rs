//! Monte-Carlo runs of the filter on simulated data.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SwfError};
use crate::evaluation::{epoch_errors, RunMetrics};
use crate::filter::{Filter, FilterConfig, FilterStats, Strategy};
use crate::geometry::{log_so3, Vec3};
use crate::observability::AuditRecord;
use crate::simulator::{Dataset, PriorConfig, SimConfig};
use crate::state::{FeatureState, SwfState, IMU_DIM};
use crate::vision::project_pose;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub filter: FilterConfig,
    pub prior: PriorConfig,
    /// Draw the initial estimate from the prior instead of starting at truth.
    pub perturb_prior: bool,
    /// Position error beyond which a run counts as diverged (m).
    pub divergence_m: f64,
    /// Landmarks visible at the start that enter the state right away.
    pub initial_features: usize,
    /// Standard deviation of the initial feature positions (m).
    pub initial_feature_sigma: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            sim: SimConfig::default(),
            filter: FilterConfig::default(),
            prior: PriorConfig::default(),
            perturb_prior: true,
            divergence_m: 1e3,
            initial_features: 0,
            initial_feature_sigma: 0.1,
        }
    }
}

/// Estimate at one camera epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub t: f64,
    pub rot: [f64; 3],
    pub pos: [f64; 3],
    pub vel: [f64; 3],
    pub p_diag: [f64; IMU_DIM],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunOutput {
    pub strategy: Strategy,
    pub seed: u64,
    pub metrics: RunMetrics,
    pub estimates: Vec<EstimateRow>,
    pub stats: FilterStats,
    pub audit: Vec<AuditRecord>,
    pub error: Option<String>,
    /// Filter wall time per frame (s).
    pub frame_seconds: Vec<f64>,
}

/// Initial state and covariance for a run.
pub fn initial_estimate(cfg: &ExperimentConfig, data: &Dataset) -> Result<(SwfState, DMatrix<f64>)> {
    let truth = data.truth_state(0)?;
    let (imu, p_imu) = cfg.prior.sample(&truth, data.seed, cfg.perturb_prior);
    let mut x = SwfState::new(0.0, imu);
    if cfg.initial_features > 0 {
        let mut visible: Vec<(f64, usize)> = data
            .landmarks
            .iter()
            .enumerate()
            .filter_map(|(id, lm)| {
                let uv = project_pose(&truth.rot, &truth.pos, &data.cfg.extrinsics, lm).ok()?;
                let (umax, vmax) = data.cfg.fov();
                (uv.x.abs() <= umax && uv.y.abs() <= vmax).then(|| ((lm - truth.pos).norm(), id))
            })
            .collect();
        visible.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut rng = ChaCha8Rng::seed_from_u64(data.seed ^ 0x5eed_f00d);
        for &(_, id) in visible.iter().take(cfg.initial_features) {
            let noise = if cfg.perturb_prior {
                Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
                    * cfg.initial_feature_sigma
            } else {
                Vec3::zeros()
            };
            let pos = data.landmarks[id] + noise;
            x.features.push(FeatureState { id: id as u64, pos, first_pos: Some(pos) });
        }
    }
    let n = x.dim();
    let mut p = DMatrix::zeros(n, n);
    p.view_mut((0, 0), (IMU_DIM, IMU_DIM)).copy_from(&p_imu);
    let s2 = cfg.initial_feature_sigma * cfg.initial_feature_sigma;
    for k in IMU_DIM..n {
        p[(k, k)] = s2;
    }
    Ok((x, p))
}

/// Runs one filter over a generated dataset.
pub fn run_on_dataset(cfg: &ExperimentConfig, strategy: Strategy, data: &Dataset, run: usize) -> RunOutput {
    let mut fcfg = cfg.filter.clone();
    fcfg.strategy = strategy;
    // A noiseless simulation still needs a positive measurement noise model.
    if data.cfg.sigma_uv() > 0.0 {
        fcfg.sigma_uv = data.cfg.sigma_uv();
    }
    fcfg.extrinsics = data.cfg.extrinsics;
    let mut out = RunOutput {
        strategy,
        seed: data.seed,
        metrics: RunMetrics { run, epochs: Vec::with_capacity(data.frames.len()), failed: false },
        estimates: Vec::with_capacity(data.frames.len()),
        stats: FilterStats::default(),
        audit: Vec::new(),
        error: None,
        frame_seconds: Vec::with_capacity(data.frames.len()),
    };
    let mut filter = match initial_estimate(cfg, data).and_then(|(x, p)| Filter::new(fcfg, x, p)) {
        Ok(f) => f,
        Err(e) => {
            out.metrics.failed = true;
            out.error = Some(e.to_string());
            return out;
        }
    };
    for (k, frame) in data.frames.iter().enumerate() {
        let t0 = Instant::now();
        let step = filter.process_frame(frame.stamp, &frame.obs, data.imu_for_frame(k));
        out.frame_seconds.push(t0.elapsed().as_secs_f64());
        if let Some(a) = filter.auditor_mut() {
            out.audit.extend(a.take_records());
        }
        let failure = step.err().map(|e| e.to_string()).or_else(|| {
            let e = filter.estimate();
            let truth = data.truth_state(frame.imu_index).ok()?;
            match epoch_errors(frame.stamp, &e.x.imu, &e.p, &truth) {
                Ok(m) if m.pos_err_m.is_finite() && m.pos_err_m <= cfg.divergence_m && e.x.is_finite() => {
                    out.metrics.epochs.push(m);
                    let mut p_diag = [0.0; IMU_DIM];
                    for (i, d) in p_diag.iter_mut().enumerate() {
                        *d = e.p[(i, i)];
                    }
                    out.estimates.push(EstimateRow {
                        t: frame.stamp,
                        rot: log_so3(&e.x.imu.rot).into(),
                        pos: e.x.imu.pos.into(),
                        vel: e.x.imu.vel.into(),
                        p_diag,
                    });
                    None
                }
                Ok(m) => Some(format!("diverged at t={:.2}: position error {:.3e} m", frame.stamp, m.pos_err_m)),
                Err(err) => Some(err.to_string()),
            }
        });
        if let Some(msg) = failure {
            out.metrics.failed = true;
            out.error = Some(msg);
            break;
        }
    }
    out.stats = *filter.stats();
    out
}

/// Runs `runs` seeds (`base_seed + i`) for every strategy. The same dataset is
/// shared by all strategies of one seed. Results are grouped by strategy in
/// the order given and sorted by run index.
pub fn run_monte_carlo(
    cfg: &ExperimentConfig,
    strategies: &[Strategy],
    runs: usize,
    base_seed: u64,
    threads: Option<usize>,
) -> Result<Vec<Vec<RunOutput>>> {
    if runs == 0 || strategies.is_empty() {
        return Err(SwfError::InvalidInput("need at least one run and one strategy".into()));
    }
    cfg.sim.validate()?;
    cfg.filter.validate()?;
    let work = || -> Result<Vec<Vec<RunOutput>>> {
        let per_seed: Vec<Result<Vec<RunOutput>>> = (0..runs)
            .into_par_iter()
            .map(|i| {
                let data = Dataset::generate(&cfg.sim, base_seed + i as u64)?;
                Ok(strategies.iter().map(|&s| run_on_dataset(cfg, s, &data, i)).collect())
            })
            .collect();
        let mut grouped: Vec<Vec<RunOutput>> = strategies.iter().map(|_| Vec::with_capacity(runs)).collect();
        for outs in per_seed {
            for (k, o) in outs?.into_iter().enumerate() {
                grouped[k].push(o);
            }
        }
        Ok(grouped)
    };
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| SwfError::InvalidInput(e.to_string()))?
            .install(work),
        None => work(),
    }
}
