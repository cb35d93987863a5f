//! CSV and JSON-lines writers. Everything written here is a pure function of
//! the results, so repeated runs produce identical files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use swf_core::evaluation::{EpochMetrics, EpochSummary, McSummary, NeesHistogram};
use swf_core::experiment::EstimateRow;
use swf_core::observability::AuditRecord;
use swf_core::simulator::Dataset;

/// Row of the per-epoch metric files. A single run uses the same columns as
/// the aggregate, with its absolute errors in the RMSE columns.
#[derive(Serialize)]
struct MetricRow {
    t: f64,
    ori_rmse_deg: f64,
    pos_rmse_m: f64,
    ori_nees: f64,
    pos_nees: f64,
    yaw_nees: f64,
}

impl From<&EpochSummary> for MetricRow {
    fn from(e: &EpochSummary) -> Self {
        MetricRow {
            t: e.t,
            ori_rmse_deg: e.ori_rmse_deg,
            pos_rmse_m: e.pos_rmse_m,
            ori_nees: e.ori_nees,
            pos_nees: e.pos_nees,
            yaw_nees: e.yaw_nees,
        }
    }
}

impl From<&EpochMetrics> for MetricRow {
    fn from(e: &EpochMetrics) -> Self {
        MetricRow {
            t: e.t,
            ori_rmse_deg: e.ori_err_deg,
            pos_rmse_m: e.pos_err_m,
            ori_nees: e.ori_nees,
            pos_nees: e.pos_nees,
            yaw_nees: e.yaw_nees,
        }
    }
}

/// Audit line: `{t, step, status, dim, angle}`.
#[derive(Serialize)]
pub struct AuditLine<'a> {
    pub t: f64,
    pub step: &'a str,
    pub status: String,
    pub dim: usize,
    pub angle: f64,
}

impl<'a> From<&'a AuditRecord> for AuditLine<'a> {
    fn from(r: &'a AuditRecord) -> Self {
        AuditLine {
            t: r.stamp,
            step: r.step.as_str(),
            status: r.status.status.to_string(),
            dim: r.status.dim,
            angle: r.status.angle,
        }
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_run_metrics(path: &Path, epochs: &[EpochMetrics]) -> Result<()> {
    write_rows(path, epochs.iter().map(MetricRow::from))
}

pub fn write_aggregate(path: &Path, summary: &McSummary) -> Result<()> {
    write_rows(path, summary.epochs.iter().map(MetricRow::from))
}

pub fn write_histogram(path: &Path, h: &NeesHistogram) -> Result<()> {
    #[derive(Serialize)]
    struct Bin {
        lo: f64,
        hi: f64,
        density: f64,
        reference: f64,
    }
    write_rows(
        path,
        (0..h.density.len()).map(|k| Bin { lo: h.edges[k], hi: h.edges[k + 1], density: h.density[k], reference: h.reference[k] }),
    )
}

pub fn write_estimates(path: &Path, rows: &[EstimateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec!["t".to_string()];
    for block in ["rot", "pos", "vel"] {
        header.extend(["x", "y", "z"].map(|a| format!("{block}_{a}")));
    }
    header.extend((0..rows.first().map_or(15, |r| r.p_diag.len())).map(|k| format!("p{k}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.t];
        rec.extend(r.rot.iter().chain(&r.pos).chain(&r.vel).chain(&r.p_diag));
        w.write_record(rec.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_audit(path: &Path, records: &[AuditRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in records {
        serde_json::to_writer(&mut w, &AuditLine::from(r))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Truth, IMU stream, landmarks and image observations of a dataset.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    #[derive(Serialize)]
    struct Imu {
        t: f64,
        wx: f64,
        wy: f64,
        wz: f64,
        ax: f64,
        ay: f64,
        az: f64,
    }
    write_rows(
        &dir.join("imu.csv"),
        data.imu.samples.iter().map(|s| Imu {
            t: s.stamp,
            wx: s.omega_m.x,
            wy: s.omega_m.y,
            wz: s.omega_m.z,
            ax: s.accel_m.x,
            ay: s.accel_m.y,
            az: s.accel_m.z,
        }),
    )?;
    #[derive(Serialize)]
    struct Landmark {
        id: usize,
        x: f64,
        y: f64,
        z: f64,
    }
    write_rows(
        &dir.join("landmarks.csv"),
        data.landmarks.iter().enumerate().map(|(id, p)| Landmark { id, x: p.x, y: p.y, z: p.z }),
    )?;
    #[derive(Serialize)]
    struct Observation {
        t: f64,
        id: u64,
        u: f64,
        v: f64,
    }
    write_rows(
        &dir.join("observations.csv"),
        data.frames.iter().flat_map(|f| f.obs.iter().map(|(id, uv)| Observation { t: f.stamp, id: *id, u: uv.x, v: uv.y })),
    )?;
    #[derive(Serialize)]
    struct Truth {
        t: f64,
        rot_x: f64,
        rot_y: f64,
        rot_z: f64,
        px: f64,
        py: f64,
        pz: f64,
        vx: f64,
        vy: f64,
        vz: f64,
    }
    let mut rows = Vec::with_capacity(data.imu.samples.len());
    for (k, s) in data.imu.samples.iter().enumerate() {
        let x = data.truth_state(k)?;
        let r = swf_core::geometry::log_so3(&x.rot);
        rows.push(Truth {
            t: s.stamp,
            rot_x: r.x,
            rot_y: r.y,
            rot_z: r.z,
            px: x.pos.x,
            py: x.pos.y,
            pz: x.pos.z,
            vx: x.vel.x,
            vy: x.vel.y,
            vz: x.vel.z,
        });
    }
    write_rows(&dir.join("truth.csv"), rows)
}
