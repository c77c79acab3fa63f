//! Evaluation metrics: pelvis-relative MPJPE (protocol #1), acceleration
//! error, and up-to-scale root-trajectory error, plus the CSV report format.
//! Inputs are meters; reported values are millimeters.

use crate::error::{FlexError, Result};

fn check_view_slice(data: &[f64], frames: usize, joints: usize, what: &str) -> Result<()> {
    if data.len() != frames * 3 * joints {
        return Err(FlexError::ShapeMismatch(format!(
            "{what}: {} values, expected {} ([{} x {}])",
            data.len(),
            frames * 3 * joints,
            frames,
            3 * joints
        )));
    }
    Ok(())
}

/// Mean per-joint position error relative to the pelvis (joint 0), in
/// millimeters. `pred` and `gt` are `[T x 3J]` view slices in meters.
pub fn mpjpe_p1(pred: &[f64], gt: &[f64], frames: usize, joints: usize) -> Result<f64> {
    check_view_slice(pred, frames, joints, "mpjpe pred")?;
    check_view_slice(gt, frames, joints, "mpjpe gt")?;
    if frames == 0 || joints == 0 {
        return Err(FlexError::ShapeMismatch("empty metric input".into()));
    }
    let w = 3 * joints;
    let mut total = 0.0;
    for t in 0..frames {
        let pr = &pred[t * w..(t + 1) * w];
        let gr = &gt[t * w..(t + 1) * w];
        for j in 0..joints {
            let mut d2 = 0.0;
            for c in 0..3 {
                let dp = pr[3 * j + c] - pr[c];
                let dg = gr[3 * j + c] - gr[c];
                d2 += (dp - dg) * (dp - dg);
            }
            total += d2.sqrt();
        }
    }
    Ok(total / (frames * joints) as f64 * 1000.0)
}

/// Mean norm of the difference of discrete second temporal differences,
/// mm / frame^2. Needs at least 3 frames.
pub fn accel_error(pred: &[f64], gt: &[f64], frames: usize, joints: usize) -> Result<f64> {
    if frames < 3 {
        return Err(FlexError::TooShort { need: 3, got: frames });
    }
    check_view_slice(pred, frames, joints, "accel pred")?;
    check_view_slice(gt, frames, joints, "accel gt")?;
    let w = 3 * joints;
    let accel = |x: &[f64], t: usize, j: usize, c: usize| -> f64 {
        x[(t + 1) * w + 3 * j + c] - 2.0 * x[t * w + 3 * j + c] + x[(t - 1) * w + 3 * j + c]
    };
    let mut total = 0.0;
    for t in 1..frames - 1 {
        for j in 0..joints {
            let mut d2 = 0.0;
            for c in 0..3 {
                let d = accel(pred, t, j, c) - accel(gt, t, j, c);
                d2 += d * d;
            }
            total += d2.sqrt();
        }
    }
    Ok(total / ((frames - 2) * joints) as f64 * 1000.0)
}

/// Optimal scale s* = <pred, gt> / <pred, pred> and the mean distance
/// between the scaled prediction and the ground truth (millimeters).
/// `pred` and `gt` are `[T x 3]` root trajectories in consistent units.
pub fn root_trajectory_error(pred: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || pred.len() % 3 != 0 || pred.is_empty() {
        return Err(FlexError::ShapeMismatch(format!(
            "root trajectories: {} vs {} values",
            pred.len(),
            gt.len()
        )));
    }
    let denom: f64 = pred.iter().map(|v| v * v).sum();
    if denom == 0.0 {
        return Err(FlexError::DegenerateGeometry(
            "zero-norm predicted root trajectory".into(),
        ));
    }
    let scale = pred.iter().zip(gt).map(|(p, g)| p * g).sum::<f64>() / denom;
    let frames = pred.len() / 3;
    let mut total = 0.0;
    for t in 0..frames {
        let mut d2 = 0.0;
        for c in 0..3 {
            let d = scale * pred[t * 3 + c] - gt[t * 3 + c];
            d2 += d * d;
        }
        total += d2.sqrt();
    }
    Ok((scale, total / frames as f64 * 1000.0))
}

/// One row of a metric report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub sequence_id: String,
    pub views: usize,
    pub sigma_frac: f64,
    pub mpjpe_mm: f64,
    pub accel_err: f64,
    pub root_scale: f64,
    pub root_err_mm: f64,
}

pub const CSV_HEADER: &str = "sequence_id,K,sigma_frac,mpjpe_mm,accel_err,root_scale,root_err_mm";

pub fn to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.sequence_id, r.views, r.sigma_frac, r.mpjpe_mm, r.accel_err, r.root_scale, r.root_err_mm
        ));
    }
    out
}

pub fn from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(FlexError::ShapeMismatch(format!(
                "bad metric CSV header: {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 7 {
            return Err(FlexError::ShapeMismatch(format!(
                "metric CSV line {}: {} cells",
                i + 2,
                cells.len()
            )));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| FlexError::ShapeMismatch(format!("bad number {s:?}")))
        };
        rows.push(MetricRow {
            sequence_id: cells[0].to_string(),
            views: cells[1]
                .parse()
                .map_err(|_| FlexError::ShapeMismatch(format!("bad view count {:?}", cells[1])))?,
            sigma_frac: f(cells[2])?,
            mpjpe_mm: f(cells[3])?,
            accel_err: f(cells[4])?,
            root_scale: f(cells[5])?,
            root_err_mm: f(cells[6])?,
        });
    }
    Ok(rows)
}
