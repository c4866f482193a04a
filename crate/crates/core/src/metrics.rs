//! MPJPE, Procrustes-aligned MPJPE, PCK and AUC.

use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{map_indexed, Exec};
use crate::skeleton::Pose3D;

pub const DEFAULT_PCK_THRESHOLD: f64 = 150.0;

/// 5, 10, ..., 150 mm.
pub fn auc_thresholds() -> Vec<f64> {
    (1..=30).map(|i| 5.0 * i as f64).collect()
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("ground truth has zero spatial variance")]
    DegenerateConfiguration,
    #[error("no poses to evaluate")]
    Empty,
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn check(pred: &Pose3D, gt: &Pose3D) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(MetricsError::DimMismatch { expected: gt.len(), got: pred.len() });
    }
    if gt.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Euclidean error of each joint.
pub fn joint_errors(pred: &Pose3D, gt: &Pose3D) -> Result<Vec<f64>> {
    check(pred, gt)?;
    Ok(pred.joints.iter().zip(&gt.joints).map(|(p, g)| (p - g).norm()).collect())
}

pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    let e = joint_errors(pred, gt)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

fn centroid(p: &[Vector3<f64>]) -> Vector3<f64> {
    p.iter().sum::<Vector3<f64>>() / p.len() as f64
}

/// `pred` after the least-squares similarity transform onto `gt`, with
/// reflections excluded.
pub fn procrustes_align(pred: &Pose3D, gt: &Pose3D) -> Result<Pose3D> {
    check(pred, gt)?;
    let (mp, mg) = (centroid(&pred.joints), centroid(&gt.joints));
    let p: Vec<Vector3<f64>> = pred.joints.iter().map(|v| v - mp).collect();
    let g: Vec<Vector3<f64>> = gt.joints.iter().map(|v| v - mg).collect();
    let var_g: f64 = g.iter().map(|v| v.norm_squared()).sum();
    if !(var_g > 0.0) {
        return Err(MetricsError::DegenerateConfiguration);
    }
    let var_p: f64 = p.iter().map(|v| v.norm_squared()).sum();
    if var_p == 0.0 {
        return Ok(Pose3D::new(vec![mg; gt.len()]));
    }
    // cross-covariance mapping pred onto gt
    let h: Matrix3<f64> = p.iter().zip(&g).map(|(a, b)| b * a.transpose()).sum();
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested V"));
    let d = (u * v_t).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = u * fix * v_t;
    let trace = svd.singular_values[0] + svd.singular_values[1] + d * svd.singular_values[2];
    let s = trace / var_p;
    Ok(Pose3D::new(p.iter().map(|v| r * v * s + mg).collect()))
}

pub fn pa_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    mpjpe(&procrustes_align(pred, gt)?, gt)
}

/// Percentage of values strictly below `threshold`.
pub fn pck_from_errors(errors: &[f64], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(MetricsError::BadThreshold(threshold));
    }
    if errors.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = errors.iter().filter(|e| **e < threshold).count();
    Ok(100.0 * hits as f64 / errors.len() as f64)
}

pub fn auc_from_errors(errors: &[f64]) -> Result<f64> {
    let grid = auc_thresholds();
    let mut total = 0.0;
    for t in &grid {
        total += pck_from_errors(errors, *t)?;
    }
    Ok(total / grid.len() as f64)
}

fn all_errors(preds: &[Pose3D], gts: &[Pose3D]) -> Result<Vec<f64>> {
    if preds.len() != gts.len() {
        return Err(MetricsError::DimMismatch { expected: gts.len(), got: preds.len() });
    }
    let mut out = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        out.extend(joint_errors(p, g)?);
    }
    Ok(out)
}

/// PCK over every (record, joint) pair.
pub fn pck(preds: &[Pose3D], gts: &[Pose3D], threshold: f64) -> Result<f64> {
    pck_from_errors(&all_errors(preds, gts)?, threshold)
}

pub fn auc(preds: &[Pose3D], gts: &[Pose3D]) -> Result<f64> {
    auc_from_errors(&all_errors(preds, gts)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordError {
    pub id: String,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pck: f64,
    pub auc: f64,
    pub pck_threshold: f64,
    pub per_record: Vec<RecordError>,
}

impl EvalReport {
    pub fn summary_line(&self) -> String {
        format!(
            "n={} MPJPE={:.2}mm PA-MPJPE={:.2}mm PCK@{}={:.2}% AUC={:.2}%",
            self.count, self.mpjpe, self.pa_mpjpe, self.pck_threshold, self.pck, self.auc
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "id,mpjpe,pa_mpjpe")?;
        for r in &self.per_record {
            writeln!(w, "{},{},{}", r.id, r.mpjpe, r.pa_mpjpe)?;
        }
        Ok(())
    }
}

/// Evaluates aligned prediction/ground-truth lists. Per-record work runs in
/// parallel under [`Exec::Parallel`]; the result does not depend on `exec`.
pub fn evaluate(ids: &[String], preds: &[Pose3D], gts: &[Pose3D], threshold: f64, exec: Exec) -> Result<EvalReport> {
    if preds.len() != gts.len() || ids.len() != gts.len() {
        return Err(MetricsError::DimMismatch { expected: gts.len(), got: preds.len().min(ids.len()) });
    }
    if gts.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(threshold > 0.0) {
        return Err(MetricsError::BadThreshold(threshold));
    }
    let rows = map_indexed(exec, gts.len(), |i| -> Result<(Vec<f64>, f64)> {
        Ok((joint_errors(&preds[i], &gts[i])?, pa_mpjpe(&preds[i], &gts[i])?))
    });
    let mut errors = Vec::new();
    let mut per_record = Vec::with_capacity(gts.len());
    for (i, row) in rows.into_iter().enumerate() {
        let (e, pa) = row?;
        let m = e.iter().sum::<f64>() / e.len() as f64;
        per_record.push(RecordError { id: ids[i].clone(), mpjpe: m, pa_mpjpe: pa });
        errors.extend(e);
    }
    let n = per_record.len() as f64;
    Ok(EvalReport {
        count: per_record.len(),
        mpjpe: per_record.iter().map(|r| r.mpjpe).sum::<f64>() / n,
        pa_mpjpe: per_record.iter().map(|r| r.pa_mpjpe).sum::<f64>() / n,
        pck: pck_from_errors(&errors, threshold)?,
        auc: auc_from_errors(&errors)?,
        pck_threshold: threshold,
        per_record,
    })
}
