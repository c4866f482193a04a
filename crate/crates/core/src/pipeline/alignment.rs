use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::data::{pairing_plan, Dataset};
use crate::geometry::{box_extent, gpa_solve, project_pose};
use crate::skeleton::Pose2D;

pub const HISTOGRAM_BINS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityStats {
    pub quantity: String,
    pub set: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Counts over the quantity's shared bin edges.
    pub histogram: Vec<usize>,
    pub bin_lo: f64,
    pub bin_hi: f64,
}

/// 2D box size (`dx + dy`) and root pixel position of the source, the
/// position-aligned source and the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStudy {
    pub stats: Vec<QuantityStats>,
}

pub const SETS: [&str; 3] = ["source", "gpa_source", "target"];
pub const QUANTITIES: [&str; 3] = ["box_size", "root_x", "root_y"];

fn describe(values: &[f64]) -> (f64, f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), min, max)
}

impl AlignmentStudy {
    pub fn get(&self, quantity: &str, set: &str) -> Option<&QuantityStats> {
        self.stats.iter().find(|s| s.quantity == quantity && s.set == set)
    }

    pub fn write_stats_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "quantity,set,n,mean,std,min,max")?;
        for s in &self.stats {
            writeln!(w, "{},{},{},{},{},{},{}", s.quantity, s.set, s.n, s.mean, s.std, s.min, s.max)?;
        }
        Ok(())
    }

    pub fn write_histogram_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "quantity,set,bin_lo,bin_hi,count")?;
        for s in &self.stats {
            let width = (s.bin_hi - s.bin_lo) / s.histogram.len() as f64;
            for (b, c) in s.histogram.iter().enumerate() {
                let lo = s.bin_lo + width * b as f64;
                writeln!(w, "{},{},{},{},{}", s.quantity, s.set, lo, lo + width, c)?;
            }
        }
        Ok(())
    }
}

fn pose2d(ds: &Dataset, i: usize) -> Result<&Pose2D> {
    ds.records[i]
        .joints_2d
        .as_ref()
        .ok_or_else(|| PipelineError::MissingLabels(format!("{} has no joints_2d", ds.records[i].id)))
}

/// Compares the 2D statistics before and after position alignment, pairing
/// sources with targets as in epoch `epoch`.
pub fn alignment_study(source: &Dataset, target: &Dataset, epoch: u64, seed: u64) -> Result<AlignmentStudy> {
    let skel = &source.skeleton;
    let root = skel.root_index();
    let plan = pairing_plan(source.len(), target.len(), epoch, seed)?;
    let mut sets: Vec<Vec<Pose2D>> = vec![Vec::new(), Vec::new(), Vec::new()];
    for (i, rec) in source.records.iter().enumerate() {
        sets[0].push(pose2d(source, i)?.clone());
        let s3 = rec
            .joints_3d
            .as_ref()
            .ok_or_else(|| PipelineError::MissingLabels(format!("{} has no joints_3d", rec.id)))?;
        let t = &target.records[plan.targets[i]];
        let r = gpa_solve(pose2d(target, plan.targets[i])?, root, s3, &t.camera)?;
        sets[1].push(project_pose(s3, &r, &t.camera)?);
    }
    for i in 0..target.len() {
        sets[2].push(pose2d(target, i)?.clone());
    }
    let mut stats = Vec::new();
    for q in QUANTITIES {
        let values: Vec<Vec<f64>> = sets
            .iter()
            .map(|poses| {
                poses
                    .iter()
                    .map(|p| match q {
                        "box_size" => box_extent(p).sum(),
                        "root_x" => p.joints[root].x,
                        _ => p.joints[root].y,
                    })
                    .collect()
            })
            .collect();
        let lo = values.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let mut hi = values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            hi = lo + 1.0;
        }
        for (set, v) in SETS.iter().zip(&values) {
            let mut histogram = vec![0; HISTOGRAM_BINS];
            for x in v {
                let b = (((x - lo) / (hi - lo)) * HISTOGRAM_BINS as f64) as usize;
                histogram[b.min(HISTOGRAM_BINS - 1)] += 1;
            }
            let (mean, std, min, max) = describe(v);
            stats.push(QuantityStats {
                quantity: q.into(),
                set: (*set).into(),
                n: v.len(),
                mean,
                std,
                min,
                max,
                histogram,
                bin_lo: lo,
                bin_hi: hi,
            });
        }
    }
    Ok(AlignmentStudy { stats })
}
