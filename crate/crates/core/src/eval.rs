//! Reconstruction metrics: accuracy, completeness, F1 and Chamfer distance.

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};
use crate::spatial::HashGrid;

/// Default matching radius.
pub const DEFAULT_RHO: f64 = 0.1;

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("rho must be positive, got {rho}")))
    }
}

/// Percentage of `from` points within `rho` of some `to` point.
fn percent_within(from: &[Vec3], to: &[Vec3], rho: f64) -> f64 {
    if from.is_empty() || to.is_empty() {
        return 0.0;
    }
    let grid = HashGrid::new(to, rho);
    let hits = from.iter().filter(|p| grid.any_within(p, rho)).count();
    100.0 * hits as f64 / from.len() as f64
}

/// Percentage of predicted points within `rho` of a ground-truth point.
pub fn accuracy(pred: &PointCloud, gt: &PointCloud, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    if gt.is_empty() {
        return Err(Error::invalid("ground-truth cloud is empty"));
    }
    Ok(percent_within(&pred.positions, &gt.positions, rho))
}

/// Percentage of ground-truth points within `rho` of a predicted point.
pub fn completeness(pred: &PointCloud, gt: &PointCloud, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    if gt.is_empty() {
        return Err(Error::invalid("ground-truth cloud is empty"));
    }
    Ok(percent_within(&gt.positions, &pred.positions, rho))
}

/// Harmonic mean of two percentages; 0 when both are 0.
pub fn f1(acc: f64, cmp: f64) -> f64 {
    if acc + cmp == 0.0 {
        0.0
    } else {
        2.0 * acc * cmp / (acc + cmp)
    }
}

fn mean_nearest(from: &[Vec3], to: &[Vec3]) -> f64 {
    let cell = cell_size_for(to);
    let grid = HashGrid::new(to, cell);
    let sum: f64 = from.iter().map(|p| grid.nearest(p).1).sum();
    sum / from.len() as f64
}

/// Cell size giving a few points per occupied cell.
fn cell_size_for(points: &[Vec3]) -> f64 {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = (hi - lo).max();
    let per_axis = (points.len() as f64).cbrt().max(1.0);
    let c = extent / per_axis;
    if c > 1e-9 && c.is_finite() {
        c
    } else {
        1.0
    }
}

/// Symmetric mean nearest-neighbor distance (not squared).
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer distance needs two non-empty clouds"));
    }
    Ok(0.5 * (mean_nearest(&a.positions, &b.positions) + mean_nearest(&b.positions, &a.positions)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub completeness: f64,
    pub f1: f64,
    /// Absent when the prediction is empty.
    pub chamfer: Option<f64>,
    /// Set when the prediction had no points.
    pub empty_prediction: bool,
}

pub fn evaluate(pred: &PointCloud, gt: &PointCloud, rho: f64) -> Result<Metrics> {
    let acc = accuracy(pred, gt, rho)?;
    let cmp = completeness(pred, gt, rho)?;
    let empty = pred.is_empty();
    if empty {
        log::warn!("empty prediction: accuracy, completeness and F1 are 0");
    }
    Ok(Metrics {
        accuracy: acc,
        completeness: cmp,
        f1: f1(acc, cmp),
        chamfer: if empty { None } else { Some(chamfer(pred, gt)?) },
        empty_prediction: empty,
    })
}

impl Metrics {
    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        s += &format!("accuracy,{}\n", self.accuracy);
        s += &format!("completeness,{}\n", self.completeness);
        s += &format!("f1,{}\n", self.f1);
        match self.chamfer {
            Some(c) => s += &format!("chamfer,{c}\n"),
            None => s += "chamfer,nan\n",
        }
        s += &format!("empty_prediction,{}\n", self.empty_prediction as u8);
        s
    }
}
