//! Reconstruction quality metrics and compression-ratio accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::data::LOG_ADC_MAX;

/// Ground-truth voxels above this log-ADC value count as signal.
pub const SIGNAL_LEVEL: f32 = 6.0;
/// Reported in place of an infinite PSNR.
pub const PSNR_SENTINEL: f64 = 999.0;

/// Column order of [`MetricsReport::csv_row`].
pub const METRICS_CSV_HEADER: &str =
    "mae,psnr,precision,recall,occupancy,true_pos,pred_pos,actual_pos,voxels";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub psnr: f64,
    /// `None` when nothing was predicted positive.
    pub precision: Option<f64>,
    /// `None` when the target has no signal voxels.
    pub recall: Option<f64>,
    /// Fraction of target voxels above zero.
    pub occupancy: f64,
    pub true_pos: u64,
    pub pred_pos: u64,
    pub actual_pos: u64,
    pub voxels: u64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |x| x.to_string())
}

impl MetricsReport {
    /// One CSV row in [`METRICS_CSV_HEADER`] order; undefined ratios print `NA`.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.mae,
            self.psnr,
            opt(self.precision),
            opt(self.recall),
            self.occupancy,
            self.true_pos,
            self.pred_pos,
            self.actual_pos,
            self.voxels
        )
    }
}

/// `10 log10(peak^2 / mse)` with peak 10; [`PSNR_SENTINEL`] when `mse == 0`.
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_SENTINEL;
    }
    let peak = LOG_ADC_MAX as f64;
    10.0 * (peak * peak / mse).log10()
}

/// Running sums from which per-wedge or aggregate reports are derived.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsAccumulator {
    abs_err: f64,
    sq_err: f64,
    nonzero: u64,
    true_pos: u64,
    pred_pos: u64,
    actual_pos: u64,
    voxels: u64,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one clipped wedge. `seg` supplies the predicted-positive set
    /// (`seg > threshold`).
    pub fn add(&mut self, reconstruction: &[f32], seg: &[f32], target: &[f32], threshold: f32) -> Result<()> {
        if reconstruction.len() != target.len() {
            return Err(Error::dim("metrics", "voxel count", target.len(), reconstruction.len()));
        }
        if seg.len() != target.len() {
            return Err(Error::dim("metrics", "voxel count", target.len(), seg.len()));
        }
        for ((&r, &s), &t) in reconstruction.iter().zip(seg).zip(target) {
            let e = (r - t) as f64;
            self.abs_err += e.abs();
            self.sq_err += e * e;
            let pred = s > threshold;
            let actual = t > SIGNAL_LEVEL;
            self.nonzero += (t > 0.0) as u64;
            self.pred_pos += pred as u64;
            self.actual_pos += actual as u64;
            self.true_pos += (pred && actual) as u64;
        }
        self.voxels += target.len() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.abs_err += other.abs_err;
        self.sq_err += other.sq_err;
        self.nonzero += other.nonzero;
        self.true_pos += other.true_pos;
        self.pred_pos += other.pred_pos;
        self.actual_pos += other.actual_pos;
        self.voxels += other.voxels;
    }

    pub fn report(&self) -> MetricsReport {
        let n = self.voxels.max(1) as f64;
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        MetricsReport {
            mae: self.abs_err / n,
            psnr: psnr(self.sq_err / n),
            precision: ratio(self.true_pos, self.pred_pos),
            recall: ratio(self.true_pos, self.actual_pos),
            occupancy: self.nonzero as f64 / n,
            true_pos: self.true_pos,
            pred_pos: self.pred_pos,
            actual_pos: self.actual_pos,
            voxels: self.voxels,
        }
    }
}

/// Metrics of a single clipped wedge.
pub fn metrics(reconstruction: &[f32], seg: &[f32], target: &[f32], threshold: f32) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new();
    acc.add(reconstruction, seg, target, threshold)?;
    Ok(acc.report())
}

/// Input elements per code element; both sides are stored at 16 bits.
pub fn compression_ratio(input_shape: &[usize], code_shape: &[usize]) -> f64 {
    let a: usize = input_shape.iter().product();
    let b: usize = code_shape.iter().product();
    a as f64 / b as f64
}
