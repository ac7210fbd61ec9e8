//! Wedge data: raw ADC grids, the log transform, horizontal padding, the
//! synthetic track generator, dataset splitting and the `TPCW` file format.

mod generator;
mod io;
mod split;

use crate::error::{Error, Result};

pub use generator::{generate_event, generate_wedge, occupancy, GeneratorConfig};
pub use io::{decode_wedge_file, encode_wedge_file, read_wedge_file, write_wedge_file, WedgeFile};
pub use split::{split_dataset, split_events};

/// Radial, azimuthal, horizontal extents of one outer-layer wedge.
pub const WEDGE_EXTENTS: [usize; 3] = [16, 192, 249];
/// Wedges per collision event.
pub const WEDGES_PER_EVENT: usize = 24;
pub const ADC_MAX: u16 = 1023;
pub const SUPPRESSION_THRESHOLD: u16 = 64;
/// Horizontal extents are padded up to a multiple of this.
pub const HORIZONTAL_ALIGN: usize = 16;
/// Largest log-ADC value, `log2(1024)`.
pub const LOG_ADC_MAX: f32 = 10.0;

fn volume(extents: [usize; 3]) -> usize {
    extents.iter().product()
}

/// 10-bit ADC voxel grid, row-major (radial, azimuthal, horizontal).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawWedge {
    extents: [usize; 3],
    adc: Vec<u16>,
}

impl RawWedge {
    pub fn new(extents: [usize; 3], adc: Vec<u16>) -> Result<Self> {
        if adc.len() != volume(extents) {
            return Err(Error::dim("RawWedge::new", "payload", volume(extents), adc.len()));
        }
        if let Some(&v) = adc.iter().find(|&&v| v > ADC_MAX) {
            return Err(Error::config(format!("ADC value {v} exceeds the 10-bit range")));
        }
        Ok(Self { extents, adc })
    }

    pub fn zeros(extents: [usize; 3]) -> Self {
        Self {
            extents,
            adc: vec![0; volume(extents)],
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn adc(&self) -> &[u16] {
        &self.adc
    }

    pub fn occupancy(&self) -> f64 {
        self.adc.iter().filter(|&&v| v > 0).count() as f64 / self.adc.len() as f64
    }

    /// Zero every value below `threshold`.
    pub fn zero_suppress(&self, threshold: u16) -> RawWedge {
        RawWedge {
            extents: self.extents,
            adc: self.adc.iter().map(|&v| if v < threshold { 0 } else { v }).collect(),
        }
    }

    /// `log2(adc + 1)` per voxel.
    pub fn log_transform(&self) -> LogWedge {
        LogWedge {
            extents: self.extents,
            original_extents: self.extents,
            values: self.adc.iter().map(|&v| log_adc(v)).collect(),
            padded: false,
        }
    }
}

#[inline]
pub fn log_adc(adc: u16) -> f32 {
    ((adc as f64) + 1.0).log2() as f32
}

/// Inverse of the log transform, rounded to the nearest integer ADC.
#[inline]
pub fn delog(value: f32) -> u16 {
    let adc = (2f64.powf(value as f64) - 1.0).round();
    adc.clamp(0.0, ADC_MAX as f64) as u16
}

/// Log-ADC float grid, optionally zero-padded along the horizontal axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LogWedge {
    extents: [usize; 3],
    original_extents: [usize; 3],
    values: Vec<f32>,
    padded: bool,
}

impl LogWedge {
    pub fn new(extents: [usize; 3], values: Vec<f32>) -> Result<Self> {
        if values.len() != volume(extents) {
            return Err(Error::dim("LogWedge::new", "payload", volume(extents), values.len()));
        }
        Ok(Self {
            extents,
            original_extents: extents,
            values,
            padded: false,
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    /// Extents before horizontal padding.
    pub fn original_extents(&self) -> [usize; 3] {
        self.original_extents
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn is_padded(&self) -> bool {
        self.padded
    }

    pub fn occupancy(&self) -> f64 {
        self.values.iter().filter(|&&v| v > 0.0).count() as f64 / self.values.len() as f64
    }

    /// Append zero columns so the horizontal extent becomes a multiple of
    /// [`HORIZONTAL_ALIGN`] (249 becomes 256).
    pub fn pad_horizontal(&self) -> Result<LogWedge> {
        if self.padded {
            return Err(Error::config("wedge is already padded"));
        }
        let [r, a, h] = self.extents;
        let padded_h = h.div_ceil(HORIZONTAL_ALIGN) * HORIZONTAL_ALIGN;
        let mut values = Vec::with_capacity(r * a * padded_h);
        for row in self.values.chunks(h) {
            values.extend_from_slice(row);
            values.resize(values.len() + padded_h - h, 0.0);
        }
        Ok(LogWedge {
            extents: [r, a, padded_h],
            original_extents: self.extents,
            values,
            padded: true,
        })
    }

    /// Drop the padding columns; the identity on unpadded wedges.
    pub fn clip_horizontal(&self) -> LogWedge {
        if !self.padded {
            return self.clone();
        }
        LogWedge {
            extents: self.original_extents,
            original_extents: self.original_extents,
            values: clip_rows(&self.values, self.extents[2], self.original_extents[2]),
            padded: false,
        }
    }

    /// Recover integer ADC values.
    pub fn delog(&self) -> RawWedge {
        RawWedge {
            extents: self.extents,
            adc: self.values.iter().map(|&v| delog(v)).collect(),
        }
    }
}

/// Keep the first `keep` entries of every row of length `row`.
pub(crate) fn clip_rows(values: &[f32], row: usize, keep: usize) -> Vec<f32> {
    if row == keep {
        return values.to_vec();
    }
    values.chunks(row).flat_map(|r| &r[..keep]).copied().collect()
}
