//! Synthetic sparse-track wedges.
//!
//! Each track crosses every radial layer; in each layer it deposits a
//! Gaussian blob of ADC around a centre that drifts linearly in the
//! horizontal axis and quadratically (curvature) in the azimuthal axis.
//! Tracks are added until the zero-suppressed occupancy reaches the target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::{volume, RawWedge, ADC_MAX, SUPPRESSION_THRESHOLD, WEDGES_PER_EVENT, WEDGE_EXTENTS};
use crate::error::{Error, Result};

const MAX_ATTEMPTS: u64 = 4;
/// Blobs are rendered out to this many standard deviations.
const BLOB_REACH: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub extents: [usize; 3],
    pub events: usize,
    pub wedges_per_event: usize,
    /// Inclusive bounds on the number of tracks per wedge.
    pub tracks_per_wedge: [usize; 2],
    /// Median and log-space spread of the per-track peak ADC.
    pub adc_peak_median: f64,
    pub adc_peak_sigma: f64,
    /// Per-layer fluctuation (log-space sigma) of the deposited peak.
    pub layer_fluctuation: f64,
    /// Transverse Gaussian sigma in voxels, (azimuthal, horizontal).
    pub track_width: [f64; 2],
    /// Largest per-layer drift of the track centre, (azimuthal, horizontal).
    pub max_slope: [f64; 2],
    pub max_curvature: f64,
    /// Probability that a voxel carries an isolated noise hit.
    pub noise_rate: f64,
    pub target_occupancy: f64,
    pub occupancy_tolerance: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            extents: WEDGE_EXTENTS,
            events: 1,
            wedges_per_event: WEDGES_PER_EVENT,
            tracks_per_wedge: [0, 4096],
            adc_peak_median: 260.0,
            adc_peak_sigma: 0.25,
            layer_fluctuation: 0.05,
            track_width: [2.0, 3.0],
            max_slope: [0.3, 1.0],
            max_curvature: 0.05,
            noise_rate: 0.001,
            target_occupancy: 0.108,
            occupancy_tolerance: 0.03,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Reduced extents for quick experiments and tests.
    pub fn desk(extents: [usize; 3], seed: u64) -> Self {
        Self {
            extents,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extents.contains(&0) {
            return Err(Error::config("generator extents must be positive"));
        }
        if !(self.target_occupancy > 0.0 && self.target_occupancy < 1.0) {
            return Err(Error::config(format!(
                "target_occupancy {} outside (0, 1)",
                self.target_occupancy
            )));
        }
        if self.tracks_per_wedge[0] > self.tracks_per_wedge[1] {
            return Err(Error::config("tracks_per_wedge minimum exceeds maximum"));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::config("noise_rate outside [0, 1)"));
        }
        if self.wedges_per_event == 0 {
            return Err(Error::config("wedges_per_event must be positive"));
        }
        if self.adc_peak_median <= 0.0 || self.track_width.iter().any(|&w| w <= 0.0) {
            return Err(Error::config("ADC peak and track width must be positive"));
        }
        if self.adc_peak_sigma < 0.0 || self.layer_fluctuation < 0.0 || self.occupancy_tolerance < 0.0 {
            return Err(Error::config("spreads and tolerances must be non-negative"));
        }
        Ok(())
    }

    pub fn total_wedges(&self) -> usize {
        self.events * self.wedges_per_event
    }
}

/// Fraction of nonzero voxels across a set of wedges.
pub fn occupancy(wedges: &[RawWedge]) -> f64 {
    let total: usize = wedges.iter().map(|w| w.adc().len()).sum();
    if total == 0 {
        return 0.0;
    }
    let nonzero: usize = wedges
        .iter()
        .map(|w| w.adc().iter().filter(|&&v| v > 0).count())
        .sum();
    nonzero as f64 / total as f64
}

/// All wedges of event `event_index`.
pub fn generate_event(config: &GeneratorConfig, event_index: usize) -> Result<Vec<RawWedge>> {
    config.validate()?;
    let first = event_index * config.wedges_per_event;
    (first..first + config.wedges_per_event)
        .map(|i| generate_wedge(config, i))
        .collect()
}

/// Wedge number `index` of the stream defined by `config.seed`.
pub fn generate_wedge(config: &GeneratorConfig, index: usize) -> Result<RawWedge> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let mut last = 0.0;
    for _ in 0..MAX_ATTEMPTS {
        let wedge = render(config, &mut rng)?;
        if config.tracks_per_wedge[1] == 0 {
            return Ok(wedge);
        }
        last = wedge.occupancy();
        if (last - config.target_occupancy).abs() <= config.occupancy_tolerance {
            return Ok(wedge);
        }
    }
    Err(Error::config(format!(
        "target occupancy {} unreachable (last attempt {last:.4} after {MAX_ATTEMPTS} attempts)",
        config.target_occupancy
    )))
}

struct Canvas {
    extents: [usize; 3],
    acc: Vec<f32>,
    active: usize,
}

impl Canvas {
    #[inline]
    fn deposit(&mut self, idx: usize, adc: f32) {
        let half = SUPPRESSION_THRESHOLD as f32 - 0.5;
        let before = self.acc[idx];
        let after = before + adc;
        self.acc[idx] = after;
        if before < half && after >= half {
            self.active += 1;
        }
    }

    fn occupancy(&self) -> f64 {
        self.active as f64 / self.acc.len() as f64
    }
}

fn render(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<RawWedge> {
    let extents = config.extents;
    let mut canvas = Canvas {
        extents,
        acc: vec![0.0; volume(extents)],
        active: 0,
    };

    if config.noise_rate > 0.0 {
        for idx in 0..canvas.acc.len() {
            if rng.random::<f64>() < config.noise_rate {
                let adc = rng.random_range(SUPPRESSION_THRESHOLD as f32..200.0);
                canvas.deposit(idx, adc);
            }
        }
    }

    let peak = LogNormal::new(config.adc_peak_median.ln(), config.adc_peak_sigma)
        .map_err(|e| Error::config(format!("peak distribution: {e}")))?;
    let fluctuation = LogNormal::new(0.0, config.layer_fluctuation)
        .map_err(|e| Error::config(format!("layer fluctuation: {e}")))?;
    let [min_tracks, max_tracks] = config.tracks_per_wedge;
    let mut tracks = 0;
    while tracks < max_tracks && (tracks < min_tracks || canvas.occupancy() < config.target_occupancy) {
        add_track(config, &mut canvas, rng, &peak, &fluctuation);
        tracks += 1;
    }

    let adc = canvas
        .acc
        .iter()
        .map(|&v| (v.round() as u32).min(ADC_MAX as u32) as u16)
        .collect();
    Ok(RawWedge::new(extents, adc)?.zero_suppress(SUPPRESSION_THRESHOLD))
}

fn add_track(
    config: &GeneratorConfig,
    canvas: &mut Canvas,
    rng: &mut ChaCha8Rng,
    peak: &LogNormal<f64>,
    fluctuation: &LogNormal<f64>,
) {
    let [layers, azim, horiz] = canvas.extents;
    let mid = (layers as f64 - 1.0) / 2.0;
    let a0 = rng.random_range(0.0..azim as f64);
    let z0 = rng.random_range(0.0..horiz as f64);
    let slope_a = rng.random_range(-1.0..=1.0) * config.max_slope[0];
    let slope_z = rng.random_range(-1.0..=1.0) * config.max_slope[1];
    let curvature = rng.random_range(-1.0..=1.0) * config.max_curvature;
    let amplitude = peak.sample(rng).min(4.0 * ADC_MAX as f64);
    let [sa, sz] = config.track_width;
    let (ra, rz) = ((BLOB_REACH * sa).ceil() as isize, (BLOB_REACH * sz).ceil() as isize);

    for layer in 0..layers {
        let dr = layer as f64 - mid;
        let ca = a0 + slope_a * dr + curvature * dr * dr;
        let cz = z0 + slope_z * dr;
        let layer_peak = amplitude * fluctuation.sample(rng);
        let (ia, iz) = (ca.round() as isize, cz.round() as isize);
        for a in (ia - ra).max(0)..(ia + ra + 1).min(azim as isize) {
            let da = (a as f64 - ca) / sa;
            for z in (iz - rz).max(0)..(iz + rz + 1).min(horiz as isize) {
                let dz = (z as f64 - cz) / sz;
                let adc = layer_peak * (-0.5 * (da * da + dz * dz)).exp();
                if adc >= 0.5 {
                    let idx = (layer * azim + a as usize) * horiz + z as usize;
                    canvas.deposit(idx, adc as f32);
                }
            }
        }
    }
}
