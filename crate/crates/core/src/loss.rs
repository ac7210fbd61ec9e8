//! Training objectives: the base-2 focal loss for the segmentation head, the
//! masked absolute error for the regression head, and the epoch-wise
//! balancer between them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const FOCAL_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Focusing parameter.
    pub gamma: f64,
    /// Segmentation threshold `h`.
    pub threshold: f64,
    pub balancer_c0: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            threshold: 0.5,
            balancer_c0: 2000.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.balancer_c0 > 0.0) {
            return Err(Error::config(format!("balancer c0 must be positive, got {}", self.balancer_c0)));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f32>,
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, "voxel count", a, b));
    }
    Ok(())
}

/// Focal loss of one voxel and its derivative in the prediction, both taken
/// at the clamped probability.
pub fn focal_voxel(p: f64, label: f64, gamma: f64) -> (f64, f64) {
    let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    let q = 1.0 - p;
    let ln2 = std::f64::consts::LN_2;
    let (lp, lq) = (p.log2(), q.log2());
    let pos = -lp * q.powf(gamma);
    let neg = -lq * p.powf(gamma);
    let dpos = -q.powf(gamma) / (p * ln2) + if gamma == 0.0 { 0.0 } else { gamma * lp * q.powf(gamma - 1.0) };
    let dneg = p.powf(gamma) / (q * ln2) - if gamma == 0.0 { 0.0 } else { gamma * lq * p.powf(gamma - 1.0) };
    (label * pos + (1.0 - label) * neg, label * dpos + (1.0 - label) * dneg)
}

/// Mean focal loss over all voxels, base-2 logarithm.
pub fn focal_loss(seg: &[f32], labels: &[f32], gamma: f64) -> Result<LossValue> {
    check_len("focal_loss", seg.len(), labels.len())?;
    if seg.is_empty() {
        return Ok(LossValue { value: 0.0, grad: Vec::new() });
    }
    let m = seg.len() as f64;
    let mut total = 0.0;
    let grad = seg
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            let (v, d) = focal_voxel(p as f64, l as f64, gamma);
            total += v;
            (d / m) as f32
        })
        .collect();
    Ok(LossValue { value: total / m, grad })
}

/// Mean absolute error between the masked prediction and the target. The
/// mask `seg > threshold` is a constant: gradient reaches `reg` only where
/// the mask is on.
pub fn masked_regression_loss(reg: &[f32], target: &[f32], seg: &[f32], threshold: f64) -> Result<LossValue> {
    check_len("masked_regression_loss", reg.len(), target.len())?;
    check_len("masked_regression_loss", reg.len(), seg.len())?;
    if reg.is_empty() {
        return Ok(LossValue { value: 0.0, grad: Vec::new() });
    }
    let m = reg.len() as f64;
    let mut total = 0.0;
    let grad = reg
        .iter()
        .zip(target)
        .zip(seg)
        .map(|((&r, &t), &s)| {
            let on = s as f64 > threshold;
            let diff = if on { r as f64 } else { 0.0 } - t as f64;
            total += diff.abs();
            match diff.partial_cmp(&0.0) {
                Some(std::cmp::Ordering::Greater) if on => (1.0 / m) as f32,
                Some(std::cmp::Ordering::Less) if on => (-1.0 / m) as f32,
                _ => 0.0,
            }
        })
        .collect();
    Ok(LossValue { value: total / m, grad })
}

/// `c * seg + reg`.
pub fn combined_loss(seg_loss: f64, reg_loss: f64, c: f64) -> f64 {
    c * seg_loss + reg_loss
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalancerState {
    /// Segmentation-loss coefficient.
    pub c: f64,
    /// Epoch index.
    pub t: usize,
}

impl BalancerState {
    pub fn new(c0: f64) -> Self {
        Self { c: c0, t: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalancerUpdate {
    pub state: BalancerState,
    /// Set when `rho_s` was zero and the coefficient was carried over.
    pub held: bool,
}

/// `c <- (0.5 c + rho_r / rho_s) / 1.5`.
pub fn update_balancer(state: BalancerState, rho_s: f64, rho_r: f64) -> BalancerUpdate {
    let t = state.t + 1;
    if rho_s == 0.0 || !rho_s.is_finite() || !rho_r.is_finite() {
        return BalancerUpdate {
            state: BalancerState { c: state.c, t },
            held: true,
        };
    }
    BalancerUpdate {
        state: BalancerState {
            c: (0.5 * state.c + rho_r / rho_s) / 1.5,
            t,
        },
        held: false,
    }
}
