//! Incremental sector bounds of tanh layers over a box, and the
//! block-diagonal `Q1`, `Q2` matrices built from them.

use crate::nn_model::FeedforwardNet;
use crate::numerics::{block_diag, Mat, Vector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest slope gap `β − α` used when a layer is effectively linear.
pub const MIN_SECTOR_GAP: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SectorError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid interval [{lo}, {hi}]")]
    InvalidInterval { lo: f64, hi: f64 },
    #[error("invalid sector bounds: {0}")]
    InvalidBounds(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self, SectorError> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(SectorError::InvalidInterval { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Image under the monotone map `tanh`.
    pub fn tanh(&self) -> Self {
        Self {
            lo: self.lo.tanh(),
            hi: self.hi.tanh(),
        }
    }
}

/// Exact range of `W v + b` for `v` in the box `input`.
pub fn affine_preactivation_interval(w: &Mat, b: &Vector, input: &[Interval]) -> Result<Vec<Interval>, SectorError> {
    if w.ncols() != input.len() || w.nrows() != b.len() {
        return Err(SectorError::Dimension(format!(
            "W is {}x{}, bias has length {}, input box has dimension {}",
            w.nrows(),
            w.ncols(),
            b.len(),
            input.len()
        )));
    }
    Ok((0..w.nrows())
        .map(|r| {
            let mut center = b[r];
            let mut radius = 0.0;
            for (c, iv) in input.iter().enumerate() {
                center += w[(r, c)] * 0.5 * (iv.lo + iv.hi);
                radius += w[(r, c)].abs() * 0.5 * iv.width();
            }
            Interval {
                lo: center - radius,
                hi: center + radius,
            }
        })
        .collect())
}

fn dtanh(v: f64) -> f64 {
    let t = v.tanh();
    1.0 - t * t
}

/// Min and max of `1 − tanh²` over `v`; these bound every difference
/// quotient of tanh on `v`.
pub fn tanh_slope_bounds(v: Interval) -> (f64, f64) {
    let d_max = v.lo.abs().max(v.hi.abs());
    let d_min = if v.contains(0.0) { 0.0 } else { v.lo.abs().min(v.hi.abs()) };
    (dtanh(d_max), dtanh(d_min))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSector {
    pub alpha: f64,
    pub beta: f64,
    pub per_neuron: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorBounds {
    pub per_layer: Vec<LayerSector>,
    /// Preactivation ranges per hidden layer; empty when the bounds were
    /// supplied directly instead of propagated.
    pub preactivation_ranges: Vec<Vec<Interval>>,
}

impl SectorBounds {
    /// Bounds given as one `(α, β)` per hidden layer, applied to every neuron.
    pub fn from_layer_scalars(net: &FeedforwardNet, pairs: &[(f64, f64)]) -> Result<Self, SectorError> {
        let k = net.hidden_layers();
        if pairs.len() != k {
            return Err(SectorError::Dimension(format!("{} sector pairs for {k} hidden layers", pairs.len())));
        }
        let per_layer = pairs
            .iter()
            .enumerate()
            .map(|(i, &(alpha, beta))| {
                if !(alpha.is_finite() && beta.is_finite() && 0.0 <= alpha && alpha <= beta) {
                    return Err(SectorError::InvalidBounds(format!("layer {}: ({alpha}, {beta})", i + 1)));
                }
                Ok(LayerSector {
                    alpha,
                    beta,
                    per_neuron: vec![(alpha, beta); net.dims()[i + 1]],
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            per_layer,
            preactivation_ranges: Vec::new(),
        })
    }

    pub fn layers(&self) -> usize {
        self.per_layer.len()
    }

    /// `α^i` for the 1-based hidden layer `i`.
    pub fn alpha(&self, i: usize) -> f64 {
        self.per_layer[i - 1].alpha
    }

    pub fn beta(&self, i: usize) -> f64 {
        self.per_layer[i - 1].beta
    }

    /// `β^i − α^i`, clamped below at [`MIN_SECTOR_GAP`].
    pub fn gap(&self, i: usize) -> f64 {
        let gap = self.beta(i) - self.alpha(i);
        if gap < MIN_SECTOR_GAP {
            log::warn!("sector gap {gap:.3e} of layer {i} clamped to {MIN_SECTOR_GAP:e}");
            MIN_SECTOR_GAP
        } else {
            gap
        }
    }

    pub(crate) fn check_against(&self, net: &FeedforwardNet) -> Result<(), SectorError> {
        if self.layers() != net.hidden_layers() {
            return Err(SectorError::Dimension(format!(
                "bounds cover {} layers, network has {}",
                self.layers(),
                net.hidden_layers()
            )));
        }
        Ok(())
    }
}

/// Interval propagation of the box through every hidden layer.
pub fn propagate_sector_bounds(net: &FeedforwardNet, bounds: &[Interval]) -> Result<SectorBounds, SectorError> {
    if bounds.len() != net.state_dim() {
        return Err(SectorError::Dimension(format!(
            "box has dimension {}, network input has {}",
            bounds.len(),
            net.state_dim()
        )));
    }
    let mut input = bounds.to_vec();
    let mut per_layer = Vec::new();
    let mut ranges = Vec::new();
    for i in 0..net.hidden_layers() {
        let pre = affine_preactivation_interval(&net.weights()[i], &net.biases()[i], &input)?;
        let per_neuron: Vec<(f64, f64)> = pre.iter().map(|&v| tanh_slope_bounds(v)).collect();
        let alpha = per_neuron.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let beta = per_neuron.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        per_layer.push(LayerSector { alpha, beta, per_neuron });
        input = pre.iter().map(Interval::tanh).collect();
        ranges.push(pre);
    }
    Ok(SectorBounds {
        per_layer,
        preactivation_ranges: ranges,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QPair {
    pub q1: Mat,
    pub q2: Mat,
}

/// `Q1 = BD(α^i W^i)`, `Q2 = BD(β^i W^i)` over hidden layers `first..=last`
/// (1-based).
pub fn build_q_range(net: &FeedforwardNet, bounds: &SectorBounds, first: usize, last: usize) -> Result<QPair, SectorError> {
    bounds.check_against(net)?;
    if first == 0 || last > net.hidden_layers() || first > last {
        return Err(SectorError::Dimension(format!(
            "layer range {first}..={last} outside 1..={}",
            net.hidden_layers()
        )));
    }
    let scaled = |f: &dyn Fn(usize) -> f64| -> Vec<Mat> {
        (first..=last).map(|i| &net.weights()[i - 1] * f(i)).collect()
    };
    Ok(QPair {
        q1: block_diag(&scaled(&|i| bounds.alpha(i))),
        q2: block_diag(&scaled(&|i| bounds.beta(i))),
    })
}

pub fn build_q_matrices(net: &FeedforwardNet, bounds: &SectorBounds) -> Result<QPair, SectorError> {
    build_q_range(net, bounds, 1, net.hidden_layers())
}
