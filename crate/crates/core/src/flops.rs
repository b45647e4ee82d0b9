//! FLOP estimates for training steps.
//!
//! Only linear maps are counted (attention projections, feed-forward and
//! MLP weights, and the classification head); attention score products,
//! norms and activations are ignored. One multiply-add is two FLOPs, and a
//! training step costs three forward passes.

use crate::mask::Mask;
use crate::model::{ModelKind, ModelSpec};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearMap {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    /// Applications per sample (sequence length for token-wise maps).
    pub uses: usize,
    pub prunable: bool,
}

impl LinearMap {
    pub fn macs_per_sample(&self) -> u64 {
        (self.fan_in * self.fan_out * self.uses) as u64
    }
}

pub const TRAIN_STEP_FACTOR: u64 = 3;

pub fn linear_maps(spec: &ModelSpec) -> Vec<LinearMap> {
    let uses = spec.tokens_per_sample();
    spec.layout()
        .into_iter()
        .filter(|(name, shape, _)| name.ends_with(".weight") && shape.len() == 2)
        .map(|(name, shape, prunable)| LinearMap {
            uses: if spec.kind == ModelKind::TinyTransformer && name != "head.weight" {
                uses
            } else {
                1
            },
            fan_in: shape[0],
            fan_out: shape[1],
            name,
            prunable,
        })
        .collect()
}

/// Forward FLOPs with every prunable matrix at the given density.
pub fn forward_flops(spec: &ModelSpec, batch: usize, density: f64) -> f64 {
    linear_maps(spec)
        .iter()
        .map(|m| {
            let macs = m.macs_per_sample() as f64;
            2.0 * batch as f64 * if m.prunable { density * macs } else { macs }
        })
        .sum()
}

pub fn flops_per_step(spec: &ModelSpec, batch: usize, density: f64) -> f64 {
    TRAIN_STEP_FACTOR as f64 * forward_flops(spec, batch, density)
}

/// Exact integer forward FLOPs given the kept count of each prunable matrix
/// (`None` = dense).
pub fn forward_flops_masked(spec: &ModelSpec, batch: usize, mask: Option<&Mask>) -> u64 {
    let mut prunable_seen = 0;
    linear_maps(spec)
        .iter()
        .map(|m| {
            let macs = if m.prunable {
                let kept = match mask {
                    Some(mask) => mask.layers()[prunable_seen].bits.count_ones(),
                    None => m.fan_in * m.fan_out,
                };
                prunable_seen += 1;
                (kept * m.uses) as u64
            } else {
                m.macs_per_sample()
            };
            2 * batch as u64 * macs
        })
        .sum()
}

/// Training-step FLOPs given only the total kept prunable count. Valid
/// because every prunable map of a model shares the same `uses`.
pub fn step_flops_kept(spec: &ModelSpec, batch: usize, kept: usize) -> u64 {
    let maps = linear_maps(spec);
    let dense: u64 = maps
        .iter()
        .filter(|m| !m.prunable)
        .map(LinearMap::macs_per_sample)
        .sum();
    let uses = maps.iter().find(|m| m.prunable).map_or(0, |m| m.uses);
    TRAIN_STEP_FACTOR * 2 * batch as u64 * (dense + (kept * uses) as u64)
}
