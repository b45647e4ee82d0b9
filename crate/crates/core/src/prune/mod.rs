//! Mask-producing procedures.
//!
//! Every criterion scores the currently kept weights and drops the lowest
//! scores globally across all prunable parameters. Ties go to the smaller
//! canonical flat index, so results are deterministic. No criterion ever
//! revives a dropped weight.

mod baselines;
mod denoise;
mod imp;
mod isp;

pub use baselines::{oneshot_run, progressive_prune_run, Criterion, ProgressiveConfig};
pub use denoise::{denoised_prune, denoised_prune_to, union_adjust, DenoiserConfig, Protocol};
pub use imp::{imp_run, ImpConfig, Rewind};
pub use isp::{isp_run, PruneSchedule};

use rand::seq::index::sample;
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::{Batch, Model};
use crate::train::{evaluate, EvalMetrics};

/// Weights removed by one call at `rate` of the `kept` survivors.
pub fn removal_count(kept: usize, rate: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "prune rate {rate} not in [0, 1)"
        )));
    }
    Ok(((rate * kept as f64) + 1e-9).floor() as usize)
}

/// Kept count that realizes sparsity `target` over `total` weights.
pub fn kept_for_sparsity(total: usize, target: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::InvalidArgument(format!(
            "target sparsity {target} not in [0, 1)"
        )));
    }
    Ok(total - (target * total as f64).round() as usize)
}

/// Kept count after one call at `rate`, never going below `floor`.
pub fn clamped_target(kept: usize, rate: f64, floor: usize) -> Result<usize> {
    Ok((kept - removal_count(kept, rate)?).max(floor.min(kept)))
}

/// Number of calls at `rate` needed to go from `kept` down to `floor`,
/// simulating the integer rounding and the final clamp. `None` when the
/// rate is too small to make progress.
pub fn required_calls(mut kept: usize, rate: f64, floor: usize) -> Result<Option<usize>> {
    let mut calls = 0;
    while kept > floor {
        let next = clamped_target(kept, rate, floor)?;
        if next == kept {
            return Ok(None);
        }
        kept = next;
        calls += 1;
    }
    Ok(Some(calls))
}

/// Real-valued call count `⌈ln(1−S)/ln(1−s)⌉` ignoring integer rounding.
pub fn closed_form_calls(target: f64, rate: f64) -> usize {
    ((1.0 - target).ln() / (1.0 - rate).ln() - 1e-12)
        .ceil()
        .max(0.0) as usize
}

/// Drops the `remove` lowest-scoring kept weights. `scores` is indexed by
/// canonical flat position.
pub fn prune_lowest(mask: &Mask, scores: &[f64], remove: usize) -> Result<Mask> {
    if scores.len() != mask.total() {
        return Err(Error::ShapeMismatch {
            name: "prune scores".into(),
            expected: vec![mask.total()],
            actual: vec![scores.len()],
        });
    }
    let mut kept = mask.kept_indices();
    if remove > kept.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot remove {remove} of {} kept weights",
            kept.len()
        )));
    }
    kept.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut out = mask.clone();
    for &i in &kept[..remove] {
        out.set_flat(i, false);
    }
    Ok(out)
}

fn magnitudes(model: &Model) -> Vec<f64> {
    model.prunable_flat().into_iter().map(f64::abs).collect()
}

/// Global magnitude pruning of `rate` of the kept weights.
pub fn magnitude_prune(model: &Model, mask: &Mask, rate: f64) -> Result<Mask> {
    magnitude_prune_count(model, mask, removal_count(mask.kept(), rate)?)
}

pub fn magnitude_prune_count(model: &Model, mask: &Mask, remove: usize) -> Result<Mask> {
    prune_lowest(mask, &magnitudes(model), remove)
}

pub fn random_prune(mask: &Mask, rate: f64, rng: &mut impl Rng) -> Result<Mask> {
    random_prune_count(mask, removal_count(mask.kept(), rate)?, rng)
}

pub fn random_prune_count(mask: &Mask, remove: usize, rng: &mut impl Rng) -> Result<Mask> {
    let kept = mask.kept_indices();
    if remove > kept.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot remove {remove} of {} kept weights",
            kept.len()
        )));
    }
    let mut out = mask.clone();
    for i in sample(rng, kept.len(), remove) {
        out.set_flat(kept[i], false);
    }
    Ok(out)
}

/// Connection saliency `|w · ∂L/∂w|` on one batch, canonical flat order.
pub fn snip_scores(model: &Model, mask: &Mask, batch: &Batch) -> Result<Vec<f64>> {
    let mut m = model.clone();
    m.apply_mask(mask)?;
    m.loss_and_grad(batch, Some(mask))?;
    let mut out = Vec::with_capacity(mask.total());
    for p in m.params().iter().filter(|p| p.prunable) {
        let w = p.tensor.data();
        match p.tensor.grad() {
            Some(g) => out.extend(w.iter().zip(g).map(|(w, g)| (w * g).abs())),
            None => out.extend(std::iter::repeat_n(0.0, w.len())),
        }
    }
    Ok(out)
}

pub fn snip_prune(model: &Model, mask: &Mask, rate: f64, batch: &Batch) -> Result<Mask> {
    snip_prune_count(model, mask, removal_count(mask.kept(), rate)?, batch)
}

pub fn snip_prune_count(model: &Model, mask: &Mask, remove: usize, batch: &Batch) -> Result<Mask> {
    prune_lowest(mask, &snip_scores(model, mask, batch)?, remove)
}

/// Trims `union` back to exactly `target_kept` weights by dropping the
/// smallest magnitudes of `model` (the pre-look-ahead snapshot).
pub fn one_shot_adjust(union: &Mask, model: &Model, target_kept: usize) -> Result<Mask> {
    let kept = union.kept();
    if target_kept > kept {
        return Err(Error::InvalidArgument(format!(
            "adjustment cannot revive weights: target {target_kept} > kept {kept}"
        )));
    }
    magnitude_prune_count(model, union, kept - target_kept)
}

/// One prune call as recorded by a run.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneCall {
    pub index: usize,
    /// Run-local optimizer steps charged before the call.
    pub step: u64,
    pub target_kept: usize,
    pub kept: usize,
    pub sparsity: f64,
    pub mask: Mask,
}

impl PruneCall {
    fn new(index: usize, step: u64, target_kept: usize, mask: &Mask) -> Self {
        Self {
            index,
            step,
            target_kept,
            kept: mask.kept(),
            sparsity: mask.sparsity(),
            mask: mask.clone(),
        }
    }
}

/// Optimizer settings shared by every pruning run. Runs start from the
/// pretrained weights with a fresh optimizer at these settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunSettings {
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub checkpoint: Checkpoint,
    pub mask: Mask,
    pub calls: Vec<PruneCall>,
    pub val: EvalMetrics,
    pub test: EvalMetrics,
}

fn finish(
    checkpoint: Checkpoint,
    mask: Mask,
    calls: Vec<PruneCall>,
    data: &Dataset,
) -> Result<PruneOutcome> {
    let val = evaluate(&checkpoint.model, data, &data.splits.val)?;
    let test = evaluate(&checkpoint.model, data, &data.splits.test)?;
    Ok(PruneOutcome {
        checkpoint,
        mask,
        calls,
        val,
        test,
    })
}

fn check_monotone(prev: &Mask, next: &Mask) -> Result<()> {
    if next.is_subset(prev)? {
        Ok(())
    } else {
        Err(Error::InvalidArgument("prune call revived a weight".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{Registry, RegistryEntry};
    use crate::model::{ModelSpec, Parameter};
    use crate::rng::stream;
    use crate::tensor::Tensor;

    /// Identity-free 1-layer MLP whose only prunable tensor holds `w`.
    fn linear_model(w: &[f64], rows: usize) -> Model {
        let cols = w.len() / rows;
        let spec = ModelSpec::mlp(rows, cols, 1, cols);
        let params = vec![
            Parameter {
                name: "layers.0.weight".into(),
                tensor: Tensor::new(vec![rows, cols], w.to_vec()).unwrap(),
                prunable: true,
            },
            Parameter {
                name: "layers.0.bias".into(),
                tensor: Tensor::zeros(vec![cols]),
                prunable: false,
            },
            Parameter {
                name: "head.weight".into(),
                tensor: Tensor::new(
                    vec![cols, cols],
                    (0..cols * cols)
                        .map(|i| if i % (cols + 1) == 0 { 1.0 } else { 0.0 })
                        .collect(),
                )
                .unwrap(),
                prunable: false,
            },
            Parameter {
                name: "head.bias".into(),
                tensor: Tensor::zeros(vec![cols]),
                prunable: false,
            },
        ];
        Model::from_parameters(spec, params).unwrap()
    }

    /// Brute-force reference: sort every kept index by (score, index).
    fn oracle(keep: &[bool], scores: &[f64], remove: usize) -> Vec<bool> {
        let mut idx: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
        for _ in 0..remove {
            let (pos, _) = idx
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    scores[*a.1]
                        .partial_cmp(&scores[*b.1])
                        .unwrap()
                        .then(a.1.cmp(b.1))
                })
                .unwrap();
            idx.remove(pos);
        }
        (0..keep.len()).map(|i| idx.contains(&i)).collect()
    }

    #[test]
    fn magnitude_worked_example() {
        let m = linear_model(&[0.5, -0.1, 0.3, -0.7], 2);
        let full = Mask::ones(&m.registry());
        let out = magnitude_prune(&m, &full, 0.5).unwrap();
        assert_eq!(out.to_flat(), [true, false, false, true]);
        assert_eq!(magnitude_prune(&m, &full, 0.0).unwrap(), full);
        assert!(magnitude_prune(&m, &full, 1.0).is_err());
        assert!(magnitude_prune(&m, &full, -0.1).is_err());
    }

    #[test]
    fn magnitude_matches_oracle_on_random_weights() {
        let mut rng = stream(3, "t", &[]);
        for _ in 0..50 {
            let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let keep: Vec<bool> = (0..12).map(|_| rng.random_bool(0.7)).collect();
            let m = linear_model(&w, 3);
            let mask = Mask::from_flat(&m.registry(), &keep).unwrap();
            let rate = rng.random_range(0.0..0.99);
            let out = magnitude_prune(&m, &mask, rate).unwrap();
            let scores: Vec<f64> = w.iter().map(|v| v.abs()).collect();
            let remove = removal_count(mask.kept(), rate).unwrap();
            assert_eq!(out.to_flat(), oracle(&keep, &scores, remove));
            assert!(out.is_subset(&mask).unwrap());
        }
    }

    #[test]
    fn ties_prune_smaller_index_first() {
        let m = linear_model(&[0.2; 4], 2);
        let out = magnitude_prune(&m, &Mask::ones(&m.registry()), 0.5).unwrap();
        assert_eq!(out.to_flat(), [false, false, true, true]);
    }

    #[test]
    fn random_prune_is_seeded() {
        let reg = Registry::new(vec![RegistryEntry {
            name: "w".into(),
            shape: vec![10],
        }]);
        let full = Mask::ones(&reg);
        let a = random_prune(&full, 0.4, &mut stream(1, "r", &[])).unwrap();
        let b = random_prune(&full, 0.4, &mut stream(1, "r", &[])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.kept(), 6);
        assert_eq!(
            random_prune(&full, 0.0, &mut stream(1, "r", &[])).unwrap(),
            full
        );
        assert_eq!(
            random_prune(&full, 0.9, &mut stream(1, "r", &[]))
                .unwrap()
                .kept(),
            1
        );
    }

    #[test]
    fn snip_matches_hand_saliency() {
        // Input x = (1, 2) with identity head: logits = x·W, so
        // ∂L/∂W[i][j] = x_i (p_j − y_j).
        let w = [0.3, -0.2, 0.1, 0.4];
        let m = linear_model(&w, 2);
        let batch = Batch {
            inputs: crate::model::Inputs::Features {
                rows: 1,
                dim: 2,
                data: vec![1.0, 2.0],
            },
            labels: vec![0],
        };
        // The hidden layer is a ReLU, so compute the forward by hand.
        let h = [
            (1.0 * 0.3 + 2.0 * 0.1_f64).max(0.0),
            (1.0 * -0.2 + 2.0 * 0.4_f64).max(0.0),
        ];
        let z = (h[0].exp() + h[1].exp()).ln();
        let p = [(h[0] - z).exp(), (h[1] - z).exp()];
        let dz = [p[0] - 1.0, p[1]];
        let x = [1.0, 2.0];
        let mut expected = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                let gate = if h[j] > 0.0 { 1.0 } else { 0.0 };
                expected.push((w[i * 2 + j] * x[i] * dz[j] * gate).abs());
            }
        }
        let full = Mask::ones(&m.registry());
        let scores = snip_scores(&m, &full, &batch).unwrap();
        for (a, e) in scores.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{scores:?} vs {expected:?}");
        }
        let out = snip_prune(&m, &full, 0.5, &batch).unwrap();
        assert_eq!(out.to_flat(), oracle(&[true; 4], &expected, 2));
    }

    #[test]
    fn snip_prunes_zero_gradient_first() {
        // Second hidden unit is dead (negative pre-activation), so its
        // column has zero gradient and zero saliency.
        let m = linear_model(&[0.5, -0.5, 0.5, -0.5], 2);
        let batch = Batch {
            inputs: crate::model::Inputs::Features {
                rows: 1,
                dim: 2,
                data: vec![1.0, 1.0],
            },
            labels: vec![1],
        };
        let out = snip_prune(&m, &Mask::ones(&m.registry()), 0.5, &batch).unwrap();
        assert_eq!(out.to_flat(), [true, false, true, false]);
    }

    #[test]
    fn adjust_worked_example() {
        let m = linear_model(&[0.5, 0.1, 0.3, 0.7], 2);
        let union = Mask::from_flat(&m.registry(), &[true, false, true, true]).unwrap();
        let out = one_shot_adjust(&union, &m, 2).unwrap();
        assert_eq!(out.to_flat(), [true, false, false, true]);
        assert_eq!(one_shot_adjust(&union, &m, 3).unwrap(), union);
        assert!(one_shot_adjust(&union, &m, 4).is_err());
    }

    #[test]
    fn call_counts() {
        assert_eq!(closed_form_calls(0.5, 0.15), 5);
        assert_eq!(closed_form_calls(0.2775, 0.15), 2);
        assert_eq!(required_calls(10_000, 0.15, 5_000).unwrap(), Some(5));
        assert_eq!(required_calls(10_000, 0.15, 10_000).unwrap(), Some(0));
        assert_eq!(required_calls(3, 0.1, 1).unwrap(), None);
        assert_eq!(clamped_target(10_000, 0.15, 5_000).unwrap(), 8_500);
        assert_eq!(clamped_target(5_220, 0.15, 5_000).unwrap(), 5_000);
    }

    #[test]
    fn closed_form_sparsity_after_calls() {
        let mut kept = 1_000_000usize;
        let mut seq = Vec::new();
        for _ in 0..5 {
            kept -= removal_count(kept, 0.15).unwrap();
            seq.push(1.0 - kept as f64 / 1e6);
        }
        assert!((seq[1] - 0.2775).abs() < 1e-6);
        assert!((seq[4] - 0.556_294_7).abs() < 1e-6);
    }
}
