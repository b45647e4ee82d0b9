//! Single-budget baselines: prune once at step 0 (magnitude, random, SNIP)
//! or prune by magnitude at fixed intervals.

use super::{
    check_monotone, clamped_target, finish, kept_for_sparsity, magnitude_prune_count,
    random_prune_count, snip_prune_count, PruneCall, PruneOutcome, RunSettings,
};
use crate::checkpoint::{Checkpoint, DataCursor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ledger::{BudgetLedger, Phase};
use crate::mask::Mask;
use crate::rng::stream;
use crate::train::{train_steps, LrPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Criterion {
    Magnitude,
    Random,
    Snip,
}

/// Prunes straight to `target` sparsity at step 0, then fine-tunes `total`
/// steps under the mask.
pub fn oneshot_run(
    pretrained: &Checkpoint,
    criterion: Criterion,
    target: f64,
    total: u64,
    settings: &RunSettings,
    data: &Dataset,
    ledger: &mut BudgetLedger,
) -> Result<PruneOutcome> {
    ledger.ensure(total)?;
    let mut ckpt = pretrained.with_fresh_optimizer(settings.lr, settings.weight_decay);
    let full = Mask::ones(&ckpt.model.registry());
    let target_kept = kept_for_sparsity(full.total(), target)?;
    let remove = full.kept() - target_kept;
    let mask = match criterion {
        Criterion::Magnitude => magnitude_prune_count(&ckpt.model, &full, remove)?,
        Criterion::Random => random_prune_count(
            &full,
            remove,
            &mut stream(settings.seed, "random-prune", &[]),
        )?,
        Criterion::Snip => {
            let mut cursor = DataCursor::new(
                data.splits.train.clone(),
                ckpt.cursor.batch_size(),
                stream(settings.seed, "snip-batch", &[]),
            )?;
            let batch = data.batch(&cursor.next_batch());
            snip_prune_count(&ckpt.model, &full, remove, &batch)?
        }
    };
    ckpt.model.apply_mask(&mask)?;
    let calls = vec![PruneCall::new(0, 0, target_kept, &mask)];
    let plan = LrPlan::Linear { total, offset: 0 };
    train_steps(
        &mut ckpt,
        data,
        total,
        Some(&mask),
        plan,
        ledger,
        Phase::FineTune,
    )?;
    finish(ckpt, mask, calls, data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProgressiveConfig {
    /// `k′`: number of equal training intervals.
    pub intervals: usize,
    /// Per-call rate; defaults to `1 − (1−S)^{1/k′}`.
    pub rate: Option<f64>,
    pub target: f64,
    pub total: u64,
}

impl ProgressiveConfig {
    pub fn rate(&self) -> f64 {
        self.rate
            .unwrap_or_else(|| 1.0 - (1.0 - self.target).powf(1.0 / self.intervals as f64))
    }

    /// Interval lengths summing to `total`; earlier intervals take the
    /// remainder one step each.
    pub fn interval_lengths(&self) -> Vec<u64> {
        let k = self.intervals as u64;
        (0..k)
            .map(|j| self.total / k + u64::from(j < self.total % k))
            .collect()
    }
}

/// Splits `total` into `k′` intervals. Each interval opens with a magnitude
/// prune at the per-call rate (the last interval's prune lands exactly on
/// the target) and then trains under the new mask.
pub fn progressive_prune_run(
    pretrained: &Checkpoint,
    cfg: &ProgressiveConfig,
    settings: &RunSettings,
    data: &Dataset,
    ledger: &mut BudgetLedger,
) -> Result<PruneOutcome> {
    if cfg.intervals == 0 {
        return Err(Error::InvalidArgument(
            "progressive pruning needs at least one interval".into(),
        ));
    }
    let rate = cfg.rate();
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "prune rate {rate} not in [0, 1)"
        )));
    }
    ledger.ensure(cfg.total)?;
    let mut ckpt = pretrained.with_fresh_optimizer(settings.lr, settings.weight_decay);
    let mut mask = Mask::ones(&ckpt.model.registry());
    let floor = kept_for_sparsity(mask.total(), cfg.target)?;
    let start = ledger.total_steps();
    let mut calls = Vec::new();
    for (j, len) in cfg.interval_lengths().into_iter().enumerate() {
        if mask.kept() > floor {
            let target = if j + 1 == cfg.intervals {
                floor
            } else {
                clamped_target(mask.kept(), rate, floor)?
            };
            let next = magnitude_prune_count(&ckpt.model, &mask, mask.kept() - target)?;
            check_monotone(&mask, &next)?;
            mask = next;
            ckpt.model.apply_mask(&mask)?;
            calls.push(PruneCall::new(
                calls.len(),
                ledger.total_steps() - start,
                target,
                &mask,
            ));
        }
        let phase = if mask.kept() <= floor {
            Phase::FineTune
        } else {
            Phase::MaskGeneration
        };
        let plan = LrPlan::Linear {
            total: cfg.total,
            offset: ledger.total_steps() - start,
        };
        train_steps(&mut ckpt, data, len, Some(&mask), plan, ledger, phase)?;
    }
    finish(ckpt, mask, calls, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intervals_sum_to_total() {
        for total in [0, 1, 7, 100, 2_501] {
            for k in 1..9 {
                let cfg = ProgressiveConfig {
                    intervals: k,
                    rate: None,
                    target: 0.5,
                    total,
                };
                let lens = cfg.interval_lengths();
                assert_eq!(lens.len(), k);
                assert_eq!(lens.iter().sum::<u64>(), total);
                assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
            }
        }
    }

    #[test]
    fn geometric_rate_reaches_target() {
        let cfg = ProgressiveConfig {
            intervals: 4,
            rate: None,
            target: 0.5,
            total: 100,
        };
        assert!(((1.0 - cfg.rate()).powi(4) - 0.5).abs() < 1e-12);
    }
}
