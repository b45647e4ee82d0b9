//! The single-budget ISP driver: growing bursts of training, each followed
//! by a denoised prune call, then one fine-tune for the rest of the budget.

use super::{
    check_monotone, clamped_target, closed_form_calls, denoised_prune_to, finish,
    kept_for_sparsity, required_calls, DenoiserConfig, PruneCall, PruneOutcome, RunSettings,
};
use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ledger::{BudgetLedger, Phase};
use crate::mask::Mask;
use crate::optim::lr_schedule;
use crate::train::{train_steps, LrPlan};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneSchedule {
    /// `t`: steps of the first training burst; burst `i` runs `(i+1)·t`.
    pub seed_steps: u64,
    /// `s`: fraction of surviving weights removed per call.
    pub rate: f64,
    /// `S`: final sparsity.
    pub target: f64,
    /// `M`: steps available to the mask-generation loop.
    pub mask_budget: u64,
    /// `T`: every optimizer step of the run, look-aheads included.
    pub total: u64,
}

/// Step accounting of one ISP run, fixed before any training happens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IspPlan {
    pub calls: usize,
    pub loop_steps: u64,
    pub look_ahead_steps: u64,
    pub fine_tune_steps: u64,
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return bad(format!("compression rate {} not in (0, 1)", self.rate));
        }
        if !(self.target > 0.0 && self.target < 1.0) {
            return bad(format!("target sparsity {} not in (0, 1)", self.target));
        }
        if self.seed_steps == 0 {
            return bad("seed steps must be at least 1".into());
        }
        if self.mask_budget > self.total {
            return bad(format!(
                "mask budget {} exceeds total budget {}",
                self.mask_budget, self.total
            ));
        }
        Ok(())
    }

    /// Training steps of the first `calls` bursts: `t · calls(calls+1)/2`.
    pub fn loop_steps(&self, calls: usize) -> u64 {
        let c = calls as u64;
        self.seed_steps * c * (c + 1) / 2
    }

    /// Largest `k` with `Σ_{i=0..k} (i+1)·t ≤ M`, or `None` when even the
    /// first burst does not fit.
    pub fn max_index(&self) -> Option<usize> {
        let mut k = 0usize;
        if self.loop_steps(1) > self.mask_budget {
            return None;
        }
        while self.loop_steps(k + 2) <= self.mask_budget {
            k += 1;
        }
        Some(k)
    }

    /// Loop iterations available: `k + 1`.
    pub fn iterations(&self) -> usize {
        self.max_index().map_or(0, |k| k + 1)
    }

    /// Validates reachability and the budget for a model with `total`
    /// prunable weights, `initial_kept` of them currently kept.
    pub fn plan(
        &self,
        total: usize,
        initial_kept: usize,
        denoiser: &DenoiserConfig,
    ) -> Result<IspPlan> {
        self.validate()?;
        denoiser.validate()?;
        let floor = kept_for_sparsity(total, self.target)?;
        let available = self.iterations();
        let calls = match required_calls(initial_kept, self.rate, floor)? {
            Some(r) if r <= available => r,
            Some(r) => {
                return Err(Error::UnreachableSparsity {
                    target: self.target,
                    rate: self.rate,
                    required: r,
                    available,
                })
            }
            None => {
                return Err(Error::UnreachableSparsity {
                    target: self.target,
                    rate: self.rate,
                    required: closed_form_calls(self.target, self.rate),
                    available,
                })
            }
        };
        let loop_steps = self.loop_steps(calls);
        let look_ahead_steps = calls as u64 * denoiser.steps_per_call();
        let spent = loop_steps + look_ahead_steps;
        if spent > self.total {
            return Err(Error::BudgetExceeded {
                requested: spent,
                remaining: self.total,
            });
        }
        Ok(IspPlan {
            calls,
            loop_steps,
            look_ahead_steps,
            fine_tune_steps: self.total - spent,
        })
    }
}

/// Runs ISP from `pretrained` with a fresh optimizer. The main-line
/// learning rate decays linearly over `T` and its position counts every
/// charged step, look-aheads included. The loop exits as soon as the
/// target is met; the rest of `T` is one fine-tune with the optimizer
/// state carried over.
pub fn isp_run(
    pretrained: &Checkpoint,
    initial: Option<&Mask>,
    schedule: &PruneSchedule,
    denoiser: &DenoiserConfig,
    settings: &RunSettings,
    data: &Dataset,
    ledger: &mut BudgetLedger,
) -> Result<PruneOutcome> {
    let registry = pretrained.model.registry();
    let mut mask = initial.cloned().unwrap_or_else(|| Mask::ones(&registry));
    let plan = schedule.plan(registry.total(), mask.kept(), denoiser)?;
    ledger.ensure(schedule.total)?;
    let floor = kept_for_sparsity(registry.total(), schedule.target)?;
    let total = schedule.total;
    let start = ledger.total_steps();
    let mut ckpt = pretrained.with_fresh_optimizer(settings.lr, settings.weight_decay);
    ckpt.model.apply_mask(&mask)?;
    let mut calls = Vec::with_capacity(plan.calls);
    for i in 0..plan.calls {
        let pos = ledger.total_steps() - start;
        let burst = (i as u64 + 1) * schedule.seed_steps;
        let lr_plan = LrPlan::Linear { total, offset: pos };
        train_steps(
            &mut ckpt,
            data,
            burst,
            Some(&mask),
            lr_plan,
            ledger,
            Phase::MaskGeneration,
        )?;
        let pos = ledger.total_steps() - start;
        let lr = lr_schedule(pos.min(total), total, settings.lr)?;
        let target = clamped_target(mask.kept(), schedule.rate, floor)?;
        let next = denoised_prune_to(&ckpt, &mask, denoiser, target, lr, data, ledger, i)?;
        check_monotone(&mask, &next)?;
        mask = next;
        ckpt.model.apply_mask(&mask)?;
        calls.push(PruneCall::new(i, pos, target, &mask));
    }
    let spent = ledger.total_steps() - start;
    let lr_plan = LrPlan::Linear {
        total,
        offset: spent,
    };
    train_steps(
        &mut ckpt,
        data,
        total - spent,
        Some(&mask),
        lr_plan,
        ledger,
        Phase::FineTune,
    )?;
    finish(ckpt, mask, calls, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule(t: u64, m: u64) -> PruneSchedule {
        PruneSchedule {
            seed_steps: t,
            rate: 0.15,
            target: 0.5,
            mask_budget: m,
            total: 1_000,
        }
    }

    #[test]
    fn k_from_mask_budget() {
        assert_eq!(schedule(10, 100).max_index(), Some(3));
        assert_eq!(schedule(10, 99).max_index(), Some(2));
        assert_eq!(schedule(10, 9).max_index(), None);
        assert_eq!(schedule(10, 10).max_index(), Some(0));
    }

    #[test]
    fn k_brackets_mask_budget() {
        for t in 1..8 {
            for m in t..200 {
                let s = schedule(t, m);
                let k = s.max_index().unwrap();
                assert!(s.loop_steps(k + 1) <= m && m < s.loop_steps(k + 2));
            }
        }
    }

    #[test]
    fn plan_reports_required_calls() {
        let d = DenoiserConfig::new(5, 50, 0);
        let err = schedule(10, 100).plan(10_000, 10_000, &d).unwrap_err();
        assert!(matches!(
            err,
            Error::UnreachableSparsity {
                required: 5,
                available: 4,
                ..
            }
        ));
        let plan = schedule(10, 150).plan(10_000, 10_000, &d).unwrap_err();
        assert!(matches!(
            plan,
            Error::BudgetExceeded {
                requested: 1_400,
                ..
            }
        ));
        let mut ok = schedule(10, 150);
        ok.total = 2_000;
        let plan = ok.plan(10_000, 10_000, &d).unwrap();
        assert_eq!(
            plan,
            IspPlan {
                calls: 5,
                loop_steps: 150,
                look_ahead_steps: 1_250,
                fine_tune_steps: 600
            }
        );
        let zero = ok.plan(10_000, 5_000, &d).unwrap();
        assert_eq!(zero.calls, 0);
        assert_eq!(zero.fine_tune_steps, 2_000);
    }
}
