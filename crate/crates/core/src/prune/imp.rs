//! Iterative magnitude pruning with weight rewinding (lottery tickets).

use super::{
    check_monotone, clamped_target, closed_form_calls, finish, kept_for_sparsity,
    magnitude_prune_count, required_calls, PruneCall, PruneOutcome, RunSettings,
};
use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ledger::{BudgetLedger, Phase};
use crate::mask::Mask;
use crate::train::{train_steps, LrPlan};

/// Where surviving weights return to after each round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rewind {
    /// The pretrained weights.
    Init,
    /// The weights after this many steps of the first round.
    Step(u64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImpConfig {
    pub rounds: usize,
    pub per_round_budget: u64,
    pub rate: f64,
    pub target: f64,
    pub rewind: Rewind,
}

impl ImpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidArgument(
                "IMP needs at least one round".into(),
            ));
        }
        if let Rewind::Step(k) = self.rewind {
            if k > self.per_round_budget {
                return Err(Error::InvalidArgument(format!(
                    "rewind step {k} beyond round budget {}",
                    self.per_round_budget
                )));
            }
        }
        Ok(())
    }
}

/// Each round trains `per_round_budget` steps from the rewind point with a
/// fresh optimizer under the current mask, then prunes `rate` of the
/// survivors by magnitude (the last needed round lands exactly on the
/// target). Rounds stop once the target is met; the final ticket is then
/// trained one more `per_round_budget` from the rewind point.
pub fn imp_run(
    pretrained: &Checkpoint,
    cfg: &ImpConfig,
    settings: &RunSettings,
    data: &Dataset,
    ledger: &mut BudgetLedger,
) -> Result<PruneOutcome> {
    cfg.validate()?;
    let registry = pretrained.model.registry();
    let floor = kept_for_sparsity(registry.total(), cfg.target)?;
    match required_calls(registry.total(), cfg.rate, floor)? {
        Some(r) if r <= cfg.rounds => {}
        found => {
            return Err(Error::UnreachableSparsity {
                target: cfg.target,
                rate: cfg.rate,
                required: found.unwrap_or_else(|| closed_form_calls(cfg.target, cfg.rate)),
                available: cfg.rounds,
            })
        }
    }
    let budget = cfg.per_round_budget;
    let start = ledger.total_steps();
    let fresh = |c: &Checkpoint| c.with_fresh_optimizer(settings.lr, settings.weight_decay);
    let mut rewind_point = fresh(pretrained);
    let mut mask = Mask::ones(&registry);
    let mut calls = Vec::new();
    for round in 0..cfg.rounds {
        if mask.kept() <= floor {
            break;
        }
        let mut run = fresh(&rewind_point);
        run.model.apply_mask(&mask)?;
        match (round, cfg.rewind) {
            (0, Rewind::Step(k)) => {
                let plan = LrPlan::Linear {
                    total: budget,
                    offset: 0,
                };
                train_steps(
                    &mut run,
                    data,
                    k,
                    Some(&mask),
                    plan,
                    ledger,
                    Phase::MaskGeneration,
                )?;
                rewind_point = run.clone();
                let plan = LrPlan::Linear {
                    total: budget,
                    offset: k,
                };
                train_steps(
                    &mut run,
                    data,
                    budget - k,
                    Some(&mask),
                    plan,
                    ledger,
                    Phase::MaskGeneration,
                )?;
            }
            _ => {
                let plan = LrPlan::Linear {
                    total: budget,
                    offset: 0,
                };
                train_steps(
                    &mut run,
                    data,
                    budget,
                    Some(&mask),
                    plan,
                    ledger,
                    Phase::MaskGeneration,
                )?;
            }
        }
        let target = clamped_target(mask.kept(), cfg.rate, floor)?;
        let next = magnitude_prune_count(&run.model, &mask, mask.kept() - target)?;
        check_monotone(&mask, &next)?;
        mask = next;
        calls.push(PruneCall::new(
            round,
            ledger.total_steps() - start,
            target,
            &mask,
        ));
    }
    let mut ckpt = fresh(&rewind_point);
    ckpt.model.apply_mask(&mask)?;
    let plan = LrPlan::Linear {
        total: budget,
        offset: 0,
    };
    train_steps(
        &mut ckpt,
        data,
        budget,
        Some(&mask),
        plan,
        ledger,
        Phase::FineTune,
    )?;
    finish(ckpt, mask, calls, data)
}
