//! Step and FLOP accounting per training phase.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    MaskGeneration,
    LookAhead,
    FineTune,
    WeakTrain,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::MaskGeneration => "mask-generation",
            Phase::LookAhead => "look-ahead",
            Phase::FineTune => "fine-tune",
            Phase::WeakTrain => "weak-train",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTotals {
    pub steps: u64,
    pub flops: u64,
}

/// One optimizer step as seen by the ledger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub phase: Phase,
    pub lr: f64,
    pub kept: usize,
    pub sparsity: f64,
    pub loss: f64,
    pub batch: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub limit: Option<u64>,
    pub phases: BTreeMap<Phase, PhaseTotals>,
    pub total_steps: u64,
    pub total_flops: u64,
    pub eval_passes: u64,
    pub eval_flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BudgetLedger {
    limit: Option<u64>,
    phases: BTreeMap<Phase, PhaseTotals>,
    eval_passes: u64,
    eval_flops: u64,
    trace: Vec<TraceRow>,
}

impl BudgetLedger {
    pub fn unlimited() -> Self {
        Self::default()
    }

    /// A ledger that refuses to charge more than `limit` optimizer steps.
    pub fn with_limit(limit: u64) -> Self {
        Self {
            limit: Some(limit),
            ..Self::default()
        }
    }

    pub fn limit(&self) -> Option<u64> {
        self.limit
    }

    pub fn total_steps(&self) -> u64 {
        self.phases.values().map(|p| p.steps).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.phases.values().map(|p| p.flops).sum()
    }

    pub fn phase(&self, phase: Phase) -> PhaseTotals {
        self.phases.get(&phase).copied().unwrap_or_default()
    }

    pub fn remaining(&self) -> Option<u64> {
        self.limit.map(|l| l.saturating_sub(self.total_steps()))
    }

    /// Fails when `steps` more would overrun the limit.
    pub fn ensure(&self, steps: u64) -> Result<()> {
        match self.remaining() {
            Some(remaining) if steps > remaining => Err(Error::BudgetExceeded {
                requested: steps,
                remaining,
            }),
            _ => Ok(()),
        }
    }

    pub fn record_step(&mut self, mut row: TraceRow, flops: u64) -> Result<()> {
        self.ensure(1)?;
        row.step = self.total_steps();
        let totals = self.phases.entry(row.phase).or_default();
        totals.steps += 1;
        totals.flops += flops;
        self.trace.push(row);
        Ok(())
    }

    pub fn record_eval(&mut self, passes: u64, flops: u64) {
        self.eval_passes += passes;
        self.eval_flops += flops;
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn summary(&self) -> LedgerSummary {
        LedgerSummary {
            limit: self.limit,
            phases: self.phases.clone(),
            total_steps: self.total_steps(),
            total_flops: self.total_flops(),
            eval_passes: self.eval_passes,
            eval_flops: self.eval_flops,
        }
    }
}
