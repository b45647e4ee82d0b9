//! Training loop, evaluation and dense pretraining.

use crate::checkpoint::{Checkpoint, DataCursor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flops::{forward_flops_masked, step_flops_kept};
use crate::ledger::{BudgetLedger, Phase, TraceRow};
use crate::mask::Mask;
use crate::model::{Model, ModelSpec};
use crate::optim::{lr_schedule, AdamW};
use crate::rng::stream;

/// How the learning rate evolves over a call to [`train_steps`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrPlan {
    /// Fixed learning rate.
    Constant(f64),
    /// Linear decay of the optimizer's base rate over `total` steps; the
    /// first step of the call sits at position `offset`.
    Linear { total: u64, offset: u64 },
}

impl LrPlan {
    fn lr_at(&self, j: u64, base: f64) -> Result<f64> {
        match *self {
            LrPlan::Constant(lr) => Ok(lr),
            LrPlan::Linear { total, offset } => lr_schedule((offset + j).min(total), total, base),
        }
    }
}

/// Runs exactly `n_steps` optimizer steps on batches from the checkpoint's
/// data cursor. With a mask, dropped weights stay zero after every step.
pub fn train_steps(
    ckpt: &mut Checkpoint,
    data: &Dataset,
    n_steps: u64,
    mask: Option<&Mask>,
    plan: LrPlan,
    ledger: &mut BudgetLedger,
    phase: Phase,
) -> Result<()> {
    ledger.ensure(n_steps)?;
    let spec = ckpt.model.spec().clone();
    let registry_total = spec.registry().total();
    let kept = mask.map_or(registry_total, Mask::kept);
    let sparsity = if registry_total == 0 {
        0.0
    } else {
        1.0 - kept as f64 / registry_total as f64
    };
    let batch_size = ckpt.cursor.batch_size();
    let flops = step_flops_kept(&spec, batch_size, kept);
    if let Some(m) = mask {
        ckpt.model.apply_mask(m)?;
    }
    for j in 0..n_steps {
        let idx = ckpt.cursor.next_batch();
        let batch = data.batch(&idx);
        let loss = ckpt.model.loss_and_grad(&batch, mask)?;
        if !loss.is_finite() {
            return Err(Error::NumericFailure {
                step: ledger.total_steps(),
            });
        }
        let lr = plan.lr_at(j, ckpt.optimizer.base_lr)?;
        ckpt.optimizer.step(&mut ckpt.model, lr, mask)?;
        ckpt.model.clear_grads();
        ckpt.step += 1;
        ledger.record_step(
            TraceRow {
                step: 0,
                phase,
                lr,
                kept,
                sparsity,
                loss,
                batch: batch_size,
            },
            flops,
        )?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

const EVAL_CHUNK: usize = 256;

/// Top-1 accuracy and mean cross-entropy over `indices`.
pub fn evaluate(model: &Model, data: &Dataset, indices: &[usize]) -> Result<EvalMetrics> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let classes = model.spec().classes;
    let mut correct = 0;
    let mut loss = 0.0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = data.batch(chunk);
        let logits = model.forward(&batch.inputs, None)?;
        for (row, &label) in logits.data().chunks(classes).zip(&batch.labels) {
            let mut best = 0;
            for c in 1..classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best == label {
                correct += 1;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
    }
    Ok(EvalMetrics {
        accuracy: correct as f64 / indices.len() as f64,
        loss: loss / indices.len() as f64,
        correct,
        count: indices.len(),
    })
}

/// Forward FLOPs of one evaluation pass over `n` samples.
pub fn eval_flops(spec: &ModelSpec, n: usize, mask: Option<&Mask>) -> u64 {
    forward_flops_masked(spec, n, mask)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn total_steps(&self, data: &Dataset) -> u64 {
        self.epochs * data.steps_per_epoch(self.batch_size)
    }
}

/// Untrained checkpoint: initialized weights, fresh optimizer, data cursor
/// over the training split.
pub fn init_checkpoint(
    spec: ModelSpec,
    data: &Dataset,
    cfg: &PretrainConfig,
) -> Result<Checkpoint> {
    let model = Model::init(spec, &mut stream(cfg.seed, "init", &[]))?;
    let optimizer = AdamW::new(&model, cfg.lr, cfg.weight_decay);
    let cursor = DataCursor::new(
        data.splits.train.clone(),
        cfg.batch_size,
        stream(cfg.seed, "data-order", &[]),
    )?;
    Ok(Checkpoint {
        model,
        optimizer,
        cursor,
        step: 0,
        metrics: Vec::new(),
    })
}

/// Trains until the checkpoint reaches the configured epoch budget, then
/// records validation accuracy. Resuming from any intermediate checkpoint
/// gives the same result as an uninterrupted run.
pub fn continue_pretraining(
    ckpt: &mut Checkpoint,
    data: &Dataset,
    cfg: &PretrainConfig,
    ledger: &mut BudgetLedger,
) -> Result<()> {
    let total = cfg.total_steps(data);
    if ckpt.step < total {
        let plan = LrPlan::Linear {
            total,
            offset: ckpt.step,
        };
        train_steps(
            ckpt,
            data,
            total - ckpt.step,
            None,
            plan,
            ledger,
            Phase::Pretrain,
        )?;
    }
    if !data.splits.val.is_empty() {
        let val = evaluate(&ckpt.model, data, &data.splits.val)?;
        ckpt.set_metric("val_accuracy", val.accuracy);
    }
    Ok(())
}

pub fn pretrain(
    spec: ModelSpec,
    data: &Dataset,
    cfg: &PretrainConfig,
    ledger: &mut BudgetLedger,
) -> Result<Checkpoint> {
    let mut ckpt = init_checkpoint(spec, data, cfg)?;
    continue_pretraining(&mut ckpt, data, cfg, ledger)?;
    Ok(ckpt)
}
