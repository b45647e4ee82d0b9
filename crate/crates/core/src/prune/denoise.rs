//! Denoised pruning: several short look-ahead runs from one snapshot each
//! propose a magnitude mask; their union is trimmed back to the target
//! count using the snapshot's own magnitudes.

use rand::Rng;

use super::{magnitude_prune_count, one_shot_adjust, removal_count};
use crate::checkpoint::{Checkpoint, DataCursor};
use crate::data::{subsample, Dataset};
use crate::error::{Error, Result};
use crate::ledger::{BudgetLedger, Phase};
use crate::mask::Mask;
use crate::model::Model;
use crate::optim::AdamW;
use crate::rng::stream;
use crate::train::{train_steps, LrPlan};

/// Training protocol of one look-ahead run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Protocol {
    pub lr_multiplier: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub count: usize,
    pub look_ahead: u64,
    pub lr_multipliers: Vec<f64>,
    pub weight_decays: Vec<f64>,
    /// Fraction of the training split each look-ahead samples from.
    pub subset_fraction: f64,
    /// Start each look-ahead with zeroed optimizer moments instead of the
    /// snapshot's optimizer state.
    pub fresh_optimizer: bool,
    pub seed: u64,
}

impl DenoiserConfig {
    pub fn new(count: usize, look_ahead: u64, seed: u64) -> Self {
        Self {
            count,
            look_ahead,
            lr_multipliers: vec![0.5, 1.0, 2.0],
            weight_decays: vec![0.0, 0.1],
            subset_fraction: 0.1,
            fresh_optimizer: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count > 0 {
            if self.look_ahead == 0 {
                return Err(Error::InvalidArgument(
                    "look-ahead steps must be positive".into(),
                ));
            }
            if self.lr_multipliers.is_empty() || self.weight_decays.is_empty() {
                return Err(Error::InvalidArgument("protocol pool is empty".into()));
            }
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "subset fraction {} not in (0, 1]",
                self.subset_fraction
            )));
        }
        Ok(())
    }

    /// Look-ahead steps charged by one call.
    pub fn steps_per_call(&self) -> u64 {
        self.count as u64 * self.look_ahead
    }

    /// Protocol for denoiser `n` of call `call`, uniform over the pool.
    pub fn protocol(&self, call: usize, n: usize) -> Protocol {
        let mut rng = stream(self.seed, "denoiser-protocol", &[call as u64, n as u64]);
        let pool = self.lr_multipliers.len() * self.weight_decays.len();
        let pick = rng.random_range(0..pool);
        Protocol {
            lr_multiplier: self.lr_multipliers[pick / self.weight_decays.len()],
            weight_decay: self.weight_decays[pick % self.weight_decays.len()],
        }
    }
}

/// Denoised pruning at `rate` of the kept weights. `lr` is the main-line
/// learning rate at the moment of the call; look-aheads scale it by their
/// protocol multiplier. `call` keys the per-denoiser random streams.
#[allow(clippy::too_many_arguments)]
pub fn denoised_prune(
    snapshot: &Checkpoint,
    mask: &Mask,
    cfg: &DenoiserConfig,
    rate: f64,
    lr: f64,
    data: &Dataset,
    ledger: &mut BudgetLedger,
    call: usize,
) -> Result<Mask> {
    let target = mask.kept() - removal_count(mask.kept(), rate)?;
    denoised_prune_to(snapshot, mask, cfg, target, lr, data, ledger, call)
}

/// Denoised pruning down to exactly `target_kept` weights. The snapshot is
/// never touched; each look-ahead trains its own copy.
#[allow(clippy::too_many_arguments)]
pub fn denoised_prune_to(
    snapshot: &Checkpoint,
    mask: &Mask,
    cfg: &DenoiserConfig,
    target_kept: usize,
    lr: f64,
    data: &Dataset,
    ledger: &mut BudgetLedger,
    call: usize,
) -> Result<Mask> {
    cfg.validate()?;
    let kept = mask.kept();
    if target_kept > kept {
        return Err(Error::InvalidArgument(format!(
            "target {target_kept} exceeds kept count {kept}"
        )));
    }
    ledger.ensure(cfg.steps_per_call())?;
    let mut looked = Vec::with_capacity(cfg.count);
    for n in 0..cfg.count {
        let protocol = cfg.protocol(call, n);
        let mut sub_rng = stream(cfg.seed, "denoiser-data", &[call as u64, n as u64]);
        let pool = subsample(&data.splits.train, cfg.subset_fraction, &mut sub_rng)?;
        let mut look = snapshot.clone();
        look.cursor = DataCursor::new(pool, snapshot.cursor.batch_size(), sub_rng)?;
        if cfg.fresh_optimizer {
            look.optimizer = AdamW::new(&look.model, lr, protocol.weight_decay);
        } else {
            look.optimizer.weight_decay = protocol.weight_decay;
        }
        train_steps(
            &mut look,
            data,
            cfg.look_ahead,
            Some(mask),
            LrPlan::Constant(protocol.lr_multiplier * lr),
            ledger,
            Phase::LookAhead,
        )?;
        looked.push(look.model);
    }
    union_adjust(&snapshot.model, mask, &looked, target_kept)
}

/// Union of the snapshot's magnitude mask with one magnitude mask per
/// look-ahead model, each removing down to `target_kept`, then trimmed to
/// exactly `target_kept` by snapshot magnitude.
pub fn union_adjust(
    snapshot: &Model,
    mask: &Mask,
    looked: &[Model],
    target_kept: usize,
) -> Result<Mask> {
    let remove = mask.kept().checked_sub(target_kept).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "target {target_kept} exceeds kept count {}",
            mask.kept()
        ))
    })?;
    let mut union = magnitude_prune_count(snapshot, mask, remove)?;
    for m in looked {
        union = union.union(&magnitude_prune_count(m, mask, remove)?)?;
    }
    one_shot_adjust(&union, snapshot, target_kept)
}
