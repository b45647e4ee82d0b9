//! Instant model soup: denoise a dense pretrained model by greedily
//! interpolating it toward weakly trained sparse subnetworks of itself.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, DataCursor};
use crate::data::{subsample, Dataset};
use crate::error::{Error, Result};
use crate::ledger::{BudgetLedger, Phase};
use crate::mask::Mask;
use crate::model::Model;
use crate::optim::AdamW;
use crate::prune::{magnitude_prune, Protocol};
use crate::rng::stream;
use crate::train::{eval_flops, evaluate, train_steps, EvalMetrics, LrPlan};

/// What the greedy interpolation maximizes on validation data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectMetric {
    #[default]
    Accuracy,
    Loss,
}

impl SelectMetric {
    fn better(self, a: &EvalMetrics, b: &EvalMetrics) -> bool {
        match self {
            SelectMetric::Accuracy => a.correct > b.correct,
            SelectMetric::Loss => a.loss < b.loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoupConfig {
    pub count: usize,
    /// Candidate sparsities, used round-robin.
    pub sparsities: Vec<f64>,
    pub weak_steps: u64,
    pub lr: f64,
    pub lr_multipliers: Vec<f64>,
    pub weight_decays: Vec<f64>,
    /// Fraction of the training split each candidate trains on.
    pub subset_fraction: f64,
    pub grid: Vec<f64>,
    pub metric: SelectMetric,
    pub seed: u64,
}

impl SoupConfig {
    pub fn new(count: usize, weak_steps: u64, lr: f64, seed: u64) -> Self {
        Self {
            count,
            sparsities: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            weak_steps,
            lr,
            lr_multipliers: vec![0.5, 1.0, 2.0],
            weight_decays: vec![0.0, 0.1],
            subset_fraction: 0.1,
            grid: (0..=10).map(|i| f64::from(i) / 10.0).collect(),
            metric: SelectMetric::Accuracy,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.count == 0 {
            return bad("soup needs at least one candidate".into());
        }
        if self.sparsities.is_empty() || self.sparsities.iter().any(|s| !(*s > 0.0 && *s < 1.0)) {
            return bad(format!(
                "candidate sparsities {:?} must lie in (0, 1)",
                self.sparsities
            ));
        }
        if !self.grid.contains(&0.0) || self.grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad(format!(
                "interpolation grid {:?} must contain 0 and lie in [0, 1]",
                self.grid
            ));
        }
        if self.lr_multipliers.is_empty() || self.weight_decays.is_empty() {
            return bad("protocol pool is empty".into());
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return bad(format!(
                "subset fraction {} not in (0, 1]",
                self.subset_fraction
            ));
        }
        Ok(())
    }

    pub fn sparsity(&self, k: usize) -> f64 {
        self.sparsities[k % self.sparsities.len()]
    }

    pub fn protocol(&self, k: usize) -> Protocol {
        let mut rng = stream(self.seed, "soup-protocol", &[k as u64]);
        let pick = rng.random_range(0..self.lr_multipliers.len() * self.weight_decays.len());
        Protocol {
            lr_multiplier: self.lr_multipliers[pick / self.weight_decays.len()],
            weight_decay: self.weight_decays[pick % self.weight_decays.len()],
        }
    }
}

/// Restores every coordinate the mask drops to its value in `base`.
pub fn densify(sparse: &Model, base: &Model, mask: &Mask) -> Result<Model> {
    let mut out = sparse.clone();
    let idx = out.prunable_indices();
    if mask.layers().len() != idx.len() {
        return Err(Error::FingerprintMismatch {
            expected: out.registry().fingerprint(),
            actual: mask.fingerprint(),
        });
    }
    for (layer, &pi) in mask.layers().iter().zip(&idx) {
        let src = base.params()[pi].tensor.data();
        let dst = out.params_mut()[pi].tensor.data_mut();
        for (i, w) in dst.iter_mut().enumerate() {
            if !layer.bits.get(i) {
                *w = src[i];
            }
        }
    }
    Ok(out)
}

/// Magnitude-prunes `pretrained` at `sparsity`, trains `steps` steps on
/// `pool` with a fresh optimizer under `protocol` and the mask, then
/// densifies against the pretrained weights.
#[allow(clippy::too_many_arguments)]
pub fn weak_train_candidate(
    pretrained: &Checkpoint,
    sparsity: f64,
    protocol: Protocol,
    lr: f64,
    steps: u64,
    pool: Vec<usize>,
    data: &Dataset,
    ledger: &mut BudgetLedger,
    rng: rand_chacha::ChaCha8Rng,
) -> Result<Model> {
    let full = Mask::ones(&pretrained.model.registry());
    let mask = magnitude_prune(&pretrained.model, &full, sparsity)?;
    let mut ck = pretrained.clone();
    let lr = lr * protocol.lr_multiplier;
    ck.optimizer = AdamW::new(&ck.model, lr, protocol.weight_decay);
    ck.cursor = DataCursor::new(pool, pretrained.cursor.batch_size(), rng)?;
    train_steps(
        &mut ck,
        data,
        steps,
        Some(&mask),
        LrPlan::Constant(lr),
        ledger,
        Phase::WeakTrain,
    )?;
    densify(&ck.model, &pretrained.model, &mask)
}

/// `(1−α)·a + α·b`, with exact copies at the endpoints.
pub fn interpolate(a: &Model, b: &Model, alpha: f64) -> Result<Model> {
    if a.spec() != b.spec() {
        return Err(Error::InvalidArgument(
            "interpolating models of different shapes".into(),
        ));
    }
    if alpha == 0.0 {
        return Ok(a.clone());
    }
    if alpha == 1.0 {
        return Ok(b.clone());
    }
    let mut out = a.clone();
    for (p, q) in out.params_mut().iter_mut().zip(b.params()) {
        for (x, y) in p.tensor.data_mut().iter_mut().zip(q.tensor.data()) {
            *x = (1.0 - alpha) * *x + alpha * y;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Interpolation {
    pub model: Model,
    pub alpha: f64,
    pub before: EvalMetrics,
    pub after: EvalMetrics,
    /// Evaluation passes spent, one per grid point.
    pub passes: u64,
}

/// Scans `grid` in ascending order and keeps the first best point, so ties
/// resolve to the smaller α.
pub fn interpolate_greedy(
    candidate: &Model,
    current: &Model,
    data: &Dataset,
    val: &[usize],
    grid: &[f64],
    metric: SelectMetric,
) -> Result<Interpolation> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let mut alphas = grid.to_vec();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let before = evaluate(current, data, val)?;
    let mut best: Option<(f64, Model, EvalMetrics)> = None;
    for &alpha in &alphas {
        let model = interpolate(current, candidate, alpha)?;
        let m = if alpha == 0.0 {
            before
        } else {
            evaluate(&model, data, val)?
        };
        if best.as_ref().is_none_or(|(_, _, b)| metric.better(&m, b)) {
            best = Some((alpha, model, m));
        }
    }
    let (alpha, model, after) = best.ok_or_else(|| Error::InvalidArgument("empty grid".into()))?;
    Ok(Interpolation {
        model,
        alpha,
        before,
        after,
        passes: alphas.len() as u64,
    })
}

/// One greedy step of the soup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoupLogRow {
    pub k: usize,
    pub sparsity: f64,
    pub alpha: f64,
    pub val_before: f64,
    pub val_after: f64,
}

#[derive(Clone, Debug)]
pub struct SoupOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<SoupLogRow>,
    pub candidates: Vec<Model>,
    pub val_initial: EvalMetrics,
    pub val_final: EvalMetrics,
}

/// Builds `count` weak candidates from the pretrained weights and folds
/// each into the running model by greedy interpolation, in order.
pub fn ims_run(
    pretrained: &Checkpoint,
    cfg: &SoupConfig,
    data: &Dataset,
    ledger: &mut BudgetLedger,
) -> Result<SoupOutcome> {
    cfg.validate()?;
    let val = &data.splits.val;
    if val.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    ledger.ensure(cfg.count as u64 * cfg.weak_steps)?;
    let pass_flops = eval_flops(pretrained.model.spec(), val.len(), None);
    let mut current = pretrained.model.clone();
    let mut log = Vec::with_capacity(cfg.count);
    let mut candidates = Vec::with_capacity(cfg.count);
    let mut val_initial = None;
    let mut val_final = None;
    for k in 0..cfg.count {
        let mut rng = stream(cfg.seed, "soup-data", &[k as u64]);
        let pool = subsample(&data.splits.train, cfg.subset_fraction, &mut rng)?;
        let candidate = weak_train_candidate(
            pretrained,
            cfg.sparsity(k),
            cfg.protocol(k),
            cfg.lr,
            cfg.weak_steps,
            pool,
            data,
            ledger,
            rng,
        )?;
        let step = interpolate_greedy(&candidate, &current, data, val, &cfg.grid, cfg.metric)?;
        ledger.record_eval(step.passes, step.passes * pass_flops);
        val_initial.get_or_insert(step.before);
        val_final = Some(step.after);
        log.push(SoupLogRow {
            k,
            sparsity: cfg.sparsity(k),
            alpha: step.alpha,
            val_before: step.before.accuracy,
            val_after: step.after.accuracy,
        });
        current = step.model;
        candidates.push(candidate);
    }
    let mut checkpoint = pretrained.clone();
    checkpoint.model = current;
    let val_final =
        val_final.ok_or_else(|| Error::InvalidArgument("soup produced no steps".into()))?;
    checkpoint.set_metric("val_accuracy", val_final.accuracy);
    Ok(SoupOutcome {
        checkpoint,
        log,
        candidates,
        val_initial: val_initial.unwrap_or(val_final),
        val_final,
    })
}

/// Coordinate-wise mean of the candidates.
pub fn uniform_soup(candidates: &[Model]) -> Result<Model> {
    let (first, rest) = candidates
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("uniform soup of zero models".into()))?;
    if rest.iter().any(|m| m.spec() != first.spec()) {
        return Err(Error::InvalidArgument(
            "soup ingredients differ in shape".into(),
        ));
    }
    let n = candidates.len() as f64;
    let mut out = first.clone();
    for (pi, p) in out.params_mut().iter_mut().enumerate() {
        for (j, x) in p.tensor.data_mut().iter_mut().enumerate() {
            *x = candidates
                .iter()
                .map(|m| m.params()[pi].tensor.data()[j])
                .sum::<f64>()
                / n;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_clusters, SplitFractions};
    use crate::model::ModelSpec;
    use crate::train::{pretrain, PretrainConfig};

    fn setup() -> (Dataset, Checkpoint) {
        let data = gen_gaussian_clusters(3, 4, 2.0, 60, 11, SplitFractions::default()).unwrap();
        let cfg = PretrainConfig {
            epochs: 1,
            lr: 0.01,
            weight_decay: 0.0,
            batch_size: 8,
            seed: 11,
        };
        let ckpt = pretrain(
            ModelSpec::mlp(4, 6, 2, 3),
            &data,
            &cfg,
            &mut BudgetLedger::unlimited(),
        )
        .unwrap();
        (data, ckpt)
    }

    fn scaled(m: &Model, c: f64) -> Model {
        let mut out = m.clone();
        for p in out.params_mut() {
            p.tensor.data_mut().iter_mut().for_each(|x| *x *= c);
        }
        out
    }

    #[test]
    fn no_weak_steps_returns_pretrained() {
        let (data, ckpt) = setup();
        let cfg = SoupConfig::new(1, 0, 0.01, 3);
        let out = ims_run(&ckpt, &cfg, &data, &mut BudgetLedger::unlimited()).unwrap();
        assert!(out.checkpoint.model.bit_eq(&ckpt.model));
        assert_eq!(out.log.len(), 1);
    }

    #[test]
    fn candidate_keeps_pruned_coordinates() {
        let (data, ckpt) = setup();
        let mut ledger = BudgetLedger::unlimited();
        let p = Protocol {
            lr_multiplier: 1.0,
            weight_decay: 0.0,
        };
        let cand = weak_train_candidate(
            &ckpt,
            0.3,
            p,
            0.05,
            5,
            data.splits.train.clone(),
            &data,
            &mut ledger,
            stream(0, "x", &[]),
        )
        .unwrap();
        let mask = magnitude_prune(&ckpt.model, &Mask::ones(&ckpt.model.registry()), 0.3).unwrap();
        let (c, base) = (cand.prunable_flat(), ckpt.model.prunable_flat());
        let mut moved = 0;
        for (i, keep) in mask.to_flat().into_iter().enumerate() {
            if keep {
                moved += usize::from(c[i] != base[i]);
            } else {
                assert_eq!(c[i].to_bits(), base[i].to_bits());
            }
        }
        assert!(moved > 0);
        assert_eq!(ledger.phase(Phase::WeakTrain).steps, 5);
    }

    #[test]
    fn endpoints_are_exact() {
        let (_, ckpt) = setup();
        let other = scaled(&ckpt.model, -0.7);
        assert!(interpolate(&ckpt.model, &other, 0.0)
            .unwrap()
            .bit_eq(&ckpt.model));
        assert!(interpolate(&ckpt.model, &other, 1.0)
            .unwrap()
            .bit_eq(&other));
    }

    #[test]
    fn identical_candidate_ties_to_zero() {
        let (data, ckpt) = setup();
        let out = interpolate_greedy(
            &ckpt.model,
            &ckpt.model,
            &data,
            &data.splits.val,
            &SoupConfig::new(1, 0, 0.0, 0).grid,
            SelectMetric::Accuracy,
        )
        .unwrap();
        assert_eq!(out.alpha, 0.0);
        assert_eq!(out.passes, 11);
    }

    #[test]
    fn bad_candidate_rejected() {
        let (data, ckpt) = setup();
        let bad = scaled(&ckpt.model, -3.0);
        let grid = SoupConfig::new(1, 0, 0.0, 0).grid;
        let out = interpolate_greedy(
            &bad,
            &ckpt.model,
            &data,
            &data.splits.val,
            &grid,
            SelectMetric::Accuracy,
        )
        .unwrap();
        assert!(out.after.accuracy >= out.before.accuracy);
        assert!(
            interpolate_greedy(&bad, &ckpt.model, &data, &[], &grid, SelectMetric::Accuracy)
                .is_err()
        );
    }

    #[test]
    fn uniform_soup_means() {
        let (_, ckpt) = setup();
        let m = &ckpt.model;
        assert!(uniform_soup(&[m.clone(), m.clone()]).unwrap().bit_eq(m));
        let zero = uniform_soup(&[m.clone(), scaled(m, -1.0)]).unwrap();
        assert!(zero
            .params()
            .iter()
            .all(|p| p.tensor.data().iter().all(|x| *x == 0.0)));
        let three = uniform_soup(&[scaled(m, 0.0), scaled(m, 0.0), scaled(m, 0.0)]).unwrap();
        assert!(three
            .params()
            .iter()
            .all(|p| p.tensor.data().iter().all(|x| *x == 0.0)));
        assert!(uniform_soup(&[]).is_err());
    }

    #[test]
    fn uniform_soup_scalar_example() {
        let (_, ckpt) = setup();
        let fill = |v: f64| {
            let mut m = ckpt.model.clone();
            m.params_mut()
                .iter_mut()
                .for_each(|p| p.tensor.data_mut().fill(v));
            m
        };
        let s = uniform_soup(&[fill(1.0), fill(2.0), fill(6.0)]).unwrap();
        assert!(s
            .params()
            .iter()
            .all(|p| p.tensor.data().iter().all(|x| *x == 3.0)));
    }

    #[test]
    fn config_validation() {
        let mut c = SoupConfig::new(2, 10, 0.01, 0);
        assert!(c.validate().is_ok());
        c.grid = vec![0.5, 1.0];
        assert!(c.validate().is_err());
        let mut c = SoupConfig::new(0, 10, 0.01, 0);
        assert!(c.validate().is_err());
        c.count = 1;
        c.sparsities = vec![1.0];
        assert!(c.validate().is_err());
    }
}
