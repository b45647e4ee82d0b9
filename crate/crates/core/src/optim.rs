//! AdamW with bias correction and decoupled weight decay, plus the linear
//! decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub const DEFAULT_BETAS: (f64, f64) = (0.9, 0.999);
    pub const DEFAULT_EPS: f64 = 1e-8;

    /// Fresh state with zero moments sized to `model`.
    pub fn new(model: &Model, base_lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|p| vec![0.0; p.tensor.numel()])
            .collect();
        Self {
            base_lr,
            weight_decay,
            beta1: Self::DEFAULT_BETAS.0,
            beta2: Self::DEFAULT_BETAS.1,
            eps: Self::DEFAULT_EPS,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub(crate) fn from_parts(
        base_lr: f64,
        weight_decay: f64,
        betas: (f64, f64),
        eps: f64,
        step: u64,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
    ) -> Self {
        Self {
            base_lr,
            weight_decay,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            step,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// left untouched. Dropped weights are re-zeroed afterwards.
    pub fn step(&mut self, model: &mut Model, lr: f64, mask: Option<&Mask>) -> Result<()> {
        if self.first.len() != model.params().len() {
            return Err(Error::InvalidArgument(
                "optimizer state does not match model".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let Some(grad) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w *= decay;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        if let Some(mask) = mask {
            model.apply_mask(mask)?;
        }
        Ok(())
    }
}

/// Linear decay from `base_lr` at step 0 to zero at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument(
            "schedule needs total_steps > 0".into(),
        ));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond schedule of {total_steps}"
        )));
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64))
}
