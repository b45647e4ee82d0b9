//! Complete training state and its little-endian binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "ISPCKPT\0" | u32 version
//! spec:      u8 kind | u64 depth, width, heads, input_dim, seq_len, ffn_width, classes
//! params:    u64 count | per param: str name | u8 prunable | usizes shape | f64s data
//! optimizer: f64 base_lr, weight_decay, beta1, beta2, eps | u64 step
//!            | per param: f64s first moment | f64s second moment
//! cursor:    u64 batch_size | usizes pool | usizes order | u64 pos | u64 epoch
//!            | rng: [u8; 32] seed | u64 stream | u128 word position
//! u64 global step
//! metrics:   u64 count | per metric: str name | f64 value
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind, ModelSpec, Parameter};
use crate::optim::AdamW;
use crate::rng::{read_rng, write_rng};
use crate::tensor::Tensor;

const CKPT_MAGIC: &[u8; 8] = b"ISPCKPT\0";
const CKPT_VERSION: u32 = 1;

/// Infinite shuffled walk over a pool of sample indices. Batches are always
/// full; an epoch boundary inside a batch reshuffles and keeps filling.
#[derive(Clone, Debug, PartialEq)]
pub struct DataCursor {
    batch_size: usize,
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    rng: ChaCha8Rng,
}

impl DataCursor {
    pub fn new(pool: Vec<usize>, batch_size: usize, mut rng: ChaCha8Rng) -> Result<Self> {
        if pool.is_empty() || batch_size == 0 {
            return Err(Error::InvalidArgument(
                "data cursor needs a non-empty pool and batch size".into(),
            ));
        }
        let mut order = pool.clone();
        order.shuffle(&mut rng);
        Ok(Self {
            batch_size,
            pool,
            order,
            pos: 0,
            epoch: 0,
            rng,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.order.clone_from(&self.pool);
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
                self.epoch += 1;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: AdamW,
    pub cursor: DataCursor,
    /// Optimizer steps taken on the main line of training.
    pub step: u64,
    pub metrics: Vec<(String, f64)>,
}

impl Checkpoint {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    pub fn set_metric(&mut self, name: &str, value: f64) {
        match self.metrics.iter_mut().find(|(n, _)| n == name) {
            Some((_, v)) => *v = value,
            None => self.metrics.push((name.to_string(), value)),
        }
    }

    /// Same weights and data position with a fresh optimizer.
    pub fn with_fresh_optimizer(&self, base_lr: f64, weight_decay: f64) -> Self {
        let mut c = self.clone();
        c.optimizer = AdamW::new(&c.model, base_lr, weight_decay);
        c
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::header(CKPT_MAGIC, CKPT_VERSION);
        let spec = self.model.spec();
        w.u8(match spec.kind {
            ModelKind::Mlp => 0,
            ModelKind::TinyTransformer => 1,
        });
        for v in [
            spec.depth,
            spec.width,
            spec.heads,
            spec.input_dim,
            spec.seq_len,
            spec.ffn_width,
            spec.classes,
        ] {
            w.u64(v as u64);
        }
        w.u64(self.model.params().len() as u64);
        for p in self.model.params() {
            w.str(&p.name);
            w.u8(u8::from(p.prunable));
            w.usizes(p.tensor.shape());
            w.f64s(p.tensor.data());
        }
        let o = &self.optimizer;
        for v in [o.base_lr, o.weight_decay, o.beta1, o.beta2, o.eps] {
            w.f64(v);
        }
        w.u64(o.step_count());
        for (m, v) in o.first_moments().iter().zip(o.second_moments()) {
            w.f64s(m);
            w.f64s(v);
        }
        let c = &self.cursor;
        w.u64(c.batch_size as u64);
        w.usizes(&c.pool);
        w.usizes(&c.order);
        w.u64(c.pos as u64);
        w.u64(c.epoch);
        write_rng(&mut w, &c.rng);
        w.u64(self.step);
        w.u64(self.metrics.len() as u64);
        for (name, v) in &self.metrics {
            w.str(name);
            w.f64(*v);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, _) = Reader::with_header(bytes, "checkpoint", CKPT_MAGIC, CKPT_VERSION)?;
        let kind = match r.u8()? {
            0 => ModelKind::Mlp,
            1 => ModelKind::TinyTransformer,
            k => {
                return Err(Error::format(
                    "checkpoint",
                    format!("unknown model kind {k}"),
                ))
            }
        };
        let mut dims = [0usize; 7];
        for d in dims.iter_mut() {
            *d = r.u64()? as usize;
        }
        let spec = ModelSpec {
            kind,
            depth: dims[0],
            width: dims[1],
            heads: dims[2],
            input_dim: dims[3],
            seq_len: dims[4],
            ffn_width: dims[5],
            classes: dims[6],
        };
        let n = r.count()?;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            let prunable = r.u8()? == 1;
            let shape = r.usizes()?;
            let data = r.f64s()?;
            params.push(Parameter {
                tensor: Tensor::new(shape, data)
                    .map_err(|e| Error::format("checkpoint", format!("{name}: {e}")))?,
                name,
                prunable,
            });
        }
        let model = Model::from_parameters(spec, params)?;
        let (base_lr, weight_decay, beta1, beta2, eps) =
            (r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let step = r.u64()?;
        let mut first = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        for p in model.params() {
            let (m, v) = (r.f64s()?, r.f64s()?);
            if m.len() != p.tensor.numel() || v.len() != p.tensor.numel() {
                return Err(Error::ShapeMismatch {
                    name: format!("optimizer moments of {}", p.name),
                    expected: vec![p.tensor.numel()],
                    actual: vec![m.len()],
                });
            }
            first.push(m);
            second.push(v);
        }
        let optimizer = AdamW::from_parts(
            base_lr,
            weight_decay,
            (beta1, beta2),
            eps,
            step,
            first,
            second,
        );
        let cursor = DataCursor {
            batch_size: r.u64()? as usize,
            pool: r.usizes()?,
            order: r.usizes()?,
            pos: r.u64()? as usize,
            epoch: r.u64()?,
            rng: read_rng(&mut r)?,
        };
        if cursor.pos > cursor.order.len() || cursor.order.len() != cursor.pool.len() {
            return Err(Error::format("checkpoint", "inconsistent data cursor"));
        }
        let global = r.u64()?;
        let m = r.count()?;
        let mut metrics = Vec::with_capacity(m);
        for _ in 0..m {
            metrics.push((r.str()?, r.f64()?));
        }
        r.finish()?;
        Ok(Self {
            model,
            optimizer,
            cursor,
            step: global,
            metrics,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn cursor_wraps_and_reshuffles() {
        let mut c = DataCursor::new((0..5).collect(), 3, stream(1, "d", &[])).unwrap();
        let mut seen = c.next_batch();
        seen.extend(c.next_batch());
        assert_eq!(c.epoch(), 1);
        let mut first_epoch = seen[..5].to_vec();
        first_epoch.sort();
        assert_eq!(first_epoch, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn corrupt_bytes_rejected() {
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
    }
}
