//! Central finite-difference checks of the reverse-mode gradients.
//!
//! [`suite`] draws random shapes and values for every graph operation and
//! for both full models, and compares each analytic partial derivative
//! with `(f(x+h) − f(x−h)) / 2h`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::model::{Batch, Inputs, Model, ModelSpec};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;

/// Relative error with a small floor so near-zero partials compare on an
/// absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    /// Random cases (one graph or model instance each).
    pub cases: usize,
    /// Individual partial derivatives compared.
    pub coordinates: usize,
    pub worst: f64,
    /// Case label of the worst comparison.
    pub worst_case: String,
    /// Layer kinds exercised.
    pub kinds: Vec<&'static str>,
}

impl GradReport {
    fn absorb(&mut self, kind: &'static str, label: String, errs: &[f64]) {
        self.cases += 1;
        self.coordinates += errs.len();
        if !self.kinds.contains(&kind) {
            self.kinds.push(kind);
        }
        for &e in errs {
            if e > self.worst || e.is_nan() {
                self.worst = e;
                self.worst_case.clone_from(&label);
            }
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .expect("shape matches data")
}

/// Relative errors of every leaf coordinate for the scalar
/// `Σ build(leaves) ⊙ R` with a fixed random `R` (or `build` itself when it
/// is already a scalar).
pub fn check_graph<F>(leaves: &[Tensor], seed: u64, build: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |vals: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut rng = stream(seed, "probe", &[]);
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        let loss = if g.value(out).shape().is_empty() {
            out
        } else {
            let shape = g.value(out).shape().to_vec();
            let r = g.input(rand_tensor(&mut rng, &shape));
            let prod = g.mul(out, r)?;
            g.sum(prod)
        };
        let value = g.value(loss).data()[0];
        if !want_grad {
            return Ok((value, vec![]));
        }
        let grads = g.backward(loss)?;
        let gs = ids
            .iter()
            .map(|&id| {
                grads
                    .get(id)
                    .map_or_else(|| vec![0.0; g.value(id).numel()], <[f64]>::to_vec)
            })
            .collect();
        Ok((value, gs))
    };
    let (_, analytic) = eval(leaves, true)?;
    let mut errs = Vec::new();
    for (li, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[j] += STEP;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[j] -= STEP;
            let numeric = (eval(&plus, false)?.0 - eval(&minus, false)?.0) / (2.0 * STEP);
            errs.push(rel_err(a, numeric));
        }
    }
    Ok(errs)
}

/// Relative errors of every parameter coordinate of the cross-entropy loss
/// of `model` on `batch`.
pub fn check_model(model: &Model, batch: &Batch) -> Result<Vec<f64>> {
    let mut m = model.clone();
    m.loss_and_grad(batch, None)?;
    let analytic: Vec<Vec<f64>> = m
        .params()
        .iter()
        .map(|p| {
            p.tensor
                .grad()
                .map_or_else(|| vec![0.0; p.tensor.numel()], <[f64]>::to_vec)
        })
        .collect();
    let loss_at = |m: &Model| -> Result<f64> {
        let mut g = Graph::new();
        let logits = m.forward_graph(&mut g, &batch.inputs, None)?;
        let l = g.cross_entropy(logits, &batch.labels)?;
        Ok(g.value(l).data()[0])
    };
    let mut errs = Vec::new();
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let mut plus = model.clone();
            plus.params_mut()[pi].tensor.data_mut()[j] += STEP;
            let mut minus = model.clone();
            minus.params_mut()[pi].tensor.data_mut()[j] -= STEP;
            let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * STEP);
            errs.push(rel_err(a, numeric));
        }
    }
    Ok(errs)
}

/// Randomly initialized model with every parameter jittered so layer-norm
/// gains and biases sit away from their initial values.
fn jittered(spec: ModelSpec, seed: u64) -> Result<Model> {
    let mut model = Model::init(spec, &mut stream(seed, "init", &[]))?;
    let mut rng = stream(seed, "jitter", &[]);
    for p in model.params_mut() {
        for w in p.tensor.data_mut() {
            *w += rng.random_range(-0.3..0.3);
        }
    }
    Ok(model)
}

/// Runs `per_op` random cases for each graph operation plus `per_model`
/// cases for each model kind.
pub fn suite(per_op: u64, per_model: u64) -> Result<GradReport> {
    let mut rep = GradReport::default();
    for s in 0..per_op {
        let mut rng = stream(s, "gradcheck", &[]);
        let (n, k, m) = (
            rng.random_range(1..4),
            rng.random_range(1..5),
            rng.random_range(1..4),
        );
        let leaves = [
            rand_tensor(&mut rng, &[n, k]),
            rand_tensor(&mut rng, &[k, m]),
            rand_tensor(&mut rng, &[m]),
        ];
        let e = check_graph(&leaves, s, |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            g.add_bias(y, ids[2])
        })?;
        rep.absorb("matmul+bias", format!("matmul+bias #{s}"), &e);

        let leaves = [
            rand_tensor(&mut rng, &[2, 3]),
            rand_tensor(&mut rng, &[2, 3]),
        ];
        let e = check_graph(&leaves, s, |g, ids| {
            let a = g.add(ids[0], ids[1])?;
            let p = g.mul(a, ids[1])?;
            Ok(g.sum(p))
        })?;
        rep.absorb("add+mul+sum", format!("add+mul+sum #{s}"), &e);

        let leaves = [rand_tensor(&mut rng, &[3, 4])];
        let e = check_graph(&leaves, s, |g, ids| Ok(g.relu(ids[0])))?;
        rep.absorb("relu", format!("relu #{s}"), &e);
        let e = check_graph(&leaves, s, |g, ids| Ok(g.gelu(ids[0])))?;
        rep.absorb("gelu", format!("gelu #{s}"), &e);

        let leaves = [
            rand_tensor(&mut rng, &[3, 5]),
            rand_tensor(&mut rng, &[5]),
            rand_tensor(&mut rng, &[5]),
        ];
        let e = check_graph(&leaves, s, |g, ids| g.layer_norm(ids[0], ids[1], ids[2]))?;
        rep.absorb("layer_norm", format!("layer_norm #{s}"), &e);

        let tokens: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
        let leaves = [rand_tensor(&mut rng, &[4, 3])];
        let e = check_graph(&leaves, s, |g, l| {
            let x = g.embed(l[0], &tokens)?;
            g.select_rows(x, &[0, 3, 3, 5])
        })?;
        rep.absorb("embed+select_rows", format!("embed+select_rows #{s}"), &e);

        let (b, l, heads) = (2, rng.random_range(1..4), rng.random_range(1..3));
        let w = heads * 2;
        let leaves = [
            rand_tensor(&mut rng, &[b * l, w]),
            rand_tensor(&mut rng, &[b * l, w]),
            rand_tensor(&mut rng, &[b * l, w]),
        ];
        let e = check_graph(&leaves, s, |g, ids| {
            g.attention(ids[0], ids[1], ids[2], b, l, heads)
        })?;
        rep.absorb("attention", format!("attention #{s}"), &e);

        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
        let leaves = [rand_tensor(&mut rng, &[3, 4])];
        let e = check_graph(&leaves, s, |g, ids| g.cross_entropy(ids[0], &labels))?;
        rep.absorb("cross_entropy", format!("cross_entropy #{s}"), &e);
    }
    for seed in 0..per_model {
        let mut rng = stream(seed, "gradcheck-batch", &[]);
        let batch = Batch {
            inputs: Inputs::Tokens {
                rows: 2,
                seq_len: 3,
                ids: (0..6).map(|_| rng.random_range(0..6)).collect(),
            },
            labels: vec![rng.random_range(0..3), rng.random_range(0..3)],
        };
        let model = jittered(ModelSpec::transformer(6, 3, 4, 2, 2, 3), seed)?;
        rep.absorb(
            "transformer",
            format!("transformer #{seed}"),
            &check_model(&model, &batch)?,
        );

        let batch = Batch {
            inputs: Inputs::Features {
                rows: 3,
                dim: 3,
                data: (0..9).map(|_| rng.random_range(-1.0..1.0)).collect(),
            },
            labels: (0..3).map(|_| rng.random_range(0..3)).collect(),
        };
        let model = jittered(ModelSpec::mlp(3, 4, 2, 3), seed)?;
        rep.absorb("mlp", format!("mlp #{seed}"), &check_model(&model, &batch)?);
    }
    Ok(rep)
}
