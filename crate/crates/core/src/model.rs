//! Model definitions: a ReLU MLP and a pre-norm transformer encoder.
//!
//! Parameter names are hierarchical (`layers.0.attn.query.weight`). Only
//! attention projections and feed-forward/hidden weight matrices are
//! prunable; embeddings, biases, layer-norm parameters and the
//! classification head are not.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::mask::{Mask, Registry, RegistryEntry};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlp,
    TinyTransformer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub depth: usize,
    pub width: usize,
    /// Attention heads; ignored for the MLP.
    pub heads: usize,
    /// Feature dimension (MLP) or vocabulary size (transformer).
    pub input_dim: usize,
    /// Sequence length (transformer only).
    pub seq_len: usize,
    /// Feed-forward hidden width (transformer only).
    pub ffn_width: usize,
    pub classes: usize,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, width: usize, depth: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            depth,
            width,
            heads: 0,
            input_dim,
            seq_len: 1,
            ffn_width: 0,
            classes,
        }
    }

    pub fn transformer(
        vocab: usize,
        seq_len: usize,
        width: usize,
        heads: usize,
        depth: usize,
        classes: usize,
    ) -> Self {
        Self {
            kind: ModelKind::TinyTransformer,
            depth,
            width,
            heads,
            input_dim: vocab,
            seq_len,
            ffn_width: 2 * width,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.classes == 0 || self.input_dim == 0 {
            return bad("classes and input dimension must be positive");
        }
        match self.kind {
            ModelKind::Mlp => {
                if self.depth > 0 && self.width == 0 {
                    return bad("hidden width must be positive");
                }
            }
            ModelKind::TinyTransformer => {
                if self.width == 0 || self.heads == 0 || self.seq_len == 0 || self.ffn_width == 0 {
                    return bad("width, heads, seq_len and ffn_width must be positive");
                }
                if !self.width.is_multiple_of(self.heads) {
                    return bad("width must be divisible by heads");
                }
            }
        }
        Ok(())
    }

    /// `(name, shape, prunable)` for every parameter, in registry order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, bool)> {
        let mut out = Vec::new();
        let mut push = |n: String, s: Vec<usize>, p: bool| out.push((n, s, p));
        match self.kind {
            ModelKind::Mlp => {
                let mut fan_in = self.input_dim;
                for i in 0..self.depth {
                    push(format!("layers.{i}.weight"), vec![fan_in, self.width], true);
                    push(format!("layers.{i}.bias"), vec![self.width], false);
                    fan_in = self.width;
                }
                push("head.weight".into(), vec![fan_in, self.classes], false);
                push("head.bias".into(), vec![self.classes], false);
            }
            ModelKind::TinyTransformer => {
                let d = self.width;
                push("embed.token".into(), vec![self.input_dim, d], false);
                push("embed.position".into(), vec![self.seq_len, d], false);
                for i in 0..self.depth {
                    let p = format!("layers.{i}");
                    push(format!("{p}.ln1.gamma"), vec![d], false);
                    push(format!("{p}.ln1.beta"), vec![d], false);
                    for proj in ["query", "key", "value", "out"] {
                        push(format!("{p}.attn.{proj}.weight"), vec![d, d], true);
                        push(format!("{p}.attn.{proj}.bias"), vec![d], false);
                    }
                    push(format!("{p}.ln2.gamma"), vec![d], false);
                    push(format!("{p}.ln2.beta"), vec![d], false);
                    push(format!("{p}.ffn.up.weight"), vec![d, self.ffn_width], true);
                    push(format!("{p}.ffn.up.bias"), vec![self.ffn_width], false);
                    push(
                        format!("{p}.ffn.down.weight"),
                        vec![self.ffn_width, d],
                        true,
                    );
                    push(format!("{p}.ffn.down.bias"), vec![d], false);
                }
                push("final_ln.gamma".into(), vec![d], false);
                push("final_ln.beta".into(), vec![d], false);
                push("head.weight".into(), vec![d, self.classes], false);
                push("head.bias".into(), vec![self.classes], false);
            }
        }
        out
    }

    pub fn registry(&self) -> Registry {
        Registry::new(
            self.layout()
                .into_iter()
                .filter(|(_, _, p)| *p)
                .map(|(name, shape, _)| RegistryEntry { name, shape })
                .collect(),
        )
    }

    /// Positions each input row is expanded to (1 for the MLP).
    pub fn tokens_per_sample(&self) -> usize {
        match self.kind {
            ModelKind::Mlp => 1,
            ModelKind::TinyTransformer => self.seq_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub prunable: bool,
}

/// A batch of model inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    /// Row-major `[rows, dim]` features.
    Features {
        rows: usize,
        dim: usize,
        data: Vec<f64>,
    },
    /// Row-major `[rows, seq_len]` token ids.
    Tokens {
        rows: usize,
        seq_len: usize,
        ids: Vec<usize>,
    },
}

impl Inputs {
    pub fn rows(&self) -> usize {
        match self {
            Inputs::Features { rows, .. } | Inputs::Tokens { rows, .. } => *rows,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Inputs,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Parameter>,
}

impl Model {
    /// Deterministic initialization: weight matrices ~ N(0, 1/fan_in),
    /// embeddings ~ N(0, 1/width), biases zero, layer-norm gains one.
    pub fn init(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let params = spec
            .layout()
            .into_iter()
            .map(|(name, shape, prunable)| {
                let numel: usize = shape.iter().product();
                let data = if name.ends_with(".gamma") {
                    vec![1.0; numel]
                } else if name.ends_with(".bias") || name.ends_with(".beta") {
                    vec![0.0; numel]
                } else {
                    let fan_in = if name.starts_with("embed.") {
                        shape[1]
                    } else {
                        shape[0]
                    };
                    let normal =
                        Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..numel).map(|_| normal.sample(rng)).collect()
                };
                Parameter {
                    name,
                    tensor: Tensor::new(shape, data).expect("layout shape"),
                    prunable,
                }
            })
            .collect();
        Ok(Self { spec, params })
    }

    /// Assembles a model from explicit parameters, checking names, shapes
    /// and prunable flags against the layout of `spec`.
    pub fn from_parameters(spec: ModelSpec, params: Vec<Parameter>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        if layout.len() != params.len() {
            return Err(Error::InvalidSpec(format!(
                "expected {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, prunable), p) in layout.iter().zip(&params) {
            if &p.name != name {
                return Err(Error::InvalidSpec(format!(
                    "expected parameter `{name}`, found `{}`",
                    p.name
                )));
            }
            if p.tensor.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    actual: p.tensor.shape().to_vec(),
                });
            }
            if p.prunable != *prunable {
                return Err(Error::InvalidSpec(format!("prunable flag of `{name}`")));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn registry(&self) -> Registry {
        self.spec.registry()
    }

    /// Indices into `params()` of the prunable parameters, in registry order.
    pub fn prunable_indices(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params[i].prunable)
            .collect()
    }

    /// Magnitudes of every prunable weight in canonical flat order.
    pub fn prunable_flat(&self) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.prunable)
            .flat_map(|p| p.tensor.data().iter().copied())
            .collect()
    }

    fn check_mask(&self, mask: &Mask) -> Result<()> {
        let fp = self.registry().fingerprint();
        if mask.fingerprint() != fp {
            return Err(Error::FingerprintMismatch {
                expected: fp,
                actual: mask.fingerprint(),
            });
        }
        Ok(())
    }

    /// Zeroes every weight the mask drops.
    pub fn apply_mask(&mut self, mask: &Mask) -> Result<()> {
        self.check_mask(mask)?;
        let idx = self.prunable_indices();
        for (layer, &pi) in mask.layers().iter().zip(&idx) {
            let data = self.params[pi].tensor.data_mut();
            for (i, w) in data.iter_mut().enumerate() {
                if !layer.bits.get(i) {
                    *w = 0.0;
                }
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    /// Bitwise equality of every parameter value.
    pub fn bit_eq(&self, other: &Model) -> bool {
        self.spec == other.spec
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.tensor.bit_eq(&b.tensor))
    }

    /// Records the forward pass on `graph` and returns the logits node.
    pub fn forward_graph(
        &self,
        graph: &mut Graph,
        inputs: &Inputs,
        mask: Option<&Mask>,
    ) -> Result<NodeId> {
        if let Some(m) = mask {
            self.check_mask(m)?;
        }
        let mut prunable_seen = 0usize;
        let mut ids = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            let keep = match (mask, p.prunable) {
                (Some(m), true) => {
                    let layer = &m.layers()[prunable_seen];
                    prunable_seen += 1;
                    Some(layer.bits.iter().collect::<Vec<bool>>())
                }
                (_, true) => {
                    prunable_seen += 1;
                    None
                }
                _ => None,
            };
            ids.push(graph.param(i, &p.tensor, keep.as_deref()));
        }
        let node = |name: &str| -> NodeId {
            let i = self
                .params
                .iter()
                .position(|p| p.name == name)
                .expect("layout");
            ids[i]
        };
        match self.spec.kind {
            ModelKind::Mlp => {
                let Inputs::Features { rows, dim, data } = inputs else {
                    return Err(Error::InvalidArgument("MLP expects feature inputs".into()));
                };
                if *dim != self.spec.input_dim {
                    return Err(Error::ShapeMismatch {
                        name: "input".into(),
                        expected: vec![*rows, self.spec.input_dim],
                        actual: vec![*rows, *dim],
                    });
                }
                let mut x = graph.input(Tensor::new(vec![*rows, *dim], data.clone())?);
                for i in 0..self.spec.depth {
                    let h = graph.matmul(x, node(&format!("layers.{i}.weight")))?;
                    let h = graph.add_bias(h, node(&format!("layers.{i}.bias")))?;
                    x = graph.relu(h);
                }
                let logits = graph.matmul(x, node("head.weight"))?;
                graph.add_bias(logits, node("head.bias"))
            }
            ModelKind::TinyTransformer => {
                let Inputs::Tokens {
                    rows,
                    seq_len,
                    ids: tokens,
                } = inputs
                else {
                    return Err(Error::InvalidArgument(
                        "transformer expects token inputs".into(),
                    ));
                };
                if *seq_len != self.spec.seq_len {
                    return Err(Error::ShapeMismatch {
                        name: "input".into(),
                        expected: vec![*rows, self.spec.seq_len],
                        actual: vec![*rows, *seq_len],
                    });
                }
                let (b, l) = (*rows, *seq_len);
                let positions: Vec<usize> = (0..b * l).map(|i| i % l).collect();
                let tok = graph.embed(node("embed.token"), tokens)?;
                let pos = graph.embed(node("embed.position"), &positions)?;
                let mut x = graph.add(tok, pos)?;
                for i in 0..self.spec.depth {
                    let p = format!("layers.{i}");
                    let h = graph.layer_norm(
                        x,
                        node(&format!("{p}.ln1.gamma")),
                        node(&format!("{p}.ln1.beta")),
                    )?;
                    let proj = |graph: &mut Graph, input: NodeId, name: &str| {
                        let y = graph.matmul(input, node(&format!("{p}.{name}.weight")))?;
                        graph.add_bias(y, node(&format!("{p}.{name}.bias")))
                    };
                    let q = proj(graph, h, "attn.query")?;
                    let k = proj(graph, h, "attn.key")?;
                    let v = proj(graph, h, "attn.value")?;
                    let a = graph.attention(q, k, v, b, l, self.spec.heads)?;
                    let o = proj(graph, a, "attn.out")?;
                    x = graph.add(x, o)?;
                    let h = graph.layer_norm(
                        x,
                        node(&format!("{p}.ln2.gamma")),
                        node(&format!("{p}.ln2.beta")),
                    )?;
                    let f = proj(graph, h, "ffn.up")?;
                    let f = graph.gelu(f);
                    let f = proj(graph, f, "ffn.down")?;
                    x = graph.add(x, f)?;
                }
                let x = graph.layer_norm(x, node("final_ln.gamma"), node("final_ln.beta"))?;
                // First position of each sequence acts as the summary token.
                let first: Vec<usize> = (0..b).map(|r| r * l).collect();
                let pooled = graph.select_rows(x, &first)?;
                let logits = graph.matmul(pooled, node("head.weight"))?;
                graph.add_bias(logits, node("head.bias"))
            }
        }
    }

    /// Logits `[rows, classes]` without recording gradients for later use.
    pub fn forward(&self, inputs: &Inputs, mask: Option<&Mask>) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, inputs, mask)?;
        Ok(g.value(out).clone())
    }

    /// Forward + cross-entropy + backward; gradients land in each
    /// parameter's `grad`. Returns the loss.
    pub fn loss_and_grad(&mut self, batch: &Batch, mask: Option<&Mask>) -> Result<f64> {
        let mut g = Graph::new();
        let logits = self.forward_graph(&mut g, &batch.inputs, mask)?;
        let loss = g.cross_entropy(logits, &batch.labels)?;
        let grads = g.backward(loss)?;
        self.clear_grads();
        for (idx, grad) in grads.param_grads() {
            self.params[idx].tensor.set_grad(grad)?;
        }
        Ok(g.value(loss).data()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn prunable_flags_follow_layer_roles() {
        let spec = ModelSpec::transformer(10, 4, 8, 2, 1, 3);
        let model = Model::init(spec, &mut stream(0, "init", &[])).unwrap();
        let prunable: Vec<&str> = model
            .params()
            .iter()
            .filter(|p| p.prunable)
            .map(|p| p.name.as_str())
            .collect();
        assert_eq!(
            prunable,
            [
                "layers.0.attn.query.weight",
                "layers.0.attn.key.weight",
                "layers.0.attn.value.weight",
                "layers.0.attn.out.weight",
                "layers.0.ffn.up.weight",
                "layers.0.ffn.down.weight",
            ]
        );
        let mut names: Vec<_> = model.params().iter().map(|p| &p.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), model.params().len());
    }

    #[test]
    fn heads_must_divide_width() {
        let spec = ModelSpec::transformer(10, 4, 9, 2, 1, 3);
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn identity_head_returns_input() {
        let spec = ModelSpec::mlp(3, 0, 0, 3);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let params = vec![
            Parameter {
                name: "head.weight".into(),
                tensor: Tensor::new(vec![3, 3], eye).unwrap(),
                prunable: false,
            },
            Parameter {
                name: "head.bias".into(),
                tensor: Tensor::zeros(vec![3]),
                prunable: false,
            },
        ];
        let model = Model::from_parameters(spec, params).unwrap();
        let x = vec![0.5, -2.0, 3.25, 1.0, 0.0, -1.0];
        let out = model
            .forward(
                &Inputs::Features {
                    rows: 2,
                    dim: 3,
                    data: x.clone(),
                },
                None,
            )
            .unwrap();
        assert_eq!(out.data(), x.as_slice());
    }

    #[test]
    fn wrong_parameter_shape_is_named() {
        let spec = ModelSpec::mlp(2, 2, 1, 2);
        let mut model = Model::init(spec.clone(), &mut stream(0, "i", &[])).unwrap();
        let mut params = model.params_mut().to_vec();
        params[0].tensor = Tensor::zeros(vec![3, 2]);
        match Model::from_parameters(spec, params) {
            Err(Error::ShapeMismatch { name, .. }) => assert_eq!(name, "layers.0.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_input_dim_rejected() {
        let model = Model::init(ModelSpec::mlp(2, 2, 1, 2), &mut stream(0, "i", &[])).unwrap();
        let err = model
            .forward(
                &Inputs::Features {
                    rows: 1,
                    dim: 3,
                    data: vec![0.0; 3],
                },
                None,
            )
            .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { ref name, .. } if name == "input"));
    }
}
