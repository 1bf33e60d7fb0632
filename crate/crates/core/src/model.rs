//! Pre-layer-norm transformer encoder with a tied-embedding MLM head and a
//! two-layer classification head on the `[CLS]` position.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{c, Real, Tensor};
use crate::tokenizer::Encoding;

pub const INIT_STD: f64 = 0.02;

pub const TOKEN_EMBEDDING: &str = "embeddings.token";
pub const POSITION_EMBEDDING: &str = "embeddings.position";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub feedforward_dim: usize,
    pub max_sequence_length: usize,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    #[serde(default = "default_num_labels")]
    pub num_labels: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_dropout() -> f64 {
    0.1
}
fn default_num_labels() -> usize {
    2
}
fn default_seed() -> u64 {
    42
}

impl ModelConfig {
    /// Desk-scale default: d=64, 4 layers, 4 heads, ff=256, 64 positions.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_dim: 64,
            num_layers: 4,
            num_heads: 4,
            feedforward_dim: 256,
            max_sequence_length: 64,
            dropout_p: 0.1,
            num_labels: 2,
            seed: 42,
        }
    }

    /// Gradient-check scale: d=16, 2 layers, 2 heads, 16 positions.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_dim: 16,
            num_layers: 2,
            num_heads: 2,
            feedforward_dim: 32,
            max_sequence_length: 16,
            dropout_p: 0.0,
            num_labels: 2,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("feedforward_dim", self.feedforward_dim),
            ("max_sequence_length", self.max_sequence_length),
            ("num_labels", self.num_labels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout_p must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn layer_name(i: usize, rest: &str) -> String {
    format!("layers.{i}.{rest}")
}

/// Parameter names, shapes and initialisers in creation order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (v, d, f, s) = (cfg.vocab_size, cfg.hidden_dim, cfg.feedforward_dim, cfg.max_sequence_length);
    let mut out = vec![
        (TOKEN_EMBEDDING.to_string(), vec![v, d], Init::Normal),
        (POSITION_EMBEDDING.to_string(), vec![s, d], Init::Normal),
    ];
    for i in 0..cfg.num_layers {
        out.push((layer_name(i, "ln1.gain"), vec![d], Init::Ones));
        out.push((layer_name(i, "ln1.bias"), vec![d], Init::Zeros));
        for proj in ["query", "key", "value", "output"] {
            out.push((layer_name(i, &format!("attn.{proj}.weight")), vec![d, d], Init::Normal));
            out.push((layer_name(i, &format!("attn.{proj}.bias")), vec![d], Init::Zeros));
        }
        out.push((layer_name(i, "ln2.gain"), vec![d], Init::Ones));
        out.push((layer_name(i, "ln2.bias"), vec![d], Init::Zeros));
        out.push((layer_name(i, "ffn.in.weight"), vec![d, f], Init::Normal));
        out.push((layer_name(i, "ffn.in.bias"), vec![f], Init::Zeros));
        out.push((layer_name(i, "ffn.out.weight"), vec![f, d], Init::Normal));
        out.push((layer_name(i, "ffn.out.bias"), vec![d], Init::Zeros));
    }
    out.extend([
        ("final_ln.gain".to_string(), vec![d], Init::Ones),
        ("final_ln.bias".to_string(), vec![d], Init::Zeros),
        ("mlm_head.transform.weight".to_string(), vec![d, d], Init::Normal),
        ("mlm_head.transform.bias".to_string(), vec![d], Init::Zeros),
        ("mlm_head.ln.gain".to_string(), vec![d], Init::Ones),
        ("mlm_head.ln.bias".to_string(), vec![d], Init::Zeros),
        ("mlm_head.bias".to_string(), vec![v], Init::Zeros),
    ]);
    out.extend(cls_head_layout(d, cfg.num_labels));
    out
}

fn cls_head_layout(d: usize, labels: usize) -> Vec<(String, Vec<usize>, Init)> {
    vec![
        ("cls_head.dense.weight".to_string(), vec![d, d], Init::Normal),
        ("cls_head.dense.bias".to_string(), vec![d], Init::Zeros),
        ("cls_head.out.weight".to_string(), vec![d, labels], Init::Normal),
        ("cls_head.out.bias".to_string(), vec![labels], Init::Zeros),
    ]
}

fn init_tensor<T: Real>(dims: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let t = match init {
        Init::Zeros => Tensor::zeros(dims),
        Init::Ones => Tensor::filled(dims, T::one()),
        Init::Normal => {
            let normal = Normal::new(0.0, INIT_STD).expect("valid std");
            let n = dims.iter().product();
            let values = (0..n).map(|_| c::<T>(normal.sample(rng))).collect();
            Tensor::new(dims.to_vec(), values).expect("dims match")
        }
    };
    t.with_grad()
}

/// Named parameter snapshot. The MLM output projection has no tensor of its
/// own: it reads [`TOKEN_EMBEDDING`] transposed, so both views always share
/// one storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T = f32> {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ModelParameters<T> {
    /// Weights ~ Normal(0, 0.02), biases 0, gains 1; deterministic per seed.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tensors = layout(config)
            .into_iter()
            .map(|(name, dims, init)| (name, init_tensor(&dims, init, &mut rng)))
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Reassembles parameters (for example from a checkpoint), checking that
    /// names and shapes match the layout implied by `config`.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, dims, _) in &expected {
            match tensors.get(name) {
                None => return Err(Error::Config(format!("missing tensor `{name}`"))),
                Some(t) if t.dims() != dims.as_slice() => {
                    return Err(Error::Shape {
                        op: "from_tensors",
                        left: dims.clone(),
                        right: t.dims().to_vec(),
                    })
                }
                _ => {}
            }
        }
        let tensors = tensors.into_iter().map(|(n, t)| (n, t.with_grad())).collect();
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn clear_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::clear_grad);
    }

    /// Adds gradients produced by [`Graph::gradients`].
    pub fn accumulate(&mut self, grads: &[(String, Vec<T>)]) -> Result<()> {
        for (name, g) in grads {
            self.tensors
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?
                .accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Parameters that currently hold a gradient, for the optimizer.
    pub fn with_grads_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.iter_mut().filter(|(_, t)| t.grad().is_some())
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Re-initialises the classification head for `num_labels` classes.
    pub fn reset_cls_head(&mut self, num_labels: usize, seed: u64) -> Result<()> {
        if num_labels == 0 {
            return Err(Error::Config("num_labels must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, dims, init) in cls_head_layout(self.config.hidden_dim, num_labels) {
            self.tensors.insert(name, init_tensor(&dims, init, &mut rng));
        }
        self.config.num_labels = num_labels;
        Ok(())
    }
}

/// A padded batch of encodings, flattened row-major as `[batch, seq]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub batch: usize,
    pub seq: usize,
    pub mask_positions: Vec<Option<usize>>,
}

impl Batch {
    /// Right-pads every encoding with `pad_id` to the longest one.
    pub fn from_encodings(encodings: &[&Encoding], pad_id: u32) -> Self {
        let seq = encodings.iter().map(|e| e.len()).max().unwrap_or(0).max(1);
        Self::padded_to(encodings, pad_id, seq)
    }

    pub fn padded_to(encodings: &[&Encoding], pad_id: u32, seq: usize) -> Self {
        let mut ids = Vec::with_capacity(encodings.len() * seq);
        let mut attention_mask = Vec::with_capacity(encodings.len() * seq);
        for e in encodings {
            let n = e.len().min(seq);
            ids.extend_from_slice(&e.ids[..n]);
            attention_mask.extend_from_slice(&e.attention_mask[..n]);
            ids.extend(core::iter::repeat(pad_id).take(seq - n));
            attention_mask.extend(core::iter::repeat(0).take(seq - n));
        }
        Self {
            ids,
            attention_mask,
            batch: encodings.len(),
            seq,
            mask_positions: encodings.iter().map(|e| e.mask_position).collect(),
        }
    }

    pub fn from_sequences(seqs: &[&[u32]], pad_id: u32) -> Self {
        let encs: Vec<Encoding> = seqs.iter().map(|s| Encoding::new(s.to_vec(), None)).collect();
        let refs: Vec<&Encoding> = encs.iter().collect();
        Self::from_encodings(&refs, pad_id)
    }
}

/// Whether dropout is active. Training mode carries the dropout RNG.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

/// One forward/backward computation over a parameter snapshot. Parameters are
/// copied onto the tape the first time they are used.
pub struct Graph<'a, T: Real = f32> {
    pub tape: Tape<T>,
    params: &'a ModelParameters<T>,
    bound: BTreeMap<&'a str, Var>,
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(params: &'a ModelParameters<T>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &'a ModelConfig {
        &self.params.config
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let (key, tensor) = self
            .params
            .tensors
            .get_key_value(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let v = self.tape.leaf(tensor.clone());
        self.bound.insert(key.as_str(), v);
        Ok(v)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients of every bound parameter that received one.
    pub fn gradients(&self) -> Vec<(String, Vec<T>)> {
        self.bound
            .iter()
            .filter_map(|(name, v)| self.tape.grad(*v).map(|g| (name.to_string(), g.to_vec())))
            .collect()
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gain"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.layer_norm(x, g, b)
    }

    /// Encodes a batch into hidden states `[batch, seq, d]`.
    pub fn forward(&mut self, batch: &Batch, mut mode: Mode<'_>) -> Result<Var> {
        let cfg = self.params.config.clone();
        let (b, s, d, h) = (batch.batch, batch.seq, cfg.hidden_dim, cfg.num_heads);
        if s > cfg.max_sequence_length {
            return Err(Error::Shape {
                op: "forward",
                left: vec![b, s],
                right: vec![cfg.max_sequence_length],
            });
        }
        if b == 0 || batch.ids.len() != b * s || batch.attention_mask.len() != b * s {
            return Err(Error::Shape {
                op: "forward",
                left: vec![b, s],
                right: vec![batch.ids.len(), batch.attention_mask.len()],
            });
        }
        let dropout_p = cfg.dropout_p;
        let drop = |tape: &mut Tape<T>, x: Var, mode: &mut Mode<'_>| -> Result<Var> {
            match mode {
                Mode::Eval => Ok(x),
                Mode::Train(rng) => tape.dropout(x, dropout_p, true, &mut **rng),
            }
        };

        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
        let tok = self.param(TOKEN_EMBEDDING)?;
        let pos = self.param(POSITION_EMBEDDING)?;
        let te = self.tape.embedding_gather(tok, &ids)?;
        let pe = self.tape.embedding_gather(pos, &positions)?;
        let x = self.tape.add(te, pe)?;
        let x = self.tape.reshape(x, &[b, s, d])?;
        let mut x = drop(&mut self.tape, x, &mut mode)?;

        let neg = T::neg_infinity();
        let mut key_bias = Vec::with_capacity(b * h * s * s);
        for bi in 0..b {
            let row: Vec<T> = (0..s)
                .map(|j| if batch.attention_mask[bi * s + j] == 0 { neg } else { T::zero() })
                .collect();
            for _ in 0..h * s {
                key_bias.extend_from_slice(&row);
            }
        }
        let inv_sqrt = c::<T>(1.0 / num_traits::Float::sqrt((d / h) as f64));

        for layer in 0..cfg.num_layers {
            let p = |rest: &str| layer_name(layer, rest);
            let hdn = self.norm(x, &p("ln1"))?;
            let q = self.linear(hdn, &p("attn.query"))?;
            let k = self.linear(hdn, &p("attn.key"))?;
            let v = self.linear(hdn, &p("attn.value"))?;
            let q = self.tape.split_heads(q, b, s, h)?;
            let k = self.tape.split_heads(k, b, s, h)?;
            let v = self.tape.split_heads(v, b, s, h)?;
            let scores = self.tape.bmm(q, k, true)?;
            let scores = self.tape.scale(scores, inv_sqrt);
            let scores = self.tape.add_const(scores, &key_bias)?;
            let probs = self.tape.softmax(scores);
            let ctx = self.tape.bmm(probs, v, false)?;
            let ctx = self.tape.merge_heads(ctx, b, s, h)?;
            let attn = self.linear(ctx, &p("attn.output"))?;
            let attn = drop(&mut self.tape, attn, &mut mode)?;
            x = self.tape.add(x, attn)?;

            let hdn = self.norm(x, &p("ln2"))?;
            let ff = self.linear(hdn, &p("ffn.in"))?;
            let ff = self.tape.gelu(ff);
            let ff = self.linear(ff, &p("ffn.out"))?;
            let ff = drop(&mut self.tape, ff, &mut mode)?;
            x = self.tape.add(x, ff)?;
        }
        self.norm(x, "final_ln")
    }

    /// Vocabulary logits `[positions.len(), vocab]` at `(row, col)` positions
    /// of `hidden`: transform, gelu, layer norm, then the tied projection.
    pub fn mlm_logits(&mut self, hidden: Var, positions: &[(usize, usize)]) -> Result<Var> {
        let hd = self.tape.dims(hidden).to_vec();
        if hd.len() != 3 {
            return Err(Error::Shape {
                op: "mlm_logits",
                left: hd,
                right: vec![],
            });
        }
        let (b, s) = (hd[0], hd[1]);
        let mut rows = Vec::with_capacity(positions.len());
        for &(r, col) in positions {
            if r >= b {
                return Err(Error::Index { what: "batch row", index: r, bound: b });
            }
            if col >= s {
                return Err(Error::Index { what: "sequence position", index: col, bound: s });
            }
            rows.push(r * s + col);
        }
        let sel = self.tape.select_rows(hidden, &rows)?;
        let t = self.linear(sel, "mlm_head.transform")?;
        let t = self.tape.gelu(t);
        let t = self.norm(t, "mlm_head.ln")?;
        let emb = self.param(TOKEN_EMBEDDING)?;
        let logits = self.tape.matmul_bt(t, emb)?;
        let bias = self.param("mlm_head.bias")?;
        self.tape.add_row(logits, bias)
    }

    /// Class logits `[batch, num_labels]` from the `[CLS]` (position 0) state.
    pub fn cls_logits(&mut self, hidden: Var) -> Result<Var> {
        let hd = self.tape.dims(hidden).to_vec();
        if hd.len() != 3 {
            return Err(Error::Shape {
                op: "cls_logits",
                left: hd,
                right: vec![],
            });
        }
        let rows: Vec<usize> = (0..hd[0]).map(|r| r * hd[1]).collect();
        let cls = self.tape.select_rows(hidden, &rows)?;
        let inner = self.linear(cls, "cls_head.dense")?;
        let inner = self.tape.tanh(inner);
        self.linear(inner, "cls_head.out")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc(ids: &[u32]) -> Encoding {
        Encoding::new(ids.to_vec(), None)
    }

    fn cfg() -> ModelConfig {
        ModelConfig::tiny(30)
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ModelParameters::<f32>::init(&cfg()).unwrap();
        let b = ModelParameters::<f32>::init(&cfg()).unwrap();
        assert_eq!(a, b);
        let mut other = cfg();
        other.seed = 2;
        let c = ModelParameters::<f32>::init(&other).unwrap();
        assert_ne!(a.get(TOKEN_EMBEDDING), c.get(TOKEN_EMBEDDING));
    }

    #[test]
    fn init_values_follow_scheme() {
        let p = ModelParameters::<f32>::init(&cfg()).unwrap();
        assert!(p.get("layers.0.ln1.gain").unwrap().values().iter().all(|v| *v == 1.0));
        assert!(p.get("layers.1.attn.key.bias").unwrap().values().iter().all(|v| *v == 0.0));
        assert!(p.get("mlm_head.bias").unwrap().values().iter().all(|v| *v == 0.0));
        assert!(p.iter().all(|(_, t)| t.requires_grad()));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut bad = cfg();
        bad.num_heads = 3;
        assert!(matches!(ModelParameters::<f32>::init(&bad), Err(Error::Config(_))));
        let mut bad = cfg();
        bad.dropout_p = 1.0;
        assert!(ModelParameters::<f32>::init(&bad).is_err());
    }

    #[test]
    fn forward_shape_and_oversize_error() {
        let p = ModelParameters::<f32>::init(&cfg()).unwrap();
        let (a, b) = (enc(&[2, 10, 11, 3]), enc(&[2, 12, 3]));
        let batch = Batch::from_encodings(&[&a, &b], 0);
        let mut g = Graph::new(&p);
        let h = g.forward(&batch, Mode::Eval).unwrap();
        assert_eq!(g.tape.dims(h), &[2, 4, 16]);

        let long = enc(&[5; 17]);
        let batch = Batch::from_encodings(&[&long], 0);
        let mut g = Graph::new(&p);
        assert!(matches!(g.forward(&batch, Mode::Eval), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_positions_give_empty_logits() {
        let p = ModelParameters::<f32>::init(&cfg()).unwrap();
        let a = enc(&[2, 10, 3]);
        let batch = Batch::from_encodings(&[&a], 0);
        let mut g = Graph::new(&p);
        let h = g.forward(&batch, Mode::Eval).unwrap();
        let l = g.mlm_logits(h, &[]).unwrap();
        assert_eq!(g.tape.dims(l), &[0, 30]);
        assert!(matches!(g.mlm_logits(h, &[(0, 3)]), Err(Error::Index { .. })));
        assert!(matches!(g.mlm_logits(h, &[(1, 0)]), Err(Error::Index { .. })));
    }

    #[test]
    fn cls_logits_of_zero_state_equal_output_bias() {
        let mut p = ModelParameters::<f64>::init(&cfg()).unwrap();
        p.get_mut("cls_head.out.bias").unwrap().values_mut().copy_from_slice(&[0.25, -1.5]);
        let mut g = Graph::new(&p);
        let h = g.tape.constant(Tensor::zeros(&[3, 4, 16]));
        let l = g.cls_logits(h).unwrap();
        assert_eq!(g.tape.dims(l), &[3, 2]);
        assert_eq!(g.tape.value(l).values(), &[0.25, -1.5, 0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn reset_cls_head_changes_label_count() {
        let mut p = ModelParameters::<f32>::init(&cfg()).unwrap();
        p.reset_cls_head(3, 7).unwrap();
        assert_eq!(p.config().num_labels, 3);
        assert_eq!(p.get("cls_head.out.bias").unwrap().dims(), &[3]);
    }
}
