//! Central finite-difference checks of tape gradients, at `f64`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, RngCore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Batch, Graph, Mode, ModelConfig, ModelParameters};
use crate::objectives::{apply_mlm_masking, cls_ft_loss, mlm_loss, prompt_ft_loss};
use crate::tape::{Tape, Var};
use crate::template::Verbalizer;
use crate::tensor::Tensor;
use crate::tokenizer::{soft_token_name, Encoding, Vocabulary, SPECIALS};

/// Default perturbation.
pub const STEP: f64 = 1e-6;

/// Denominator floor: below it the error is effectively absolute.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Worst coordinate seen by a check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input or parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            checked: 0,
            worst: None,
        }
    }

    fn record(&mut self, what: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() || err.is_nan() {
            self.max_rel_error = if err.is_nan() { f64::INFINITY } else { err.max(self.max_rel_error) };
            self.worst = Some((String::from(what), index, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Reduces a non-scalar output to a scalar with fixed, non-uniform weights so
/// that every output element contributes a distinct amount.
fn reduce(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let value = tape.value(out);
    if value.numel() == 1 {
        return Ok(out);
    }
    let weights: Vec<f64> = (0..value.numel()).map(|i| Float::sin(i as f64 * 0.731 + 0.3) + 0.5).collect();
    let w = tape.constant(Tensor::new(value.dims().to_vec(), weights)?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = reduce(&mut tape, out)?;
    Ok(tape.value(loss).values()[0])
}

/// Compares the tape gradient of `f` with respect to every element of every
/// input against a central difference with step `h`.
pub fn check_op<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = reduce(&mut tape, out)?;
    tape.backward(loss)?;
    let mut report = GradCheck::new();
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zeros;
        let analytic = match tape.grad(*v) {
            Some(g) => g,
            None => {
                zeros = alloc::vec![0.0; inputs[i].numel()];
                &zeros
            }
        };
        for j in 0..inputs[i].numel() {
            let x = inputs[i].values()[j];
            probe[i].values_mut()[j] = x + h;
            let plus = evaluate(&probe, &f)?;
            probe[i].values_mut()[j] = x - h;
            let minus = evaluate(&probe, &f)?;
            probe[i].values_mut()[j] = x;
            report.record(&format!("input {i}"), j, analytic[j], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

fn set(p: &mut ModelParameters<f64>, name: &str, j: usize, value: f64) {
    if let Some(t) = p.get_mut(name) {
        t.values_mut()[j] = value;
    }
}

/// Checks parameter gradients of a model loss. `per_tensor` coordinates of
/// each parameter tensor are drawn from `rng` (all of them if the tensor is
/// smaller). Parameters the loss does not touch must have zero numeric
/// gradient.
pub fn check_model<F>(params: &ModelParameters<f64>, loss: F, per_tensor: usize, h: f64, rng: &mut dyn RngCore) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let run = |p: &ModelParameters<f64>| -> Result<f64> {
        let mut g = Graph::new(p);
        let l = loss(&mut g)?;
        Ok(g.tape.value(l).values()[0])
    };
    let grads = {
        let mut g = Graph::new(params);
        let l = loss(&mut g)?;
        g.backward(l)?;
        g.gradients()
    };
    let mut report = GradCheck::new();
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let n = params.get(&name).map_or(0, Tensor::numel);
        let analytic = grads.iter().find(|(k, _)| *k == name).map(|(_, g)| g.as_slice());
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for j in picks {
            let x = probe.get(&name).map(|t| t.values()[j]).expect("listed name");
            set(&mut probe, &name, j, x + h);
            let plus = run(&probe)?;
            set(&mut probe, &name, j, x - h);
            let minus = run(&probe)?;
            set(&mut probe, &name, j, x);
            let a = analytic.map_or(0.0, |g| g[j]);
            report.record(&name, j, a, (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product();
    let values = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(dims.to_vec(), values).expect("dims match")
}

/// Values at least 0.05 away from zero, so a kink is never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let mut t = random_tensor(rng, dims);
    for v in t.values_mut() {
        *v = Float::signum(*v) * (0.05 + Float::abs(*v));
    }
    t
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Names of the tape operations covered by [`check_op_suite`].
pub const OPS: [&str; 23] = [
    "matmul",
    "matmul_bt",
    "bmm",
    "bmm_trans_b",
    "add",
    "mul",
    "add_row",
    "add_const",
    "scale",
    "gelu",
    "relu",
    "tanh",
    "layer_norm",
    "softmax",
    "embedding_gather",
    "select_rows",
    "select_cols",
    "split_heads",
    "merge_heads",
    "reshape",
    "dropout",
    "sum",
    "cross_entropy",
];

/// One randomized finite-difference check of `op` (a name from [`OPS`]).
pub fn check_op_case(op: &str, rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let h = STEP;
    let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    match op {
        "matmul" => {
            let lead = dim(rng, 1, 3);
            check_op(&[random_tensor(rng, &[lead, m, k]), random_tensor(rng, &[k, n])], |t, v| t.matmul(v[0], v[1]), h)
        }
        "matmul_bt" => check_op(&[random_tensor(rng, &[m, k]), random_tensor(rng, &[n, k])], |t, v| t.matmul_bt(v[0], v[1]), h),
        "bmm" => {
            let g = dim(rng, 1, 3);
            check_op(&[random_tensor(rng, &[g, m, k]), random_tensor(rng, &[g, k, n])], |t, v| t.bmm(v[0], v[1], false), h)
        }
        "bmm_trans_b" => {
            let g = dim(rng, 1, 3);
            check_op(&[random_tensor(rng, &[g, m, k]), random_tensor(rng, &[g, n, k])], |t, v| t.bmm(v[0], v[1], true), h)
        }
        "add" => check_op(&[random_tensor(rng, &[m, n]), random_tensor(rng, &[m, n])], |t, v| t.add(v[0], v[1]), h),
        "mul" => check_op(&[random_tensor(rng, &[m, n]), random_tensor(rng, &[m, n])], |t, v| t.mul(v[0], v[1]), h),
        "add_row" => check_op(&[random_tensor(rng, &[m, k, n]), random_tensor(rng, &[n])], |t, v| t.add_row(v[0], v[1]), h),
        "add_const" => {
            let c = random_tensor(rng, &[m, n]).into_values();
            check_op(&[random_tensor(rng, &[m, n])], move |t, v| t.add_const(v[0], &c), h)
        }
        "scale" => {
            let s = rng.random_range(-2.0..2.0);
            check_op(&[random_tensor(rng, &[m, n])], move |t, v| Ok(t.scale(v[0], s)), h)
        }
        "gelu" => check_op(&[random_tensor(rng, &[m, n])], |t, v| Ok(t.gelu(v[0])), h),
        "relu" => check_op(&[away_from_zero(rng, &[m, n])], |t, v| Ok(t.relu(v[0])), h),
        "tanh" => check_op(&[random_tensor(rng, &[m, n])], |t, v| Ok(t.tanh(v[0])), h),
        "layer_norm" => {
            let n = dim(rng, 2, 6);
            check_op(
                &[random_tensor(rng, &[m, n]), random_tensor(rng, &[n]), random_tensor(rng, &[n])],
                |t, v| t.layer_norm(v[0], v[1], v[2]),
                h,
            )
        }
        "softmax" => {
            // Additive attention-style mask: column 0 always stays visible.
            let n = dim(rng, 2, 5);
            let mask: Vec<f64> = (0..m * n)
                .map(|i| if i % n != 0 && rng.random_bool(0.3) { f64::NEG_INFINITY } else { 0.0 })
                .collect();
            check_op(
                &[random_tensor(rng, &[m, n])],
                move |t, v| {
                    let masked = t.add_const(v[0], &mask)?;
                    Ok(t.softmax(masked))
                },
                h,
            )
        }
        "embedding_gather" => {
            let vocab = dim(rng, 2, 6);
            let ids: Vec<usize> = (0..dim(rng, 1, 6)).map(|_| rng.random_range(0..vocab)).collect();
            check_op(&[random_tensor(rng, &[vocab, n])], move |t, v| t.embedding_gather(v[0], &ids), h)
        }
        "select_rows" => {
            let lead = dim(rng, 1, 3);
            let rows: Vec<usize> = (0..dim(rng, 1, 5)).map(|_| rng.random_range(0..lead * m)).collect();
            check_op(&[random_tensor(rng, &[lead, m, n])], move |t, v| t.select_rows(v[0], &rows), h)
        }
        "select_cols" => {
            let cols: Vec<usize> = (0..dim(rng, 1, 5)).map(|_| rng.random_range(0..n)).collect();
            check_op(&[random_tensor(rng, &[m, n])], move |t, v| t.select_cols(v[0], &cols), h)
        }
        "split_heads" => {
            let (b, s, heads, dh) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 2));
            check_op(&[random_tensor(rng, &[b * s, heads * dh])], move |t, v| t.split_heads(v[0], b, s, heads), h)
        }
        "merge_heads" => {
            let (b, s, heads, dh) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 2));
            check_op(&[random_tensor(rng, &[b * heads, s, dh])], move |t, v| t.merge_heads(v[0], b, s, heads), h)
        }
        "reshape" => check_op(&[random_tensor(rng, &[m, k, n])], move |t, v| t.reshape(v[0], &[k, m * n]), h),
        "dropout" => {
            let seed = rng.random();
            check_op(
                &[random_tensor(rng, &[m, n])],
                move |t, v| t.dropout(v[0], 0.3, true, &mut ChaCha8Rng::seed_from_u64(seed)),
                h,
            )
        }
        "sum" => check_op(&[random_tensor(rng, &[m, n])], |t, v| Ok(t.sum(v[0])), h),
        "cross_entropy" => {
            let c = dim(rng, 2, 5);
            let rows = dim(rng, 2, 5);
            let targets: Vec<i64> = (0..rows)
                .map(|i| if i > 0 && rng.random_bool(0.25) { -1 } else { rng.random_range(0..c) as i64 })
                .collect();
            let mut logits = random_tensor(rng, &[rows, c]);
            for v in logits.values_mut() {
                *v *= 3.0;
            }
            check_op(&[logits], move |t, v| t.cross_entropy(v[0], &targets, -1), h)
        }
        other => Err(Error::contract(format!("no gradient case for `{other}`"))),
    }
}

/// `cases` random checks of every operation in [`OPS`], merged per operation.
pub fn check_op_suite(cases: usize, seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OPS.iter()
        .map(|&op| {
            let mut total = GradCheck::new();
            for _ in 0..cases {
                total.merge(check_op_case(op, &mut rng)?);
            }
            Ok((op, total))
        })
        .collect()
}

/// Losses covered by [`check_model_suite`].
pub const LOSSES: [&str; 3] = ["cls", "prompt", "mlm"];

/// Vocabulary of exactly `size` tokens: specials, `soft` soft tokens, then
/// words `w0`, `w1`, ...
pub fn toy_vocab(size: usize, soft: usize) -> Result<Vocabulary> {
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| String::from(*s)).collect();
    tokens.extend((0..soft).map(soft_token_name));
    let words = size
        .checked_sub(tokens.len())
        .ok_or_else(|| Error::Config(format!("{size} tokens cannot hold the specials")))?;
    tokens.extend((0..words).map(|i| format!("w{i}")));
    Vocabulary::from_tokens(tokens)
}

/// A random padded batch: `[CLS]` words ... `[SEP]`, with a `[MASK]` at a
/// random interior position of every row.
fn random_batch(rng: &mut ChaCha8Rng, vocab: &Vocabulary, max_len: usize) -> Batch {
    let rows = dim(rng, 1, 3);
    let encodings: Vec<Encoding> = (0..rows)
        .map(|_| {
            let len = dim(rng, 4, max_len);
            let mut ids = alloc::vec![vocab.cls_id()];
            ids.extend((0..len - 2).map(|_| rng.random_range(vocab.first_word_id()..vocab.len() as u32)));
            ids.push(vocab.sep_id());
            let pos = rng.random_range(1..len - 1);
            ids[pos] = vocab.mask_id();
            Encoding::new(ids, Some(pos))
        })
        .collect();
    let refs: Vec<&Encoding> = encodings.iter().collect();
    Batch::from_encodings(&refs, vocab.pad_id())
}

/// One randomized check of a full loss on a freshly initialized model.
pub fn check_model_case(loss: &str, config: &ModelConfig, per_tensor: usize, rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let vocab = toy_vocab(config.vocab_size, 8)?;
    let cfg = ModelConfig {
        seed: rng.random(),
        dropout_p: 0.0,
        ..config.clone()
    };
    let mut params = ModelParameters::<f64>::init(&cfg)?;
    // Non-zero biases and gains so that no term vanishes at initialization.
    for (_, t) in params.iter_mut() {
        for v in t.values_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let batch = random_batch(rng, &vocab, cfg.max_sequence_length);
    let labels: Vec<Option<usize>> = (0..batch.batch).map(|_| Some(rng.random_range(0..cfg.num_labels))).collect();
    let h = STEP;
    match loss {
        "cls" => check_model(&params, |g| cls_ft_loss(g, &batch, &labels, Mode::Eval), per_tensor, h, rng),
        "prompt" => {
            let names: Vec<String> = (0..cfg.num_labels).map(|i| format!("label{i}")).collect();
            let words: Vec<String> = (0..cfg.num_labels).map(|i| format!("w{i}")).collect();
            let verbalizer = Verbalizer::new(names, &words, &vocab)?;
            check_model(&params, |g| prompt_ft_loss(g, &batch, &labels, &verbalizer, Mode::Eval), per_tensor, h, rng)
        }
        "mlm" => {
            let masked = loop {
                let m = apply_mlm_masking(&batch, &vocab, 0.3, rng)?;
                if m.num_selected() > 0 {
                    break m;
                }
            };
            check_model(&params, |g| mlm_loss(g, &masked, Mode::Eval), per_tensor, h, rng)
        }
        other => Err(Error::contract(format!("no gradient case for loss `{other}`"))),
    }
}

/// `cases` random checks of every loss in [`LOSSES`] at `config` scale.
pub fn check_model_suite(config: &ModelConfig, cases: usize, per_tensor: usize, seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LOSSES
        .iter()
        .map(|&loss| {
            let mut total = GradCheck::new();
            for _ in 0..cases {
                total.merge(check_model_case(loss, config, per_tensor, &mut rng)?);
            }
            Ok((loss, total))
        })
        .collect()
}
