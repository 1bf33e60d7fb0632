//! Training stages: fine-tuning, pseudo-labelling, corpus construction,
//! continued pre-training and the two-step prompt-based continued
//! pre-training run.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::compute_metric;
use crate::model::{Batch, Graph, Mode, ModelParameters};
use crate::objectives::{apply_mlm_masking, argmax, cls_ft_loss, mlm_loss, prompt_class_logits, prompt_ft_loss};
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::template::{soft_prompt_init, truncate_pair, Example, PromptStyle, Segment, SlotFill, TaskSpec, Template};
use crate::tensor::Real;
use crate::tokenizer::{Encoding, Vocabulary};

/// Learning rates searched during fine-tuning.
pub const FINETUNE_LR_GRID: [f64; 3] = [1e-5, 2e-5, 5e-5];
/// Learning rates searched during continued pre-training.
pub const PRETRAIN_LR_GRID: [f64; 2] = [1e-5, 1e-4];

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMethod {
    Cls,
    PromptHard,
    PromptSoft,
}

impl FinetuneMethod {
    pub const ALL: [FinetuneMethod; 3] = [Self::Cls, Self::PromptHard, Self::PromptSoft];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cls => "cls",
            Self::PromptHard => "prompt_hard",
            Self::PromptSoft => "prompt_soft",
        }
    }

    pub fn prompt_style(self) -> Option<PromptStyle> {
        match self {
            Self::Cls => None,
            Self::PromptHard => Some(PromptStyle::Hard),
            Self::PromptSoft => Some(PromptStyle::Soft),
        }
    }
}

impl fmt::Display for FinetuneMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FinetuneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "cls" => Ok(Self::Cls),
            "prompt_hard" | "prompt" => Ok(Self::PromptHard),
            "prompt_soft" => Ok(Self::PromptSoft),
            _ => Err(Error::Config(format!("unknown fine-tuning method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub eval_interval: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_sequence_length: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            eval_interval: 100,
            batch_size: 8,
            learning_rate: FINETUNE_LR_GRID[0],
            max_sequence_length: 128,
            optimizer: AdamWConfig::default(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub masking_probability: f64,
    pub max_sequence_length: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Cap on unlabelled examples fed to corpus construction.
    pub unlabelled_cap: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-4,
            masking_probability: crate::objectives::DEFAULT_MASKING_PROBABILITY,
            max_sequence_length: 128,
            optimizer: AdamWConfig::default(),
            seed: 42,
            unlabelled_cap: Some(10_000),
        }
    }
}

impl PretrainConfig {
    /// Full-scale values: 100 epochs at batch 256.
    pub fn full_scale() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            ..Self::default()
        }
    }
}

fn effective_len(requested: usize, params_max: usize) -> usize {
    if requested > params_max {
        debug!("sequence length {requested} clamped to the model's {params_max} positions");
    }
    requested.min(params_max)
}

/// `[CLS] a [SEP] b [SEP]` (or `[CLS] a [SEP]`), truncated longest-first.
pub fn render_plain(example: &Example, vocab: &Vocabulary, max_len: usize) -> Result<Encoding> {
    let mut a = vocab.encode(&example.text_a);
    let mut b = example.text_b.as_deref().map(|t| vocab.encode(t));
    let scaffold = if b.is_some() { 3 } else { 2 };
    if max_len < scaffold {
        return Err(Error::Template(format!("max_len {max_len} cannot hold the [CLS]/[SEP] frame")));
    }
    let mut ids = vec![vocab.cls_id()];
    match b.as_mut() {
        Some(b) => {
            truncate_pair(&mut a, b, max_len - scaffold);
            ids.extend_from_slice(&a);
            ids.push(vocab.sep_id());
            ids.extend_from_slice(b);
        }
        None => {
            a.truncate(max_len - scaffold);
            ids.extend_from_slice(&a);
        }
    }
    ids.push(vocab.sep_id());
    Ok(Encoding::new(ids, None))
}

/// Model inputs for `method`: the task template for prompt methods, plain
/// framing for the `[CLS]` head.
pub fn encode_examples(
    method: FinetuneMethod,
    task: &TaskSpec,
    vocab: &Vocabulary,
    examples: &[Example],
    max_len: usize,
) -> Result<Vec<Encoding>> {
    match method.prompt_style() {
        None => examples.iter().map(|e| render_plain(e, vocab, max_len)).collect(),
        Some(style) => {
            let t = task.template_for(style);
            examples.iter().map(|e| t.render(e, vocab, max_len)).collect()
        }
    }
}

/// Class scores per example: restricted label-word logits for prompt
/// methods, head logits for `cls`. Evaluation mode, no dropout.
pub fn class_scores<T: Real>(
    params: &ModelParameters<T>,
    method: FinetuneMethod,
    task: &TaskSpec,
    vocab: &Vocabulary,
    examples: &[Example],
    max_len: usize,
) -> Result<Vec<Vec<f64>>> {
    let max_len = effective_len(max_len, params.config().max_sequence_length);
    let encodings = encode_examples(method, task, vocab, examples, max_len)?;
    let verbalizer = task.verbalizer(vocab)?;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in encodings.chunks(EVAL_BATCH) {
        let refs: Vec<&Encoding> = chunk.iter().collect();
        let batch = Batch::from_encodings(&refs, vocab.pad_id());
        let mut g = Graph::new(params);
        let hidden = g.forward(&batch, Mode::Eval)?;
        let logits = match method {
            FinetuneMethod::Cls => g.cls_logits(hidden)?,
            _ => prompt_class_logits(&mut g, hidden, &batch, &verbalizer)?,
        };
        let width = g.tape.dims(logits)[1];
        out.extend(
            g.tape
                .value(logits)
                .values()
                .chunks(width)
                .map(|row| row.iter().map(|v| v.as_f64()).collect::<Vec<f64>>()),
        );
    }
    Ok(out)
}

pub fn predict<T: Real>(
    params: &ModelParameters<T>,
    method: FinetuneMethod,
    task: &TaskSpec,
    vocab: &Vocabulary,
    examples: &[Example],
    max_len: usize,
) -> Result<Vec<usize>> {
    Ok(class_scores(params, method, task, vocab, examples, max_len)?
        .iter()
        .map(|s| argmax(s))
        .collect())
}

/// Task metric of `method` on labelled `examples`.
pub fn evaluate<T: Real>(
    params: &ModelParameters<T>,
    method: FinetuneMethod,
    task: &TaskSpec,
    vocab: &Vocabulary,
    examples: &[Example],
    max_len: usize,
) -> Result<f64> {
    let golds = gold_labels(examples)?;
    let preds = predict(params, method, task, vocab, examples, max_len)?;
    compute_metric(task.metric, &preds, &golds)
}

fn gold_labels(examples: &[Example]) -> Result<Vec<usize>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| e.label.ok_or_else(|| Error::Data(format!("example {i} is unlabelled"))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: u64,
    pub dev_score: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T = f32> {
    pub params: ModelParameters<T>,
    pub trace: Vec<TracePoint>,
    /// Training loss of every step taken.
    pub losses: Vec<f64>,
    /// Dev score of the returned parameters; `-inf` for a diverged run.
    pub best_score: f64,
    pub best_step: u64,
    pub diverged: bool,
}

/// Fine-tunes `init` on `train` for `config.steps` updates, evaluating on
/// `dev` every `config.eval_interval` steps and returning the best dev
/// checkpoint. A non-finite loss stops the run and marks it diverged.
#[allow(clippy::too_many_arguments)]
pub fn train_finetune<T: Real>(
    method: FinetuneMethod,
    init: &ModelParameters<T>,
    train: &[Example],
    dev: &[Example],
    task: &TaskSpec,
    vocab: &Vocabulary,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome<T>> {
    if train.is_empty() {
        return Err(Error::Data("the labelled training set is empty".into()));
    }
    if config.batch_size == 0 || config.eval_interval == 0 {
        return Err(Error::Config("batch_size and eval_interval must be positive".into()));
    }
    let labels: Vec<Option<usize>> = gold_labels(train)?.into_iter().map(Some).collect();
    if config.steps == 0 {
        return Ok(FinetuneOutcome {
            params: init.clone(),
            trace: Vec::new(),
            losses: Vec::new(),
            best_score: f64::NAN,
            best_step: 0,
            diverged: false,
        });
    }
    if dev.is_empty() {
        return Err(Error::Data("the dev set is empty".into()));
    }
    let max_len = effective_len(config.max_sequence_length, init.config().max_sequence_length);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = init.clone();
    match method {
        FinetuneMethod::Cls if params.config().num_labels != task.num_labels() => {
            params.reset_cls_head(task.num_labels(), config.seed)?;
        }
        FinetuneMethod::PromptSoft => {
            for note in soft_prompt_init(&task.soft_template, &task.template, &mut params, vocab, &mut rng)? {
                debug!("soft prompt init: {note:?}");
            }
        }
        _ => {}
    }
    let encodings = encode_examples(method, task, vocab, train, max_len)?;
    let verbalizer = task.verbalizer(vocab)?;
    let mut opt = AdamW::<T>::new(
        config.optimizer,
        Schedule::new(config.learning_rate, config.optimizer.warmup_proportion, config.steps),
    );

    let bs = config.batch_size.min(train.len());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut trace = Vec::new();
    let mut losses = Vec::with_capacity(config.steps as usize);
    let mut best: Option<(f64, u64, ModelParameters<T>)> = None;
    let mut diverged = false;

    for step in 1..=config.steps {
        if cursor + bs > order.len() {
            order = (0..train.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bs];
        cursor += bs;
        let refs: Vec<&Encoding> = idx.iter().map(|&i| &encodings[i]).collect();
        let batch_labels: Vec<Option<usize>> = idx.iter().map(|&i| labels[i]).collect();
        let batch = Batch::from_encodings(&refs, vocab.pad_id());

        let mut g = Graph::new(&params);
        let loss = match method {
            FinetuneMethod::Cls => cls_ft_loss(&mut g, &batch, &batch_labels, Mode::Train(&mut rng))?,
            _ => prompt_ft_loss(&mut g, &batch, &batch_labels, &verbalizer, Mode::Train(&mut rng))?,
        };
        let lv = g.tape.value(loss).values()[0].as_f64();
        losses.push(lv);
        if !lv.is_finite() {
            warn!("{method} fine-tuning diverged at step {step} (lr {})", config.learning_rate);
            diverged = true;
            break;
        }
        g.backward(loss)?;
        let grads = g.gradients();
        drop(g);
        params.clear_grads();
        params.accumulate(&grads)?;
        opt.step(params.with_grads_mut())?;

        if step % config.eval_interval == 0 {
            let score = evaluate(&params, method, task, vocab, dev, max_len)?;
            debug!("{method} step {step}: loss {lv:.4} dev {score:.4}");
            trace.push(TracePoint { step, dev_score: score });
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, step, params.clone()));
            }
        }
    }
    params.clear_grads();

    if diverged {
        let params = best.map_or(params, |(_, _, p)| p);
        return Ok(FinetuneOutcome {
            params,
            trace,
            losses,
            best_score: f64::NEG_INFINITY,
            best_step: 0,
            diverged,
        });
    }
    let (best_score, best_step, params) = match best {
        Some((s, step, mut p)) => {
            p.clear_grads();
            (s, step, p)
        }
        None => {
            let s = evaluate(&params, method, task, vocab, dev, max_len)?;
            (s, config.steps, params)
        }
    };
    Ok(FinetuneOutcome {
        params,
        trace,
        losses,
        best_score,
        best_step,
        diverged,
    })
}

/// Labels each example with the argmax of its restricted label-word
/// distribution under `params` (ties toward the lowest label id).
pub fn pseudo_label<T: Real>(
    params: &ModelParameters<T>,
    unlabelled: &[Example],
    task: &TaskSpec,
    vocab: &Vocabulary,
    style: PromptStyle,
    max_len: usize,
) -> Result<Vec<Example>> {
    let method = match style {
        PromptStyle::Hard => FinetuneMethod::PromptHard,
        PromptStyle::Soft => FinetuneMethod::PromptSoft,
    };
    let preds = predict(params, method, task, vocab, unlabelled, max_len)?;
    Ok(unlabelled
        .iter()
        .zip(preds)
        .map(|(e, y)| Example {
            label: Some(y),
            ..e.clone()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CorpusMode {
    TaptPlain,
    TaptTokenizerSep,
    TaptPcpSep,
    TaptRandomPair,
    TaptFirstSent,
    Pcp,
    PcpRandomLabels,
    PcpWrongLabels,
    PcpLabelsOnly,
    PcpTemplateOnly,
}

impl CorpusMode {
    pub const ALL: [CorpusMode; 10] = [
        Self::TaptPlain,
        Self::TaptTokenizerSep,
        Self::TaptPcpSep,
        Self::TaptRandomPair,
        Self::TaptFirstSent,
        Self::Pcp,
        Self::PcpRandomLabels,
        Self::PcpWrongLabels,
        Self::PcpLabelsOnly,
        Self::PcpTemplateOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::TaptPlain => "TAPT_PLAIN",
            Self::TaptTokenizerSep => "TAPT_TOKENIZER_SEP",
            Self::TaptPcpSep => "TAPT_PCP_SEP",
            Self::TaptRandomPair => "TAPT_RANDOM_PAIR",
            Self::TaptFirstSent => "TAPT_FIRST_SENT",
            Self::Pcp => "PCP",
            Self::PcpRandomLabels => "PCP_RANDOM_LABELS",
            Self::PcpWrongLabels => "PCP_WRONG_LABELS",
            Self::PcpLabelsOnly => "PCP_LABELS_ONLY",
            Self::PcpTemplateOnly => "PCP_TEMPLATE_ONLY",
        }
    }

    /// Whether sequences carry a label word derived from example labels.
    pub fn needs_labels(self) -> bool {
        matches!(self, Self::Pcp | Self::PcpWrongLabels | Self::PcpLabelsOnly)
    }

    /// Whether a sequence carries any label word at all.
    pub fn has_label_word(self) -> bool {
        self.needs_labels() || self == Self::PcpRandomLabels
    }

    pub fn is_tapt(self) -> bool {
        matches!(
            self,
            Self::TaptPlain | Self::TaptTokenizerSep | Self::TaptPcpSep | Self::TaptRandomPair | Self::TaptFirstSent
        )
    }
}

impl fmt::Display for CorpusMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorpusMode {
    type Err = Error;

    /// Case-insensitive; `-` and `_` are interchangeable; `tapt` means
    /// `TAPT_PLAIN`.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_uppercase().replace('-', "_");
        if norm == "TAPT" {
            return Ok(Self::TaptPlain);
        }
        Self::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown corpus mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelOrigin {
    Gold,
    Pseudo,
    Random,
    Wrong,
    None,
}

/// Where a corpus sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Index into the labelled examples followed by the pseudo-labelled ones.
    pub source: usize,
    /// Label whose word fills the mask slot, if any.
    pub label: Option<usize>,
    pub origin: LabelOrigin,
    /// Example that supplied `text_b` under random re-pairing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partner: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub mode: CorpusMode,
    pub sequences: Vec<Vec<u32>>,
    pub provenance: Vec<Provenance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Template literals between the two text slots (the mask slot is dropped).
fn separator_literals(template: &Template) -> Vec<String> {
    let segs = template.segments();
    let a = segs.iter().position(|s| *s == Segment::TextA);
    let b = segs.iter().position(|s| *s == Segment::TextB);
    match (a, b) {
        (Some(a), Some(b)) => {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            segs[lo + 1..hi]
                .iter()
                .filter_map(|s| match s {
                    Segment::Literal(w) => Some(w.clone()),
                    _ => None,
                })
                .collect()
        }
        _ => Vec::new(),
    }
}

/// `[CLS] a sep.. b [SEP]` with the text truncated longest-first.
fn frame(vocab: &Vocabulary, mut a: Vec<u32>, mut b: Vec<u32>, sep: &[u32], max_len: usize) -> Result<Vec<u32>> {
    let scaffold = 2 + sep.len();
    if max_len < scaffold {
        return Err(Error::Template(format!("max_len {max_len} cannot hold the sequence frame")));
    }
    truncate_pair(&mut a, &mut b, max_len - scaffold);
    let mut ids = Vec::with_capacity(scaffold + a.len() + b.len());
    ids.push(vocab.cls_id());
    ids.extend_from_slice(&a);
    ids.extend_from_slice(sep);
    ids.extend_from_slice(&b);
    ids.push(vocab.sep_id());
    Ok(ids)
}

/// Builds a continued pre-training corpus from gold-labelled and
/// pseudo-labelled examples, one framed sequence per example.
///
/// PCP modes render through the `style` template of `task`. TAPT modes use
/// the raw text and ignore labels.
#[allow(clippy::too_many_arguments)]
pub fn build_corpus(
    labelled: &[Example],
    pseudo_labelled: &[Example],
    task: &TaskSpec,
    vocab: &Vocabulary,
    mode: CorpusMode,
    style: PromptStyle,
    max_len: usize,
    rng: &mut dyn RngCore,
) -> Result<Corpus> {
    let sources: Vec<(&Example, LabelOrigin)> = labelled
        .iter()
        .map(|e| (e, LabelOrigin::Gold))
        .chain(pseudo_labelled.iter().map(|e| (e, LabelOrigin::Pseudo)))
        .collect();
    let num_labels = task.num_labels();
    if mode.needs_labels() {
        if let Some(i) = sources.iter().position(|(e, _)| e.label.is_none()) {
            return Err(Error::Data(format!("{mode} needs labels but example {i} has none")));
        }
    }
    if let Some(i) = sources.iter().position(|(e, _)| e.label.is_some_and(|l| l >= num_labels)) {
        return Err(Error::Data(format!("example {i} has a label outside the {num_labels} task labels")));
    }
    let template = task.template_for(style);
    let verbalizer = task.verbalizer(vocab)?;
    let partners: Vec<usize> = if mode == CorpusMode::TaptRandomPair {
        let mut p: Vec<usize> = (0..sources.len()).collect();
        p.shuffle(rng);
        p
    } else {
        Vec::new()
    };

    let mut sequences = Vec::with_capacity(sources.len());
    let mut provenance = Vec::with_capacity(sources.len());
    for (i, (ex, origin)) in sources.iter().enumerate() {
        let mut prov = Provenance {
            source: i,
            label: None,
            origin: LabelOrigin::None,
            partner: None,
        };
        let encode_b = |e: &Example| e.text_b.as_deref().map(|t| vocab.encode(t)).unwrap_or_default();
        let seq = match mode {
            CorpusMode::Pcp | CorpusMode::PcpWrongLabels | CorpusMode::PcpRandomLabels | CorpusMode::PcpLabelsOnly => {
                let (label, origin) = match mode {
                    CorpusMode::PcpWrongLabels => ((ex.label.expect("checked") + 1) % num_labels, LabelOrigin::Wrong),
                    CorpusMode::PcpRandomLabels => (rng.random_range(0..num_labels), LabelOrigin::Random),
                    _ => (ex.label.expect("checked"), *origin),
                };
                prov.label = Some(label);
                prov.origin = origin;
                let token = verbalizer.token_for(label)?;
                let t = if mode == CorpusMode::PcpLabelsOnly {
                    template.labels_only()
                } else {
                    template.clone()
                };
                t.render_with(ex, vocab, max_len, SlotFill::Token(token))?.0
            }
            CorpusMode::PcpTemplateOnly => template.render_with(ex, vocab, max_len, SlotFill::Omit)?.0,
            CorpusMode::TaptPlain => frame(vocab, vocab.encode(&ex.text_a), encode_b(ex), &[], max_len)?,
            CorpusMode::TaptTokenizerSep => {
                let sep: &[u32] = if ex.text_b.is_some() { &[vocab.sep_id()] } else { &[] };
                frame(vocab, vocab.encode(&ex.text_a), encode_b(ex), sep, max_len)?
            }
            CorpusMode::TaptPcpSep => {
                let sep: Vec<u32> = if ex.text_b.is_some() {
                    separator_literals(template).iter().map(|w| vocab.word_id(w)).collect()
                } else {
                    Vec::new()
                };
                frame(vocab, vocab.encode(&ex.text_a), encode_b(ex), &sep, max_len)?
            }
            CorpusMode::TaptRandomPair => {
                let partner = sources[partners[i]].0;
                if ex.text_b.is_some() {
                    prov.partner = Some(partners[i]);
                }
                let b = if ex.text_b.is_some() { encode_b(partner) } else { Vec::new() };
                frame(vocab, vocab.encode(&ex.text_a), b, &[], max_len)?
            }
            CorpusMode::TaptFirstSent => frame(vocab, vocab.encode(&ex.text_a), Vec::new(), &[], max_len)?,
        };
        sequences.push(seq);
        provenance.push(prov);
    }
    Ok(Corpus {
        mode,
        sequences,
        provenance,
    })
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome<T = f32> {
    pub params: ModelParameters<T>,
    /// Mean MLM loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Continued MLM pre-training with dynamic masking: every epoch visits the
/// corpus in a fresh order, in batches of `config.batch_size` (the last one
/// may be smaller), with a new masking pattern.
pub fn continued_pretrain<T: Real>(
    init: &ModelParameters<T>,
    corpus: &[Vec<u32>],
    vocab: &Vocabulary,
    config: &PretrainConfig,
) -> Result<PretrainOutcome<T>> {
    if corpus.is_empty() {
        return Err(Error::Data("the pre-training corpus is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let limit = init.config().max_sequence_length;
    if let Some(i) = corpus.iter().position(|s| s.len() > limit) {
        return Err(Error::Data(format!(
            "corpus sequence {i} has {} tokens, more than the model's {limit} positions",
            corpus[i].len()
        )));
    }
    let per_epoch = corpus.len().div_ceil(config.batch_size) as u64;
    let total = per_epoch * config.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = init.clone();
    let mut opt = AdamW::<T>::new(
        config.optimizer,
        Schedule::new(config.learning_rate, config.optimizer.warmup_proportion, total),
    );
    let mut epoch_losses = Vec::with_capacity(config.epochs as usize);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let seqs: Vec<&[u32]> = chunk.iter().map(|&i| corpus[i].as_slice()).collect();
            let batch = Batch::from_sequences(&seqs, vocab.pad_id());
            let masked = apply_mlm_masking(&batch, vocab, config.masking_probability, &mut rng)?;
            let mut g = Graph::new(&params);
            let loss = mlm_loss(&mut g, &masked, Mode::Train(&mut rng))?;
            let lv = g.tape.value(loss).values()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::Data(format!("pre-training loss became {lv} in epoch {epoch}")));
            }
            sum += lv;
            g.backward(loss)?;
            let grads = g.gradients();
            drop(g);
            params.clear_grads();
            params.accumulate(&grads)?;
            opt.step(params.with_grads_mut())?;
        }
        let mean = sum / per_epoch as f64;
        debug!("pre-training epoch {}: mean loss {mean:.4}", epoch + 1);
        epoch_losses.push(mean);
    }
    params.clear_grads();
    Ok(PretrainOutcome {
        params,
        epoch_losses,
        steps: opt.step_count(),
    })
}

/// Mean MLM loss over `corpus` under a fixed masking seed, without updates.
pub fn mlm_eval_loss<T: Real>(
    params: &ModelParameters<T>,
    corpus: &[Vec<u32>],
    vocab: &Vocabulary,
    masking_probability: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in corpus.chunks(EVAL_BATCH) {
        let seqs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
        let batch = Batch::from_sequences(&seqs, vocab.pad_id());
        let masked = apply_mlm_masking(&batch, vocab, masking_probability, &mut rng)?;
        let n = masked.num_selected();
        if n == 0 {
            continue;
        }
        let mut g = Graph::new(params);
        let loss = mlm_loss(&mut g, &masked, Mode::Eval)?;
        total += g.tape.value(loss).values()[0].as_f64() * n as f64;
        count += n;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Labelled set L, unlabelled set U, dev and test.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataSplits {
    pub labelled: Vec<Example>,
    pub unlabelled: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl DataSplits {
    pub fn new(labelled: Vec<Example>, unlabelled: Vec<Example>, dev: Vec<Example>, test: Vec<Example>) -> Result<Self> {
        if let Some(i) = labelled.iter().position(|e| e.label.is_none()) {
            return Err(Error::Data(format!("labelled example {i} has no label")));
        }
        let unlabelled = unlabelled.into_iter().map(|e| Example { label: None, ..e }).collect();
        Ok(Self {
            labelled,
            unlabelled,
            dev,
            test,
        })
    }

    pub fn is_fully_supervised(&self) -> bool {
        self.unlabelled.is_empty()
    }
}

/// Statistics of the continued pre-training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuedReport {
    pub mode: CorpusMode,
    pub corpus_size: usize,
    pub labelled_count: usize,
    pub unlabelled_count: usize,
    /// Dev score of the Step-1 model, when one was trained.
    pub step1_dev: Option<f64>,
    pub step1_test: Option<f64>,
    /// Pseudo-label counts per class.
    pub pseudo_label_counts: Vec<usize>,
    /// Fraction of corpus label words that agree with the source labels
    /// (gold or pseudo), when the mode writes label words.
    pub label_agreement: Option<f64>,
    pub pretrain_epoch_losses: Vec<f64>,
    pub pretrain_steps: u64,
}

pub struct ContinuedCheckpoint<T = f32> {
    pub params: ModelParameters<T>,
    pub corpus: Corpus,
    /// The unlabelled examples used, with pseudo-labels when Step 1 ran.
    pub pseudo_labelled: Vec<Example>,
    /// Index in `splits.unlabelled` of each entry of `pseudo_labelled`.
    pub unlabelled_indices: Vec<usize>,
    pub report: ContinuedReport,
}

/// Step 1 (when the mode needs labels) and Step 2: trains a prompt model on
/// L, pseudo-labels U, builds the `mode` corpus and continues pre-training a
/// fresh copy of `base`. `step1` may supply an already fine-tuned Step-1
/// model.
#[allow(clippy::too_many_arguments)]
pub fn build_continued_checkpoint<T: Real>(
    splits: &DataSplits,
    task: &TaskSpec,
    vocab: &Vocabulary,
    base: &ModelParameters<T>,
    style: PromptStyle,
    mode: CorpusMode,
    ft_config: &FinetuneConfig,
    pt_config: &PretrainConfig,
    step1: Option<&ModelParameters<T>>,
) -> Result<ContinuedCheckpoint<T>> {
    let max_len = effective_len(pt_config.max_sequence_length, base.config().max_sequence_length);
    let mut unlabelled_indices: Vec<usize> = (0..splits.unlabelled.len()).collect();
    if let Some(cap) = pt_config.unlabelled_cap {
        if unlabelled_indices.len() > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(pt_config.seed ^ 0x5eed);
            unlabelled_indices.shuffle(&mut rng);
            unlabelled_indices.truncate(cap);
            unlabelled_indices.sort_unstable();
        }
    }
    let unlabelled: Vec<Example> = unlabelled_indices.iter().map(|&i| splits.unlabelled[i].clone()).collect();
    let step1_method = match style {
        PromptStyle::Hard => FinetuneMethod::PromptHard,
        PromptStyle::Soft => FinetuneMethod::PromptSoft,
    };
    let mut step1_dev = None;
    let mut step1_test = None;
    let mut pseudo_labelled = unlabelled.clone();
    let wants_pseudo = (mode.needs_labels() || mode == CorpusMode::PcpRandomLabels) && !unlabelled.is_empty();
    if wants_pseudo {
        let owned;
        let model = match step1 {
            Some(m) => m,
            None => {
                info!("step 1: {step1_method} fine-tuning on {} labelled examples", splits.labelled.len());
                owned = train_finetune(step1_method, base, &splits.labelled, &splits.dev, task, vocab, ft_config)?;
                &owned.params
            }
        };
        if !splits.dev.is_empty() {
            step1_dev = Some(evaluate(model, step1_method, task, vocab, &splits.dev, ft_config.max_sequence_length)?);
        }
        if !splits.test.is_empty() {
            step1_test = Some(evaluate(model, step1_method, task, vocab, &splits.test, ft_config.max_sequence_length)?);
        }
        pseudo_labelled = pseudo_label(model, &unlabelled, task, vocab, style, ft_config.max_sequence_length)?;
    }
    let mut pseudo_label_counts = vec![0; task.num_labels()];
    for e in &pseudo_labelled {
        if let Some(l) = e.label {
            pseudo_label_counts[l] += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(pt_config.seed);
    let corpus = build_corpus(&splits.labelled, &pseudo_labelled, task, vocab, mode, style, max_len, &mut rng)?;
    let source_labels: Vec<Option<usize>> = splits
        .labelled
        .iter()
        .chain(&pseudo_labelled)
        .map(|e| e.label)
        .collect();
    let label_agreement = mode.has_label_word().then(|| {
        let (mut agree, mut total) = (0usize, 0usize);
        for p in &corpus.provenance {
            if let (Some(l), Some(src)) = (p.label, source_labels[p.source]) {
                total += 1;
                agree += usize::from(l == src);
            }
        }
        if total == 0 {
            0.0
        } else {
            agree as f64 / total as f64
        }
    });
    info!("step 2: {mode} pre-training on {} sequences", corpus.len());
    let outcome = continued_pretrain(base, &corpus.sequences, vocab, pt_config)?;
    let report = ContinuedReport {
        mode,
        corpus_size: corpus.len(),
        labelled_count: splits.labelled.len(),
        unlabelled_count: unlabelled.len(),
        step1_dev,
        step1_test,
        pseudo_label_counts,
        label_agreement,
        pretrain_epoch_losses: outcome.epoch_losses,
        pretrain_steps: outcome.steps,
    };
    Ok(ContinuedCheckpoint {
        params: outcome.params,
        corpus,
        pseudo_labelled,
        unlabelled_indices,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcpReport {
    pub task: String,
    pub method: FinetuneMethod,
    pub continued: ContinuedReport,
    pub final_dev: f64,
    pub final_test: Option<f64>,
    pub final_trace: Vec<TracePoint>,
    pub diverged: bool,
}

pub struct PcpRun<T = f32> {
    pub params: ModelParameters<T>,
    pub corpus: Corpus,
    pub pseudo_labelled: Vec<Example>,
    pub report: PcpReport,
}

/// The full two-step procedure: Step 1 prompt fine-tuning and
/// pseudo-labelling, Step 2 continued pre-training from `base`, then prompt
/// fine-tuning from the continued checkpoint.
pub fn run_pcp<T: Real>(
    splits: &DataSplits,
    task: &TaskSpec,
    vocab: &Vocabulary,
    base: &ModelParameters<T>,
    style: PromptStyle,
    ft_config: &FinetuneConfig,
    pt_config: &PretrainConfig,
) -> Result<PcpRun<T>> {
    let method = match style {
        PromptStyle::Hard => FinetuneMethod::PromptHard,
        PromptStyle::Soft => FinetuneMethod::PromptSoft,
    };
    let ck = build_continued_checkpoint(splits, task, vocab, base, style, CorpusMode::Pcp, ft_config, pt_config, None)?;
    let fin = train_finetune(method, &ck.params, &splits.labelled, &splits.dev, task, vocab, ft_config)?;
    let final_test = if splits.test.is_empty() {
        None
    } else {
        Some(evaluate(&fin.params, method, task, vocab, &splits.test, ft_config.max_sequence_length)?)
    };
    Ok(PcpRun {
        params: fin.params,
        corpus: ck.corpus,
        pseudo_labelled: ck.pseudo_labelled,
        report: PcpReport {
            task: task.name.to_string(),
            method,
            continued: ck.report,
            final_dev: fin.best_score,
            final_test,
            final_trace: fin.trace,
            diverged: fin.diverged,
        },
    })
}
