//! Few-shot sampling, learning-rate search and multi-seed experiments.

use std::collections::BTreeMap;

use log::{info, warn};
use pcp_core::metrics::{compute_metric, mean_std, MetricKind};
use pcp_core::model::{ModelConfig, ModelParameters};
use pcp_core::pipeline::{
    build_continued_checkpoint, evaluate, train_finetune, CorpusMode, DataSplits, FinetuneConfig, FinetuneMethod,
    FinetuneOutcome, PretrainConfig, FINETUNE_LR_GRID,
};
use pcp_core::template::{Example, PromptStyle, TaskSpec};
use pcp_core::tokenizer::{build_vocab_with_required, Vocabulary, DEFAULT_SOFT_TOKENS};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Draws `k` examples of every label uniformly without replacement.
/// Returns the sample and the remaining examples (labels kept), both in a
/// deterministic order for a given seed.
pub fn sample_k_per_class(
    data: &[Example],
    k: usize,
    label_names: &[String],
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>)> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); label_names.len()];
    for (i, e) in data.iter().enumerate() {
        match e.label {
            Some(l) if l < label_names.len() => by_class[l].push(i),
            Some(l) => return Err(Error::Data(format!("example {i} has label id {l} outside the task"))),
            None => return Err(Error::Data(format!("example {i} is unlabelled"))),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; data.len()];
    let mut sample = Vec::with_capacity(k * label_names.len());
    for (label, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < k {
            return Err(Error::Data(format!(
                "class `{}` has {} examples, fewer than k={k}",
                label_names[label],
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..k] {
            chosen[i] = true;
            sample.push(data[i].clone());
        }
    }
    let rest = data
        .iter()
        .zip(&chosen)
        .filter(|(_, c)| !**c)
        .map(|(e, _)| e.clone())
        .collect();
    Ok((sample, rest))
}

/// How much labelled data a run sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Supervision {
    PerClass(usize),
    Full,
}

impl Serialize for Supervision {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::PerClass(k) => s.serialize_u64(*k as u64),
            Self::Full => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for Supervision {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            K(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::K(0) => Err(serde::de::Error::custom("k_per_class must be at least 1")),
            Raw::K(k) => Ok(Self::PerClass(k)),
            Raw::S(s) if s == "full" => Ok(Self::Full),
            Raw::S(s) => Err(serde::de::Error::custom(format!("expected a count or \"full\", got `{s}`"))),
        }
    }
}

/// Splits with the hidden gold labels of the unlabelled pool kept aside for
/// reporting pseudo-label quality.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSplits {
    pub splits: DataSplits,
    pub unlabelled_gold: Vec<usize>,
}

/// Few-shot: `k` labelled and `dev_k` dev examples per class, the rest of the
/// training data (at most `unlabelled_limit`) unlabelled. Full supervision:
/// a 10% dev split, everything else labelled, no unlabelled data.
pub fn make_splits(
    train: &[Example],
    test: &[Example],
    supervision: Supervision,
    dev_per_class: usize,
    unlabelled_limit: Option<usize>,
    label_names: &[String],
    seed: u64,
) -> Result<SampledSplits> {
    match supervision {
        Supervision::PerClass(k) => {
            let (labelled, rest) = sample_k_per_class(train, k, label_names, seed)?;
            let (dev, mut pool) = sample_k_per_class(&rest, dev_per_class, label_names, seed.wrapping_add(1))?;
            if let Some(n) = unlabelled_limit {
                pool.truncate(n);
            }
            let unlabelled_gold = pool.iter().map(|e| e.label.expect("sampled from labelled data")).collect();
            Ok(SampledSplits {
                splits: DataSplits::new(labelled, pool, dev, test.to_vec())?,
                unlabelled_gold,
            })
        }
        Supervision::Full => {
            let mut idx: Vec<usize> = (0..train.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n_dev = (train.len() / 10).max(1);
            let dev = idx[..n_dev].iter().map(|&i| train[i].clone()).collect();
            let labelled = idx[n_dev..].iter().map(|&i| train[i].clone()).collect();
            Ok(SampledSplits {
                splits: DataSplits::new(labelled, Vec::new(), dev, test.to_vec())?,
                unlabelled_gold: Vec::new(),
            })
        }
    }
}

pub struct GridResult {
    pub best_lr: f64,
    pub outcome: FinetuneOutcome,
    /// `(lr, dev score)` for every grid point, in ascending lr order.
    pub scores: Vec<(f64, f64)>,
}

/// Fine-tunes once per learning rate and keeps the best dev score. NaN
/// scores count as `-inf`; ties go to the smaller learning rate.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    method: FinetuneMethod,
    init: &ModelParameters,
    train: &[Example],
    dev: &[Example],
    task: &TaskSpec,
    vocab: &Vocabulary,
    config: &FinetuneConfig,
    grid: &[f64],
) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(Error::Config("learning-rate grid is empty".into()));
    }
    if let Some(lr) = grid.iter().find(|lr| !(**lr > 0.0 && lr.is_finite())) {
        return Err(Error::Config(format!("learning rate {lr} is not a positive number")));
    }
    let mut lrs = grid.to_vec();
    lrs.sort_by(f64::total_cmp);
    lrs.dedup();
    let mut best: Option<(f64, f64, FinetuneOutcome)> = None;
    let mut scores = Vec::with_capacity(lrs.len());
    for lr in lrs {
        let cfg = FinetuneConfig {
            learning_rate: lr,
            ..config.clone()
        };
        let outcome = train_finetune(method, init, train, dev, task, vocab, &cfg)?;
        let score = if outcome.best_score.is_nan() {
            f64::NEG_INFINITY
        } else {
            outcome.best_score
        };
        info!("{method} lr {lr:e}: dev {score:.4}");
        scores.push((lr, score));
        if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            best = Some((lr, score, outcome));
        }
    }
    let (best_lr, _, outcome) = best.expect("grid is non-empty");
    Ok(GridResult {
        best_lr,
        outcome,
        scores,
    })
}

/// Continued pre-training applied before fine-tuning in an experiment cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CheckpointSource {
    None,
    Continued(CorpusMode),
}

impl CheckpointSource {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Continued(m) => m.name(),
        }
    }
}

impl std::str::FromStr for CheckpointSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("none") {
            return Ok(Self::None);
        }
        Ok(Self::Continued(s.parse()?))
    }
}

impl Serialize for CheckpointSource {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for CheckpointSource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Architecture of the base model; the vocabulary size comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub feedforward_dim: usize,
    pub max_sequence_length: usize,
    pub dropout_p: f64,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let c = ModelConfig::desk(0);
        Self {
            hidden_dim: c.hidden_dim,
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            feedforward_dim: c.feedforward_dim,
            max_sequence_length: c.max_sequence_length,
            dropout_p: c.dropout_p,
            seed: c.seed,
        }
    }
}

impl ModelSpec {
    pub fn config(&self, vocab_size: usize, num_labels: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            feedforward_dim: self.feedforward_dim,
            max_sequence_length: self.max_sequence_length,
            dropout_p: self.dropout_p,
            num_labels,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    /// Paths are relative to the spec file.
    pub task: String,
    pub train: String,
    pub test: String,
    pub methods: Vec<FinetuneMethod>,
    #[serde(default = "default_sources")]
    pub modes: Vec<CheckpointSource>,
    pub k_per_class: Supervision,
    #[serde(default = "default_dev_per_class")]
    pub dev_per_class: usize,
    #[serde(default)]
    pub unlabelled_limit: Option<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_lr_grid")]
    pub lr_grid: Vec<f64>,
    /// Learning rates for continued pre-training; the first is used.
    #[serde(default)]
    pub pretrain_lr_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "default_min_freq")]
    pub min_freq: usize,
    #[serde(default = "default_soft_tokens")]
    pub soft_tokens: usize,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default = "default_true")]
    pub majority_baseline: bool,
}

fn default_sources() -> Vec<CheckpointSource> {
    vec![CheckpointSource::None]
}
fn default_dev_per_class() -> usize {
    16
}
fn default_lr_grid() -> Vec<f64> {
    FINETUNE_LR_GRID.to_vec()
}
fn default_min_freq() -> usize {
    1
}
fn default_soft_tokens() -> usize {
    DEFAULT_SOFT_TOKENS
}
fn default_true() -> bool {
    true
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("an experiment needs at least one seed".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("an experiment needs at least one method".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("an experiment needs at least one mode".into()));
        }
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("lr_grid must be a non-empty set of positive numbers".into()));
        }
        Ok(())
    }
}

/// Outcome of one (method, mode, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub task: String,
    pub method: String,
    pub mode: String,
    pub seed: u64,
    pub test_score: Option<f64>,
    pub dev_score: Option<f64>,
    pub best_lr: Option<f64>,
    /// Dev score of every grid point, ascending lr.
    #[serde(default)]
    pub grid: Vec<(f64, f64)>,
    #[serde(default)]
    pub label_agreement: Option<f64>,
    #[serde(default)]
    pub pseudo_label_accuracy: Option<f64>,
    #[serde(default)]
    pub error: Option<String>,
}

/// Aggregate over seeds of one (method, mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: String,
    pub method: String,
    pub mode: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Mean minus the same method's `none` mean.
    pub delta: Option<f64>,
    pub seeds: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    pub task: String,
    pub metric: MetricKind,
    pub cells: Vec<Cell>,
    pub summary: Vec<SummaryRow>,
}

pub const MAJORITY: &str = "majority";

/// Groups cells by (method, mode) in first-seen order and computes mean,
/// population std (two or more seeds only) and the delta against the
/// method's `none` row.
pub fn summarize(cells: &[Cell]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String), Vec<&Cell>> = BTreeMap::new();
    for c in cells {
        let key = (c.task.clone(), c.method.clone(), c.mode.clone());
        if !groups.contains_key(&key) {
            keys.push(key.clone());
        }
        groups.entry(key).or_default().push(c);
    }
    let mut rows: Vec<SummaryRow> = keys
        .iter()
        .map(|key| {
            let group = &groups[key];
            let scores: Vec<f64> = group.iter().filter_map(|c| c.test_score).collect();
            let (mean, std) = if scores.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&scores);
                (Some(m), s)
            };
            SummaryRow {
                task: key.0.clone(),
                method: key.1.clone(),
                mode: key.2.clone(),
                mean,
                std,
                delta: None,
                seeds: scores.len(),
                failed: group.len() - scores.len(),
            }
        })
        .collect();
    let baselines: BTreeMap<(String, String), f64> = rows
        .iter()
        .filter(|r| r.mode == CheckpointSource::None.name())
        .filter_map(|r| r.mean.map(|m| ((r.task.clone(), r.method.clone()), m)))
        .collect();
    for r in &mut rows {
        if let (Some(m), Some(b)) = (r.mean, baselines.get(&(r.task.clone(), r.method.clone()))) {
            r.delta = Some(m - b);
        }
    }
    rows
}

/// Fraction of test examples carrying the most common test label, scored
/// with the task metric as a constant prediction.
pub fn majority_score(test: &[Example], metric: MetricKind, num_labels: usize) -> Result<f64> {
    let golds: Vec<usize> = test
        .iter()
        .enumerate()
        .map(|(i, e)| e.label.ok_or_else(|| Error::Data(format!("test example {i} is unlabelled"))))
        .collect::<Result<_>>()?;
    let mut counts = vec![0usize; num_labels];
    for &g in &golds {
        counts[g] += 1;
    }
    let top = (0..num_labels).max_by_key(|&l| (counts[l], std::cmp::Reverse(l))).unwrap_or(0);
    Ok(compute_metric(metric, &vec![top; golds.len()], &golds)?)
}

/// Vocabulary over the training texts plus every word the task needs.
pub fn experiment_vocab(train: &[Example], task: &TaskSpec, min_freq: usize, soft_tokens: usize) -> Result<Vocabulary> {
    let texts: Vec<&str> = train
        .iter()
        .flat_map(|e| std::iter::once(e.text_a.as_str()).chain(e.text_b.as_deref()))
        .collect();
    let required = task.required_words();
    let required: Vec<&str> = required.iter().map(String::as_str).collect();
    let vocab = build_vocab_with_required(texts, &required, min_freq, soft_tokens)?;
    task.check_vocab(&vocab)?;
    Ok(vocab)
}

/// Loaded inputs of an experiment.
pub struct ExperimentData {
    pub task: TaskSpec,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

/// Runs every (seed, method, mode) cell. Each cell fine-tunes with a
/// learning-rate grid search; continued-pre-training cells first build their
/// checkpoint from the shared base initialization. A failing cell is
/// recorded with its error and does not stop the experiment.
pub fn run_experiment(spec: &ExperimentSpec, data: &ExperimentData) -> Result<MetricsReport> {
    spec.validate()?;
    let task = &data.task;
    let vocab = experiment_vocab(&data.train, task, spec.min_freq, spec.soft_tokens)?;
    let base = ModelParameters::<f32>::init(&spec.model.config(vocab.len(), task.num_labels()))?;
    info!(
        "experiment `{}`: |V|={} params={} seeds={:?}",
        spec.name,
        vocab.len(),
        base.num_parameters(),
        spec.seeds
    );
    let mut cells = Vec::new();
    if spec.majority_baseline {
        let score = majority_score(&data.test, task.metric, task.num_labels())?;
        for &seed in &spec.seeds {
            cells.push(Cell {
                task: task.name.clone(),
                method: MAJORITY.into(),
                mode: CheckpointSource::None.name().into(),
                seed,
                test_score: Some(score),
                dev_score: None,
                best_lr: None,
                grid: Vec::new(),
                label_agreement: None,
                pseudo_label_accuracy: None,
                error: None,
            });
        }
    }
    for &seed in &spec.seeds {
        let sampled = make_splits(
            &data.train,
            &data.test,
            spec.k_per_class,
            spec.dev_per_class,
            spec.unlabelled_limit,
            &task.label_names,
            seed,
        )?;
        let ft = FinetuneConfig {
            seed,
            ..spec.finetune.clone()
        };
        let mut pt = PretrainConfig {
            seed,
            ..spec.pretrain.clone()
        };
        if let Some(lr) = spec.pretrain_lr_grid.as_ref().and_then(|g| g.first()) {
            pt.learning_rate = *lr;
        }
        let mut tapt_cache: BTreeMap<CorpusMode, ModelParameters> = BTreeMap::new();
        for &method in &spec.methods {
            let mut baseline: Option<(f64, ModelParameters)> = None;
            for &mode in &spec.modes {
                let cell = run_cell(
                    spec, task, &vocab, &base, &sampled, method, mode, seed, &ft, &pt, &mut baseline, &mut tapt_cache,
                );
                let cell = cell.unwrap_or_else(|e| {
                    warn!("cell {method}/{} seed {seed} failed: {e}", mode.name());
                    Cell {
                        task: task.name.clone(),
                        method: method.name().into(),
                        mode: mode.name().into(),
                        seed,
                        test_score: None,
                        dev_score: None,
                        best_lr: None,
                        grid: Vec::new(),
                        label_agreement: None,
                        pseudo_label_accuracy: None,
                        error: Some(e.to_string()),
                    }
                });
                info!(
                    "{} {method}/{} seed {seed}: test {:?}",
                    task.name,
                    mode.name(),
                    cell.test_score
                );
                cells.push(cell);
            }
        }
    }
    Ok(MetricsReport {
        name: spec.name.clone(),
        task: task.name.clone(),
        metric: task.metric,
        summary: summarize(&cells),
        cells,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    spec: &ExperimentSpec,
    task: &TaskSpec,
    vocab: &Vocabulary,
    base: &ModelParameters,
    sampled: &SampledSplits,
    method: FinetuneMethod,
    mode: CheckpointSource,
    seed: u64,
    ft: &FinetuneConfig,
    pt: &PretrainConfig,
    baseline: &mut Option<(f64, ModelParameters)>,
    tapt_cache: &mut BTreeMap<CorpusMode, ModelParameters>,
) -> Result<Cell> {
    let splits = &sampled.splits;
    let mut cell = Cell {
        task: task.name.clone(),
        method: method.name().into(),
        mode: mode.name().into(),
        seed,
        test_score: None,
        dev_score: None,
        best_lr: None,
        grid: Vec::new(),
        label_agreement: None,
        pseudo_label_accuracy: None,
        error: None,
    };
    let init = match mode {
        CheckpointSource::None => base.clone(),
        CheckpointSource::Continued(m) if m.is_tapt() => match tapt_cache.get(&m) {
            Some(p) => p.clone(),
            None => {
                let ck = build_continued_checkpoint(splits, task, vocab, base, PromptStyle::Hard, m, ft, pt, None)?;
                tapt_cache.insert(m, ck.params.clone());
                ck.params
            }
        },
        CheckpointSource::Continued(m) => {
            let style = method.prompt_style().unwrap_or(PromptStyle::Hard);
            // The baseline grid search of a prompt method is exactly Step 1.
            let step1 = match (method.prompt_style(), baseline.as_ref()) {
                (Some(_), Some((_, p))) => Some(p),
                _ => None,
            };
            let step1_cfg = FinetuneConfig {
                learning_rate: baseline.as_ref().map_or(ft.learning_rate, |(lr, _)| *lr),
                ..ft.clone()
            };
            let ck = build_continued_checkpoint(splits, task, vocab, base, style, m, &step1_cfg, pt, step1)?;
            cell.label_agreement = ck.report.label_agreement;
            if !sampled.unlabelled_gold.is_empty() && ck.pseudo_labelled.iter().all(|e| e.label.is_some()) {
                let preds: Vec<usize> = ck.pseudo_labelled.iter().map(|e| e.label.expect("checked")).collect();
                let golds: Vec<usize> = ck.unlabelled_indices.iter().map(|&i| sampled.unlabelled_gold[i]).collect();
                if !preds.is_empty() {
                    cell.pseudo_label_accuracy = Some(compute_metric(MetricKind::Accuracy, &preds, &golds)?);
                }
            }
            ck.params
        }
    };
    let grid = grid_search(method, &init, &splits.labelled, &splits.dev, task, vocab, ft, &spec.lr_grid)?;
    let max_len = ft.max_sequence_length;
    cell.test_score = Some(evaluate(&grid.outcome.params, method, task, vocab, &splits.test, max_len)?);
    cell.dev_score = Some(grid.outcome.best_score);
    cell.best_lr = Some(grid.best_lr);
    cell.grid = grid.scores;
    if mode == CheckpointSource::None {
        *baseline = Some((grid.best_lr, grid.outcome.params));
    }
    Ok(cell)
}
