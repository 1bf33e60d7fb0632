#![allow(dead_code)]

use std::collections::BTreeMap;

use pcp_core::metrics::MetricKind;
use pcp_core::pipeline::{FinetuneConfig, PretrainConfig};
use pcp_core::template::{Example, TaskFile, TaskSpec, SOFT_PAIR_TEMPLATE, SOFT_SINGLE_TEMPLATE};
use pcp_core::tokenizer::{build_vocab_with_required, Vocabulary};
use pcp_core::{ModelConfig, ModelParameters};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FILLERS: [&str; 12] = ["ba", "be", "bi", "bo", "bu", "da", "de", "di", "do", "du", "fa", "fe"];

pub fn task_file(name: &str, template: &str, labels: &[(&str, &str)], is_pair: bool) -> TaskFile {
    TaskFile {
        name: name.into(),
        labels: labels.iter().map(|(l, _)| (*l).into()).collect(),
        template: template.into(),
        soft_template: if is_pair { SOFT_PAIR_TEMPLATE } else { SOFT_SINGLE_TEMPLATE }.into(),
        verbalizer: labels.iter().map(|(l, w)| ((*l).into(), (*w).into())).collect::<BTreeMap<_, _>>(),
        metric: MetricKind::Accuracy,
        is_pair,
    }
}

pub fn sst2() -> TaskSpec {
    TaskSpec::from_file(&task_file("SST-2", "{text_a} It was {mask} .", &[("positive", "great"), ("negative", "terrible")], false))
        .unwrap()
}

pub fn mnli() -> TaskSpec {
    TaskSpec::from_file(&task_file(
        "MNLI",
        "{text_a} ? {mask} , {text_b}",
        &[("entailment", "Yes"), ("neutral", "Maybe"), ("contradiction", "No")],
        true,
    ))
    .unwrap()
}

/// Label 0 examples carry `good`, label 1 examples carry `bad`.
pub fn separable(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let mut words: Vec<&str> = (0..rng.random_range(2..5)).map(|_| *FILLERS.choose(&mut rng).unwrap()).collect();
            let at = rng.random_range(0..=words.len());
            words.insert(at, if label == 0 { "good" } else { "bad" });
            Example::single(words.join(" "), Some(label))
        })
        .collect()
}

/// Pair examples whose label is `i % 3`; `text_b` starts with a label cue.
pub fn pairs(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cues = ["same", "perhaps", "other"];
    (0..n)
        .map(|i| {
            let a: Vec<&str> = (0..rng.random_range(2..6)).map(|_| *FILLERS.choose(&mut rng).unwrap()).collect();
            let mut b: Vec<&str> = (0..rng.random_range(1..5)).map(|_| *FILLERS.choose(&mut rng).unwrap()).collect();
            b.insert(0, cues[i % 3]);
            Example::pair(a.join(" "), b.join(" "), Some(i % 3))
        })
        .collect()
}

pub fn vocab_for(examples: &[Example], task: &TaskSpec) -> Vocabulary {
    let texts: Vec<&str> = examples
        .iter()
        .flat_map(|e| std::iter::once(e.text_a.as_str()).chain(e.text_b.as_deref()))
        .collect();
    let required = task.required_words();
    let required: Vec<&str> = required.iter().map(String::as_str).collect();
    build_vocab_with_required(texts, &required, 1, 8).unwrap()
}

pub fn small_config(vocab: &Vocabulary, num_labels: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        hidden_dim: 16,
        num_layers: 1,
        num_heads: 2,
        feedforward_dim: 32,
        max_sequence_length: 24,
        dropout_p: 0.0,
        num_labels,
        seed: 3,
    }
}

pub fn small_model(vocab: &Vocabulary, num_labels: usize) -> ModelParameters {
    ModelParameters::init(&small_config(vocab, num_labels)).unwrap()
}

pub fn quick_finetune(steps: u64, lr: f64, seed: u64) -> FinetuneConfig {
    FinetuneConfig {
        steps,
        eval_interval: 10,
        batch_size: 8,
        learning_rate: lr,
        max_sequence_length: 24,
        seed,
        ..FinetuneConfig::default()
    }
}

pub fn quick_pretrain(epochs: u64, seed: u64) -> PretrainConfig {
    PretrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: 1e-3,
        max_sequence_length: 24,
        seed,
        ..PretrainConfig::default()
    }
}
