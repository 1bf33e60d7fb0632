//! Generators for the two shipped toy benchmarks.
//!
//! `sentiment` is a single-sentence polarity task: filler words plus one or
//! two planted polarity keywords, with a fraction of labels flipped. `pair` is
//! a sentence-pair task whose label says whether the second sentence repeats
//! the topic word of the first.

use std::collections::BTreeMap;

use pcp_core::metrics::MetricKind;
use pcp_core::template::{Example, TaskFile, SOFT_PAIR_TEMPLATE, SOFT_SINGLE_TEMPLATE};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const POSITIVE_WORDS: [&str; 24] = [
    "wonderful", "delightful", "charming", "brilliant", "moving", "gripping", "superb", "lovely",
    "clever", "stunning", "heartfelt", "hilarious", "elegant", "vivid", "fresh", "joyful",
    "tender", "inventive", "riveting", "sharp", "warm", "masterful", "radiant", "sincere",
];

pub const NEGATIVE_WORDS: [&str; 24] = [
    "dull", "tedious", "clumsy", "bland", "awkward", "boring", "shallow", "messy",
    "lifeless", "stale", "tiresome", "sloppy", "hollow", "forced", "murky", "grating",
    "listless", "flat", "muddled", "cheap", "dreary", "plodding", "soggy", "lazy",
];

pub const TOPIC_WORDS: [&str; 8] = ["river", "castle", "violin", "garden", "rocket", "harbor", "lantern", "meadow"];

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Neutral filler vocabulary: `count` two-syllable nonce words.
pub fn filler_words(count: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    'outer: for o1 in ONSETS {
        for n1 in NUCLEI {
            for o2 in ONSETS {
                for n2 in NUCLEI {
                    if out.len() == count {
                        break 'outer;
                    }
                    out.push(format!("{o1}{n1}{o2}{n2}"));
                }
            }
        }
    }
    out
}

const KEYWORDS: usize = 6;
const TOPICS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub filler_count: usize,
    pub label_noise: f64,
    /// Polarity keywords used per class, a prefix of the word lists.
    pub keywords: usize,
    /// Topic words used by the pair task, a prefix of [`TOPIC_WORDS`].
    pub topics: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn sentiment() -> Self {
        Self {
            train_size: 2064,
            test_size: 500,
            filler_count: 160,
            label_noise: 0.1,
            keywords: KEYWORDS,
            topics: TOPICS,
            seed: 7,
        }
    }

    pub fn pair() -> Self {
        Self {
            label_noise: 0.0,
            seed: 11,
            ..Self::sentiment()
        }
    }
}

pub fn sentiment_task() -> TaskFile {
    TaskFile {
        name: "synthetic-sentiment".into(),
        labels: vec!["positive".into(), "negative".into()],
        template: "{text_a} It was {mask} .".into(),
        soft_template: SOFT_SINGLE_TEMPLATE.into(),
        verbalizer: BTreeMap::from([
            ("positive".into(), "great".into()),
            ("negative".into(), "terrible".into()),
        ]),
        metric: MetricKind::Accuracy,
        is_pair: false,
    }
}

pub fn pair_task() -> TaskFile {
    TaskFile {
        name: "synthetic-pair".into(),
        labels: vec!["entailment".into(), "not_entailment".into()],
        template: "{text_a} ? {mask} , {text_b}".into(),
        soft_template: SOFT_PAIR_TEMPLATE.into(),
        verbalizer: BTreeMap::from([
            ("entailment".into(), "Yes".into()),
            ("not_entailment".into(), "No".into()),
        ]),
        metric: MetricKind::Accuracy,
        is_pair: true,
    }
}

fn sentence(rng: &mut ChaCha8Rng, fillers: &[String], len: std::ops::RangeInclusive<usize>, planted: &[&str]) -> String {
    let n = rng.random_range(len);
    let mut words: Vec<&str> = (0..n).map(|_| fillers.choose(rng).expect("fillers").as_str()).collect();
    for w in planted {
        let at = rng.random_range(0..=words.len());
        words.insert(at, w);
    }
    words.join(" ")
}

fn sentiment_example(rng: &mut ChaCha8Rng, fillers: &[String], config: &SyntheticConfig) -> Example {
    let label = rng.random_range(0..2usize);
    let pool: &[&str] = if label == 0 { &POSITIVE_WORDS } else { &NEGATIVE_WORDS };
    let pool = &pool[..config.keywords.clamp(2, pool.len())];
    let k = rng.random_range(1..=2);
    let planted: Vec<&str> = pool.choose_multiple(rng, k).copied().collect();
    let text = sentence(rng, fillers, 5..=10, &planted);
    let label = if rng.random::<f64>() < config.label_noise { 1 - label } else { label };
    Example::single(text, Some(label))
}

fn pair_example(rng: &mut ChaCha8Rng, fillers: &[String], config: &SyntheticConfig) -> Example {
    let label = rng.random_range(0..2usize);
    let topics = &TOPIC_WORDS[..config.topics.clamp(2, TOPIC_WORDS.len())];
    let topic = *topics.choose(rng).expect("topics");
    let other = if label == 0 {
        topic
    } else {
        let rest: Vec<&str> = topics.iter().copied().filter(|t| *t != topic).collect();
        *rest.choose(rng).expect("topics")
    };
    let a = sentence(rng, fillers, 4..=8, &[topic]);
    let b = sentence(rng, fillers, 3..=6, &[other]);
    let label = if rng.random::<f64>() < config.label_noise { 1 - label } else { label };
    Example::pair(a, b, Some(label))
}

/// `(train, test)` for the sentiment task.
pub fn generate_sentiment(config: &SyntheticConfig) -> (Vec<Example>, Vec<Example>) {
    generate(config, sentiment_example)
}

/// `(train, test)` for the pair task.
pub fn generate_pair(config: &SyntheticConfig) -> (Vec<Example>, Vec<Example>) {
    generate(config, pair_example)
}

fn generate(config: &SyntheticConfig, make: fn(&mut ChaCha8Rng, &[String], &SyntheticConfig) -> Example) -> (Vec<Example>, Vec<Example>) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let fillers = filler_words(config.filler_count);
    let mut all: Vec<Example> = (0..config.train_size + config.test_size)
        .map(|_| make(&mut rng, &fillers, config))
        .collect();
    all.shuffle(&mut rng);
    let test = all.split_off(config.train_size);
    (all, test)
}

/// Writes `task.json`, `train.jsonl` and `test.jsonl` for both tasks under
/// `dir/sentiment` and `dir/pair`.
pub fn write_benchmarks(dir: &std::path::Path) -> crate::Result<()> {
    type Gen = fn(&SyntheticConfig) -> (Vec<Example>, Vec<Example>);
    let tasks: [(&str, TaskFile, SyntheticConfig, Gen); 2] = [
        ("sentiment", sentiment_task(), SyntheticConfig::sentiment(), generate_sentiment),
        ("pair", pair_task(), SyntheticConfig::pair(), generate_pair),
    ];
    for (name, file, cfg, generate) in tasks {
        let sub = dir.join(name);
        std::fs::create_dir_all(&sub).map_err(|e| crate::Error::io(&sub, e))?;
        crate::io::write_json(&sub.join("task.json"), &file)?;
        let (train, test) = generate(&cfg);
        crate::io::save_dataset(&sub.join("train.jsonl"), &train, &file.labels)?;
        crate::io::save_dataset(&sub.join("test.jsonl"), &test, &file.labels)?;
    }
    Ok(())
}
