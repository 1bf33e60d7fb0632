use pcp::harness::{
    experiment_vocab, grid_search, majority_score, make_splits, sample_k_per_class, summarize, Cell, Supervision,
};
use pcp::report::{from_csv, to_csv, to_markdown};
use pcp::synthetic::{generate_sentiment, sentiment_task, SyntheticConfig};
use pcp_core::metrics::MetricKind;
use pcp_core::pipeline::{train_finetune, FinetuneConfig, FinetuneMethod};
use pcp_core::template::{Example, TaskSpec};
use pcp_core::{ModelConfig, ModelParameters};
use proptest::prelude::*;

fn labels() -> Vec<String> {
    vec!["positive".into(), "negative".into()]
}

fn data(n: usize) -> Vec<Example> {
    (0..n).map(|i| Example::single(format!("item {i}"), Some(i % 2))).collect()
}

fn small_sentiment() -> (TaskSpec, Vec<Example>, Vec<Example>) {
    let (train, test) = generate_sentiment(&SyntheticConfig {
        train_size: 120,
        test_size: 40,
        ..SyntheticConfig::sentiment()
    });
    (TaskSpec::from_file(&sentiment_task()).unwrap(), train, test)
}

#[test]
fn k_per_class_sampling() {
    let d = data(100);
    let (s, rest) = sample_k_per_class(&d, 16, &labels(), 3).unwrap();
    assert_eq!(s.len(), 32);
    assert_eq!(rest.len(), 68);
    for l in 0..2 {
        assert_eq!(s.iter().filter(|e| e.label == Some(l)).count(), 16);
    }
    assert!(s.iter().all(|e| !rest.contains(e)));
    assert_eq!(sample_k_per_class(&d, 16, &labels(), 3).unwrap().0, s);
    assert_ne!(sample_k_per_class(&d, 16, &labels(), 4).unwrap().0, s);

    let err = sample_k_per_class(&data(20), 16, &labels(), 0).unwrap_err().to_string();
    assert!(err.contains("positive"), "{err}");
}

#[test]
fn splits_hold_out_dev_and_cap_unlabelled() {
    let d = data(200);
    let s = make_splits(&d, &data(10), Supervision::PerClass(8), 4, Some(50), &labels(), 1).unwrap();
    assert_eq!(s.splits.labelled.len(), 16);
    assert_eq!(s.splits.dev.len(), 8);
    assert_eq!(s.splits.unlabelled.len(), 50);
    assert!(s.splits.unlabelled.iter().all(|e| e.label.is_none()));
    assert_eq!(s.unlabelled_gold.len(), 50);
    for (e, g) in s.splits.unlabelled.iter().zip(&s.unlabelled_gold) {
        let idx: usize = e.text_a.trim_start_matches("item ").parse().unwrap();
        assert_eq!(idx % 2, *g);
    }
    let full = make_splits(&d, &[], Supervision::Full, 4, None, &labels(), 1).unwrap();
    assert_eq!(full.splits.dev.len(), 20);
    assert_eq!(full.splits.labelled.len(), 180);
    assert!(full.splits.unlabelled.is_empty());
}

fn setup() -> (TaskSpec, pcp_core::Vocabulary, ModelParameters, Vec<Example>, Vec<Example>) {
    let (task, train, test) = small_sentiment();
    let vocab = experiment_vocab(&train, &task, 1, 4).unwrap();
    let init = ModelParameters::init(&ModelConfig {
        max_sequence_length: 40,
        num_labels: 2,
        ..ModelConfig::tiny(vocab.len())
    })
    .unwrap();
    (task, vocab, init, train[..16].to_vec(), test[..16].to_vec())
}

fn config(steps: u64) -> FinetuneConfig {
    FinetuneConfig {
        steps,
        eval_interval: 5,
        max_sequence_length: 40,
        ..FinetuneConfig::default()
    }
}

#[test]
fn grid_of_one_equals_a_single_run() {
    let (task, vocab, init, train, dev) = setup();
    let cfg = config(10);
    let g = grid_search(FinetuneMethod::PromptHard, &init, &train, &dev, &task, &vocab, &cfg, &[2e-3]).unwrap();
    let single = train_finetune(
        FinetuneMethod::PromptHard,
        &init,
        &train,
        &dev,
        &task,
        &vocab,
        &FinetuneConfig {
            learning_rate: 2e-3,
            ..cfg
        },
    )
    .unwrap();
    assert_eq!(g.best_lr, 2e-3);
    assert_eq!(g.outcome.losses, single.losses);
    assert_eq!(g.outcome.params, single.params);
}

#[test]
fn grid_replay_picks_argmax_and_smaller_lr_on_ties() {
    let (task, vocab, init, train, dev) = setup();
    let grid = [1e-2, 1e-4, 3e-3, 1e-3];
    let cfg = config(15);
    let g = grid_search(FinetuneMethod::Cls, &init, &train, &dev, &task, &vocab, &cfg, &grid).unwrap();
    let mut replay: Vec<(f64, f64)> = grid
        .iter()
        .map(|&lr| {
            let c = FinetuneConfig {
                learning_rate: lr,
                ..cfg.clone()
            };
            (lr, train_finetune(FinetuneMethod::Cls, &init, &train, &dev, &task, &vocab, &c).unwrap().best_score)
        })
        .collect();
    replay.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert_eq!(g.scores, replay);
    let best = replay.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let expected = replay.iter().find(|r| r.1 == best).unwrap().0;
    assert_eq!(g.best_lr, expected);

    // no updates: every lr scores the initial model, so the smallest wins
    let tied = grid_search(FinetuneMethod::Cls, &init, &train, &dev, &task, &vocab, &config(0), &grid).unwrap();
    assert!(tied.scores.windows(2).all(|w| w[0].1 == w[1].1));
    assert_eq!(tied.best_lr, 1e-4);
}

#[test]
fn diverged_runs_lose_the_grid() {
    let (task, vocab, init, train, dev) = setup();
    let g = grid_search(FinetuneMethod::Cls, &init, &train, &dev, &task, &vocab, &config(10), &[1e-3, 1e12]).unwrap();
    let huge = g.scores.iter().find(|s| s.0 == 1e12).unwrap().1;
    assert!(huge < g.scores[0].1 || huge == f64::NEG_INFINITY);
    assert_eq!(g.best_lr, 1e-3);
    assert!(grid_search(FinetuneMethod::Cls, &init, &train, &dev, &task, &vocab, &config(1), &[]).is_err());
    assert!(grid_search(FinetuneMethod::Cls, &init, &train, &dev, &task, &vocab, &config(1), &[-1.0]).is_err());
}

fn cell(method: &str, mode: &str, seed: u64, score: Option<f64>) -> Cell {
    Cell {
        task: "t".into(),
        method: method.into(),
        mode: mode.into(),
        seed,
        test_score: score,
        dev_score: None,
        best_lr: None,
        grid: Vec::new(),
        label_agreement: None,
        pseudo_label_accuracy: None,
        error: score.is_none().then(|| "boom".into()),
    }
}

#[test]
fn summary_means_deltas_and_failures() {
    let cells = vec![
        cell("prompt_hard", "none", 1, Some(0.6)),
        cell("prompt_hard", "none", 2, Some(0.8)),
        cell("prompt_hard", "PCP", 1, Some(0.9)),
        cell("prompt_hard", "PCP", 2, None),
        cell("cls", "none", 1, Some(0.5)),
    ];
    let rows = summarize(&cells);
    assert_eq!(rows.len(), 3);
    assert!((rows[0].mean.unwrap() - 0.7).abs() < 1e-12);
    assert!((rows[0].std.unwrap() - 0.1).abs() < 1e-12);
    assert_eq!(rows[0].delta, Some(0.0));
    assert_eq!(rows[1].mode, "PCP");
    assert!((rows[1].delta.unwrap() - 0.2).abs() < 1e-12);
    assert_eq!((rows[1].seeds, rows[1].failed), (1, 1));
    assert_eq!(rows[1].std, None);
    assert_eq!(rows[2].std, None);
}

#[test]
fn majority_baseline_uses_the_most_common_label() {
    let test: Vec<Example> = [0, 1, 1, 1].iter().map(|&l| Example::single("x", Some(l))).collect();
    assert_eq!(majority_score(&test, MetricKind::Accuracy, 2).unwrap(), 0.75);
    assert_eq!(majority_score(&test, MetricKind::Matthews, 2).unwrap(), 0.0);
    assert!(majority_score(&[Example::single("x", None)], MetricKind::Accuracy, 2).is_err());
}

#[test]
fn empty_report_is_header_only() {
    assert_eq!(to_csv(&[]).unwrap(), "task,method,mode,mean,std,delta,seeds,failed\n");
    assert_eq!(to_markdown(&[]).lines().count(), 2);
    assert!(from_csv("task,method\n").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_parses_back_and_markdown_has_one_row_each(
        raw in prop::collection::vec(("[a-z|,\"]{1,6}", prop::option::of(0.0f64..1.0), 0usize..6), 0..8)
    ) {
        let cells: Vec<Cell> = raw.iter().enumerate()
            .map(|(i, (m, s, seed))| cell(m, if i % 2 == 0 { "none" } else { "PCP" }, *seed as u64, *s))
            .collect();
        let rows = summarize(&cells);
        prop_assert_eq!(from_csv(&to_csv(&rows).unwrap()).unwrap(), rows.clone());
        prop_assert_eq!(to_markdown(&rows).lines().count(), rows.len() + 2);
    }
}
