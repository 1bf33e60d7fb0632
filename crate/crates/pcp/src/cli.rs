//! `pcp` command-line interface. Exit codes: 0 success, 1 usage error,
//! 2 data or format error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use pcp_core::model::ModelParameters;
use pcp_core::pipeline::{build_corpus, continued_pretrain, evaluate, pseudo_label, CorpusMode, FinetuneMethod};
use pcp_core::template::{Example, PromptStyle, TaskSpec};
use pcp_core::tokenizer::{build_vocab_with_required, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, DEFAULT_SEED};
use crate::error::{Error, Result};
use crate::harness::{grid_search, run_experiment, ExperimentData, ExperimentSpec};
use crate::io;
use crate::report::{emit_report, from_csv, to_csv, to_markdown, ReportFormat};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "pcp", version, about = "Prompt-based continued pre-training lab")]
pub struct Cli {
    /// Seed for every random choice; defaults to the config file's seed, then 42.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a word vocabulary from JSONL datasets.
    BuildVocab {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
        #[arg(long, default_value_t = pcp_core::tokenizer::DEFAULT_SOFT_TOKENS)]
        soft_tokens: usize,
        /// Keep the template and label words of this task.
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continued MLM pre-training on a dataset or a built corpus.
    Pretrain {
        #[arg(long)]
        mode: CorpusMode,
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint path or `random`.
        #[arg(long)]
        init: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Vocabulary for `--init random`.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Task file, needed when `--corpus` is a dataset.
        #[arg(long)]
        task: Option<PathBuf>,
    },
    /// Fine-tune with a learning-rate search on the dev set.
    Finetune {
        #[arg(long)]
        method: FinetuneMethod,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        init: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Label a dataset with a prompt-tuned checkpoint.
    PseudoLabel {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        method: Option<FinetuneMethod>,
        #[arg(long, default_value_t = 128)]
        max_len: usize,
    },
    /// Render a continued pre-training corpus.
    BuildCorpus {
        #[arg(long)]
        mode: CorpusMode,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        labeled: PathBuf,
        /// Pseudo-labelled examples (for label-bearing modes) or raw text.
        #[arg(long)]
        unlabeled: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, value_parser = parse_style, default_value = "hard")]
        style: PromptStyle,
        #[arg(long, default_value_t = 128)]
        max_len: usize,
    },
    /// Print the task metric of a checkpoint on a labelled dataset.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        method: Option<FinetuneMethod>,
        #[arg(long, default_value_t = 128)]
        max_len: usize,
    },
    /// Run a multi-seed experiment and write its summary CSV.
    Experiment {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render a summary CSV as CSV or markdown.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        format: ReportFormat,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_style(s: &str) -> std::result::Result<PromptStyle, String> {
    match s {
        "hard" => Ok(PromptStyle::Hard),
        "soft" => Ok(PromptStyle::Soft),
        _ => Err(format!("expected `hard` or `soft`, got `{s}`")),
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_DATA
        }
    }
}

/// `out/summary.csv` -> `out/summary.report.json`.
pub fn report_json_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv.with_file_name(format!("{stem}.report.json"))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => io::read_json(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// `random` or a checkpoint; returns the parameters and the vocabulary.
fn load_init(init: &str, vocab: Option<&Path>, cfg: &RunConfig, num_labels: usize) -> Result<(ModelParameters, Vocabulary)> {
    let file_vocab = vocab.map(io::load_vocab).transpose()?;
    if init == "random" {
        let vocab = file_vocab.ok_or_else(|| Error::Config("`--init random` needs `--vocab`".into()))?;
        let params = ModelParameters::init(&cfg.model.config(vocab.len(), num_labels))?;
        return Ok((params, vocab));
    }
    let ck = io::load_checkpoint(Path::new(init))?;
    let vocab = match (ck.vocab, file_vocab) {
        (Some(v), _) | (None, Some(v)) => v,
        (None, None) => return Err(Error::Config(format!("{init} has no vocabulary; pass `--vocab`"))),
    };
    if vocab.len() != ck.params.config().vocab_size {
        return Err(Error::Data(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            ck.params.config().vocab_size
        )));
    }
    Ok((ck.params, vocab))
}

fn load_ckpt_with_vocab(path: &Path) -> Result<io::Checkpoint> {
    let ck = io::load_checkpoint(path)?;
    if ck.vocab.is_none() {
        return Err(Error::Data(format!("{} does not embed a vocabulary", path.display())));
    }
    Ok(ck)
}

fn prompt_style(method: FinetuneMethod) -> Result<PromptStyle> {
    method
        .prompt_style()
        .ok_or_else(|| Error::Config("pseudo-labelling needs a prompt-based checkpoint".into()))
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let echo_seed = |out: &mut dyn Write, seed: u64| {
        let _ = writeln!(out, "seed: {seed}");
    };
    let w = |e: std::io::Error| Error::io("<stdout>", e);
    match &cli.command {
        Command::BuildVocab {
            input,
            min_freq,
            soft_tokens,
            task,
            out: path,
        } => {
            echo_seed(out, cli.seed.unwrap_or(DEFAULT_SEED));
            let mut texts = Vec::new();
            for p in input {
                for r in io::read_records(p)? {
                    texts.push(r.text_a);
                    texts.extend(r.text_b);
                }
            }
            let required = match task {
                Some(t) => io::load_task(t)?.required_words(),
                None => Vec::new(),
            };
            let required: Vec<&str> = required.iter().map(String::as_str).collect();
            let vocab = build_vocab_with_required(texts.iter().map(String::as_str), &required, *min_freq, *soft_tokens)?;
            io::save_vocab(path, &vocab)?;
            writeln!(out, "vocabulary: {} tokens", vocab.len()).map_err(w)?;
        }
        Command::Pretrain {
            mode,
            corpus,
            init,
            config,
            out: path,
            vocab,
            task,
        } => {
            let cfg = load_config(config.as_deref())?;
            let seed = cfg.resolve_seed(cli.seed);
            echo_seed(out, seed);
            let task = task.as_deref().map(io::load_task).transpose()?;
            let num_labels = task.as_ref().map_or(2, TaskSpec::num_labels);
            let (params, vocab) = load_init(init, vocab.as_deref(), &cfg, num_labels)?;
            let pt = cfg.pretrain(seed);
            let sequences = if io::is_built_corpus(corpus)? {
                let c = io::load_corpus(corpus, &vocab)?;
                if c.mode != *mode {
                    return Err(Error::Data(format!("{} holds a {} corpus, not {mode}", corpus.display(), c.mode)));
                }
                c.sequences
            } else {
                let task = task
                    .as_ref()
                    .ok_or_else(|| Error::Config("a dataset corpus needs `--task`".into()))?;
                let examples = io::load_dataset(corpus, &task.label_names)?;
                let max_len = pt.max_sequence_length.min(params.config().max_sequence_length);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                build_corpus(&examples, &[], task, &vocab, *mode, PromptStyle::Hard, max_len, &mut rng)?.sequences
            };
            let outcome = continued_pretrain(&params, &sequences, &vocab, &pt)?;
            for (i, l) in outcome.epoch_losses.iter().enumerate() {
                writeln!(out, "epoch {} loss {l}", i + 1).map_err(w)?;
            }
            io::save_checkpoint(path, &outcome.params, Some(&vocab), None)?;
            writeln!(out, "steps: {}", outcome.steps).map_err(w)?;
        }
        Command::Finetune {
            method,
            task,
            train,
            dev,
            init,
            config,
            out: path,
            vocab,
        } => {
            let cfg = load_config(config.as_deref())?;
            let seed = cfg.resolve_seed(cli.seed);
            echo_seed(out, seed);
            let task = io::load_task(task)?;
            let (params, vocab) = load_init(init, vocab.as_deref(), &cfg, task.num_labels())?;
            task.check_vocab(&vocab)?;
            let train = io::load_dataset(train, &task.label_names)?;
            let dev = io::load_dataset(dev, &task.label_names)?;
            let (ft, grid) = cfg.finetune(seed);
            let result = grid_search(*method, &params, &train, &dev, &task, &vocab, &ft, &grid)?;
            for (lr, score) in &result.scores {
                writeln!(out, "lr {lr} dev {score}").map_err(w)?;
            }
            for p in &result.outcome.trace {
                writeln!(out, "step {} dev {}", p.step, p.dev_score).map_err(w)?;
            }
            for (i, l) in result.outcome.losses.iter().enumerate() {
                writeln!(out, "loss {} {l}", i + 1).map_err(w)?;
            }
            writeln!(out, "best lr {} dev {}", result.best_lr, result.outcome.best_score).map_err(w)?;
            io::save_checkpoint(path, &result.outcome.params, Some(&vocab), Some(*method))?;
        }
        Command::PseudoLabel {
            ckpt,
            task,
            input,
            out: path,
            method,
            max_len,
        } => {
            echo_seed(out, cli.seed.unwrap_or(DEFAULT_SEED));
            let ck = load_ckpt_with_vocab(ckpt)?;
            let vocab = ck.vocab.as_ref().expect("checked");
            let task = io::load_task(task)?;
            let style = prompt_style(method.or(ck.method).unwrap_or(FinetuneMethod::PromptHard))?;
            let examples: Vec<Example> = io::read_records(input)?
                .into_iter()
                .map(|r| Example {
                    text_a: r.text_a,
                    text_b: r.text_b,
                    label: None,
                })
                .collect();
            let labelled = pseudo_label(&ck.params, &examples, &task, vocab, style, *max_len)?;
            io::save_dataset(path, &labelled, &task.label_names)?;
            let mut counts = vec![0usize; task.num_labels()];
            for e in &labelled {
                counts[e.label.expect("pseudo-labelled")] += 1;
            }
            for (name, n) in task.label_names.iter().zip(counts) {
                writeln!(out, "{name}: {n}").map_err(w)?;
            }
        }
        Command::BuildCorpus {
            mode,
            task,
            labeled,
            unlabeled,
            out: path,
            vocab,
            style,
            max_len,
        } => {
            let seed = cli.seed.unwrap_or(DEFAULT_SEED);
            echo_seed(out, seed);
            let task = io::load_task(task)?;
            let labelled = io::load_dataset(labeled, &task.label_names)?;
            let pseudo = match unlabeled {
                Some(p) => io::load_dataset(p, &task.label_names)?,
                None => Vec::new(),
            };
            let vocab = match vocab {
                Some(v) => io::load_vocab(v)?,
                None => {
                    let texts: Vec<&str> = labelled
                        .iter()
                        .chain(&pseudo)
                        .flat_map(|e| std::iter::once(e.text_a.as_str()).chain(e.text_b.as_deref()))
                        .collect();
                    let required = task.required_words();
                    let required: Vec<&str> = required.iter().map(String::as_str).collect();
                    build_vocab_with_required(texts, &required, 1, pcp_core::tokenizer::DEFAULT_SOFT_TOKENS)?
                }
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let corpus = build_corpus(&labelled, &pseudo, &task, &vocab, *mode, *style, *max_len, &mut rng)?;
            io::save_corpus(path, &corpus, &vocab)?;
            writeln!(out, "{}: {} sequences", corpus.mode, corpus.len()).map_err(w)?;
        }
        Command::Evaluate {
            ckpt,
            task,
            test,
            method,
            max_len,
        } => {
            echo_seed(out, cli.seed.unwrap_or(DEFAULT_SEED));
            let ck = load_ckpt_with_vocab(ckpt)?;
            let vocab = ck.vocab.as_ref().expect("checked");
            let task = io::load_task(task)?;
            let method = method.or(ck.method).unwrap_or(FinetuneMethod::PromptHard);
            let test = io::load_dataset(test, &task.label_names)?;
            let score = evaluate(&ck.params, method, &task, vocab, &test, *max_len)?;
            writeln!(out, "{} {score}", task.metric).map_err(w)?;
        }
        Command::Experiment { spec, out: path } => {
            let s: ExperimentSpec = io::read_json(spec)?;
            let _ = writeln!(out, "seeds: {:?}", s.seeds);
            let dir = spec.parent().unwrap_or(Path::new("."));
            let task = io::load_task(&dir.join(&s.task))?;
            let data = ExperimentData {
                train: io::load_dataset(&dir.join(&s.train), &task.label_names)?,
                test: io::load_dataset(&dir.join(&s.test), &task.label_names)?,
                task,
            };
            let report = run_experiment(&s, &data)?;
            emit_report(&report.summary, ReportFormat::Csv, path)?;
            io::write_json(&report_json_path(path), &report)?;
            write!(out, "{}", to_markdown(&report.summary)).map_err(w)?;
        }
        Command::Report { input, format, out: path } => {
            let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
            let rows = from_csv(&text)?;
            emit_report(&rows, *format, path)?;
            let shown = match format {
                ReportFormat::Csv => to_csv(&rows)?,
                ReportFormat::Markdown => to_markdown(&rows),
            };
            write!(out, "{shown}").map_err(w)?;
        }
    }
    Ok(())
}
