//! On-disk formats: JSONL datasets and corpora, task and config JSON, the
//! vocabulary file and the binary checkpoint.
//!
//! Checkpoint layout, all integers little-endian with no padding:
//!
//! ```text
//! "PCPC" | u32 version | u32 n | n bytes of JSON header
//! u32 tensor count
//! per tensor: u32 name length | name | u32 rank | rank x u64 dims | f32 values
//! ```
//!
//! The JSON header holds the model configuration and, optionally, the
//! vocabulary and the fine-tuning method the weights were trained with.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pcp_core::model::{ModelConfig, ModelParameters};
use pcp_core::pipeline::{Corpus, CorpusMode, FinetuneMethod, LabelOrigin, Provenance};
use pcp_core::template::{Example, TaskFile, TaskSpec};
use pcp_core::tensor::Tensor;
use pcp_core::tokenizer::Vocabulary;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCPC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Json {
        path: path.into(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

/// One dataset line. Labels are task label names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub text_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_b: Option<String>,
    #[serde(default)]
    pub label: Option<String>,
}

fn parse_lines<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Line {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    parse_lines(path, &read_text(path)?)
}

/// Reads a JSONL dataset, resolving label names against `label_names`.
pub fn load_dataset(path: &Path, label_names: &[String]) -> Result<Vec<Example>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_err = |message: String| Error::Line {
            path: path.into(),
            line: i + 1,
            message,
        };
        let r: Record = serde_json::from_str(line).map_err(|e| line_err(e.to_string()))?;
        let label = match r.label {
            None => None,
            Some(name) => Some(
                label_names
                    .iter()
                    .position(|l| *l == name)
                    .ok_or_else(|| line_err(format!("unknown label `{name}`")))?,
            ),
        };
        out.push(Example {
            text_a: r.text_a,
            text_b: r.text_b,
            label,
        });
    }
    Ok(out)
}

pub fn dataset_to_jsonl(examples: &[Example], label_names: &[String]) -> String {
    let mut s = String::new();
    for e in examples {
        let r = Record {
            text_a: e.text_a.clone(),
            text_b: e.text_b.clone(),
            label: e.label.map(|l| label_names[l].clone()),
        };
        s.push_str(&serde_json::to_string(&r).expect("serializable"));
        s.push('\n');
    }
    s
}

pub fn save_dataset(path: &Path, examples: &[Example], label_names: &[String]) -> Result<()> {
    if let Some(bad) = examples.iter().filter_map(|e| e.label).find(|l| *l >= label_names.len()) {
        return Err(Error::Data(format!("label id {bad} has no name")));
    }
    write_bytes(path, dataset_to_jsonl(examples, label_names).as_bytes())
}

pub fn load_task(path: &Path) -> Result<TaskSpec> {
    let file: TaskFile = read_json(path)?;
    Ok(TaskSpec::from_file(&file)?)
}

pub fn save_task(path: &Path, task: &TaskSpec) -> Result<()> {
    write_json(path, &task.to_file())
}

/// One token per line, in id order.
pub fn save_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut s = vocab.tokens().join("\n");
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let tokens: Vec<String> = read_text(path)?.lines().map(str::to_string).collect();
    Ok(Vocabulary::from_tokens(tokens)?)
}

/// Everything a checkpoint carries besides the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    #[serde(flatten)]
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<FinetuneMethod>,
}

pub struct Checkpoint {
    pub params: ModelParameters,
    pub vocab: Option<Vocabulary>,
    pub method: Option<FinetuneMethod>,
}

pub fn encode_checkpoint(params: &ModelParameters, vocab: Option<&Vocabulary>, method: Option<FinetuneMethod>) -> Vec<u8> {
    let header = CheckpointHeader {
        config: params.config().clone(),
        vocabulary: vocab.map(|v| v.tokens().to_vec()),
        method,
    };
    let json = serde_json::to_vec(&header).expect("serializable");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * params.num_parameters());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let tensors: Vec<(&str, &Tensor)> = params.iter().collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParameters,
    vocab: Option<&Vocabulary>,
    method: Option<FinetuneMethod>,
) -> Result<()> {
    write_bytes(path, &encode_checkpoint(params, vocab, method))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], (usize, String)> {
        if self.bytes.len() - self.pos < n {
            return Err((
                self.pos,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, (usize, String)> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, (usize, String)> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses checkpoint bytes; errors carry the byte offset of the problem.
pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, (usize, String)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err((0, "magic is not PCPC".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err((4, format!("unsupported format version {version}")));
    }
    let len = r.u32("header length")? as usize;
    let at = r.pos;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(len, "header")?).map_err(|e| (at, format!("header JSON: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let at = r.pos;
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "tensor name")?)
            .map_err(|_| (at + 4, "tensor name is not UTF-8".to_string()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err((r.pos - 4, format!("tensor `{name}` has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dims")? as usize);
        }
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or((r.pos, format!("tensor `{name}` is too large")))?;
        let raw = r.take(numel * 4, "tensor values")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(dims, values).map_err(|e| (at, e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err((at, format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err((r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let params = ModelParameters::from_tensors(header.config, tensors).map_err(|e| (r.pos, e.to_string()))?;
    let vocab = header
        .vocabulary
        .map(Vocabulary::from_tokens)
        .transpose()
        .map_err(|e| (12, e.to_string()))?;
    if let Some(v) = &vocab {
        if v.len() != params.config().vocab_size {
            return Err((12, format!("vocabulary has {} tokens, model expects {}", v.len(), params.config().vocab_size)));
        }
    }
    Ok(Checkpoint {
        params,
        vocab,
        method: header.method,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|(offset, message)| Error::Format {
        path: path.into(),
        offset,
        message,
    })
}

/// One line of a built corpus file: tokens as strings, so the file stays
/// readable and does not depend on id assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub mode: CorpusMode,
    pub tokens: Vec<String>,
    pub source: usize,
    #[serde(default)]
    pub label: Option<usize>,
    pub origin: LabelOrigin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partner: Option<usize>,
}

pub fn save_corpus(path: &Path, corpus: &Corpus, vocab: &Vocabulary) -> Result<()> {
    let mut s = String::new();
    for (seq, p) in corpus.sequences.iter().zip(&corpus.provenance) {
        let tokens = seq
            .iter()
            .map(|&id| vocab.token(id).map(str::to_string))
            .collect::<pcp_core::Result<Vec<_>>>()?;
        let line = CorpusLine {
            mode: corpus.mode,
            tokens,
            source: p.source,
            label: p.label,
            origin: p.origin,
            partner: p.partner,
        };
        s.push_str(&serde_json::to_string(&line).expect("serializable"));
        s.push('\n');
    }
    write_bytes(path, s.as_bytes())
}

/// Whether a JSONL file holds a built corpus rather than a dataset.
pub fn is_built_corpus(path: &Path) -> Result<bool> {
    let text = read_text(path)?;
    let first = text.lines().find(|l| !l.trim().is_empty());
    Ok(first.is_some_and(|l| {
        serde_json::from_str::<serde_json::Value>(l).is_ok_and(|v| v.get("tokens").is_some())
    }))
}

/// Reads a built corpus, mapping tokens through `vocab` (unknown tokens
/// become `[UNK]`).
pub fn load_corpus(path: &Path, vocab: &Vocabulary) -> Result<Corpus> {
    let lines: Vec<CorpusLine> = parse_lines(path, &read_text(path)?)?;
    let mode = match lines.first() {
        Some(l) => l.mode,
        None => return Err(Error::Data(format!("{}: corpus is empty", path.display()))),
    };
    if let Some(i) = lines.iter().position(|l| l.mode != mode) {
        return Err(Error::Line {
            path: path.into(),
            line: i + 1,
            message: format!("mode {} differs from the first line's {mode}", lines[i].mode),
        });
    }
    let sequences = lines
        .iter()
        .map(|l| l.tokens.iter().map(|t| vocab.token_id(t).unwrap_or(vocab.unk_id())).collect())
        .collect();
    let provenance = lines
        .iter()
        .map(|l| Provenance {
            source: l.source,
            label: l.label,
            origin: l.origin,
            partner: l.partner,
        })
        .collect();
    Ok(Corpus {
        mode,
        sequences,
        provenance,
    })
}
