//! Prompt templates, verbalizers and task descriptions.
//!
//! A template is written with placeholders, e.g. `{text_a} It was {mask} .`
//! or `{text_a} ? {mask} , {text_b}`. Soft templates use `{soft:i}` for the
//! i-th reserved prompt token.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricKind;
use crate::model::{ModelParameters, INIT_STD, TOKEN_EMBEDDING};
use crate::tensor::{c, Real};
use crate::tokenizer::{pre_tokenize, Encoding, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Segment {
    /// One pre-tokenized word.
    Literal(String),
    TextA,
    TextB,
    Mask,
    Soft(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Template {
    segments: Vec<Segment>,
}

/// A classification example. `label` indexes the task's label list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl Example {
    pub fn single(text_a: impl Into<String>, label: Option<usize>) -> Self {
        Self {
            text_a: text_a.into(),
            text_b: None,
            label,
        }
    }

    pub fn pair(text_a: impl Into<String>, text_b: impl Into<String>, label: Option<usize>) -> Self {
        Self {
            text_a: text_a.into(),
            text_b: Some(text_b.into()),
            label,
        }
    }
}

/// What goes into the mask slot when rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotFill {
    Mask,
    Token(u32),
    Omit,
}

/// Parses a template string; literal runs are pre-tokenized into words.
pub fn parse_template(spec: &str) -> Result<Template> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut rest = spec;
    let mut offset = 0;
    let flush = |literal: &mut String, segments: &mut Vec<Segment>| {
        segments.extend(pre_tokenize(literal).into_iter().map(Segment::Literal));
        literal.clear();
    };
    while let Some(ch) = rest.chars().next() {
        match ch {
            '{' => {
                let close = rest.find('}').ok_or_else(|| Error::Parse {
                    offset,
                    message: "unclosed `{`".into(),
                })?;
                let name = &rest[1..close];
                let seg = match name {
                    "text_a" => Segment::TextA,
                    "text_b" => Segment::TextB,
                    "mask" => Segment::Mask,
                    _ => match name.strip_prefix("soft:").map(str::parse::<usize>) {
                        Some(Ok(i)) => Segment::Soft(i),
                        _ => {
                            return Err(Error::Parse {
                                offset,
                                message: format!("unknown placeholder `{{{name}}}`"),
                            })
                        }
                    },
                };
                flush(&mut literal, &mut segments);
                segments.push(seg);
                offset += close + 1;
                rest = &rest[close + 1..];
            }
            '}' => {
                return Err(Error::Parse {
                    offset,
                    message: "unmatched `}`".into(),
                })
            }
            _ => {
                literal.push(ch);
                offset += ch.len_utf8();
                rest = &rest[ch.len_utf8()..];
            }
        }
    }
    flush(&mut literal, &mut segments);
    Template::new(segments)
}

impl Template {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let masks = segments.iter().filter(|s| **s == Segment::Mask).count();
        if masks != 1 {
            return Err(Error::Template(format!(
                "a template needs exactly one mask slot, found {masks}"
            )));
        }
        for dup in [Segment::TextA, Segment::TextB] {
            if segments.iter().filter(|s| **s == dup).count() > 1 {
                return Err(Error::Template(format!("{dup:?} appears more than once")));
            }
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn is_pair(&self) -> bool {
        self.segments.contains(&Segment::TextB)
    }

    pub fn literals(&self) -> Vec<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Literal(w) => Some(w.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Soft slot indices in order of appearance.
    pub fn soft_slots(&self) -> Vec<usize> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Soft(i) => Some(*i),
                _ => None,
            })
            .collect()
    }

    /// Canonical placeholder form; parses back to the same template.
    pub fn serialize(&self) -> String {
        let parts: Vec<String> = self
            .segments
            .iter()
            .map(|s| match s {
                Segment::Literal(w) => w.clone(),
                Segment::TextA => "{text_a}".into(),
                Segment::TextB => "{text_b}".into(),
                Segment::Mask => "{mask}".into(),
                Segment::Soft(i) => format!("{{soft:{i}}}"),
            })
            .collect();
        parts.join(" ")
    }

    /// Number of positions the template itself occupies, including `[CLS]`
    /// and `[SEP]`, given how the mask slot is filled.
    fn scaffold_len(&self, fill: SlotFill) -> usize {
        let slots = self
            .segments
            .iter()
            .filter(|s| match s {
                Segment::TextA | Segment::TextB => false,
                Segment::Mask => fill != SlotFill::Omit,
                _ => true,
            })
            .count();
        slots + 2
    }

    /// Renders `[CLS] segments [SEP]`, truncating the example text (never the
    /// scaffold) to fit `max_len`. Returns the ids and the index of the mask
    /// slot, if one was emitted.
    pub fn render_with(
        &self,
        example: &Example,
        vocab: &Vocabulary,
        max_len: usize,
        fill: SlotFill,
    ) -> Result<(Vec<u32>, Option<usize>)> {
        if self.is_pair() != example.text_b.is_some() {
            return Err(Error::Template(if self.is_pair() {
                "pair template needs an example with text_b".into()
            } else {
                "single-sentence template given an example with text_b".into()
            }));
        }
        let scaffold = self.scaffold_len(fill);
        if scaffold > max_len {
            return Err(Error::Template(format!(
                "template needs {scaffold} positions but max_len is {max_len}"
            )));
        }
        let mut a = vocab.encode(&example.text_a);
        let mut b = example.text_b.as_deref().map(|t| vocab.encode(t)).unwrap_or_default();
        truncate_pair(&mut a, &mut b, max_len - scaffold);

        let mut ids = Vec::with_capacity(max_len);
        let mut mask_at = None;
        ids.push(vocab.cls_id());
        for seg in &self.segments {
            match seg {
                Segment::TextA => ids.extend_from_slice(&a),
                Segment::TextB => ids.extend_from_slice(&b),
                Segment::Literal(w) => ids.push(vocab.word_id(w)),
                Segment::Soft(i) => ids.push(vocab.soft_id(*i).ok_or_else(|| {
                    Error::Template(format!(
                        "soft slot {i} exceeds the {} reserved soft tokens",
                        vocab.soft_token_count()
                    ))
                })?),
                Segment::Mask => match fill {
                    SlotFill::Mask => {
                        mask_at = Some(ids.len());
                        ids.push(vocab.mask_id());
                    }
                    SlotFill::Token(t) => ids.push(t),
                    SlotFill::Omit => {}
                },
            }
        }
        ids.push(vocab.sep_id());
        Ok((ids, mask_at))
    }

    /// Prompt input `T(X)` with a `[MASK]` slot.
    pub fn render(&self, example: &Example, vocab: &Vocabulary, max_len: usize) -> Result<Encoding> {
        let (ids, mask) = self.render_with(example, vocab, max_len, SlotFill::Mask)?;
        Ok(Encoding::new(ids, mask))
    }

    /// Continued pre-training sequence `T(X, M(y))`: the mask slot holds the
    /// verbalized label.
    pub fn render_pcp(
        &self,
        example: &Example,
        label: usize,
        verbalizer: &Verbalizer,
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<Vec<u32>> {
        let token = verbalizer.token_for(label)?;
        Ok(self.render_with(example, vocab, max_len, SlotFill::Token(token))?.0)
    }

    /// The text placeholders followed by the mask slot, with no literals.
    pub fn labels_only(&self) -> Template {
        let mut segments: Vec<Segment> = self
            .segments
            .iter()
            .filter(|s| matches!(s, Segment::TextA | Segment::TextB))
            .cloned()
            .collect();
        segments.push(Segment::Mask);
        Template { segments }
    }
}

/// Trims the longer side first (ties trim `a`) until both fit in `budget`.
pub fn truncate_pair(a: &mut Vec<u32>, b: &mut Vec<u32>, budget: usize) {
    while a.len() + b.len() > budget {
        if a.len() >= b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
}

/// Injective map from label ids to single vocabulary words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verbalizer {
    label_names: Vec<String>,
    label_to_token: Vec<u32>,
}

impl Verbalizer {
    pub fn new(label_names: Vec<String>, words: &[String], vocab: &Vocabulary) -> Result<Self> {
        if label_names.len() != words.len() || label_names.is_empty() {
            return Err(Error::Vocab("verbalizer needs one word per label".into()));
        }
        let mut label_to_token = Vec::with_capacity(words.len());
        for w in words {
            label_to_token.push(vocab.single_word_id(w)?);
        }
        let distinct: BTreeSet<u32> = label_to_token.iter().copied().collect();
        if distinct.len() != label_to_token.len() {
            return Err(Error::Vocab("verbalizer words must be distinct".into()));
        }
        Ok(Self {
            label_names,
            label_to_token,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.label_to_token.len()
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.label_to_token
    }

    pub fn token_for(&self, label: usize) -> Result<u32> {
        self.label_to_token.get(label).copied().ok_or_else(|| {
            Error::Data(format!("label {label} is outside the {} task labels", self.num_labels()))
        })
    }

    pub fn label_for_token(&self, token: u32) -> Option<usize> {
        self.label_to_token.iter().position(|t| *t == token)
    }
}

/// Task description file: `{name, labels, template, soft_template, verbalizer, metric, is_pair}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    pub name: String,
    pub labels: Vec<String>,
    pub template: String,
    pub soft_template: String,
    pub verbalizer: BTreeMap<String, String>,
    pub metric: MetricKind,
    pub is_pair: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub label_names: Vec<String>,
    pub template: Template,
    pub soft_template: Template,
    /// Label word per label id.
    pub label_words: Vec<String>,
    pub metric: MetricKind,
    pub is_pair: bool,
}

/// Which template a prompt method renders with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    Hard,
    Soft,
}

impl TaskSpec {
    pub fn from_file(file: &TaskFile) -> Result<Self> {
        if file.labels.is_empty() {
            return Err(Error::Config("task has no labels".into()));
        }
        let template = parse_template(&file.template)?;
        let soft_template = parse_template(&file.soft_template)?;
        for (kind, t) in [("template", &template), ("soft_template", &soft_template)] {
            if t.is_pair() != file.is_pair {
                return Err(Error::Template(format!(
                    "{kind} {} text_b but the task is_pair={}",
                    if t.is_pair() { "uses" } else { "lacks" },
                    file.is_pair
                )));
            }
        }
        let mut label_words = Vec::with_capacity(file.labels.len());
        for label in &file.labels {
            let w = file
                .verbalizer
                .get(label)
                .ok_or_else(|| Error::Config(format!("no label word for `{label}`")))?;
            label_words.push(w.clone());
        }
        if let Some(extra) = file.verbalizer.keys().find(|k| !file.labels.contains(k)) {
            return Err(Error::Config(format!("label word given for unknown label `{extra}`")));
        }
        Ok(Self {
            name: file.name.clone(),
            label_names: file.labels.clone(),
            template,
            soft_template,
            label_words,
            metric: file.metric,
            is_pair: file.is_pair,
        })
    }

    pub fn to_file(&self) -> TaskFile {
        TaskFile {
            name: self.name.clone(),
            labels: self.label_names.clone(),
            template: self.template.serialize(),
            soft_template: self.soft_template.serialize(),
            verbalizer: self
                .label_names
                .iter()
                .cloned()
                .zip(self.label_words.iter().cloned())
                .collect(),
            metric: self.metric,
            is_pair: self.is_pair,
        }
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn label_id(&self, name: &str) -> Option<usize> {
        self.label_names.iter().position(|l| l == name)
    }

    pub fn template_for(&self, style: PromptStyle) -> &Template {
        match style {
            PromptStyle::Hard => &self.template,
            PromptStyle::Soft => &self.soft_template,
        }
    }

    /// Resolves label words against `vocab`; each must be a single known word.
    pub fn verbalizer(&self, vocab: &Vocabulary) -> Result<Verbalizer> {
        Verbalizer::new(self.label_names.clone(), &self.label_words, vocab)
    }

    /// Words the vocabulary must contain for this task to render.
    pub fn required_words(&self) -> Vec<String> {
        let mut out: Vec<String> = self.template.literals().into_iter().map(String::from).collect();
        out.extend(self.soft_template.literals().into_iter().map(String::from));
        out.extend(self.label_words.iter().flat_map(|w| pre_tokenize(w)));
        out
    }

    /// Checks that every template literal and label word is in `vocab` and
    /// that soft slots fit the reserved soft tokens.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        self.verbalizer(vocab)?;
        for t in [&self.template, &self.soft_template] {
            for w in t.literals() {
                if vocab.token_id(w).is_none() {
                    return Err(Error::Vocab(format!("template word `{w}` is not in the vocabulary")));
                }
            }
            if let Some(i) = t.soft_slots().into_iter().find(|i| *i >= vocab.soft_token_count()) {
                return Err(Error::Template(format!(
                    "soft slot {i} exceeds the {} reserved soft tokens",
                    vocab.soft_token_count()
                )));
            }
        }
        Ok(())
    }
}

/// What [`soft_prompt_init`] did for each soft slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SoftInit {
    CopiedFrom { slot: usize, word: String },
    Random { slot: usize },
}

/// Initialises soft-prompt embeddings from the hard template: the k-th soft
/// slot (in order of appearance) copies the embedding of the k-th literal of
/// `hard`. Slots without a matching literal are drawn from Normal(0, 0.02).
pub fn soft_prompt_init<T: Real>(
    soft: &Template,
    hard: &Template,
    params: &mut ModelParameters<T>,
    vocab: &Vocabulary,
    rng: &mut dyn RngCore,
) -> Result<Vec<SoftInit>> {
    let slots = soft.soft_slots();
    if let Some(i) = slots.iter().find(|i| **i >= vocab.soft_token_count()) {
        return Err(Error::Template(format!(
            "soft slot {i} exceeds the {} reserved soft tokens",
            vocab.soft_token_count()
        )));
    }
    let literals = hard.literals();
    let d = params.config().hidden_dim;
    let table = params
        .get_mut(TOKEN_EMBEDDING)
        .ok_or_else(|| Error::contract("missing token embedding"))?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut log = Vec::with_capacity(slots.len());
    for (k, slot) in slots.iter().copied().enumerate() {
        let dst = vocab.soft_id(slot).expect("checked above") as usize;
        match literals.get(k) {
            Some(word) => {
                let src = vocab.word_id(word) as usize;
                let row: Vec<T> = table.values()[src * d..(src + 1) * d].to_vec();
                table.values_mut()[dst * d..(dst + 1) * d].copy_from_slice(&row);
                log.push(SoftInit::CopiedFrom {
                    slot,
                    word: word.to_string(),
                });
            }
            None => {
                log::warn!("soft slot {slot} has no hard-template literal; using random init");
                for v in &mut table.values_mut()[dst * d..(dst + 1) * d] {
                    *v = c::<T>(normal.sample(rng));
                }
                log.push(SoftInit::Random { slot });
            }
        }
    }
    Ok(log)
}

/// Table of the hard templates and label words used for the built-in tasks.
pub fn reference_templates() -> Vec<(&'static str, &'static str, Vec<(&'static str, &'static str)>)> {
    vec![
        ("SST-2", "{text_a} It was {mask} .", vec![("positive", "great"), ("negative", "terrible")]),
        ("MR", "{text_a} It was {mask} .", vec![("positive", "great"), ("negative", "terrible")]),
        ("CR", "{text_a} It was {mask} .", vec![("positive", "great"), ("negative", "terrible")]),
        ("MPQA", "{text_a} is {mask} .", vec![("positive", "positive"), ("negative", "negative")]),
        ("Subj", "{text_a} This is {mask} .", vec![("subjective", "subjective"), ("objective", "objective")]),
        ("CoLA", "{text_a} This is {mask} .", vec![("grammatical", "correct"), ("not_grammatical", "incorrect")]),
        ("TREC", "{mask} : {text_a}", vec![("abbreviation", "Expression"), ("entity", "Entity"), ("description", "Description")]),
        ("MNLI", "{text_a} ? {mask} , {text_b}", vec![("entailment", "Yes"), ("neutral", "Maybe"), ("contradiction", "No")]),
        ("SNLI", "{text_a} ? {mask} , in this case {text_b}", vec![("entailment", "Yes"), ("neutral", "Maybe"), ("contradiction", "No")]),
        ("QNLI", "{text_a} ? {mask} , {text_b}", vec![("entailment", "Yes"), ("not_entailment", "No")]),
        ("RTE", "{text_a} ? {mask} , I think that {text_b}", vec![("entailment", "Clearly"), ("not_entailment", "Yet")]),
        ("MRPC", "{text_a} {mask} , {text_b}", vec![("equivalent", "Yes"), ("not_equivalent", "No")]),
        ("QQP", "{text_a} {mask} , {text_b}", vec![("equivalent", "Yes"), ("not_equivalent", "No")]),
    ]
}

/// Unified soft template for single-sentence tasks (SST-2 shaped).
pub const SOFT_SINGLE_TEMPLATE: &str = "{text_a} {soft:0} {soft:1} {mask} {soft:2}";
/// Unified soft template for sentence-pair tasks (STS-B shaped).
pub const SOFT_PAIR_TEMPLATE: &str = "{text_a} {mask} {soft:0} {text_b}";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::build_vocab_with_required;

    fn seg_lit(w: &str) -> Segment {
        Segment::Literal(w.into())
    }

    fn vocab() -> Vocabulary {
        build_vocab_with_required(
            ["a fun ride", "the movie was bad"],
            &["it was . great terrible ? , yes maybe no"],
            1,
            8,
        )
        .unwrap()
    }

    #[test]
    fn parses_sst2_template() {
        let t = parse_template("{text_a} It was {mask} .").unwrap();
        assert_eq!(
            t.segments(),
            &[Segment::TextA, seg_lit("it"), seg_lit("was"), Segment::Mask, seg_lit(".")]
        );
    }

    #[test]
    fn parses_mnli_template() {
        let t = parse_template("{text_a} ? {mask} , {text_b}").unwrap();
        assert_eq!(
            t.segments(),
            &[Segment::TextA, seg_lit("?"), Segment::Mask, seg_lit(","), Segment::TextB]
        );
        assert!(t.is_pair());
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_template("{text_a} {mask} {mask}"), Err(Error::Template(_))));
        assert!(matches!(parse_template("{text_a} no mask"), Err(Error::Template(_))));
        assert_eq!(
            parse_template("ab {bogus} {mask}").unwrap_err(),
            Error::Parse {
                offset: 3,
                message: "unknown placeholder `{bogus}`".into()
            }
        );
        assert!(matches!(parse_template("{mask} {text_a"), Err(Error::Parse { offset: 7, .. })));
        assert!(matches!(parse_template("{mask} }"), Err(Error::Parse { offset: 7, .. })));
        assert!(parse_template("{soft:x} {mask}").is_err());
    }

    #[test]
    fn serialize_roundtrips() {
        for (_, t, _) in reference_templates() {
            let parsed = parse_template(t).unwrap();
            assert_eq!(parse_template(&parsed.serialize()).unwrap(), parsed);
        }
        let soft = parse_template(SOFT_SINGLE_TEMPLATE).unwrap();
        assert_eq!(parse_template(&soft.serialize()).unwrap(), soft);
    }

    #[test]
    fn render_sst2_example() {
        let v = vocab();
        let t = parse_template("{text_a} It was {mask} .").unwrap();
        let e = t.render(&Example::single("a fun ride", Some(0)), &v, 64).unwrap();
        assert_eq!(v.decode(&e.ids).unwrap(), "[CLS] a fun ride it was [MASK] . [SEP]");
        assert_eq!(e.mask_position, Some(6));
        assert_eq!(e.ids[6], v.mask_id());

        let empty = t.render(&Example::single("", None), &v, 64).unwrap();
        assert_eq!(v.decode(&empty.ids).unwrap(), "[CLS] it was [MASK] . [SEP]");
    }

    #[test]
    fn render_checks_pairing_and_scaffold() {
        let v = vocab();
        let single = parse_template("{text_a} It was {mask} .").unwrap();
        let pair = parse_template("{text_a} ? {mask} , {text_b}").unwrap();
        assert!(single.render(&Example::pair("a", "b", None), &v, 64).is_err());
        assert!(pair.render(&Example::single("a", None), &v, 64).is_err());
        assert!(single.render(&Example::single("a", None), &v, 5).is_err());
        let e = single.render(&Example::single("a fun ride", None), &v, 6).unwrap();
        assert_eq!(v.decode(&e.ids).unwrap(), "[CLS] it was [MASK] . [SEP]");
    }

    #[test]
    fn pair_truncation_trims_longer_side() {
        let v = vocab();
        let pair = parse_template("{text_a} ? {mask} , {text_b}").unwrap();
        let ex = Example::pair("the movie was bad", "a fun", None);
        // scaffold = cls + ? + mask + , + sep = 5; budget 4 -> a:2, b:2
        let e = pair.render(&ex, &v, 9).unwrap();
        assert_eq!(v.decode(&e.ids).unwrap(), "[CLS] the movie ? [MASK] , a fun [SEP]");
        let e = pair.render(&ex, &v, 8).unwrap();
        assert_eq!(v.decode(&e.ids).unwrap(), "[CLS] the ? [MASK] , a fun [SEP]");
    }

    #[test]
    fn render_pcp_fills_label_word() {
        let v = vocab();
        let t = parse_template("{text_a} It was {mask} .").unwrap();
        let verb = Verbalizer::new(vec!["positive".into(), "negative".into()], &["great".into(), "terrible".into()], &v).unwrap();
        let ex = Example::single("a fun ride", None);
        let pos = t.render_pcp(&ex, 0, &verb, &v, 64).unwrap();
        assert_eq!(v.decode(&pos).unwrap(), "[CLS] a fun ride it was great . [SEP]");
        let neg = t.render_pcp(&ex, 1, &verb, &v, 64).unwrap();
        assert_eq!(v.decode(&neg).unwrap(), "[CLS] a fun ride it was terrible . [SEP]");
        assert!(t.render_pcp(&ex, 2, &verb, &v, 64).is_err());
    }

    #[test]
    fn verbalizer_validation() {
        let v = vocab();
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(Verbalizer::new(names.clone(), &["great".into(), "great".into()], &v).is_err());
        assert!(Verbalizer::new(names.clone(), &["great".into(), "xyzzy".into()], &v).is_err());
        assert!(Verbalizer::new(names.clone(), &["great".into(), "it was".into()], &v).is_err());
        assert!(Verbalizer::new(names, &["great".into(), "[MASK]".into()], &v).is_err());
        let v2 = Verbalizer::new(vec!["x".into()], &["Yes".into()], &v).unwrap();
        assert_eq!(v2.token_ids(), &[v.token_id("yes").unwrap()]);
    }

    #[test]
    fn labels_only_and_template_only_shapes() {
        let v = vocab();
        let t = parse_template("{text_a} ? {mask} , {text_b}").unwrap();
        let lo = t.labels_only();
        assert_eq!(lo.segments(), &[Segment::TextA, Segment::TextB, Segment::Mask]);
        let (ids, m) = t.render_with(&Example::pair("a fun", "bad", None), &v, 64, SlotFill::Omit).unwrap();
        assert_eq!(m, None);
        assert_eq!(v.decode(&ids).unwrap(), "[CLS] a fun ? , bad [SEP]");
    }

    #[test]
    fn task_file_conversion() {
        let file = TaskFile {
            name: "sst-2".into(),
            labels: vec!["positive".into(), "negative".into()],
            template: "{text_a} It was {mask} .".into(),
            soft_template: SOFT_SINGLE_TEMPLATE.into(),
            verbalizer: [("positive".to_string(), "great".to_string()), ("negative".to_string(), "terrible".to_string())]
                .into_iter()
                .collect(),
            metric: MetricKind::Accuracy,
            is_pair: false,
        };
        let task = TaskSpec::from_file(&file).unwrap();
        assert_eq!(task.label_words, vec!["great", "terrible"]);
        assert_eq!(TaskSpec::from_file(&task.to_file()).unwrap(), task);
        task.check_vocab(&vocab()).unwrap();

        let mut bad = file.clone();
        bad.is_pair = true;
        assert!(TaskSpec::from_file(&bad).is_err());
        let mut bad = file;
        bad.verbalizer.remove("negative");
        assert!(TaskSpec::from_file(&bad).is_err());
    }

    #[test]
    fn soft_prompt_init_pairs_literals() {
        let v = vocab();
        let hard = parse_template("{text_a} It was {mask} .").unwrap();
        let soft = parse_template(SOFT_SINGLE_TEMPLATE).unwrap();
        let mut p = ModelParameters::<f32>::init(&crate::model::ModelConfig::tiny(v.len())).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let log = soft_prompt_init(&soft, &hard, &mut p, &v, &mut rng).unwrap();
        assert_eq!(
            log,
            vec![
                SoftInit::CopiedFrom { slot: 0, word: "it".into() },
                SoftInit::CopiedFrom { slot: 1, word: "was".into() },
                SoftInit::CopiedFrom { slot: 2, word: ".".into() },
            ]
        );
        let d = 16;
        let table = p.get(TOKEN_EMBEDDING).unwrap().values();
        let row = |id: u32| &table[id as usize * d..(id as usize + 1) * d];
        assert_eq!(row(v.soft_id(0).unwrap()), row(v.token_id("it").unwrap()));
        assert_eq!(row(v.soft_id(2).unwrap()), row(v.token_id(".").unwrap()));

        let none = parse_template("{text_a} {mask}").unwrap();
        let before = p.clone();
        assert!(soft_prompt_init(&none, &hard, &mut p, &v, &mut rng).unwrap().is_empty());
        assert_eq!(before, p);

        let long = parse_template("{soft:0} {soft:1} {soft:2} {soft:3} {text_a} {mask}").unwrap();
        let log = soft_prompt_init(&long, &hard, &mut p, &v, &mut rng).unwrap();
        assert_eq!(log[3], SoftInit::Random { slot: 3 });
        let bad = parse_template("{soft:8} {text_a} {mask}").unwrap();
        assert!(soft_prompt_init(&bad, &hard, &mut p, &v, &mut rng).is_err());
    }
}
