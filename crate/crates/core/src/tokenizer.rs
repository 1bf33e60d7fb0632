//! Word-level vocabulary with special and soft-prompt tokens.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Special tokens in id order.
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

pub const DEFAULT_SOFT_TOKENS: usize = 8;

/// Punctuation split off as standalone tokens.
const DETACHED: [char; 6] = ['.', ',', '!', '?', ';', ':'];

pub fn soft_token_name(i: usize) -> String {
    format!("[SOFT_{i}]")
}

/// Lowercases and splits on whitespace, detaching `. , ! ? ; :`.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if DETACHED.contains(&ch) {
                if !cur.is_empty() {
                    out.push(core::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
    soft_count: usize,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered token list. The list must start
    /// with the five specials followed by `[SOFT_0]..`.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Vocab(format!("expected {s} at id {i}")));
            }
        }
        let soft_count = tokens[SPECIALS.len()..]
            .iter()
            .enumerate()
            .take_while(|(i, t)| **t == soft_token_name(*i))
            .count();
        let mut index = BTreeMap::new();
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Vocab(format!("empty token at id {id}")));
            }
            if index.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token `{tok}`")));
            }
        }
        Ok(Self {
            tokens,
            index,
            soft_count,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> u32 {
        0
    }
    pub fn unk_id(&self) -> u32 {
        1
    }
    pub fn cls_id(&self) -> u32 {
        2
    }
    pub fn sep_id(&self) -> u32 {
        3
    }
    pub fn mask_id(&self) -> u32 {
        4
    }

    pub fn soft_token_count(&self) -> usize {
        self.soft_count
    }

    pub fn soft_id(&self, i: usize) -> Option<u32> {
        (i < self.soft_count).then(|| (SPECIALS.len() + i) as u32)
    }

    /// First id of an ordinary word.
    pub fn first_word_id(&self) -> u32 {
        (SPECIALS.len() + self.soft_count) as u32
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn is_soft(&self, id: u32) -> bool {
        let i = id as usize;
        i >= SPECIALS.len() && i < SPECIALS.len() + self.soft_count
    }

    /// Exact lookup of a vocabulary entry (no normalisation).
    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::Index {
                what: "vocabulary",
                index: id as usize,
                bound: self.tokens.len(),
            })
    }

    /// Id of a normalised word, falling back to `[UNK]`.
    pub fn word_id(&self, word: &str) -> u32 {
        self.token_id(word).unwrap_or(self.unk_id())
    }

    /// Token ids of `text`; unknown words map to `[UNK]`, no specials are added.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        pre_tokenize(text).iter().map(|w| self.word_id(w)).collect()
    }

    /// Space-joined tokens; specials render as their bracketed names.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.token(id)?);
        }
        Ok(out)
    }

    /// The single non-special id a word encodes to, if it does.
    pub fn single_word_id(&self, word: &str) -> Result<u32> {
        let ids = self.encode(word);
        match ids.as_slice() {
            [id] if *id >= self.first_word_id() => Ok(*id),
            _ => Err(Error::Vocab(format!(
                "`{word}` does not encode to exactly one known word (got {} tokens)",
                ids.len()
            ))),
        }
    }
}

/// Builds a vocabulary from raw texts.
///
/// Words with frequency at least `min_freq` are kept, ordered by descending
/// frequency then ascending token, after the specials and soft tokens.
pub fn build_vocab<'a, I>(corpus: I, min_freq: usize, soft_token_count: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    build_vocab_with_required(corpus, &[], min_freq, soft_token_count)
}

/// Like [`build_vocab`], but words from `required` (template literals, label
/// words) are always kept regardless of frequency.
pub fn build_vocab_with_required<'a, I>(
    corpus: I,
    required: &[&str],
    min_freq: usize,
    soft_token_count: usize,
) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    if min_freq == 0 {
        return Err(Error::Config("min_freq must be at least 1".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut texts = 0usize;
    for text in corpus {
        texts += 1;
        for w in pre_tokenize(text) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if texts == 0 {
        return Err(Error::Vocab("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut keep: BTreeMap<String, usize> = counts
        .iter()
        .filter(|(_, n)| **n >= min_freq)
        .map(|(w, n)| (w.clone(), *n))
        .collect();
    for text in required {
        for w in pre_tokenize(text) {
            let n = counts.get(&w).copied().unwrap_or(0);
            keep.insert(w, n);
        }
    }
    let mut words: Vec<(String, usize)> = keep.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend((0..soft_token_count).map(soft_token_name));
    for (w, _) in words {
        // A corpus word spelled like a reserved token cannot shadow it.
        if !tokens[..SPECIALS.len() + soft_token_count].contains(&w) {
            tokens.push(w);
        }
    }
    Vocabulary::from_tokens(tokens)
}

/// A rendered model input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub mask_position: Option<usize>,
}

impl Encoding {
    pub fn new(ids: Vec<u32>, mask_position: Option<usize>) -> Self {
        let attention_mask = alloc::vec![1; ids.len()];
        Self {
            ids,
            attention_mask,
            mask_position,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn frequency_threshold() {
        let v = build_vocab(["a a b"], 2, 8).unwrap();
        assert_eq!(v.len(), 5 + 8 + 1);
        assert_eq!(v.token_id("a"), Some(13));
        assert_eq!(v.token_id("b"), None);
    }

    #[test]
    fn deterministic_ordering() {
        let corpus = ["the cat sat", "the dog sat", "a cat"];
        let v1 = build_vocab(corpus, 1, 2).unwrap();
        let v2 = build_vocab(corpus, 1, 2).unwrap();
        assert_eq!(v1, v2);
        let words: Vec<&str> = v1.tokens()[7..].iter().map(String::as_str).collect();
        assert_eq!(words, vec!["cat", "sat", "the", "a", "dog"]);
    }

    #[test]
    fn sentiment_label_words_are_single_tokens() {
        let v = build_vocab(["great terrible great terrible"], 1, 8).unwrap();
        assert!(v.single_word_id("great").is_ok());
        assert!(v.single_word_id("terrible").is_ok());
    }

    #[test]
    fn empty_corpus_and_bad_min_freq() {
        assert!(build_vocab(core::iter::empty::<&str>(), 1, 8).is_err());
        assert!(build_vocab(["a"], 0, 8).is_err());
    }

    #[test]
    fn encode_decode_edges() {
        let v = build_vocab(["it was great ."], 1, 2).unwrap();
        assert!(v.encode("").is_empty());
        assert_eq!(v.encode("xyzzy"), vec![v.unk_id()]);
        assert_eq!(v.decode(&[v.mask_id()]).unwrap(), "[MASK]");
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert_eq!(v.decode(&[v.soft_id(1).unwrap()]).unwrap(), "[SOFT_1]");
        assert!(v.decode(&[999]).is_err());
        assert_eq!(v.decode(&v.encode("It was GREAT.")).unwrap(), "it was great .");
    }

    #[test]
    fn pre_tokenize_detaches_punctuation() {
        assert_eq!(pre_tokenize("Hello, world!  ok?"), vec!["hello", ",", "world", "!", "ok", "?"]);
        assert_eq!(pre_tokenize("a:b;c"), vec!["a", ":", "b", ";", "c"]);
    }

    #[test]
    fn required_words_are_kept() {
        let v = build_vocab_with_required(["x x y"], &["it was", "great"], 2, 0).unwrap();
        assert!(v.token_id("it").is_some());
        assert!(v.token_id("great").is_some());
        assert!(v.token_id("y").is_none());
    }

    #[test]
    fn from_tokens_validates_layout() {
        let v = build_vocab(["a b c"], 1, 3).unwrap();
        let again = Vocabulary::from_tokens(v.tokens().to_vec()).unwrap();
        assert_eq!(again, v);
        assert_eq!(again.soft_token_count(), 3);
        let mut bad = v.tokens().to_vec();
        bad.swap(0, 1);
        assert!(Vocabulary::from_tokens(bad).is_err());
    }
}
