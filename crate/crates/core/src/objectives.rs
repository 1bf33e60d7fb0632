//! Training objectives: dynamic MLM masking and the MLM, prompt and CLS losses.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::model::{Batch, Graph, Mode};
use crate::tape::Var;
use crate::tensor::Real;
use crate::template::Verbalizer;
use crate::tokenizer::Vocabulary;

/// Label of positions that are not predicted.
pub const IGNORE_ID: i64 = -1;

pub const DEFAULT_MASKING_PROBABILITY: f64 = 0.15;

/// What masking did to one position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    None,
    Mask,
    Random,
    Keep,
}

/// A batch after dynamic masking.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub ids: Vec<u32>,
    /// Original id at selected positions, [`IGNORE_ID`] elsewhere.
    pub mlm_labels: Vec<i64>,
    pub attention_mask: Vec<u8>,
    pub actions: Vec<MaskAction>,
    pub batch: usize,
    pub seq: usize,
}

impl MaskedBatch {
    pub fn as_batch(&self) -> Batch {
        Batch {
            ids: self.ids.clone(),
            attention_mask: self.attention_mask.clone(),
            batch: self.batch,
            seq: self.seq,
            mask_positions: alloc::vec![None; self.batch],
        }
    }

    /// `(row, col)` of every selected position, row-major.
    pub fn selected(&self) -> Vec<(usize, usize)> {
        (0..self.mlm_labels.len())
            .filter(|&i| self.mlm_labels[i] != IGNORE_ID)
            .map(|i| (i / self.seq, i % self.seq))
            .collect()
    }

    pub fn num_selected(&self) -> usize {
        self.mlm_labels.iter().filter(|&&l| l != IGNORE_ID).count()
    }
}

/// Whether masking may select a token: real (unpadded) ordinary words only.
pub fn is_maskable(vocab: &Vocabulary, id: u32, attended: bool) -> bool {
    attended && id >= vocab.first_word_id() && (id as usize) < vocab.len()
}

/// Selects each eligible token with probability `p`; a selected token becomes
/// `[MASK]` (80%), a uniformly drawn ordinary word (10%) or stays (10%).
/// Draws come only from `rng`, so calling again gives a fresh pattern.
pub fn apply_mlm_masking(batch: &Batch, vocab: &Vocabulary, p: f64, rng: &mut dyn RngCore) -> Result<MaskedBatch> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("masking probability {p} is outside [0, 1]")));
    }
    let n = batch.ids.len();
    let mut ids = batch.ids.clone();
    let mut mlm_labels = alloc::vec![IGNORE_ID; n];
    let mut actions = alloc::vec![MaskAction::None; n];
    let first = vocab.first_word_id();
    let end = vocab.len() as u32;
    for i in 0..n {
        let id = batch.ids[i];
        if !is_maskable(vocab, id, batch.attention_mask[i] != 0) {
            continue;
        }
        if rng.random::<f64>() >= p {
            continue;
        }
        mlm_labels[i] = id as i64;
        let r = rng.random::<f64>();
        actions[i] = if r < 0.8 {
            ids[i] = vocab.mask_id();
            MaskAction::Mask
        } else if r < 0.9 {
            ids[i] = rng.random_range(first..end);
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
    }
    Ok(MaskedBatch {
        ids,
        mlm_labels,
        attention_mask: batch.attention_mask.clone(),
        actions,
        batch: batch.batch,
        seq: batch.seq,
    })
}

/// Mean cross-entropy of the MLM head at the selected positions; 0 when none
/// are selected.
pub fn mlm_loss<T: Real>(g: &mut Graph<'_, T>, masked: &MaskedBatch, mode: Mode<'_>) -> Result<Var> {
    let hidden = g.forward(&masked.as_batch(), mode)?;
    let positions = masked.selected();
    let targets: Vec<i64> = masked
        .mlm_labels
        .iter()
        .copied()
        .filter(|&l| l != IGNORE_ID)
        .collect();
    let logits = g.mlm_logits(hidden, &positions)?;
    g.tape.cross_entropy(logits, &targets, IGNORE_ID)
}

/// Class logits `[batch, num_labels]`: the MLM logit of each label word at
/// the mask position. A softmax over these rows is the class distribution.
pub fn prompt_class_logits<T: Real>(
    g: &mut Graph<'_, T>,
    hidden: Var,
    batch: &Batch,
    verbalizer: &Verbalizer,
) -> Result<Var> {
    let mut positions = Vec::with_capacity(batch.batch);
    for (row, pos) in batch.mask_positions.iter().enumerate() {
        let pos = pos.ok_or_else(|| Error::contract(format!("example {row} has no mask position")))?;
        positions.push((row, pos));
    }
    let logits = g.mlm_logits(hidden, &positions)?;
    let cols: Vec<usize> = verbalizer.token_ids().iter().map(|&t| t as usize).collect();
    g.tape.select_cols(logits, &cols)
}

fn gold_targets(labels: &[Option<usize>], batch: &Batch, num_labels: usize) -> Result<Vec<i64>> {
    if labels.len() != batch.batch {
        return Err(Error::Shape {
            op: "labels",
            left: alloc::vec![batch.batch],
            right: alloc::vec![labels.len()],
        });
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| match l {
            Some(l) if *l < num_labels => Ok(*l as i64),
            Some(l) => Err(Error::Data(format!("example {i} has label {l} outside {num_labels} classes"))),
            None => Err(Error::contract(format!("example {i} is unlabelled"))),
        })
        .collect()
}

/// Mean cross-entropy of the restricted (label-word) softmax against gold labels.
pub fn prompt_ft_loss<T: Real>(
    g: &mut Graph<'_, T>,
    batch: &Batch,
    labels: &[Option<usize>],
    verbalizer: &Verbalizer,
    mode: Mode<'_>,
) -> Result<Var> {
    let targets = gold_targets(labels, batch, verbalizer.num_labels())?;
    let hidden = g.forward(batch, mode)?;
    let logits = prompt_class_logits(g, hidden, batch, verbalizer)?;
    g.tape.cross_entropy(logits, &targets, IGNORE_ID)
}

/// Mean cross-entropy of the `[CLS]` head against gold labels.
pub fn cls_ft_loss<T: Real>(g: &mut Graph<'_, T>, batch: &Batch, labels: &[Option<usize>], mode: Mode<'_>) -> Result<Var> {
    let targets = gold_targets(labels, batch, g.config().num_labels)?;
    let hidden = g.forward(batch, mode)?;
    let logits = g.cls_logits(hidden)?;
    g.tape.cross_entropy(logits, &targets, IGNORE_ID)
}

/// Softmax of `logits` restricted to `label_tokens`.
pub fn restricted_softmax(logits: &[f64], label_tokens: &[u32]) -> Vec<f64> {
    let sel: Vec<f64> = label_tokens.iter().map(|&t| logits[t as usize]).collect();
    let max = sel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sel.iter().map(|v| Float::exp(v - max)).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Index of the largest value; ties go to the lowest index. NaNs never win.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] || (values[best].is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParameters};
    use crate::template::{parse_template, Example};
    use crate::tokenizer::{build_vocab, build_vocab_with_required, Encoding};
    use alloc::string::String;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn word_vocab(n: usize) -> Vocabulary {
        let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let text = words.join(" ");
        build_vocab([text.as_str()], 1, 8).unwrap()
    }

    #[test]
    fn zero_probability_changes_nothing() {
        let v = word_vocab(20);
        let b = Batch::from_sequences(&[&[2, 14, 15, 16, 3]], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = apply_mlm_masking(&b, &v, 0.0, &mut rng).unwrap();
        assert_eq!(m.ids, b.ids);
        assert!(m.mlm_labels.iter().all(|&l| l == IGNORE_ID));
        assert!(apply_mlm_masking(&b, &v, 1.5, &mut rng).is_err());
    }

    #[test]
    fn never_selects_specials_soft_or_padding() {
        let v = word_vocab(20);
        let b = Batch::from_sequences(&[&[2, 5, 14, 4, 3], &[2, 14, 3]], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let m = apply_mlm_masking(&b, &v, 1.0, &mut rng).unwrap();
            let sel: Vec<usize> = (0..m.mlm_labels.len()).filter(|&i| m.mlm_labels[i] != IGNORE_ID).collect();
            assert_eq!(sel, vec![2, 6]);
        }
    }

    #[test]
    fn untrained_mlm_loss_near_log_vocab() {
        let v = word_vocab(100 - 13);
        assert_eq!(v.len(), 100);
        let p = ModelParameters::<f32>::init(&ModelConfig::tiny(v.len())).unwrap();
        let seqs: Vec<Vec<u32>> = (0..4).map(|r| (0..12).map(|i| 13 + ((r * 12 + i) % 87) as u32).collect()).collect();
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
        let b = Batch::from_sequences(&refs, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = apply_mlm_masking(&b, &v, 0.5, &mut rng).unwrap();
        let mut g = Graph::new(&p);
        let loss = mlm_loss(&mut g, &m, Mode::Eval).unwrap();
        let l = g.tape.value(loss).values()[0] as f64;
        assert!((l - Float::ln(100.0)).abs() < 0.5, "{l}");

        let none = apply_mlm_masking(&b, &v, 0.0, &mut rng).unwrap();
        let mut g = Graph::new(&p);
        let loss = mlm_loss(&mut g, &none, Mode::Eval).unwrap();
        assert_eq!(g.tape.value(loss).values()[0], 0.0);
    }

    #[test]
    fn restricted_softmax_analytic() {
        let mut logits = vec![0.0; 10];
        logits[7] = 2.0;
        let p = restricted_softmax(&logits, &[7, 8]);
        assert!((p[0] - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert!((p[1] - 0.119_202_922_022_117_7).abs() < 1e-12);
        let u = restricted_softmax(&[1.0; 10], &[1, 2, 3]);
        assert!(u.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax(&[1.0, 1.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
        assert_eq!(argmax(&[f64::NAN, 0.0]), 1);
    }

    #[test]
    fn prompt_loss_requires_mask_and_labels() {
        let v = build_vocab_with_required(["a b"], &["it was . great terrible"], 1, 8).unwrap();
        let t = parse_template("{text_a} It was {mask} .").unwrap();
        let verb = crate::template::Verbalizer::new(
            vec!["positive".into(), "negative".into()],
            &["great".into(), "terrible".into()],
            &v,
        )
        .unwrap();
        let p = ModelParameters::<f32>::init(&ModelConfig::tiny(v.len())).unwrap();
        let e = t.render(&Example::single("a b", Some(0)), &v, 16).unwrap();
        let b = Batch::from_encodings(&[&e], 0);
        let mut g = Graph::new(&p);
        assert!(prompt_ft_loss(&mut g, &b, &[None], &verb, Mode::Eval).is_err());
        let mut g = Graph::new(&p);
        let loss = prompt_ft_loss(&mut g, &b, &[Some(1)], &verb, Mode::Eval).unwrap();
        assert!(g.tape.value(loss).values()[0] > 0.0);

        let plain = Encoding::new(e.ids.clone(), None);
        let b = Batch::from_encodings(&[&plain], 0);
        let mut g = Graph::new(&p);
        assert!(matches!(
            prompt_ft_loss(&mut g, &b, &[Some(0)], &verb, Mode::Eval),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cls_loss_zero_state_is_log_two() {
        let v = word_vocab(10);
        let mut p = ModelParameters::<f32>::init(&ModelConfig::tiny(v.len())).unwrap();
        for (name, t) in p.iter_mut() {
            if name.starts_with("cls_head.out") {
                t.values_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let b = Batch::from_sequences(&[&[2, 14, 3], &[2, 15, 3]], 0);
        let mut g = Graph::new(&p);
        let loss = cls_ft_loss(&mut g, &b, &[Some(0), Some(1)], Mode::Eval).unwrap();
        assert!((g.tape.value(loss).values()[0] as f64 - Float::ln(2.0)).abs() < 1e-6);
        let mut g = Graph::new(&p);
        assert!(cls_ft_loss(&mut g, &b, &[Some(0), Some(2)], Mode::Eval).is_err());
    }
}
