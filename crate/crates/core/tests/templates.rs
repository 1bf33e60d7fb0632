mod common;

use common::{mnli, sst2, vocab_for};
use pcp_core::template::{parse_template, reference_templates, Example, Segment, SlotFill, Template};
use proptest::prelude::*;

fn tokens(vocab: &pcp_core::Vocabulary, ids: &[u32]) -> Vec<String> {
    ids.iter().map(|&i| vocab.token(i).unwrap().to_string()).collect()
}

#[test]
fn sst2_golden_render() {
    let task = sst2();
    let ex = Example::single("a fun ride", Some(0));
    let vocab = vocab_for(std::slice::from_ref(&ex), &task);
    let enc = task.template.render(&ex, &vocab, 128).unwrap();
    assert_eq!(tokens(&vocab, &enc.ids), ["[CLS]", "a", "fun", "ride", "it", "was", "[MASK]", ".", "[SEP]"]);
    assert_eq!(enc.mask_position, Some(6));
    for (label, word) in [(0, "great"), (1, "terrible")] {
        let pcp = task.template.render_pcp(&ex, label, &task.verbalizer(&vocab).unwrap(), &vocab, 128).unwrap();
        let mut expected = tokens(&vocab, &enc.ids);
        expected[6] = word.into();
        assert_eq!(tokens(&vocab, &pcp), expected);
    }
}

#[test]
fn mnli_golden_render() {
    let task = mnli();
    let ex = Example::pair("the cat sat", "a cat is sitting", Some(0));
    let vocab = vocab_for(std::slice::from_ref(&ex), &task);
    let enc = task.template.render(&ex, &vocab, 128).unwrap();
    let golden = ["[CLS]", "the", "cat", "sat", "?", "[MASK]", ",", "a", "cat", "is", "sitting", "[SEP]"];
    assert_eq!(tokens(&vocab, &enc.ids), golden);
    assert_eq!(enc.mask_position, Some(5));
    let verbalizer = task.verbalizer(&vocab).unwrap();
    for (label, word) in [(0, "yes"), (1, "maybe"), (2, "no")] {
        let pcp = task.template.render_pcp(&ex, label, &verbalizer, &vocab, 128).unwrap();
        let got = tokens(&vocab, &pcp);
        assert_eq!(got[5], word);
        for (i, (g, e)) in got.iter().zip(golden).enumerate() {
            if i != 5 {
                assert_eq!(g, e);
            }
        }
    }
}

#[test]
fn every_reference_template_parses_with_one_mask() {
    for (name, spec, words) in reference_templates() {
        let t = parse_template(spec).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(t.segments().iter().filter(|s| **s == Segment::Mask).count(), 1, "{name}");
        assert_eq!(t.is_pair(), spec.contains("{text_b}"), "{name}");
        assert!(words.len() >= 2, "{name}");
        assert_eq!(parse_template(&t.serialize()).unwrap(), t, "{name}");
    }
}

#[test]
fn malformed_templates_report_offsets() {
    for bad in ["{text_a} {mask", "{text_a} mask}", "{text_a} {bogus} {mask}", "{text_a} .", "{mask} {mask}"] {
        assert!(parse_template(bad).is_err(), "{bad}");
    }
}

#[test]
fn labels_only_drops_literals() {
    let t = sst2().template.labels_only();
    assert!(t.literals().is_empty());
    assert_eq!(t, Template::new(vec![Segment::TextA, Segment::Mask]).unwrap());
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["ba", "be", "bi", "bo", "good", "bad", "the", "cat"]).prop_map(String::from)
}

fn sentence(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 0..max).prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn render_respects_budget_and_keeps_the_mask(a in sentence(30), b in sentence(30), max_len in 9usize..40, pair in any::<bool>()) {
        let task = if pair { mnli() } else { sst2() };
        let ex = if pair { Example::pair(a, b, None) } else { Example::single(a, None) };
        let vocab = vocab_for(std::slice::from_ref(&ex), &task);
        let enc = task.template.render(&ex, &vocab, max_len).unwrap();
        prop_assert!(enc.len() <= max_len);
        let m = enc.mask_position.unwrap();
        prop_assert_eq!(enc.ids[m], vocab.mask_id());
        prop_assert_eq!(enc.ids.iter().filter(|&&i| i == vocab.mask_id()).count(), 1);
        prop_assert_eq!(enc.ids[0], vocab.cls_id());
        prop_assert_eq!(*enc.ids.last().unwrap(), vocab.sep_id());
    }

    #[test]
    fn render_pcp_differs_only_at_the_mask(a in sentence(20), b in sentence(20), label in 0usize..3, max_len in 9usize..40) {
        let task = mnli();
        let ex = Example::pair(a, b, None);
        let vocab = vocab_for(std::slice::from_ref(&ex), &task);
        let verbalizer = task.verbalizer(&vocab).unwrap();
        let enc = task.template.render(&ex, &vocab, max_len).unwrap();
        let pcp = task.template.render_pcp(&ex, label, &verbalizer, &vocab, max_len).unwrap();
        prop_assert_eq!(enc.len(), pcp.len());
        let m = enc.mask_position.unwrap();
        for i in 0..pcp.len() {
            if i == m {
                prop_assert_eq!(pcp[i], verbalizer.token_for(label).unwrap());
            } else {
                prop_assert_eq!(pcp[i], enc.ids[i]);
            }
        }
    }

    #[test]
    fn omitting_the_mask_removes_exactly_one_token(a in sentence(20), max_len in 9usize..40) {
        let task = sst2();
        let ex = Example::single(a, None);
        let vocab = vocab_for(std::slice::from_ref(&ex), &task);
        let (with, _) = task.template.render_with(&ex, &vocab, max_len, SlotFill::Mask).unwrap();
        let (without, pos) = task.template.render_with(&ex, &vocab, max_len, SlotFill::Omit).unwrap();
        prop_assert!(pos.is_none());
        prop_assert!(!without.contains(&vocab.mask_id()));
        prop_assert!(without.len() + 1 >= with.len() && without.len() <= with.len());
    }
}
