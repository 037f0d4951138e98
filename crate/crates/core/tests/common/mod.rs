//! Synthetic corpora, prediction files and brute-force oracles shared by the
//! integration tests.
#![allow(dead_code)]

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use evoting::corpus::{format_standoff, parse_document};
use evoting::decode::{PredictedSpan, SpanLabel};
use evoting::metrics::MatchMode;
use evoting::predictions::{DocRows, PredictionSet, TokenProbs};
use evoting::tokenize::{BioTag, TokenizedCorpus, NUM_TAGS};
use evoting::{AnnotatedDocument, EventClass};

pub const TOY_TEXT: &str = "He currently using metronidazole pill longer";
pub const TOY_ANN: &str = "T1\tDisposition 19 32\tmetronidazole\n";

const WORDS: &[&str] = &[
    "patient", "started", "on", "aspirin", "daily", "stopped", "lisinopril", "dose", "increased", "mg", "metformin",
    "continue", "warfarin", "held", "for", "surgery", "insulin", "may", "consider", "statin",
];

pub fn span(start: usize, end: usize, label: SpanLabel) -> PredictedSpan {
    PredictedSpan { doc_id: "d".into(), start, end, label }
}

pub fn event(i: usize) -> SpanLabel {
    SpanLabel::Event(EventClass::ALL[i])
}

/// Up to `max` random spans over `[0, width)`, sorted by (start, end, label).
/// Overlaps and duplicates are allowed.
pub fn random_spans(rng: &mut impl Rng, max: usize, width: usize, labels: usize) -> Vec<PredictedSpan> {
    let n = rng.gen_range(0..=max);
    let mut out: Vec<PredictedSpan> = (0..n)
        .map(|_| {
            let start = rng.gen_range(0..width - 1);
            let end = rng.gen_range(start + 1..=(start + 8).min(width));
            span(start, end, event(rng.gen_range(0..labels)))
        })
        .collect();
    out.sort_by_key(|s| (s.start, s.end, s.label));
    out
}

/// Predictions that copy, shift or relabel some gold spans and add random
/// ones, so exact, overlapping and unmatched pairs all occur.
pub fn predictions_like(rng: &mut impl Rng, gold: &[PredictedSpan], max: usize, width: usize, labels: usize) -> Vec<PredictedSpan> {
    let mut out = random_spans(rng, max, width, labels);
    out.truncate(rng.gen_range(0..=out.len()));
    for g in gold {
        if out.len() == max {
            break;
        }
        match rng.gen_range(0..4) {
            0 => out.push(g.clone()),
            1 => {
                let start = g.start.saturating_sub(rng.gen_range(0..2));
                out.push(span(start, (g.end + rng.gen_range(0..2)).min(width), g.label));
            }
            2 => out.push(span(g.start, g.end, event(rng.gen_range(0..labels)))),
            _ => {}
        }
    }
    out.sort_by_key(|s| (s.start, s.end, s.label));
    out
}

fn can_match(g: &PredictedSpan, p: &PredictedSpan, mode: MatchMode) -> bool {
    g.label == p.label
        && match mode {
            MatchMode::Strict => g.start == p.start && g.end == p.end,
            MatchMode::Lenient => g.start < p.end && p.start < g.end,
        }
}

/// Exhaustive search over all one-to-one matchings: the best
/// `(matched pairs, exact pairs)` in lexicographic order. Memoised on
/// (gold position, set of used predictions), so it stays exact for up to
/// ~16 predictions.
pub fn brute_force_matching(gold: &[PredictedSpan], pred: &[PredictedSpan], mode: MatchMode) -> (usize, usize) {
    assert!(pred.len() <= 16);
    let mut memo = vec![None; (gold.len() + 1) << pred.len()];
    fn go(
        i: usize,
        used: usize,
        gold: &[PredictedSpan],
        pred: &[PredictedSpan],
        mode: MatchMode,
        memo: &mut Vec<Option<(usize, usize)>>,
    ) -> (usize, usize) {
        if i == gold.len() {
            return (0, 0);
        }
        let key = (i << pred.len()) | used;
        if let Some(v) = memo[key] {
            return v;
        }
        let mut best = go(i + 1, used, gold, pred, mode, memo);
        for (j, p) in pred.iter().enumerate() {
            if used & (1 << j) == 0 && can_match(&gold[i], p, mode) {
                let (m, e) = go(i + 1, used | (1 << j), gold, pred, mode, memo);
                let exact = usize::from(gold[i].start == p.start && gold[i].end == p.end);
                best = best.max((m + 1, e + exact));
            }
        }
        memo[key] = Some(best);
        best
    }
    go(0, 0, gold, pred, mode, &mut memo)
}

/// A note of random vocabulary words with random non-overlapping,
/// token-aligned gold spans; every event class occurs at least once when
/// `all_classes` is set.
pub fn random_document(rng: &mut impl Rng, doc_id: &str, words: usize, all_classes: bool) -> AnnotatedDocument {
    loop {
        let tokens: Vec<&str> = (0..words).map(|_| *WORDS.choose(rng).unwrap()).collect();
        let mut offsets = Vec::with_capacity(words);
        let mut text = String::new();
        for (i, w) in tokens.iter().enumerate() {
            if i > 0 {
                text.push_str(if rng.gen_bool(0.1) { ",  " } else { " " });
            }
            offsets.push((text.chars().count(), text.chars().count() + w.chars().count()));
            text.push_str(w);
        }
        let mut lines = Vec::new();
        let mut t = 0;
        while t < words {
            if rng.gen_bool(0.25) {
                let len = rng.gen_range(1..=3).min(words - t);
                let (start, end) = (offsets[t].0, offsets[t + len - 1].1);
                let label = EventClass::ALL[rng.gen_range(0..3)];
                let surface: String = text.chars().skip(start).take(end - start).collect();
                lines.push((label.as_str(), start, end, surface));
                t += len;
            } else {
                t += 1;
            }
        }
        let ann = format_standoff(lines.iter().map(|(l, s, e, x)| (*l, *s, *e, x.as_str())));
        let doc = parse_document(doc_id, &text, &ann).expect("generated annotations are valid");
        let seen = |c: EventClass| doc.gold.iter().any(|g| g.label == c);
        if !all_classes || EventClass::ALL.iter().all(|&c| seen(c)) {
            return doc;
        }
    }
}

pub fn random_corpus(rng: &mut impl Rng, docs: usize, words: usize) -> Vec<AnnotatedDocument> {
    (0..docs)
        .map(|d| random_document(rng, &format!("note{d:03}"), words, false))
        .collect()
}

pub fn write_corpus(corpus: &[AnnotatedDocument], text_dir: &Path, ann_dir: &Path) {
    fs::create_dir_all(text_dir).unwrap();
    fs::create_dir_all(ann_dir).unwrap();
    for doc in corpus {
        fs::write(text_dir.join(format!("{}.txt", doc.doc_id())), &doc.document.text).unwrap();
        fs::write(ann_dir.join(format!("{}.ann", doc.doc_id())), doc.to_standoff()).unwrap();
    }
}

pub fn normalized(mut p: [f64; NUM_TAGS]) -> [f64; NUM_TAGS] {
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

pub fn random_probs(rng: &mut impl Rng) -> [f64; NUM_TAGS] {
    let mut p = [0.0; NUM_TAGS];
    p.iter_mut().for_each(|x| *x = rng.gen::<f64>() + 1e-3);
    normalized(p)
}

/// Probabilities over the tokenized corpus that put `skill` extra mass on
/// the gold tag of each token.
pub fn noisy_predictions(rng: &mut impl Rng, model_id: &str, corpus: &TokenizedCorpus, skill: f64) -> PredictionSet {
    PredictionSet {
        model_id: model_id.into(),
        docs: corpus
            .docs
            .iter()
            .map(|doc| DocRows {
                doc_id: doc.doc_id.clone(),
                rows: doc
                    .tokens
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let mut p = random_probs(rng);
                        if let Some(tags) = &doc.tags {
                            p[tags[i].index()] += skill;
                        }
                        TokenProbs { index: t.index, start: t.start, end: t.end, probs: normalized(p) }
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Random members sharing one token universe.
pub fn random_members(rng: &mut impl Rng, models: usize, docs: usize, tokens: usize) -> Vec<PredictionSet> {
    (0..models)
        .map(|m| PredictionSet {
            model_id: format!("model{m:02}"),
            docs: (0..docs)
                .map(|d| DocRows {
                    doc_id: format!("note{d:03}"),
                    rows: (0..tokens)
                        .map(|t| TokenProbs { index: t, start: 2 * t, end: 2 * t + 1, probs: random_probs(rng) })
                        .collect(),
                })
                .collect(),
        })
        .collect()
}

pub fn one_hot(tag: BioTag) -> [f64; NUM_TAGS] {
    let mut p = [0.0; NUM_TAGS];
    p[tag.index()] = 1.0;
    p
}
