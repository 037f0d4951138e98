//! IOB2 decoding into character spans, and the collapse of event spans into
//! class-agnostic medication mentions.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Serialize, Serializer};

use crate::corpus::{format_standoff, Document, EventClass, GoldSpan};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::predictions::LabelSequence;
use crate::tokenize::{BioTag, CharSpan};

/// Either an event class or the binary medication label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SpanLabel {
    Event(EventClass),
    Drug,
}

impl SpanLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SpanLabel::Event(c) => c.as_str(),
            SpanLabel::Drug => "Drug",
        }
    }
}

impl fmt::Display for SpanLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for SpanLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PredictedSpan {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub label: SpanLabel,
}

impl CharSpan for PredictedSpan {
    fn start(&self) -> usize {
        self.start
    }
    fn end(&self) -> usize {
        self.end
    }
}

impl PredictedSpan {
    pub fn from_gold(doc_id: &str, gold: &GoldSpan) -> Self {
        PredictedSpan {
            doc_id: doc_id.to_string(),
            start: gold.start,
            end: gold.end,
            label: SpanLabel::Event(gold.label),
        }
    }
}

/// Decode IOB2 tags into spans.
///
/// `B-X` opens a span, `I-X` extends an open `X` span, `O` closes. An `I-X`
/// with no open `X` span (orphan, or following a different class) opens a new
/// span as if it were `B-X`.
pub fn decode_bio<T: CharSpan>(doc_id: &str, tokens: &[T], tags: &[BioTag]) -> Result<Vec<PredictedSpan>> {
    if tokens.len() != tags.len() {
        return Err(Error::LengthMismatch {
            tokens: tokens.len(),
            tags: tags.len(),
        });
    }
    let mut spans = Vec::new();
    let mut open: Option<(EventClass, usize, usize)> = None;
    let close = |open: &mut Option<(EventClass, usize, usize)>, spans: &mut Vec<PredictedSpan>| {
        if let Some((class, start, end)) = open.take() {
            spans.push(PredictedSpan {
                doc_id: doc_id.to_string(),
                start,
                end,
                label: SpanLabel::Event(class),
            });
        }
    };
    for (tok, &tag) in tokens.iter().zip(tags) {
        match tag.class() {
            None => close(&mut open, &mut spans),
            Some(class) => match &mut open {
                Some((c, _, end)) if tag.is_inside() && *c == class => *end = tok.end(),
                _ => {
                    close(&mut open, &mut spans);
                    open = Some((class, tok.start(), tok.end()));
                }
            },
        }
    }
    close(&mut open, &mut spans);
    Ok(spans)
}

/// Decode every document of a label file. Documents come back keyed by id.
pub fn decode_labels(labels: &LabelSequence, exec: Execution) -> BTreeMap<String, Vec<PredictedSpan>> {
    exec.map(&labels.docs, |doc| {
        let tags: Vec<BioTag> = doc.rows.iter().map(|r| r.tag).collect();
        let spans = decode_bio(&doc.doc_id, &doc.rows, &tags).expect("one tag per row");
        (doc.doc_id.clone(), spans)
    })
    .into_iter()
    .collect()
}

/// Relabel every span as `Drug` and merge spans that overlap or touch.
pub fn collapse_to_medication(spans: &[PredictedSpan]) -> Vec<PredictedSpan> {
    collapse_where(spans, |_, _| false)
}

/// As [`collapse_to_medication`], and also merge spans separated only by
/// whitespace in `document`.
pub fn collapse_to_medication_in(spans: &[PredictedSpan], document: &Document) -> Vec<PredictedSpan> {
    collapse_where(spans, |end, start| {
        document
            .slice(end, start)
            .is_some_and(|gap| gap.chars().all(char::is_whitespace))
    })
}

fn collapse_where(spans: &[PredictedSpan], bridgeable: impl Fn(usize, usize) -> bool) -> Vec<PredictedSpan> {
    let mut sorted: Vec<&PredictedSpan> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    let mut out: Vec<PredictedSpan> = Vec::new();
    for s in sorted {
        match out.last_mut() {
            Some(last) if last.doc_id == s.doc_id && (s.start <= last.end || bridgeable(last.end, s.start)) => {
                last.end = last.end.max(s.end);
            }
            _ => out.push(PredictedSpan {
                doc_id: s.doc_id.clone(),
                start: s.start,
                end: s.end,
                label: SpanLabel::Drug,
            }),
        }
    }
    out
}

/// Standoff entity lines for decoded spans, with surfaces taken from the note.
pub fn spans_to_standoff(spans: &[PredictedSpan], document: &Document) -> Result<String> {
    let entries = spans
        .iter()
        .map(|s| {
            let surface = document.slice(s.start, s.end).ok_or(Error::OffsetOutOfRange {
                line: 0,
                start: s.start,
                end: s.end,
                len: document.char_len(),
            })?;
            Ok((s.label.as_str(), s.start, s.end, surface))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(format_standoff(entries))
}
