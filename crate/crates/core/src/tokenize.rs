//! Offset-exact tokenization, optional stop-word removal and IOB2 projection
//! of gold spans onto tokens.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedDocument, Document, EventClass, GoldSpan};
use crate::error::{Error, Result};
use crate::exec::Execution;

/// Anything occupying a half-open character interval of a document.
pub trait CharSpan {
    fn start(&self) -> usize;
    fn end(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub doc_id: String,
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

impl CharSpan for TokenSpan {
    fn start(&self) -> usize {
        self.start
    }
    fn end(&self) -> usize {
        self.end
    }
}

impl CharSpan for GoldSpan {
    fn start(&self) -> usize {
        self.start
    }
    fn end(&self) -> usize {
        self.end
    }
}

/// IOB2 tag over the three event classes, in canonical index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BioTag {
    O,
    BDisposition,
    IDisposition,
    BNoDisposition,
    INoDisposition,
    BUndetermined,
    IUndetermined,
}

pub const NUM_TAGS: usize = 7;

impl BioTag {
    pub const ALL: [BioTag; NUM_TAGS] = [
        BioTag::O,
        BioTag::BDisposition,
        BioTag::IDisposition,
        BioTag::BNoDisposition,
        BioTag::INoDisposition,
        BioTag::BUndetermined,
        BioTag::IUndetermined,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<BioTag> {
        BioTag::ALL.get(i).copied()
    }

    pub fn begin(class: EventClass) -> BioTag {
        BioTag::ALL[1 + 2 * class.index()]
    }

    pub fn inside(class: EventClass) -> BioTag {
        BioTag::ALL[2 + 2 * class.index()]
    }

    pub fn class(self) -> Option<EventClass> {
        match self {
            BioTag::O => None,
            t => Some(EventClass::ALL[(t.index() - 1) / 2]),
        }
    }

    pub fn is_begin(self) -> bool {
        self != BioTag::O && self.index() % 2 == 1
    }

    pub fn is_inside(self) -> bool {
        self != BioTag::O && self.index().is_multiple_of(2)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BioTag::O => "O",
            BioTag::BDisposition => "B-Disposition",
            BioTag::IDisposition => "I-Disposition",
            BioTag::BNoDisposition => "B-NoDisposition",
            BioTag::INoDisposition => "I-NoDisposition",
            BioTag::BUndetermined => "B-Undetermined",
            BioTag::IUndetermined => "I-Undetermined",
        }
    }

    /// Canonical tag names, as embedded in prediction file headers.
    pub fn names() -> Vec<String> {
        BioTag::ALL.iter().map(|t| t.as_str().to_string()).collect()
    }
}

impl fmt::Display for BioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BioTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        BioTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown tag {s:?}"))
    }
}

impl Serialize for BioTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for BioTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Split into maximal alphanumeric runs and single punctuation characters.
pub fn tokenize(document: &Document) -> Vec<TokenSpan> {
    let mut tokens = Vec::new();
    let mut run: Option<(usize, usize)> = None; // (char start, byte start)
    let push = |tokens: &mut Vec<TokenSpan>, start: usize, end: usize, surface: &str| {
        tokens.push(TokenSpan {
            doc_id: document.doc_id.clone(),
            index: tokens.len(),
            start,
            end,
            surface: surface.to_string(),
        });
    };
    let text = &document.text;
    let mut pos = 0;
    for (byte, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            if run.is_none() {
                run = Some((pos, byte));
            }
        } else {
            if let Some((cs, bs)) = run.take() {
                push(&mut tokens, cs, pos, &text[bs..byte]);
            }
            if !ch.is_whitespace() {
                push(&mut tokens, pos, pos + 1, &text[byte..byte + ch.len_utf8()]);
            }
        }
        pos += 1;
    }
    if let Some((cs, bs)) = run {
        push(&mut tokens, cs, pos, &text[bs..]);
    }
    tokens
}

/// A case-insensitive stop list. Empty by default.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Stoplist(HashSet<String>);

impl Stoplist {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Stoplist(words.into_iter().map(|w| w.as_ref().to_lowercase()).collect())
    }

    /// One word per line; blank lines and `#` comments skipped.
    pub fn parse(content: &str) -> Self {
        Stoplist::new(
            content
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(&word.to_lowercase())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Drop stop-listed tokens and renumber the survivors. Offsets are untouched.
pub fn apply_stoplist(tokens: Vec<TokenSpan>, stoplist: &Stoplist) -> Vec<TokenSpan> {
    if stoplist.is_empty() {
        return tokens;
    }
    tokens
        .into_iter()
        .filter(|t| !stoplist.contains(&t.surface))
        .enumerate()
        .map(|(i, t)| TokenSpan { index: i, ..t })
        .collect()
}

/// Diagnostics from projecting gold spans onto tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ProjectionReport {
    /// Tokens touched by more than one gold span.
    pub multi_overlap_tokens: usize,
    /// Gold spans that ended up owning no token.
    pub dropped_spans: usize,
    /// Gold spans whose boundaries cut through a token.
    pub misaligned_spans: usize,
}

impl ProjectionReport {
    pub fn merge(&mut self, other: &ProjectionReport) {
        self.multi_overlap_tokens += other.multi_overlap_tokens;
        self.dropped_spans += other.dropped_spans;
        self.misaligned_spans += other.misaligned_spans;
    }
}

fn overlaps(a: &impl CharSpan, b: &impl CharSpan) -> bool {
    a.start().max(b.start()) < a.end().min(b.end())
}

/// Project gold spans onto IOB2 tags.
///
/// A token overlapping several spans belongs to the one with the smallest
/// start (then smallest end, then class order). A token opens its span with
/// `B-` unless the previous token belongs to the same span, so the output is
/// always legal IOB2.
pub fn project_gold_to_bio(tokens: &[TokenSpan], gold: &[GoldSpan]) -> Vec<BioTag> {
    project_gold_to_bio_with_report(tokens, gold).0
}

pub fn project_gold_to_bio_with_report(
    tokens: &[TokenSpan],
    gold: &[GoldSpan],
) -> (Vec<BioTag>, ProjectionReport) {
    let mut order: Vec<usize> = (0..gold.len()).collect();
    order.sort_by_key(|&i| (gold[i].start, gold[i].end, gold[i].label));

    let mut report = ProjectionReport::default();
    let mut owners: Vec<Option<usize>> = Vec::with_capacity(tokens.len());
    // Gold sorted by start: only spans starting before a token's end can
    // overlap it, and the first overlapping one in that order wins.
    let mut lo = 0;
    for tok in tokens {
        while lo < order.len() && gold[order[lo]].end <= tok.start {
            lo += 1;
        }
        let mut owner = None;
        let mut hits = 0;
        for &g in order[lo..].iter().take_while(|&&g| gold[g].start < tok.end) {
            if overlaps(tok, &gold[g]) {
                hits += 1;
                owner.get_or_insert(g);
            }
        }
        if hits > 1 {
            report.multi_overlap_tokens += 1;
        }
        owners.push(owner);
    }

    let mut owned = vec![false; gold.len()];
    let tags = owners
        .iter()
        .enumerate()
        .map(|(i, owner)| match *owner {
            None => BioTag::O,
            Some(g) => {
                owned[g] = true;
                let class = gold[g].label;
                if i > 0 && owners[i - 1] == Some(g) {
                    BioTag::inside(class)
                } else {
                    BioTag::begin(class)
                }
            }
        })
        .collect();

    report.dropped_spans = owned.iter().filter(|o| !**o).count();
    let boundaries: BTreeSet<usize> = tokens.iter().flat_map(|t| [t.start, t.end]).collect();
    report.misaligned_spans = gold
        .iter()
        .filter(|g| {
            tokens
                .iter()
                .any(|t| overlaps(t, *g) && (t.start < g.start || t.end > g.end))
                || !(boundaries.contains(&g.start) && boundaries.contains(&g.end))
        })
        .count();
    (tags, report)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedDocument {
    pub doc_id: String,
    pub tokens: Vec<TokenSpan>,
    /// One tag per token when gold is known.
    pub tags: Option<Vec<BioTag>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenizedCorpus {
    /// Sorted by doc id.
    pub docs: Vec<TokenizedDocument>,
}

impl TokenizedCorpus {
    pub fn get(&self, doc_id: &str) -> Option<&TokenizedDocument> {
        self.docs
            .binary_search_by(|d| d.doc_id.as_str().cmp(doc_id))
            .ok()
            .map(|i| &self.docs[i])
    }

    pub fn token_count(&self) -> usize {
        self.docs.iter().map(|d| d.tokens.len()).sum()
    }

    pub fn has_gold(&self) -> bool {
        self.docs.iter().all(|d| d.tags.is_some())
    }

    /// Write one record per token.
    pub fn write_records<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for doc in &self.docs {
            for (i, tok) in doc.tokens.iter().enumerate() {
                let rec = TokenRecord {
                    doc_id: doc.doc_id.clone(),
                    index: tok.index,
                    start: tok.start,
                    end: tok.end,
                    surface: tok.surface.clone(),
                    tag: doc.tags.as_ref().map(|t| t[i]),
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    /// Read token records. Tokens of a document must appear in index order.
    pub fn read_records<R: BufRead>(input: R) -> Result<TokenizedCorpus> {
        let mut docs: Vec<TokenizedDocument> = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::Schema {
                line: line_no,
                reason: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TokenRecord = serde_json::from_str(&line).map_err(|e| Error::Schema {
                line: line_no,
                reason: e.to_string(),
            })?;
            if docs.last().map(|d| d.doc_id != rec.doc_id).unwrap_or(true) {
                if docs.iter().any(|d| d.doc_id == rec.doc_id) {
                    return Err(Error::Schema {
                        line: line_no,
                        reason: format!("tokens of {:?} are not contiguous", rec.doc_id),
                    });
                }
                docs.push(TokenizedDocument {
                    doc_id: rec.doc_id.clone(),
                    tokens: Vec::new(),
                    tags: rec.tag.map(|_| Vec::new()),
                });
            }
            let doc = docs.last_mut().expect("pushed above");
            if rec.index != doc.tokens.len() {
                return Err(Error::Schema {
                    line: line_no,
                    reason: format!("expected token index {}, found {}", doc.tokens.len(), rec.index),
                });
            }
            match (&mut doc.tags, rec.tag) {
                (Some(tags), Some(tag)) => tags.push(tag),
                (None, None) => {}
                _ => {
                    return Err(Error::Schema {
                        line: line_no,
                        reason: "gold tag present on some tokens of a document but not others".into(),
                    })
                }
            }
            doc.tokens.push(TokenSpan {
                doc_id: rec.doc_id,
                index: rec.index,
                start: rec.start,
                end: rec.end,
                surface: rec.surface,
            });
        }
        docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        Ok(TokenizedCorpus { docs })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TokenRecord {
    doc_id: String,
    index: usize,
    start: usize,
    end: usize,
    surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag: Option<BioTag>,
}

/// Tokenize every document, drop stop words and project the gold spans.
pub fn tag_corpus(
    corpus: &[AnnotatedDocument],
    stoplist: &Stoplist,
    exec: Execution,
) -> (TokenizedCorpus, ProjectionReport) {
    let per_doc = exec.map(corpus, |doc| {
        let tokens = apply_stoplist(tokenize(&doc.document), stoplist);
        let (tags, report) = project_gold_to_bio_with_report(&tokens, &doc.gold);
        (
            TokenizedDocument {
                doc_id: doc.doc_id().to_string(),
                tokens,
                tags: Some(tags),
            },
            report,
        )
    });
    let mut report = ProjectionReport::default();
    let mut docs = Vec::with_capacity(per_doc.len());
    for (doc, r) in per_doc {
        report.merge(&r);
        docs.push(doc);
    }
    docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    (TokenizedCorpus { docs }, report)
}
