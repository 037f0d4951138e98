//! Prediction interchange files.
//!
//! A file is line-delimited JSON. The first line is a header naming the model
//! and the tag order, which must be the canonical seven-tag order:
//!
//! ```text
//! {"model_id":"biobert","tags":["O","B-Disposition",...,"I-Undetermined"],"kind":"probabilities"}
//! {"doc_id":"note1","token_index":0,"start":0,"end":2,"p":[0.9,0.02,0.02,0.02,0.02,0.01,0.01]}
//! ```
//!
//! Label files (hard-vote output) share the header with `"kind":"labels"` and
//! carry `"tag":"B-Disposition"` instead of `p`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::{BioTag, CharSpan, TokenizedCorpus, NUM_TAGS};

pub const PROBABILITY_TOLERANCE: f64 = 1e-6;

pub type Probs = [f64; NUM_TAGS];

#[derive(Debug, Clone, PartialEq)]
pub struct TokenProbs {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub probs: Probs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLabel {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub tag: BioTag,
}

impl CharSpan for TokenProbs {
    fn start(&self) -> usize {
        self.start
    }
    fn end(&self) -> usize {
        self.end
    }
}

impl CharSpan for TokenLabel {
    fn start(&self) -> usize {
        self.start
    }
    fn end(&self) -> usize {
        self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocRows<R> {
    pub doc_id: String,
    /// Sorted by token index.
    pub rows: Vec<R>,
}

/// One model's probability vectors, documents sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub model_id: String,
    pub docs: Vec<DocRows<TokenProbs>>,
}

/// Hard labels, one per token.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSequence {
    pub model_id: String,
    pub docs: Vec<DocRows<TokenLabel>>,
}

impl PredictionSet {
    pub fn doc(&self, doc_id: &str) -> Option<&DocRows<TokenProbs>> {
        self.docs
            .binary_search_by(|d| d.doc_id.as_str().cmp(doc_id))
            .ok()
            .map(|i| &self.docs[i])
    }

    pub fn row_count(&self) -> usize {
        self.docs.iter().map(|d| d.rows.len()).sum()
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write_header(&mut out, &self.model_id, FileKind::Probabilities)?;
        for doc in &self.docs {
            for r in &doc.rows {
                let rec = ProbRecord {
                    doc_id: doc.doc_id.clone(),
                    token_index: r.index,
                    start: r.start,
                    end: r.end,
                    p: r.probs.to_vec(),
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

impl LabelSequence {
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write_header(&mut out, &self.model_id, FileKind::Labels)?;
        for doc in &self.docs {
            for r in &doc.rows {
                let rec = LabelRecord {
                    doc_id: doc.doc_id.clone(),
                    token_index: r.index,
                    start: r.start,
                    end: r.end,
                    tag: r.tag,
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FileKind {
    #[default]
    Probabilities,
    Labels,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model_id: String,
    tags: Vec<String>,
    #[serde(default)]
    kind: FileKind,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbRecord {
    doc_id: String,
    token_index: usize,
    start: usize,
    end: usize,
    p: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRecord {
    doc_id: String,
    token_index: usize,
    start: usize,
    end: usize,
    tag: BioTag,
}

fn write_header<W: Write>(out: &mut W, model_id: &str, kind: FileKind) -> std::io::Result<()> {
    let header = Header {
        model_id: model_id.to_string(),
        tags: BioTag::names(),
        kind,
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")
}

/// Either kind of prediction file.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictionFile {
    Probabilities(PredictionSet),
    Labels(LabelSequence),
}

impl PredictionFile {
    pub fn model_id(&self) -> &str {
        match self {
            PredictionFile::Probabilities(p) => &p.model_id,
            PredictionFile::Labels(l) => &l.model_id,
        }
    }

    /// Hard labels, taking the argmax of probability files.
    pub fn into_labels(self) -> LabelSequence {
        match self {
            PredictionFile::Probabilities(p) => argmax_labels(&p),
            PredictionFile::Labels(l) => l,
        }
    }
}

fn schema(line: usize, reason: impl Into<String>) -> Error {
    Error::Schema {
        line,
        reason: reason.into(),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

/// Load and validate a probability file.
pub fn load_predictions(path: &Path) -> Result<PredictionSet> {
    match read_prediction_file(open(path)?)? {
        PredictionFile::Probabilities(p) => Ok(p),
        PredictionFile::Labels(_) => Err(schema(1, "expected a probability file, found labels")),
    }
}

/// Load a probability or label file.
pub fn load_prediction_file(path: &Path) -> Result<PredictionFile> {
    read_prediction_file(open(path)?)
}

pub fn read_predictions<R: BufRead>(input: R) -> Result<PredictionSet> {
    match read_prediction_file(input)? {
        PredictionFile::Probabilities(p) => Ok(p),
        PredictionFile::Labels(_) => Err(schema(1, "expected a probability file, found labels")),
    }
}

pub fn read_prediction_file<R: BufRead>(input: R) -> Result<PredictionFile> {
    let mut lines = input.lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => return Err(schema(1, "missing header")),
            Some((i, line)) => {
                let line = line.map_err(|e| schema(i + 1, e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| schema(i + 1, format!("header: {e}")))?;
            }
        }
    };
    if header.model_id.is_empty() {
        return Err(schema(1, "empty model_id"));
    }
    if header.tags != BioTag::names() {
        return Err(schema(
            1,
            format!("tag order {:?} differs from canonical {:?}", header.tags, BioTag::names()),
        ));
    }

    let mut seen: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    let mut probs: BTreeMap<String, Vec<TokenProbs>> = BTreeMap::new();
    let mut labels: BTreeMap<String, Vec<TokenLabel>> = BTreeMap::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| schema(line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let (doc_id, index) = match header.kind {
            FileKind::Probabilities => {
                let rec: ProbRecord =
                    serde_json::from_str(&line).map_err(|e| schema(line_no, e.to_string()))?;
                let p = validate_vector(line_no, &rec.p)?;
                let key = (rec.doc_id.clone(), rec.token_index);
                probs.entry(rec.doc_id).or_default().push(TokenProbs {
                    index: rec.token_index,
                    start: rec.start,
                    end: rec.end,
                    probs: p,
                });
                key
            }
            FileKind::Labels => {
                let rec: LabelRecord =
                    serde_json::from_str(&line).map_err(|e| schema(line_no, e.to_string()))?;
                let key = (rec.doc_id.clone(), rec.token_index);
                labels.entry(rec.doc_id).or_default().push(TokenLabel {
                    index: rec.token_index,
                    start: rec.start,
                    end: rec.end,
                    tag: rec.tag,
                });
                key
            }
        };
        if !seen.entry(doc_id.clone()).or_default().insert(index) {
            return Err(Error::DuplicateRow { doc_id, index });
        }
    }

    fn sorted<R>(map: BTreeMap<String, Vec<R>>, key: impl Fn(&R) -> usize) -> Vec<DocRows<R>> {
        map.into_iter()
            .map(|(doc_id, mut rows)| {
                rows.sort_by_key(&key);
                DocRows { doc_id, rows }
            })
            .collect()
    }

    Ok(match header.kind {
        FileKind::Probabilities => PredictionFile::Probabilities(PredictionSet {
            model_id: header.model_id,
            docs: sorted(probs, |r| r.index),
        }),
        FileKind::Labels => PredictionFile::Labels(LabelSequence {
            model_id: header.model_id,
            docs: sorted(labels, |r| r.index),
        }),
    })
}

/// Check arity, sign and total mass; renormalize inside the tolerance.
pub fn validate_vector(line: usize, p: &[f64]) -> Result<Probs> {
    let probs: Probs = p
        .try_into()
        .map_err(|_| schema(line, format!("expected {NUM_TAGS} probabilities, found {}", p.len())))?;
    if let Some(x) = probs.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::Probability {
            line,
            reason: format!("entry {x} is negative or not finite"),
        });
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
        return Err(Error::Probability {
            line,
            reason: format!("entries sum to {sum}"),
        });
    }
    Ok(probs.map(|x| x / sum))
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(p: &Probs) -> BioTag {
    let mut best = 0;
    for i in 1..NUM_TAGS {
        if p[i] > p[best] {
            best = i;
        }
    }
    BioTag::ALL[best]
}

pub fn argmax_labels(pred: &PredictionSet) -> LabelSequence {
    LabelSequence {
        model_id: pred.model_id.clone(),
        docs: pred
            .docs
            .iter()
            .map(|d| DocRows {
                doc_id: d.doc_id.clone(),
                rows: d
                    .rows
                    .iter()
                    .map(|r| TokenLabel {
                        index: r.index,
                        start: r.start,
                        end: r.end,
                        tag: argmax(&r.probs),
                    })
                    .collect(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind")]
pub enum AlignmentViolation {
    MissingRow { doc_id: String, index: usize },
    UnknownDocument { doc_id: String },
    UnknownToken { doc_id: String, index: usize },
    OffsetMismatch { doc_id: String, index: usize },
}

/// Compare the rows of a prediction file against a tokenized corpus.
pub fn validate_alignment(pred: &PredictionSet, corpus: &TokenizedCorpus) -> Vec<AlignmentViolation> {
    validate_rows(&pred.docs, corpus)
}

pub fn validate_label_alignment(
    labels: &LabelSequence,
    corpus: &TokenizedCorpus,
) -> Vec<AlignmentViolation> {
    validate_rows(&labels.docs, corpus)
}

fn validate_rows<R: CharSpan + HasIndex>(
    docs: &[DocRows<R>],
    corpus: &TokenizedCorpus,
) -> Vec<AlignmentViolation> {
    let mut out = Vec::new();
    let by_id: BTreeMap<&str, &DocRows<R>> = docs.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    for doc in &corpus.docs {
        let rows = by_id.get(doc.doc_id.as_str()).map(|d| d.rows.as_slice()).unwrap_or(&[]);
        let mut next = rows.iter().peekable();
        for tok in &doc.tokens {
            while next.peek().is_some_and(|r| r.index() < tok.index) {
                next.next();
            }
            match next.peek() {
                Some(r) if r.index() == tok.index => {
                    if r.start() != tok.start || r.end() != tok.end {
                        out.push(AlignmentViolation::OffsetMismatch {
                            doc_id: doc.doc_id.clone(),
                            index: tok.index,
                        });
                    }
                }
                _ => out.push(AlignmentViolation::MissingRow {
                    doc_id: doc.doc_id.clone(),
                    index: tok.index,
                }),
            }
        }
        for r in rows.iter().filter(|r| r.index() >= doc.tokens.len()) {
            out.push(AlignmentViolation::UnknownToken {
                doc_id: doc.doc_id.clone(),
                index: r.index(),
            });
        }
    }
    for d in docs {
        if corpus.get(&d.doc_id).is_none() {
            out.push(AlignmentViolation::UnknownDocument {
                doc_id: d.doc_id.clone(),
            });
        }
    }
    out
}

pub(crate) trait HasIndex {
    fn index(&self) -> usize;
}

impl HasIndex for TokenProbs {
    fn index(&self) -> usize {
        self.index
    }
}

impl HasIndex for TokenLabel {
    fn index(&self) -> usize {
        self.index
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::tokenize::{tokenize, TokenizedDocument};

    fn header() -> String {
        format!(
            "{{\"model_id\":\"m\",\"tags\":{}}}\n",
            serde_json::to_string(&BioTag::names()).unwrap()
        )
    }

    fn row(doc: &str, i: usize, p: &[f64]) -> String {
        format!(
            "{{\"doc_id\":\"{doc}\",\"token_index\":{i},\"start\":{},\"end\":{},\"p\":{}}}\n",
            3 * i,
            3 * i + 2,
            serde_json::to_string(p).unwrap()
        )
    }

    const ONE_HOT_O: [f64; 7] = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];

    #[test]
    fn accepts_one_hot() {
        let blob = header() + &row("d", 0, &ONE_HOT_O);
        let set = read_predictions(blob.as_bytes()).unwrap();
        assert_eq!(set.row_count(), 1);
        assert_eq!(argmax(&set.docs[0].rows[0].probs), BioTag::O);
    }

    #[test]
    fn rejects_bad_mass() {
        let blob = header() + &row("d", 0, &[0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(read_predictions(blob.as_bytes()), Err(Error::Probability { line: 2, .. })));
        let blob = header() + &row("d", 0, &[1.1, -0.1, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(read_predictions(blob.as_bytes()), Err(Error::Probability { .. })));
    }

    #[test]
    fn renormalizes_within_tolerance() {
        let p = [0.5 + 4e-7, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0];
        let set = read_predictions((header() + &row("d", 0, &p)).as_bytes()).unwrap();
        let sum: f64 = set.docs[0].rows[0].probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_duplicates_and_schema_errors() {
        let blob = header() + &row("doc1", 3, &ONE_HOT_O) + &row("doc1", 3, &ONE_HOT_O);
        assert!(matches!(
            read_predictions(blob.as_bytes()),
            Err(Error::DuplicateRow { index: 3, .. })
        ));
        let blob = header() + &row("d", 0, &[1.0, 0.0]);
        assert!(matches!(read_predictions(blob.as_bytes()), Err(Error::Schema { line: 2, .. })));
        let blob = header() + "{\"doc_id\":\"d\",\"start\":0,\"end\":1,\"p\":[1,0,0,0,0,0,0]}\n";
        assert!(matches!(read_predictions(blob.as_bytes()), Err(Error::Schema { .. })));
        let permuted = header().replace("\"O\",\"B-Disposition\"", "\"B-Disposition\",\"O\"");
        assert!(matches!(read_predictions(permuted.as_bytes()), Err(Error::Schema { line: 1, .. })));
        assert!(matches!(read_predictions("".as_bytes()), Err(Error::Schema { .. })));
    }

    #[test]
    fn argmax_ties_prefer_lower_index() {
        assert_eq!(argmax(&[0.1, 0.7, 0.05, 0.05, 0.05, 0.03, 0.02]), BioTag::BDisposition);
        assert_eq!(argmax(&[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0]), BioTag::O);
        assert_eq!(argmax(&[1.0 / 7.0; 7]), BioTag::O);
        assert_eq!(argmax(&[0.0, 0.0, 0.0, 0.5, 0.0, 0.5, 0.0]), BioTag::BNoDisposition);
    }

    fn six_token_corpus() -> TokenizedCorpus {
        let doc = Document::new("d", "He currently using metronidazole pill longer");
        TokenizedCorpus {
            docs: vec![TokenizedDocument {
                doc_id: "d".into(),
                tokens: tokenize(&doc),
                tags: None,
            }],
        }
    }

    fn set_for(corpus: &TokenizedCorpus, keep: usize) -> PredictionSet {
        let d = &corpus.docs[0];
        PredictionSet {
            model_id: "m".into(),
            docs: vec![DocRows {
                doc_id: d.doc_id.clone(),
                rows: d
                    .tokens
                    .iter()
                    .take(keep)
                    .map(|t| TokenProbs {
                        index: t.index,
                        start: t.start,
                        end: t.end,
                        probs: ONE_HOT_O,
                    })
                    .collect(),
            }],
        }
    }

    #[test]
    fn alignment() {
        let corpus = six_token_corpus();
        assert!(validate_alignment(&set_for(&corpus, 6), &corpus).is_empty());
        assert_eq!(
            validate_alignment(&set_for(&corpus, 5), &corpus),
            [AlignmentViolation::MissingRow { doc_id: "d".into(), index: 5 }]
        );
        let mut stray = set_for(&corpus, 6);
        stray.docs.push(DocRows {
            doc_id: "zz".into(),
            rows: vec![TokenProbs { index: 0, start: 0, end: 1, probs: ONE_HOT_O }],
        });
        assert_eq!(
            validate_alignment(&stray, &corpus),
            [AlignmentViolation::UnknownDocument { doc_id: "zz".into() }]
        );
        let mut shifted = set_for(&corpus, 6);
        shifted.docs[0].rows[2].end += 1;
        shifted.docs[0].rows.push(TokenProbs { index: 9, start: 50, end: 51, probs: ONE_HOT_O });
        assert_eq!(
            validate_alignment(&shifted, &corpus),
            [
                AlignmentViolation::OffsetMismatch { doc_id: "d".into(), index: 2 },
                AlignmentViolation::UnknownToken { doc_id: "d".into(), index: 9 },
            ]
        );
    }

    #[test]
    fn label_files_round_trip() {
        let corpus = six_token_corpus();
        let labels = argmax_labels(&set_for(&corpus, 6));
        let mut buf = Vec::new();
        labels.write(&mut buf).unwrap();
        match read_prediction_file(buf.as_slice()).unwrap() {
            PredictionFile::Labels(back) => assert_eq!(back, labels),
            other => panic!("unexpected {other:?}"),
        }
        assert!(read_predictions(buf.as_slice()).is_err());
        assert!(validate_label_alignment(&labels, &corpus).is_empty());
    }
}
