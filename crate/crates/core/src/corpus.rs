//! Documents and standoff gold annotations.
//!
//! Entity lines follow `T<id>\t<Label> <start> <end>\t<surface>`; every other
//! line is ignored. Offsets count decoded characters, never bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;

/// Medication event class. The declaration order is the canonical order used
/// for every tie-break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventClass {
    Disposition,
    NoDisposition,
    Undetermined,
}

impl EventClass {
    pub const ALL: [EventClass; 3] = [
        EventClass::Disposition,
        EventClass::NoDisposition,
        EventClass::Undetermined,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventClass::Disposition => "Disposition",
            EventClass::NoDisposition => "NoDisposition",
            EventClass::Undetermined => "Undetermined",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EventClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventClass {
    type Err = ();

    /// Case-sensitive.
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        EventClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or(())
    }
}

/// A note. Character offsets are resolved through a precomputed byte table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    boundaries: Vec<usize>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let mut boundaries: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
        boundaries.push(text.len());
        Document {
            doc_id: doc_id.into(),
            text,
            boundaries,
        }
    }

    /// Length in characters.
    pub fn char_len(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// Text between two character offsets, or `None` when out of range.
    pub fn slice(&self, start: usize, end: usize) -> Option<&str> {
        if start > end || end > self.char_len() {
            return None;
        }
        Some(&self.text[self.boundaries[start]..self.boundaries[end]])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldSpan {
    pub start: usize,
    pub end: usize,
    pub label: EventClass,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedDocument {
    pub document: Document,
    /// Sorted by `(start, end)`.
    pub gold: Vec<GoldSpan>,
}

impl AnnotatedDocument {
    pub fn doc_id(&self) -> &str {
        &self.document.doc_id
    }

    /// Serialize the gold spans as standoff entity lines.
    pub fn to_standoff(&self) -> String {
        format_standoff(
            self.gold
                .iter()
                .map(|g| (g.label.as_str(), g.start, g.end, g.surface.as_str())),
        )
    }
}

/// Render entity lines, numbering them `T1..Tn` in iteration order. Line
/// breaks inside a surface are written as spaces.
pub fn format_standoff<'a>(
    entries: impl IntoIterator<Item = (&'a str, usize, usize, &'a str)>,
) -> String {
    let mut out = String::new();
    for (i, (label, start, end, surface)) in entries.into_iter().enumerate() {
        let surface = flatten_line_breaks(surface);
        out.push_str(&format!("T{}\t{label} {start} {end}\t{surface}\n", i + 1));
    }
    out
}

fn flatten_line_breaks(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

/// One parsed entity line before it is checked against the text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct EntityLine<'a> {
    pub line: usize,
    pub label: &'a str,
    pub start: usize,
    pub end: usize,
    pub surface: &'a str,
}

/// Split an annotation blob into entity lines. Non-`T` lines are skipped.
pub(crate) fn entity_lines(annotation_blob: &str) -> Result<Vec<EntityLine<'_>>> {
    let mut out = Vec::new();
    for (i, raw) in annotation_blob.lines().enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if !raw.starts_with('T') {
            continue;
        }
        let malformed = |reason: &str| Error::MalformedLine {
            line,
            reason: reason.to_string(),
        };
        let mut fields = raw.splitn(3, '\t');
        let id = fields.next().unwrap_or_default();
        if id.len() < 2 {
            return Err(malformed("missing entity id"));
        }
        let body = fields.next().ok_or_else(|| malformed("missing label and offsets"))?;
        let surface = fields.next().ok_or_else(|| malformed("missing surface"))?;
        let parts: Vec<&str> = body.split(' ').collect();
        if parts.len() != 3 {
            return Err(malformed("expected `<Label> <start> <end>`"));
        }
        let start = parts[1]
            .parse::<usize>()
            .map_err(|_| malformed("start offset is not a non-negative integer"))?;
        let end = parts[2]
            .parse::<usize>()
            .map_err(|_| malformed("end offset is not a non-negative integer"))?;
        out.push(EntityLine {
            line,
            label: parts[0],
            start,
            end,
            surface,
        });
    }
    Ok(out)
}

/// Parse a note and its standoff annotations.
pub fn parse_document(
    doc_id: &str,
    text_blob: &str,
    annotation_blob: &str,
) -> Result<AnnotatedDocument> {
    let document = Document::new(doc_id, text_blob);
    let mut gold = Vec::new();
    for e in entity_lines(annotation_blob)? {
        let label = e.label.parse::<EventClass>().map_err(|_| Error::UnknownLabel {
            line: e.line,
            label: e.label.to_string(),
        })?;
        let found = span_text(&document, e.line, e.start, e.end)?;
        if flatten_line_breaks(found) != e.surface {
            return Err(Error::SurfaceMismatch {
                line: e.line,
                annotated: e.surface.to_string(),
                found: found.to_string(),
            });
        }
        gold.push(GoldSpan {
            start: e.start,
            end: e.end,
            label,
            surface: found.to_string(),
        });
    }
    gold.sort_by_key(|g| (g.start, g.end));
    Ok(AnnotatedDocument { document, gold })
}

pub(crate) fn span_text(
    document: &Document,
    line: usize,
    start: usize,
    end: usize,
) -> Result<&str> {
    let len = document.char_len();
    if start >= end || end > len {
        return Err(Error::OffsetOutOfRange {
            line,
            start,
            end,
            len,
        });
    }
    Ok(document.slice(start, end).expect("bounds checked"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind")]
pub enum Violation {
    DuplicateId {
        doc_id: String,
    },
    Overlap {
        doc_id: String,
        first: (usize, usize),
        second: (usize, usize),
    },
    SurfaceMismatch {
        doc_id: String,
        start: usize,
        end: usize,
    },
}

/// Report duplicate ids, overlapping gold spans and stale surfaces.
pub fn validate_corpus(corpus: &[AnnotatedDocument]) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen = BTreeMap::new();
    for doc in corpus {
        let n = seen.entry(doc.doc_id()).or_insert(0usize);
        *n += 1;
        if *n == 2 {
            violations.push(Violation::DuplicateId {
                doc_id: doc.doc_id().to_string(),
            });
        }
    }
    for doc in corpus {
        let gold = &doc.gold;
        for (i, a) in gold.iter().enumerate() {
            if doc.document.slice(a.start, a.end) != Some(a.surface.as_str()) {
                violations.push(Violation::SurfaceMismatch {
                    doc_id: doc.doc_id().to_string(),
                    start: a.start,
                    end: a.end,
                });
            }
            for b in gold[i + 1..].iter().take_while(|b| b.start < a.end) {
                if b.end > b.start && a.end > a.start {
                    violations.push(Violation::Overlap {
                        doc_id: doc.doc_id().to_string(),
                        first: (a.start, a.end),
                        second: (b.start, b.end),
                    });
                }
            }
        }
    }
    violations
}

/// Load every `<id>.txt` under `text_dir` with its `<id>.ann` from `ann_dir`.
/// A note without an annotation file has no gold spans. Documents come back
/// sorted by id.
pub fn load_corpus(text_dir: &Path, ann_dir: &Path, exec: Execution) -> Result<Vec<AnnotatedDocument>> {
    load(text_dir, Some(ann_dir), exec)
}

/// Load notes without annotations.
pub fn load_texts(text_dir: &Path, exec: Execution) -> Result<Vec<AnnotatedDocument>> {
    load(text_dir, None, exec)
}

fn load(text_dir: &Path, ann_dir: Option<&Path>, exec: Execution) -> Result<Vec<AnnotatedDocument>> {
    let ids = list_with_extension(text_dir, "txt")?;
    exec.try_map(&ids, |id| {
        let text_path = text_dir.join(format!("{id}.txt"));
        let text = fs::read_to_string(&text_path).map_err(|e| Error::io(&text_path, e))?;
        let Some(ann_dir) = ann_dir else {
            return parse_document(id, &text, "");
        };
        let ann_path = ann_dir.join(format!("{id}.ann"));
        let ann = match fs::read_to_string(&ann_path) {
            Ok(s) => s,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                log::debug!("{} has no annotation file", text_path.display());
                String::new()
            }
            Err(e) => return Err(Error::io(&ann_path, e)),
        };
        parse_document(id, &text, &ann).map_err(|e| e.in_stage("ingest", Some(ann_path.clone())))
    })
}

/// Sorted basenames of files in `dir` carrying `ext`.
pub(crate) fn list_with_extension(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path: PathBuf = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}
