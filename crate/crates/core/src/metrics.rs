//! Strict and lenient span matching with per-class, micro- and macro-averaged
//! precision, recall and F-score.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedDocument, EventClass, GoldSpan};
use crate::decode::{collapse_to_medication, collapse_to_medication_in, PredictedSpan, SpanLabel};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::tokenize::CharSpan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Strict,
    Lenient,
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchMode::Strict => "strict",
            MatchMode::Lenient => "lenient",
        })
    }
}

/// Event classification scores the three event classes; medication
/// identification scores the single `Drug` class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Events,
    Medication,
}

impl Task {
    pub fn classes(self) -> Vec<SpanLabel> {
        match self {
            Task::Events => EventClass::ALL.into_iter().map(SpanLabel::Event).collect(),
            Task::Medication => vec![SpanLabel::Drug],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Events => "events",
            Task::Medication => "medication",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "events" => Ok(Task::Events),
            "medication" => Ok(Task::Medication),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

pub trait LabeledSpan: CharSpan {
    fn label(&self) -> SpanLabel;
}

impl LabeledSpan for GoldSpan {
    fn label(&self) -> SpanLabel {
        SpanLabel::Event(self.label)
    }
}

impl LabeledSpan for PredictedSpan {
    fn label(&self) -> SpanLabel {
        self.label
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Per-class counts over a fixed class universe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchCounts {
    pub classes: Vec<SpanLabel>,
    pub counts: Vec<Counts>,
}

impl MatchCounts {
    pub fn new(classes: Vec<SpanLabel>) -> Self {
        let counts = vec![Counts::default(); classes.len()];
        MatchCounts { classes, counts }
    }

    pub fn for_task(task: Task) -> Self {
        MatchCounts::new(task.classes())
    }

    pub fn get(&self, label: SpanLabel) -> Option<Counts> {
        self.classes.iter().position(|&c| c == label).map(|i| self.counts[i])
    }

    /// Element-wise sum. Both sides must share the class universe.
    pub fn add(&mut self, other: &MatchCounts) {
        debug_assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.add(*b);
        }
    }

    pub fn pooled(&self) -> Counts {
        let mut total = Counts::default();
        for c in &self.counts {
            total.add(*c);
        }
        total
    }
}

fn check_sorted<S: CharSpan>(spans: &[S]) -> Result<()> {
    if spans.windows(2).all(|w| (w[0].start(), w[0].end()) <= (w[1].start(), w[1].end())) {
        Ok(())
    } else {
        Err(Error::UnsortedInput)
    }
}

/// Count one-to-one matches between gold and predicted spans of one document.
///
/// Only same-label pairs can match. Strict pairs need identical offsets;
/// lenient pairs need at least one shared character. Lenient matching picks
/// an assignment with the most matched pairs and, among those, the most
/// exact pairs. Spans whose label is outside `classes` are rejected.
pub fn match_spans<G: LabeledSpan, P: LabeledSpan>(
    gold: &[G],
    pred: &[P],
    mode: MatchMode,
    classes: &[SpanLabel],
) -> Result<MatchCounts> {
    let pairs = match_pairs(gold, pred, mode, classes)?;
    let mut out = MatchCounts::new(classes.to_vec());
    let index = |label: SpanLabel| classes.iter().position(|&c| c == label).expect("checked by match_pairs");
    for g in gold {
        out.counts[index(g.label())].fn_ += 1;
    }
    for p in pred {
        out.counts[index(p.label())].fp += 1;
    }
    for &(g, _) in &pairs {
        let c = &mut out.counts[index(gold[g].label())];
        c.tp += 1;
        c.fp -= 1;
        c.fn_ -= 1;
    }
    Ok(out)
}

/// The matched `(gold index, prediction index)` pairs behind [`match_spans`],
/// sorted by gold index.
pub fn match_pairs<G: LabeledSpan, P: LabeledSpan>(
    gold: &[G],
    pred: &[P],
    mode: MatchMode,
    classes: &[SpanLabel],
) -> Result<Vec<(usize, usize)>> {
    check_sorted(gold)?;
    check_sorted(pred)?;
    let class_of = |label: SpanLabel| {
        classes
            .iter()
            .position(|&c| c == label)
            .ok_or_else(|| Error::UnknownLabel {
                line: 0,
                label: label.to_string(),
            })
    };
    // per class: offsets plus the original index of each span
    type Side = (Vec<(usize, usize)>, Vec<usize>);
    let mut by_class: Vec<(Side, Side)> = vec![Default::default(); classes.len()];
    for (i, g) in gold.iter().enumerate() {
        let side = &mut by_class[class_of(g.label())?].0;
        side.0.push((g.start(), g.end()));
        side.1.push(i);
    }
    for (j, p) in pred.iter().enumerate() {
        let side = &mut by_class[class_of(p.label())?].1;
        side.0.push((p.start(), p.end()));
        side.1.push(j);
    }
    let mut pairs = Vec::new();
    for ((g, gi), (p, pi)) in &by_class {
        let local = match mode {
            MatchMode::Strict => exact_pairs(g, p),
            MatchMode::Lenient => lenient_pairs(g, p),
        };
        pairs.extend(local.into_iter().map(|(a, b)| (gi[a], pi[b])));
    }
    pairs.sort_unstable();
    Ok(pairs)
}

/// Pairs of identical intervals; both inputs sorted.
fn exact_pairs(gold: &[(usize, usize)], pred: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let (mut i, mut j) = (0, 0);
    let mut pairs = Vec::new();
    while i < gold.len() && j < pred.len() {
        match gold[i].cmp(&pred[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                pairs.push((i, j));
                i += 1;
                j += 1;
            }
        }
    }
    pairs
}

fn intersects(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0.max(b.0) < a.1.min(b.1)
}

/// Lenient assignment as (gold index, pred index) pairs: maximum cardinality,
/// then maximum number of exact pairs. Inputs sorted by (start, end).
fn lenient_pairs(gold: &[(usize, usize)], pred: &[(usize, usize)]) -> Vec<(usize, usize)> {
    // Split into groups of transitively overlapping intervals; no pair can
    // match across groups.
    let mut items: Vec<(usize, usize, bool, usize)> = gold
        .iter()
        .enumerate()
        .map(|(i, &(s, e))| (s, e, false, i))
        .chain(pred.iter().enumerate().map(|(j, &(s, e))| (s, e, true, j)))
        .collect();
    items.sort_unstable();
    let mut pairs = Vec::new();
    let mut group_g = Vec::new();
    let mut group_p = Vec::new();
    let mut reach = 0;
    for (s, e, is_pred, idx) in items {
        if s >= reach && !(group_g.is_empty() && group_p.is_empty()) {
            assign_group(gold, pred, &group_g, &group_p, &mut pairs);
            group_g.clear();
            group_p.clear();
        }
        if s >= reach {
            reach = e;
        } else {
            reach = reach.max(e);
        }
        if is_pred {
            group_p.push(idx);
        } else {
            group_g.push(idx);
        }
    }
    assign_group(gold, pred, &group_g, &group_p, &mut pairs);
    pairs.sort_unstable();
    pairs
}

fn assign_group(
    gold: &[(usize, usize)],
    pred: &[(usize, usize)],
    gs: &[usize],
    ps: &[usize],
    pairs: &mut Vec<(usize, usize)>,
) {
    if gs.is_empty() || ps.is_empty() {
        return;
    }
    // Edge weight: `big` for an overlap, `big + 1` for an exact pair. Since
    // exact bonuses total at most min(n, m) < big, cardinality dominates.
    let big = gs.len().min(ps.len()) as i64 + 1;
    let weight = |g: usize, p: usize| -> i64 {
        if gold[g] == pred[p] {
            big + 1
        } else if intersects(gold[g], pred[p]) {
            big
        } else {
            0
        }
    };
    let gold_rows = gs.len() <= ps.len();
    let (rows, cols) = if gold_rows { (gs, ps) } else { (ps, gs) };
    let cost: Vec<Vec<i64>> = rows
        .iter()
        .map(|&r| {
            cols.iter()
                .map(|&c| if gold_rows { -weight(r, c) } else { -weight(c, r) })
                .collect()
        })
        .collect();
    for (r, c) in min_cost_assignment(&cost).into_iter().enumerate() {
        let (g, p) = if gold_rows { (rows[r], cols[c]) } else { (cols[c], rows[r]) };
        if weight(g, p) > 0 {
            pairs.push((g, p));
        }
    }
}

/// Hungarian algorithm for an `n x m` cost matrix with `n <= m`. Returns the
/// column assigned to each row.
fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    debug_assert!(n <= m);
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * precision * recall, precision + recall)
}

pub fn prf(tp: usize, fp: usize, fn_: usize) -> Prf {
    let precision = ratio(tp as f64, (tp + fp) as f64);
    let recall = ratio(tp as f64, (tp + fn_) as f64);
    Prf {
        precision,
        recall,
        f: f_measure(precision, recall),
    }
}

/// P/R/F of the counts pooled over all classes.
pub fn micro_metrics(counts: &MatchCounts) -> Prf {
    let c = counts.pooled();
    prf(c.tp, c.fp, c.fn_)
}

/// Unweighted mean of per-class P/R/F over the whole class universe.
pub fn macro_metrics(counts: &MatchCounts) -> Prf {
    let n = counts.counts.len();
    if n == 0 {
        return Prf::default();
    }
    let mut sum = Prf::default();
    for c in &counts.counts {
        let x = prf(c.tp, c.fp, c.fn_);
        sum.precision += x.precision;
        sum.recall += x.recall;
        sum.f += x.f;
    }
    Prf {
        precision: sum.precision / n as f64,
        recall: sum.recall / n as f64,
        f: sum.f / n as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    #[serde(flatten)]
    pub counts: Counts,
    #[serde(flatten)]
    pub scores: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub mode: MatchMode,
    pub classes: Vec<ClassMetrics>,
    pub micro: Prf,
    #[serde(rename = "macro")]
    pub macro_: Prf,
}

impl MetricsReport {
    pub fn from_counts(task: Task, mode: MatchMode, counts: &MatchCounts) -> Self {
        MetricsReport {
            task,
            mode,
            classes: counts
                .classes
                .iter()
                .zip(&counts.counts)
                .map(|(label, c)| ClassMetrics {
                    label: label.to_string(),
                    counts: *c,
                    scores: prf(c.tp, c.fp, c.fn_),
                })
                .collect(),
            micro: micro_metrics(counts),
            macro_: macro_metrics(counts),
        }
    }
}

/// Score predicted spans against gold, returning `(strict, lenient)`.
///
/// Counts are accumulated per document. For the medication task both sides
/// are first collapsed to `Drug` spans, bridging whitespace-only gaps.
/// Predictions for documents absent from the gold corpus are all false
/// positives.
pub fn evaluate(
    gold: &[AnnotatedDocument],
    predicted: &BTreeMap<String, Vec<PredictedSpan>>,
    task: Task,
    exec: Execution,
) -> Result<(MetricsReport, MetricsReport)> {
    let classes = task.classes();
    let empty = Vec::new();
    let per_doc = exec.try_map(gold, |doc| {
        let pred = predicted.get(doc.doc_id()).unwrap_or(&empty);
        let gold_spans: Vec<PredictedSpan> = doc
            .gold
            .iter()
            .map(|g| PredictedSpan::from_gold(doc.doc_id(), g))
            .collect();
        let (g, p) = match task {
            Task::Events => (gold_spans, sorted(pred)),
            Task::Medication => (
                collapse_to_medication_in(&gold_spans, &doc.document),
                collapse_to_medication_in(pred, &doc.document),
            ),
        };
        Ok::<_, Error>((
            match_spans(&g, &p, MatchMode::Strict, &classes)?,
            match_spans(&g, &p, MatchMode::Lenient, &classes)?,
        ))
    })?;

    let mut strict = MatchCounts::new(classes.clone());
    let mut lenient = MatchCounts::new(classes.clone());
    for (s, l) in &per_doc {
        strict.add(s);
        lenient.add(l);
    }
    let known: BTreeSet<&str> = gold.iter().map(|d| d.doc_id()).collect();
    for (doc_id, spans) in predicted {
        if known.contains(doc_id.as_str()) || spans.is_empty() {
            continue;
        }
        log::warn!("predictions for {doc_id:?} have no gold document; counted as false positives");
        let spans = match task {
            Task::Events => sorted(spans),
            Task::Medication => collapse_to_medication(spans),
        };
        let unmatched = match_spans::<PredictedSpan, _>(&[], &spans, MatchMode::Strict, &classes)?;
        strict.add(&unmatched);
        lenient.add(&unmatched);
    }
    Ok((
        MetricsReport::from_counts(task, MatchMode::Strict, &strict),
        MetricsReport::from_counts(task, MatchMode::Lenient, &lenient),
    ))
}

fn sorted(spans: &[PredictedSpan]) -> Vec<PredictedSpan> {
    let mut v = spans.to_vec();
    v.sort_by_key(|s| (s.start, s.end, s.label));
    v
}

pub fn write_reports<W: Write>(reports: &[MetricsReport], mut out: W) -> std::io::Result<()> {
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_reports(content: &str) -> Result<Vec<MetricsReport>> {
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Human-readable table, four decimals.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(out, "== {} / {} ==", r.task, r.mode);
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>6} {:>6} {:>9} {:>9} {:>9}",
            "class", "TP", "FP", "FN", "P", "R", "F"
        );
        for c in &r.classes {
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>6} {:>6} {:>9.4} {:>9.4} {:>9.4}",
                c.label, c.counts.tp, c.counts.fp, c.counts.fn_, c.scores.precision, c.scores.recall, c.scores.f
            );
        }
        for (name, s) in [("micro", r.micro), ("macro", r.macro_)] {
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>6} {:>6} {:>9.4} {:>9.4} {:>9.4}",
                name, "", "", "", s.precision, s.recall, s.f
            );
        }
        out.push('\n');
    }
    out
}
