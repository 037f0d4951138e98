//! Token-level soft, hard and weighted voting over aligned prediction sets.
//!
//! Members are combined in `model_id` order, so the result never depends on
//! the order they were passed in.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::WeightVector;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::predictions::{
    argmax, DocRows, LabelSequence, PredictionFile, PredictionSet, Probs, TokenLabel, TokenProbs,
};
use crate::tokenize::NUM_TAGS;

pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Soft,
    Hard,
    Weighted,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Soft => "soft",
            Strategy::Hard => "hard",
            Strategy::Weighted => "weighted",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Strategy::Soft),
            "hard" => Ok(Strategy::Hard),
            "weighted" => Ok(Strategy::Weighted),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected soft, hard or weighted)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub strategy: Strategy,
    /// Required iff the strategy is weighted.
    pub weights: Option<WeightVector>,
    pub members: Vec<String>,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        match (self.strategy, &self.weights) {
            (Strategy::Weighted, None) => Err(Error::Config(
                "weighted voting needs calibration reports".into(),
            )),
            (Strategy::Weighted, Some(w)) => check_weight_cover(w, &self.members).map(|_| ()),
            (_, Some(_)) => Err(Error::Config(format!(
                "weights are only used by weighted voting, not {}",
                self.strategy
            ))),
            (_, None) => Ok(()),
        }
    }
}

/// Run the configured strategy. Members are matched to `config.members` by id.
pub fn combine(
    config: &EnsembleConfig,
    members: &[PredictionSet],
    exec: Execution,
) -> Result<PredictionFile> {
    config.validate()?;
    let ids: Vec<&str> = members.iter().map(|m| m.model_id.as_str()).collect();
    let mut expected: Vec<&str> = config.members.iter().map(String::as_str).collect();
    let mut given = ids.clone();
    expected.sort_unstable();
    given.sort_unstable();
    if expected != given {
        return Err(Error::Config(format!(
            "ensemble lists members {:?} but predictions are from {:?}",
            config.members, ids
        )));
    }
    Ok(match config.strategy {
        Strategy::Soft => PredictionFile::Probabilities(soft_vote_with(members, exec)?),
        Strategy::Hard => PredictionFile::Labels(hard_vote_with(members, exec)?),
        Strategy::Weighted => PredictionFile::Probabilities(weighted_vote_with(
            members,
            config.weights.as_ref().expect("validated"),
            exec,
        )?),
    })
}

/// Members sorted by id, after checking they cover the same tokens.
fn canonical(members: &[PredictionSet]) -> Result<Vec<&PredictionSet>> {
    let first = members.first().ok_or(Error::EmptyEnsemble)?;
    let mut sorted: Vec<&PredictionSet> = members.iter().collect();
    sorted.sort_by(|a, b| a.model_id.cmp(&b.model_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].model_id == w[1].model_id) {
        return Err(Error::Config(format!("model {:?} listed twice", w[0].model_id)));
    }
    for m in members {
        if m.docs.len() != first.docs.len() {
            return Err(misaligned(first, m, "document sets differ"));
        }
        for (a, b) in first.docs.iter().zip(&m.docs) {
            if a.doc_id != b.doc_id {
                return Err(misaligned(first, m, &format!("{:?} vs {:?}", a.doc_id, b.doc_id)));
            }
            let same_tokens = a.rows.len() == b.rows.len()
                && a.rows
                    .iter()
                    .zip(&b.rows)
                    .all(|(x, y)| (x.index, x.start, x.end) == (y.index, y.start, y.end));
            if !same_tokens {
                return Err(misaligned(first, m, &format!("tokens of {:?} differ", a.doc_id)));
            }
        }
    }
    Ok(sorted)
}

fn misaligned(a: &PredictionSet, b: &PredictionSet, what: &str) -> Error {
    Error::Alignment(format!("{:?} and {:?}: {what}", a.model_id, b.model_id))
}

/// Fuse members token by token with `fuse(token_vectors_in_member_order)`.
fn fuse_rows<F>(members: &[&PredictionSet], model_id: &str, exec: Execution, fuse: F) -> PredictionSet
where
    F: Fn(&[&Probs]) -> Probs + Sync + Send,
{
    let doc_ids: Vec<usize> = (0..members[0].docs.len()).collect();
    let docs = exec.map(&doc_ids, |&d| {
        let template = &members[0].docs[d];
        let rows = (0..template.rows.len())
            .map(|t| {
                let vectors: Vec<&Probs> = members.iter().map(|m| &m.docs[d].rows[t].probs).collect();
                let r = &template.rows[t];
                TokenProbs {
                    index: r.index,
                    start: r.start,
                    end: r.end,
                    probs: fuse(&vectors),
                }
            })
            .collect();
        DocRows {
            doc_id: template.doc_id.clone(),
            rows,
        }
    });
    PredictionSet {
        model_id: model_id.to_string(),
        docs,
    }
}

fn normalized(mut p: Probs) -> Probs {
    let total: f64 = p.iter().sum();
    if total > 0.0 {
        p.iter_mut().for_each(|x| *x /= total);
    }
    p
}

/// Mean of the member probability vectors.
pub fn soft_vote(members: &[PredictionSet]) -> Result<PredictionSet> {
    soft_vote_with(members, Execution::default())
}

pub fn soft_vote_with(members: &[PredictionSet], exec: Execution) -> Result<PredictionSet> {
    let sorted = canonical(members)?;
    let m = sorted.len() as f64;
    Ok(fuse_rows(&sorted, "ensemble:soft", exec, |vectors| {
        let mut sum = [0.0; NUM_TAGS];
        for v in vectors {
            for (s, x) in sum.iter_mut().zip(v.iter()) {
                *s += x;
            }
        }
        normalized(sum.map(|s| s / m))
    }))
}

/// Weighted sum of member vectors. Weights must cover exactly the members
/// and sum to one.
pub fn weighted_vote(members: &[PredictionSet], weights: &WeightVector) -> Result<PredictionSet> {
    weighted_vote_with(members, weights, Execution::default())
}

pub fn weighted_vote_with(
    members: &[PredictionSet],
    weights: &WeightVector,
    exec: Execution,
) -> Result<PredictionSet> {
    let sorted = canonical(members)?;
    let ids: Vec<&str> = sorted.iter().map(|m| m.model_id.as_str()).collect();
    let w = check_weight_cover(weights, &ids)?;
    Ok(fuse_rows(&sorted, "ensemble:weighted", exec, |vectors| {
        let mut sum = [0.0; NUM_TAGS];
        for (v, wm) in vectors.iter().zip(&w) {
            for (s, x) in sum.iter_mut().zip(v.iter()) {
                *s += wm * x;
            }
        }
        normalized(sum)
    }))
}

/// Weights in the order of `ids`, after checking cover, sign and total.
fn check_weight_cover<S: AsRef<str>>(weights: &WeightVector, ids: &[S]) -> Result<Vec<f64>> {
    if weights.entries.len() != ids.len() {
        return Err(Error::WeightMismatch(format!(
            "{} weights for {} members",
            weights.entries.len(),
            ids.len()
        )));
    }
    let w = ids
        .iter()
        .map(|id| {
            weights
                .get(id.as_ref())
                .ok_or_else(|| Error::WeightMismatch(format!("no weight for {:?}", id.as_ref())))
        })
        .collect::<Result<Vec<f64>>>()?;
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::WeightMismatch("weights must be finite and non-negative".into()));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::WeightMismatch(format!("weights sum to {total}")));
    }
    Ok(w)
}

/// Plurality of member argmax tags; ties go to the lowest tag index.
pub fn hard_vote(members: &[PredictionSet]) -> Result<LabelSequence> {
    hard_vote_with(members, Execution::default())
}

pub fn hard_vote_with(members: &[PredictionSet], exec: Execution) -> Result<LabelSequence> {
    let sorted = canonical(members)?;
    let doc_ids: Vec<usize> = (0..sorted[0].docs.len()).collect();
    let docs = exec.map(&doc_ids, |&d| {
        let template = &sorted[0].docs[d];
        let rows = template
            .rows
            .iter()
            .enumerate()
            .map(|(t, r)| {
                let mut votes = [0.0; NUM_TAGS];
                for m in &sorted {
                    votes[argmax(&m.docs[d].rows[t].probs).index()] += 1.0;
                }
                TokenLabel {
                    index: r.index,
                    start: r.start,
                    end: r.end,
                    tag: argmax(&votes),
                }
            })
            .collect();
        DocRows {
            doc_id: template.doc_id.clone(),
            rows,
        }
    });
    Ok(LabelSequence {
        model_id: "ensemble:hard".into(),
        docs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::BioTag;

    fn pad(head: &[f64]) -> Probs {
        let mut p = [0.0; NUM_TAGS];
        p[..head.len()].copy_from_slice(head);
        p
    }

    fn member(id: &str, vectors: &[Probs]) -> PredictionSet {
        PredictionSet {
            model_id: id.into(),
            docs: vec![DocRows {
                doc_id: "d".into(),
                rows: vectors
                    .iter()
                    .enumerate()
                    .map(|(i, p)| TokenProbs { index: i, start: 2 * i, end: 2 * i + 1, probs: *p })
                    .collect(),
            }],
        }
    }

    fn one_hot(tag: BioTag) -> Probs {
        let mut p = [0.0; NUM_TAGS];
        p[tag.index()] = 1.0;
        p
    }

    #[test]
    fn soft_vote_two_members() {
        let out = soft_vote(&[member("a", &[pad(&[0.6, 0.4])]), member("b", &[pad(&[0.3, 0.7])])]).unwrap();
        let p = out.docs[0].rows[0].probs;
        assert!((p[0] - 0.45).abs() < 1e-12 && (p[1] - 0.55).abs() < 1e-12);
        assert_eq!(argmax(&p), BioTag::BDisposition);
        assert_eq!(out.model_id, "ensemble:soft");
    }

    #[test]
    fn single_member_is_identity() {
        let v = pad(&[0.2, 0.3, 0.5]);
        let out = soft_vote(&[member("a", &[v])]).unwrap();
        assert_eq!(out.docs[0].rows[0].probs, v);
    }

    #[test]
    fn hard_vote_majority_and_ties() {
        let out = hard_vote(&[
            member("a", &[one_hot(BioTag::BDisposition)]),
            member("b", &[one_hot(BioTag::BDisposition)]),
            member("c", &[one_hot(BioTag::O)]),
        ])
        .unwrap();
        assert_eq!(out.docs[0].rows[0].tag, BioTag::BDisposition);

        let out = hard_vote(&[member("a", &[one_hot(BioTag::O)]), member("b", &[one_hot(BioTag::BUndetermined)])]).unwrap();
        assert_eq!(out.docs[0].rows[0].tag, BioTag::O);

        let eleven: Vec<_> = (0..11).map(|i| member(&format!("m{i}"), &[one_hot(BioTag::INoDisposition)])).collect();
        assert_eq!(hard_vote(&eleven).unwrap().docs[0].rows[0].tag, BioTag::INoDisposition);
    }

    #[test]
    fn weighted_vote_cases() {
        let a = member("a", &[pad(&[0.2, 0.8])]);
        let b = member("b", &[pad(&[0.8, 0.2])]);
        let w = WeightVector { entries: vec![("a".into(), 0.75), ("b".into(), 0.25)] };
        let p = weighted_vote(&[a.clone(), b.clone()], &w).unwrap().docs[0].rows[0].probs;
        assert!((p[0] - 0.35).abs() < 1e-12 && (p[1] - 0.65).abs() < 1e-12);
        assert_eq!(argmax(&p), BioTag::BDisposition);

        let degenerate = WeightVector { entries: vec![("a".into(), 1.0), ("b".into(), 0.0)] };
        let out = weighted_vote(&[a.clone(), b.clone()], &degenerate).unwrap();
        assert_eq!(out.docs[0].rows, a.docs[0].rows);
    }

    #[test]
    fn weight_errors() {
        let a = member("a", &[pad(&[1.0])]);
        let b = member("b", &[pad(&[1.0])]);
        let missing = WeightVector { entries: vec![("a".into(), 0.5), ("c".into(), 0.5)] };
        assert!(matches!(weighted_vote(&[a.clone(), b.clone()], &missing), Err(Error::WeightMismatch(_))));
        let short = WeightVector { entries: vec![("a".into(), 1.0)] };
        assert!(matches!(weighted_vote(&[a.clone(), b.clone()], &short), Err(Error::WeightMismatch(_))));
        let unnormalized = WeightVector { entries: vec![("a".into(), 0.5), ("b".into(), 0.6)] };
        assert!(matches!(weighted_vote(&[a, b], &unnormalized), Err(Error::WeightMismatch(_))));
    }

    #[test]
    fn alignment_and_empty_errors() {
        assert!(matches!(soft_vote(&[]), Err(Error::EmptyEnsemble)));
        let a = member("a", &[pad(&[1.0]), pad(&[1.0])]);
        let b = member("b", &[pad(&[1.0])]);
        assert!(matches!(soft_vote(&[a.clone(), b]), Err(Error::Alignment(_))));
        let mut c = member("c", &[pad(&[1.0]), pad(&[1.0])]);
        c.docs[0].rows[1].end += 1;
        assert!(matches!(hard_vote(&[a.clone(), c]), Err(Error::Alignment(_))));
        assert!(matches!(soft_vote(&[a.clone(), a]), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        let cfg = EnsembleConfig { strategy: Strategy::Weighted, weights: None, members: vec!["a".into()] };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = EnsembleConfig { strategy: Strategy::Soft, weights: None, members: vec![] };
        assert!(matches!(cfg.validate(), Err(Error::EmptyEnsemble)));
        let cfg = EnsembleConfig {
            strategy: Strategy::Hard,
            weights: None,
            members: vec!["a".into(), "b".into()],
        };
        let out = combine(&cfg, &[member("b", &[pad(&[1.0])]), member("a", &[pad(&[1.0])])], Execution::Sequential).unwrap();
        assert!(matches!(out, PredictionFile::Labels(_)));
        assert!(combine(&cfg, &[member("a", &[pad(&[1.0])])], Execution::Sequential).is_err());
        assert_eq!("weighted".parse::<Strategy>().unwrap(), Strategy::Weighted);
        assert!("majority".parse::<Strategy>().is_err());
    }
}
