//! Stage functions behind the CLI subcommands, and the full pipeline that
//! composes them: ingest, tag, ece, ensemble, decode, eval.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{self, CalibrationReport, InverseEce, WeightVector, DEFAULT_BINS, DEFAULT_EPSILON};
use crate::corpus::{load_corpus, validate_corpus, AnnotatedDocument, Violation};
use crate::decode::{decode_labels, spans_to_standoff, PredictedSpan};
use crate::ensemble::{combine, EnsembleConfig, Strategy};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{self, evaluate, MetricsReport, Task};
use crate::predictions::{load_predictions, validate_alignment, LabelSequence, PredictionFile, PredictionSet};
use crate::tokenize::{tag_corpus, ProjectionReport, Stoplist, TokenizedCorpus};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// A pipeline run, as read from a TOML config file. Relative paths resolve
/// against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub text_dir: PathBuf,
    pub ann_dir: PathBuf,
    pub predictions: Vec<PathBuf>,
    pub strategy: Strategy,
    /// Calibration report files; required for weighted voting.
    #[serde(default)]
    pub weights: Vec<PathBuf>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub stoplist: Option<PathBuf>,
    #[serde(default = "default_bins")]
    pub num_bins: usize,
    pub output_dir: PathBuf,
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            config.rebase(base);
        }
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.text_dir);
        fix(&mut self.ann_dir);
        fix(&mut self.output_dir);
        self.predictions.iter_mut().for_each(fix);
        self.weights.iter_mut().for_each(fix);
        if let Some(s) = self.stoplist.as_mut() {
            fix(s);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let must_exist = |p: &Path, what: &str| {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} {} does not exist", p.display())))
            }
        };
        must_exist(&self.text_dir, "text directory")?;
        must_exist(&self.ann_dir, "annotation directory")?;
        if self.predictions.is_empty() {
            return Err(Error::Config("no prediction files given".into()));
        }
        for p in &self.predictions {
            must_exist(p, "prediction file")?;
        }
        for p in &self.weights {
            must_exist(p, "calibration report")?;
        }
        if let Some(s) = &self.stoplist {
            must_exist(s, "stop list")?;
        }
        if self.num_bins == 0 {
            return Err(Error::Config("num_bins must be positive".into()));
        }
        match (self.strategy, self.weights.is_empty()) {
            (Strategy::Weighted, true) => Err(Error::Config(
                "weighted voting needs calibration reports (weights)".into(),
            )),
            (Strategy::Soft | Strategy::Hard, false) => Err(Error::Config(format!(
                "weights are only used by weighted voting, not {}",
                self.strategy
            ))),
            _ => Ok(()),
        }
    }

    fn inputs(&self) -> Result<Vec<PathBuf>> {
        let mut files = Vec::new();
        for dir in [&self.text_dir, &self.ann_dir] {
            let mut entries: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            files.extend(entries);
        }
        files.extend(self.predictions.iter().cloned());
        files.extend(self.weights.iter().cloned());
        files.extend(self.stoplist.iter().cloned());
        files.dedup();
        Ok(files)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub created_at: String,
    pub config: RunConfig,
    pub inputs: Vec<InputDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

impl RunManifest {
    pub fn build(config: &RunConfig) -> Result<RunManifest> {
        let inputs = config
            .inputs()?
            .into_iter()
            .map(|path| Ok(InputDigest { sha256: sha256_file(&path)?, path }))
            .collect::<Result<Vec<_>>>()?;
        Ok(RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            created_at: chrono::Utc::now().to_rfc3339(),
            config: config.clone(),
            inputs,
        })
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Write a file through a closure producing its content.
pub fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut out = create(path)?;
    f(&mut out).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

fn write_records<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_file(path, |out| {
        for item in items {
            serde_json::to_writer(&mut *out, item)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub struct Ingested {
    pub corpus: Vec<AnnotatedDocument>,
    pub violations: Vec<Violation>,
}

pub fn ingest(text_dir: &Path, ann_dir: &Path, exec: Execution) -> Result<Ingested> {
    let corpus = load_corpus(text_dir, ann_dir, exec)?;
    let violations = validate_corpus(&corpus);
    for v in &violations {
        log::warn!("corpus violation: {v:?}");
    }
    Ok(Ingested { corpus, violations })
}

pub fn load_stoplist(path: Option<&Path>) -> Result<Stoplist> {
    match path {
        None => Ok(Stoplist::default()),
        Some(p) => Ok(Stoplist::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)),
    }
}

pub fn tag(corpus: &[AnnotatedDocument], stoplist: &Stoplist, exec: Execution) -> (TokenizedCorpus, ProjectionReport) {
    let (tokens, report) = tag_corpus(corpus, stoplist, exec);
    if report != ProjectionReport::default() {
        log::warn!("gold projection: {report:?}");
    }
    (tokens, report)
}

pub fn load_tokens(path: &Path) -> Result<TokenizedCorpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    TokenizedCorpus::read_records(BufReader::new(file))
}

/// Load prediction files and require each to align with the corpus.
pub fn load_members(paths: &[PathBuf], corpus: Option<&TokenizedCorpus>, exec: Execution) -> Result<Vec<PredictionSet>> {
    exec.try_map(paths, |path| {
        let set = load_predictions(path).map_err(|e| e.in_stage("load", Some(path.clone())))?;
        if let Some(corpus) = corpus {
            let violations = validate_alignment(&set, corpus);
            if let Some(first) = violations.first() {
                return Err(Error::Alignment(format!(
                    "{} misaligned rows, first: {first:?}",
                    violations.len()
                ))
                .in_stage("load", Some(path.clone())));
            }
        }
        Ok(set)
    })
}

pub fn ece(members: &[PredictionSet], gold: &TokenizedCorpus, num_bins: usize, exec: Execution) -> Result<Vec<CalibrationReport>> {
    members
        .iter()
        .map(|m| calibration::compute_ece(m, gold, num_bins, exec))
        .collect()
}

/// Pick the members' reports out of calibration files and turn them into
/// inverse-ECE weights.
pub fn weights_from_reports(report_paths: &[PathBuf], members: &[PredictionSet], epsilon: f64) -> Result<WeightVector> {
    let mut by_model: BTreeMap<String, CalibrationReport> = BTreeMap::new();
    for path in report_paths {
        for r in calibration::load_reports(path).map_err(|e| e.in_stage("ensemble", Some(path.clone())))? {
            by_model.insert(r.model_id.clone(), r);
        }
    }
    let reports = members
        .iter()
        .map(|m| {
            by_model
                .get(&m.model_id)
                .cloned()
                .ok_or_else(|| Error::WeightMismatch(format!("no calibration report for {:?}", m.model_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(calibration::weights_with(&reports, &InverseEce { epsilon }))
}

pub fn ensemble(
    members: &[PredictionSet],
    strategy: Strategy,
    weights: Option<WeightVector>,
    exec: Execution,
) -> Result<PredictionFile> {
    let config = EnsembleConfig {
        strategy,
        weights,
        members: members.iter().map(|m| m.model_id.clone()).collect(),
    };
    combine(&config, members, exec)
}

pub fn write_prediction_file(path: &Path, file: &PredictionFile) -> Result<()> {
    write_file(path, |out| match file {
        PredictionFile::Probabilities(p) => p.write(out),
        PredictionFile::Labels(l) => l.write(out),
    })
}

/// Decode labels and write one `<doc_id>.ann` per corpus document.
pub fn decode(
    labels: &LabelSequence,
    corpus: &[AnnotatedDocument],
    out_dir: &Path,
    exec: Execution,
) -> Result<BTreeMap<String, Vec<PredictedSpan>>> {
    let spans = decode_labels(labels, exec);
    let known: BTreeSet<&str> = corpus.iter().map(|d| d.doc_id()).collect();
    if let Some(doc_id) = spans.keys().find(|id| !known.contains(id.as_str())) {
        return Err(Error::Alignment(format!("labels reference unknown document {doc_id:?}")));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for doc in corpus {
        let doc_spans = spans.get(doc.doc_id()).map(Vec::as_slice).unwrap_or(&[]);
        let standoff = spans_to_standoff(doc_spans, &doc.document)?;
        let path = out_dir.join(format!("{}.ann", doc.doc_id()));
        fs::write(&path, standoff).map_err(|e| Error::io(&path, e))?;
    }
    Ok(spans)
}

/// Read decoded standoff files as predicted event spans.
pub fn load_predicted_spans(text_dir: &Path, pred_dir: &Path, exec: Execution) -> Result<BTreeMap<String, Vec<PredictedSpan>>> {
    Ok(load_corpus(text_dir, pred_dir, exec)?
        .into_iter()
        .map(|doc| {
            let spans = doc.gold.iter().map(|g| PredictedSpan::from_gold(doc.doc_id(), g)).collect();
            (doc.doc_id().to_string(), spans)
        })
        .collect())
}

/// Strict and lenient reports for each task, in task order.
pub fn eval(
    gold: &[AnnotatedDocument],
    predicted: &BTreeMap<String, Vec<PredictedSpan>>,
    tasks: &[Task],
    exec: Execution,
) -> Result<Vec<MetricsReport>> {
    let mut reports = Vec::new();
    for &task in tasks {
        let (strict, lenient) = evaluate(gold, predicted, task, exec)?;
        reports.push(strict);
        reports.push(lenient);
    }
    Ok(reports)
}

pub fn write_metrics(dir: &Path, stem: &str, reports: &[MetricsReport]) -> Result<()> {
    write_file(&dir.join(format!("{stem}.jsonl")), |out| metrics::write_reports(reports, out))?;
    let table = metrics::format_table(reports);
    fs::write(dir.join(format!("{stem}.txt")), table).map_err(|e| Error::io(dir, e))
}

/// What a pipeline run produced.
#[derive(Debug)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub violations: Vec<Violation>,
    pub projection: ProjectionReport,
    pub calibration: Vec<CalibrationReport>,
    pub metrics: Vec<MetricsReport>,
}

/// Run every stage and write all artifacts under `config.output_dir`:
///
/// ```text
/// manifest.json        written first
/// violations.jsonl     corpus validation findings
/// tokens.jsonl         tokenized corpus with gold tags
/// calibration.jsonl    ECE of every member on this corpus
/// ensemble.jsonl       fused predictions (labels for hard voting)
/// decoded/<id>.ann     decoded event spans
/// metrics.jsonl/.txt   events and medication, strict and lenient
/// ```
pub fn run_pipeline(config: &RunConfig, exec: Execution) -> Result<RunSummary> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let manifest = RunManifest::build(config).map_err(|e| e.in_stage("manifest", None))?;
    write_file(&out.join("manifest.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)?;
        w.write_all(b"\n")
    })?;

    let Ingested { corpus, violations } =
        ingest(&config.text_dir, &config.ann_dir, exec).map_err(|e| e.in_stage("ingest", Some(config.ann_dir.clone())))?;
    write_records(&out.join("violations.jsonl"), &violations)?;

    let stoplist = load_stoplist(config.stoplist.as_deref()).map_err(|e| e.in_stage("tag", config.stoplist.clone()))?;
    let (tokens, projection) = tag(&corpus, &stoplist, exec);
    write_file(&out.join("tokens.jsonl"), |w| tokens.write_records(w))?;

    let members = load_members(&config.predictions, Some(&tokens), exec)?;

    let calibration = ece(&members, &tokens, config.num_bins, exec).map_err(|e| e.in_stage("ece", None))?;
    write_file(&out.join("calibration.jsonl"), |w| calibration::write_reports(&calibration, w))?;

    let weights = match config.strategy {
        Strategy::Weighted => Some(weights_from_reports(&config.weights, &members, config.epsilon)?),
        _ => None,
    };
    let fused = ensemble(&members, config.strategy, weights, exec).map_err(|e| e.in_stage("ensemble", None))?;
    write_prediction_file(&out.join("ensemble.jsonl"), &fused)?;

    let labels = fused.into_labels();
    let spans = decode(&labels, &corpus, &out.join("decoded"), exec).map_err(|e| e.in_stage("decode", None))?;

    let metrics = eval(&corpus, &spans, &[Task::Events, Task::Medication], exec).map_err(|e| e.in_stage("eval", None))?;
    write_metrics(out, "metrics", &metrics)?;

    Ok(RunSummary {
        manifest,
        violations,
        projection,
        calibration,
        metrics,
    })
}
