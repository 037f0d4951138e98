use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use evoting::calibration::{self, DEFAULT_BINS, DEFAULT_EPSILON};
use evoting::ensemble::Strategy;
use evoting::error::{Error, Result};
use evoting::exec::{init_workers, Execution};
use evoting::metrics::{self, Task};
use evoting::pipeline::{self, RunConfig};
use evoting::predictions::{load_prediction_file, validate_label_alignment};

#[derive(Parser)]
#[command(name = "evoting", version, about = "Ensemble voting and span scoring for medication-event extraction")]
struct Cli {
    /// Worker threads for per-document work (0 = one per processor).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Soft,
    Hard,
    Weighted,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Strategy {
        match s {
            StrategyArg::Soft => Strategy::Soft,
            StrategyArg::Hard => Strategy::Hard,
            StrategyArg::Weighted => Strategy::Weighted,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Events,
    Medication,
    Both,
}

impl TaskArg {
    fn tasks(self) -> Vec<Task> {
        match self {
            TaskArg::Events => vec![Task::Events],
            TaskArg::Medication => vec![Task::Medication],
            TaskArg::Both => vec![Task::Events, Task::Medication],
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate notes with their standoff annotations.
    Ingest {
        #[arg(long)]
        text_dir: PathBuf,
        #[arg(long)]
        ann_dir: PathBuf,
        /// Write violations here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tokenize the corpus and project gold spans to IOB2 tags.
    Tag {
        #[arg(long)]
        text_dir: PathBuf,
        #[arg(long)]
        ann_dir: PathBuf,
        /// One stop word per line. No stop words are removed without it.
        #[arg(long)]
        stoplist: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expected calibration error of each prediction file against gold tags.
    Ece {
        /// Token records with gold tags, as written by `tag`.
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        predictions: Vec<PathBuf>,
    },
    /// Fuse prediction files by soft, hard or weighted voting.
    Ensemble {
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        /// Calibration report files (weighted voting only).
        #[arg(long, num_args = 1..)]
        weights: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        /// Check every member against these token records first.
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        members: Vec<PathBuf>,
    },
    /// Decode a prediction or label file into standoff files.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        text_dir: PathBuf,
        /// Token records to check the labels against.
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score decoded standoff files against gold.
    Eval {
        #[arg(long)]
        text_dir: PathBuf,
        #[arg(long)]
        ann_dir: PathBuf,
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        task: TaskArg,
        /// Write metric records here as well as printing the table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print metric record files as tables.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Run the whole pipeline from a TOML config; flags override the file.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        text_dir: Option<PathBuf>,
        #[arg(long)]
        ann_dir: Option<PathBuf>,
        #[arg(long = "prediction")]
        predictions: Vec<PathBuf>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long, num_args = 1..)]
        weights: Vec<PathBuf>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        stoplist: Option<PathBuf>,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EVOTING_LOG", "warn")).init();
    let cli = Cli::parse();
    init_workers(Some(cli.jobs));
    match run(cli.command, Execution::default()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn emit(out: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
    match out {
        Some(path) => pipeline::write_file(path, |w| write(w)),
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn run(command: Command, exec: Execution) -> Result<()> {
    match command {
        Command::Ingest { text_dir, ann_dir, out } => {
            let ingested = pipeline::ingest(&text_dir, &ann_dir, exec)?;
            let spans: usize = ingested.corpus.iter().map(|d| d.gold.len()).sum();
            eprintln!(
                "{} documents, {spans} gold spans, {} violations",
                ingested.corpus.len(),
                ingested.violations.len()
            );
            emit(out.as_deref(), |w| {
                for v in &ingested.violations {
                    serde_json::to_writer(&mut *w, v)?;
                    w.write_all(b"\n")?;
                }
                Ok(())
            })
        }
        Command::Tag { text_dir, ann_dir, stoplist, out } => {
            let ingested = pipeline::ingest(&text_dir, &ann_dir, exec)?;
            let stoplist = pipeline::load_stoplist(stoplist.as_deref())?;
            let (tokens, report) = pipeline::tag(&ingested.corpus, &stoplist, exec);
            eprintln!("{} tokens; projection: {report:?}", tokens.token_count());
            pipeline::write_file(&out, |w| tokens.write_records(w))
        }
        Command::Ece { tokens, bins, out, predictions } => {
            if bins == 0 {
                return Err(Error::Config("--bins must be positive".into()));
            }
            let gold = pipeline::load_tokens(&tokens)?;
            let members = pipeline::load_members(&predictions, Some(&gold), exec)?;
            let reports = pipeline::ece(&members, &gold, bins, exec)?;
            for r in &reports {
                eprintln!("{:<32} ECE {:.4}", r.model_id, r.ece);
            }
            emit(out.as_deref(), |w| calibration::write_reports(&reports, w))
        }
        Command::Ensemble { strategy, weights, epsilon, tokens, out, members } => {
            let strategy = Strategy::from(strategy);
            if strategy == Strategy::Weighted && weights.is_empty() {
                return Err(Error::Config("weighted voting needs --weights".into()));
            }
            if strategy != Strategy::Weighted && !weights.is_empty() {
                return Err(Error::Config(format!("--weights has no effect with {strategy} voting")));
            }
            let corpus = tokens.as_deref().map(pipeline::load_tokens).transpose()?;
            let members = pipeline::load_members(&members, corpus.as_ref(), exec)?;
            let weights = match strategy {
                Strategy::Weighted => {
                    let w = pipeline::weights_from_reports(&weights, &members, epsilon)?;
                    for (m, x) in &w.entries {
                        eprintln!("{m:<32} weight {x:.4}");
                    }
                    Some(w)
                }
                _ => None,
            };
            let fused = pipeline::ensemble(&members, strategy, weights, exec)?;
            pipeline::write_prediction_file(&out, &fused)
        }
        Command::Decode { input, text_dir, tokens, out_dir } => {
            let file = load_prediction_file(&input)?;
            let labels = file.into_labels();
            if let Some(tokens) = tokens {
                let corpus = pipeline::load_tokens(&tokens)?;
                let violations = validate_label_alignment(&labels, &corpus);
                if let Some(first) = violations.first() {
                    return Err(Error::Alignment(format!("{} misaligned rows, first: {first:?}", violations.len())));
                }
            }
            let corpus = evoting::corpus::load_texts(&text_dir, exec)?;
            let spans = pipeline::decode(&labels, &corpus, &out_dir, exec)?;
            let n: usize = spans.values().map(Vec::len).sum();
            eprintln!("{n} spans written to {}", out_dir.display());
            Ok(())
        }
        Command::Eval { text_dir, ann_dir, pred_dir, task, out } => {
            let gold = pipeline::ingest(&text_dir, &ann_dir, exec)?.corpus;
            let predicted = pipeline::load_predicted_spans(&text_dir, &pred_dir, exec)?;
            let reports = pipeline::eval(&gold, &predicted, &task.tasks(), exec)?;
            print!("{}", metrics::format_table(&reports));
            match out {
                Some(path) => pipeline::write_file(&path, |w| metrics::write_reports(&reports, w)),
                None => Ok(()),
            }
        }
        Command::Report { files } => {
            for path in files {
                let content = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let reports = metrics::read_reports(&content).map_err(|e| e.in_stage("report", Some(path.clone())))?;
                print!("{}", metrics::format_table(&reports));
            }
            Ok(())
        }
        Command::Run {
            config,
            text_dir,
            ann_dir,
            predictions,
            strategy,
            weights,
            epsilon,
            stoplist,
            bins,
            out_dir,
        } => {
            let base = match &config {
                Some(path) => Some(RunConfig::load(path)?),
                None => None,
            };
            let missing = |what: &str| Error::Config(format!("{what} is required (flag or config file)"));
            let config = RunConfig {
                text_dir: text_dir
                    .or_else(|| base.as_ref().map(|c| c.text_dir.clone()))
                    .ok_or_else(|| missing("--text-dir"))?,
                ann_dir: ann_dir
                    .or_else(|| base.as_ref().map(|c| c.ann_dir.clone()))
                    .ok_or_else(|| missing("--ann-dir"))?,
                predictions: if predictions.is_empty() {
                    base.as_ref().map(|c| c.predictions.clone()).unwrap_or_default()
                } else {
                    predictions
                },
                strategy: strategy
                    .map(Strategy::from)
                    .or_else(|| base.as_ref().map(|c| c.strategy))
                    .ok_or_else(|| missing("--strategy"))?,
                weights: if weights.is_empty() {
                    base.as_ref().map(|c| c.weights.clone()).unwrap_or_default()
                } else {
                    weights
                },
                epsilon: epsilon
                    .or_else(|| base.as_ref().map(|c| c.epsilon))
                    .unwrap_or(DEFAULT_EPSILON),
                stoplist: stoplist.or_else(|| base.as_ref().and_then(|c| c.stoplist.clone())),
                num_bins: bins.or_else(|| base.as_ref().map(|c| c.num_bins)).unwrap_or(DEFAULT_BINS),
                output_dir: out_dir
                    .or_else(|| base.as_ref().map(|c| c.output_dir.clone()))
                    .ok_or_else(|| missing("--out-dir"))?,
            };
            let summary = pipeline::run_pipeline(&config, exec)?;
            print!("{}", metrics::format_table(&summary.metrics));
            eprintln!("artifacts written to {}", config.output_dir.display());
            Ok(())
        }
    }
}
