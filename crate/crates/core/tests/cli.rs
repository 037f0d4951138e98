mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use common::*;
use evoting::corpus::parse_document;
use evoting::metrics::{read_reports, MatchMode, Task};
use evoting::tokenize::{tag_corpus, Stoplist};
use evoting::{AnnotatedDocument, Execution};

fn evoting(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evoting"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = evoting(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    members: Vec<PathBuf>,
}

impl Fixture {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// Corpus plus two synthetic prediction files of different quality.
    fn new(corpus: &[AnnotatedDocument]) -> Fixture {
        let dir = TempDir::new().unwrap();
        write_corpus(corpus, &dir.path().join("text"), &dir.path().join("ann"));
        let tokens = tag_corpus(corpus, &Stoplist::default(), Execution::Sequential).0;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let members = [("good", 3.0), ("weak", 0.4)]
            .iter()
            .map(|(id, skill)| {
                let path = dir.path().join(format!("{id}.jsonl"));
                let mut buf = Vec::new();
                noisy_predictions(&mut rng, id, &tokens, *skill).write(&mut buf).unwrap();
                fs::write(&path, buf).unwrap();
                path
            })
            .collect();
        Fixture { dir, members }
    }

    fn toy() -> Fixture {
        Fixture::new(&[parse_document("toy", TOY_TEXT, TOY_ANN).unwrap()])
    }

    fn run_args(&self, out: &str, extra: &[&str]) -> Vec<String> {
        let mut args: Vec<String> = ["run", "--text-dir", s(&self.path("text")), "--ann-dir", s(&self.path("ann"))]
            .iter()
            .map(|x| x.to_string())
            .collect();
        for m in &self.members {
            args.extend(["--prediction".to_string(), s(m).to_string()]);
        }
        args.extend(["--out-dir".to_string(), s(&self.path(out)).to_string()]);
        args.extend(extra.iter().map(|x| x.to_string()));
        args
    }

    fn run(&self, out: &str, extra: &[&str]) -> Output {
        let args = self.run_args(out, extra);
        evoting(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }
}

#[test]
fn toy_run_writes_every_artifact() {
    let fx = Fixture::toy();
    let out = fx.run("out", &["--strategy", "soft"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for artifact in [
        "manifest.json",
        "violations.jsonl",
        "tokens.jsonl",
        "calibration.jsonl",
        "ensemble.jsonl",
        "decoded/toy.ann",
        "metrics.jsonl",
        "metrics.txt",
    ] {
        assert!(fx.path("out").join(artifact).is_file(), "missing {artifact}");
    }
    let reports = read_reports(&fs::read_to_string(fx.path("out/metrics.jsonl")).unwrap()).unwrap();
    assert_eq!(reports.len(), 4);
    let strict_events = reports
        .iter()
        .find(|r| r.task == Task::Events && r.mode == MatchMode::Strict)
        .unwrap();
    assert!((0.0..=1.0).contains(&strict_events.micro.f));

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(fx.path("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 4);
    assert!(String::from_utf8_lossy(&out.stdout).contains("== events / strict =="));
}

#[test]
fn weighted_without_reports_is_a_config_error() {
    let fx = Fixture::toy();
    let out = fx.run("out", &["--strategy", "weighted"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!fx.path("out").exists());

    let members: Vec<&str> = fx.members.iter().map(|m| s(m)).collect();
    let mut args = vec!["ensemble", "--strategy", "weighted", "--out", "/dev/null"];
    args.extend(&members);
    assert_eq!(evoting(&args).status.code(), Some(2));
}

#[test]
fn bad_probabilities_are_a_data_error() {
    let fx = Fixture::toy();
    let text = fs::read_to_string(&fx.members[0]).unwrap();
    let broken: String = text.replacen("\"p\":[", "\"p\":[0.5,", 2).lines().take(3).map(|l| format!("{l}\n")).collect();
    fs::write(&fx.members[0], broken).unwrap();
    let out = fx.run("out", &["--strategy", "soft"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn misaligned_member_is_a_data_error() {
    let fx = Fixture::toy();
    let text = fs::read_to_string(&fx.members[1]).unwrap();
    let truncated: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
    fs::write(&fx.members[1], truncated).unwrap();
    let out = fx.run("out", &["--strategy", "hard"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("align"));
}

#[test]
fn config_file_matches_flags() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let fx = Fixture::new(&random_corpus(&mut rng, 4, 20));
    ok(&fx.run_args("flags", &["--strategy", "hard"]).iter().map(String::as_str).collect::<Vec<_>>());

    // relative paths resolve against the config file
    let config = "text_dir = \"text\"\nann_dir = \"ann\"\npredictions = [\"good.jsonl\", \"weak.jsonl\"]\n\
                  strategy = \"hard\"\noutput_dir = \"from-config\"\n";
    fs::write(fx.path("run.toml"), config).unwrap();
    ok(&["run", "--config", s(&fx.path("run.toml"))]);
    assert_eq!(
        fs::read(fx.path("flags/metrics.jsonl")).unwrap(),
        fs::read(fx.path("from-config/metrics.jsonl")).unwrap()
    );

    fs::write(fx.path("bad.toml"), format!("{config}colour = \"blue\"\n")).unwrap();
    assert_eq!(evoting(&["run", "--config", s(&fx.path("bad.toml"))]).status.code(), Some(2));
}

#[test]
fn subcommands_compose_to_the_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fx = Fixture::new(&random_corpus(&mut rng, 5, 25));
    let p = |rel: &str| fx.path(rel);
    let members: Vec<&str> = fx.members.iter().map(|m| s(m)).collect();

    ok(&["ingest", "--text-dir", s(&p("text")), "--ann-dir", s(&p("ann")), "--out", s(&p("violations.jsonl"))]);
    assert_eq!(fs::read_to_string(p("violations.jsonl")).unwrap(), "");
    ok(&["tag", "--text-dir", s(&p("text")), "--ann-dir", s(&p("ann")), "--out", s(&p("tokens.jsonl"))]);

    let (tokens, calibration, fused) = (p("tokens.jsonl"), p("calibration.jsonl"), p("ensemble.jsonl"));
    let mut ece = vec!["ece", "--tokens", s(&tokens), "--out", s(&calibration)];
    ece.extend(&members);
    ok(&ece);

    let mut ensemble = vec![
        "ensemble",
        "--strategy",
        "weighted",
        "--tokens",
        s(&tokens),
        "--out",
        s(&fused),
        "--weights",
        s(&calibration),
        "--",
    ];
    ensemble.extend(&members);
    ok(&ensemble);

    ok(&["decode", "--input", s(&p("ensemble.jsonl")), "--text-dir", s(&p("text")), "--tokens", s(&p("tokens.jsonl")), "--out-dir", s(&p("decoded"))]);
    ok(&["eval", "--text-dir", s(&p("text")), "--ann-dir", s(&p("ann")), "--pred-dir", s(&p("decoded")), "--out", s(&p("metrics.jsonl"))]);
    let table = ok(&["report", s(&p("metrics.jsonl"))]);
    assert!(String::from_utf8_lossy(&table.stdout).contains("== medication / lenient =="));

    // the same run in one go
    let extra = ["--strategy", "weighted", "--weights", s(&calibration)];
    ok(&fx.run_args("run", &extra).iter().map(String::as_str).collect::<Vec<_>>());
    for artifact in ["tokens.jsonl", "calibration.jsonl", "ensemble.jsonl", "metrics.jsonl"] {
        assert_eq!(
            fs::read(p(artifact)).unwrap(),
            fs::read(p("run").join(artifact)).unwrap(),
            "{artifact} differs"
        );
    }
    for entry in fs::read_dir(p("decoded")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(p("decoded").join(&name)).unwrap(), fs::read(p("run/decoded").join(&name)).unwrap());
    }
}

#[test]
fn self_evaluation_through_the_cli() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let corpus: Vec<AnnotatedDocument> = (0..3)
        .map(|d| random_document(&mut rng, &format!("n{d}"), 30, true))
        .collect();
    let fx = Fixture::new(&corpus);
    let out = ok(&[
        "eval",
        "--text-dir",
        s(&fx.path("text")),
        "--ann-dir",
        s(&fx.path("ann")),
        "--pred-dir",
        s(&fx.path("ann")),
        "--out",
        s(&fx.path("m.jsonl")),
    ]);
    let reports = read_reports(&fs::read_to_string(fx.path("m.jsonl")).unwrap()).unwrap();
    for r in &reports {
        for v in [r.micro.precision, r.micro.recall, r.micro.f, r.macro_.precision, r.macro_.recall, r.macro_.f] {
            assert_eq!(v, 1.0);
        }
    }
    assert!(String::from_utf8_lossy(&out.stdout).contains("1.0000"));
}

#[test]
fn unknown_subcommand_and_missing_paths() {
    assert!(!evoting(&["frobnicate"]).status.success());
    let out = evoting(&["run", "--text-dir", "/nonexistent", "--ann-dir", "/nonexistent", "--prediction", "x", "--strategy", "soft", "--out-dir", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(2));
}
