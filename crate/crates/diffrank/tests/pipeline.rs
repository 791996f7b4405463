use std::path::{Path, PathBuf};
use std::process::Command;

use diffrank::eval::BenchmarkRun;
use diffrank::pipeline::{EvalReport, EvalStage, Pipeline, PipelineError, Stage};

fn demo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("demo")
}

/// Writes a config next to copies of the demo inputs and returns its path.
fn workspace(dir: &Path, extra: &str) -> PathBuf {
    for f in ["questions.jsonl", "rewrites.jsonl"] {
        std::fs::copy(demo().join(f), dir.join(f)).unwrap();
    }
    let cfg = format!(
        r#"
questions = "questions.jsonl"
rewrites = "rewrites.jsonl"
mock = true
[collect]
samples = 2
students = [{{ id = "s1", mock_ability = 1.0 }}, {{ id = "s2", mock_ability = -0.5 }}, {{ id = "s3" }}]
[embed]
dim = 16
{extra}
"#
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

fn open(path: &Path) -> Result<Pipeline, PipelineError> {
    Pipeline::from_file(path, Some(path.parent().unwrap().join("out")), None, false)
}

#[test]
fn unknown_config_keys_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = workspace(dir.path(), "[irt]\nstep = 10\n");
    let err = open(&path).err().unwrap();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn invalid_values_are_config_errors() {
    for extra in ["[matrix]\nholdout_fraction = 1.5\n", "[gateway]\nmax_parallel = 0\n", "[ranker]\nfolds = 1\n"] {
        let dir = tempfile::tempdir().unwrap();
        let err = open(&workspace(dir.path(), extra)).err().unwrap();
        assert_eq!(err.exit_code(), 2, "{extra}: {err}");
    }
}

#[test]
fn stages_without_their_inputs_name_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    let p = open(&workspace(dir.path(), "")).unwrap();
    for (stage, producer) in [
        (Stage::Matrix, "collect"),
        (Stage::IrtFit, "matrix"),
        (Stage::RankerTrain, "irt-fit"),
        (Stage::Eval, "collect"),
    ] {
        let err = p.run(stage).err().unwrap();
        assert_eq!(err.exit_code(), 3, "{err}");
        assert!(err.to_string().contains(producer), "{err}");
    }
}

#[test]
fn rewrites_of_unknown_questions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = workspace(dir.path(), "");
    std::fs::write(
        dir.path().join("rewrites.jsonl"),
        r#"{"id":"x-rw","original_id":"nope","text":"t","answer":"1"}"#,
    )
    .unwrap();
    let err = open(&path).unwrap().run(Stage::Collect).err().unwrap();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn missing_credentials_are_backend_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = workspace(
        dir.path(),
        "[gateway]\nendpoint_url = \"http://127.0.0.1:9\"\nauth_token_env_var = \"DIFFRANK_PIPELINE_UNSET_TOKEN\"\n",
    );
    std::fs::write(&path, std::fs::read_to_string(&path).unwrap().replace("mock = true", "mock = false")).unwrap();
    let err = open(&path).unwrap().run(Stage::Embed).err().unwrap();
    assert_eq!(err.exit_code(), 4, "{err}");
    assert!(err.to_string().contains("DIFFRANK_PIPELINE_UNSET_TOKEN"), "{err}");
}

#[test]
fn rerunning_collect_on_a_warm_cache_is_free_and_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = workspace(dir.path(), "");
    let first = open(&path).unwrap();
    let m1 = first.run(Stage::Collect).unwrap();
    assert!(first.backend_calls() > 0);
    let bytes = std::fs::read(first.artifact("runs.jsonl")).unwrap();
    let second = open(&path).unwrap();
    let m2 = second.run(Stage::Collect).unwrap();
    assert_eq!(second.backend_calls(), 0);
    assert_eq!(m1, m2);
    assert_eq!(std::fs::read(second.artifact("runs.jsonl")).unwrap(), bytes);
}

#[test]
fn seed_override_changes_the_holdout() {
    let dir = tempfile::tempdir().unwrap();
    let path = workspace(dir.path(), "");
    let run = |seed: u64| {
        let p = Pipeline::from_file(&path, Some(dir.path().join(format!("out{seed}"))), Some(seed), false).unwrap();
        p.run(Stage::Collect).unwrap();
        p.run(Stage::Matrix).unwrap();
        std::fs::read_to_string(p.artifact("matrix.txt")).unwrap()
    };
    assert_ne!(run(1), run(2));
}

fn run_of(bench: &str, model: &str, correct: usize, total: usize) -> BenchmarkRun {
    let mut r = BenchmarkRun::new(bench, model);
    for i in 0..total {
        r.outcomes.insert(format!("q{i:02}"), vec![u8::from(i < correct)]);
    }
    r
}

#[test]
fn report_formats_drop_rows_to_two_decimals() {
    let runs = vec![run_of("original", "GPT-3.5-turbo", 3, 30), run_of("perturbed", "GPT-3.5-turbo", 1, 30)];
    let report = EvalReport::from_runs(&runs, &EvalStage::default()).unwrap();
    let md = report.to_markdown();
    assert!(md.contains("| GPT-3.5-turbo | 10.00 | 3.33 | 66.70 |"), "{md}");
    assert_eq!(report.mcnemar[0].b, 2);
    assert_eq!(report.mcnemar[0].c, 0);
}

#[test]
fn zero_original_accuracy_reports_no_drop_rate() {
    let runs = vec![run_of("original", "m", 0, 10), run_of("perturbed", "m", 0, 10)];
    let report = EvalReport::from_runs(&runs, &EvalStage::default()).unwrap();
    assert_eq!(report.pdr[0].pdr, None);
    assert!(report.to_markdown().contains("| m | 0.00 | 0.00 | n/a |"));
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_diffrank");
    let dir = tempfile::tempdir().unwrap();
    let path = workspace(dir.path(), "");
    let code = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    let cfg = path.to_str().unwrap();
    let out = dir.path().join("cli-out");
    let out = out.to_str().unwrap();
    assert_eq!(code(&["--config", cfg, "--stage", "bogus"]), Some(2));
    assert_eq!(code(&["--config", "/nonexistent.toml"]), Some(2));
    assert_eq!(code(&["--config", cfg, "--out", out, "--stage", "matrix"]), Some(3));
    assert_eq!(code(&["--config", cfg, "--out", out, "--stage", "collect", "--mock"]), Some(0));
    assert_eq!(code(&["--config", cfg, "--out", out, "--stage", "matrix"]), Some(0));
    assert!(Path::new(out).join("matrix.manifest.json").exists());
}
