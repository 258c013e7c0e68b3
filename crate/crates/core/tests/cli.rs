//! End-to-end checks of the `praline` binary on a small synthetic benchmark.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use praline::app::{self, Run, Session};
use praline::corpus::load_conversations;
use praline::evaluator::EvalReport;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_praline"));
    c.env_remove("PRALINE_SEED");
    c
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SMALL_MODEL: &str = "\
[hyperparameters]
d_model = 16
n_heads = 2
n_layers = 1
ff_dim = 32
batch_size = 8
learning_rate = 0.001

[embedding]
dim = 16
";

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn data(&self) -> PathBuf {
        self.root.join("bench")
    }

    fn config(&self) -> PathBuf {
        self.root.join("small.toml")
    }

    fn run_dir(&self) -> PathBuf {
        self.root.join("run")
    }
}

/// One benchmark and one trained, evaluated run shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let f = Fixture { _dir: dir, root };
        run_ok(bin().args(["synth", "--conversations", "40", "--entities", "40", "--out"]).arg(f.data()));
        fs::write(f.config(), SMALL_MODEL).unwrap();
        run_ok(
            bin()
                .arg("train")
                .arg("--config")
                .arg(f.config())
                .arg("--data")
                .arg(f.data())
                .arg("--out")
                .arg(f.run_dir())
                .args(["--epochs", "2"]),
        );
        run_ok(bin().arg("eval").arg("--run").arg(f.run_dir()));
        f
    })
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synth_writes_all_files_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        run_ok(bin().args(["synth", "--conversations", "20", "--seed", "3", "--out"]).arg(dir.path().join(name)));
    }
    for file in ["triples.tsv", "labels.tsv", "conversations.jsonl", "domains.txt"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        assert!(!a.is_empty(), "{file} empty");
        assert_eq!(a, fs::read(dir.path().join("b").join(file)).unwrap(), "{file} differs");
    }
}

#[test]
fn synth_corruption_flag_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    run_ok(bin().args(["synth", "--conversations", "50", "--corruption-rate", "0.2", "--out"]).arg(&out));
    let convs = load_conversations(&out.join("conversations.jsonl")).unwrap();
    let turns: usize = convs.iter().map(|c| c.turns.len()).sum();
    let corrupted = convs.iter().flat_map(|c| &c.turns).filter(|t| t.positives().is_empty()).count();
    assert_eq!(corrupted, (0.2 * turns as f64).round() as usize);
}

#[test]
fn missing_data_file_exits_2_and_names_it() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bench");
    fs::create_dir_all(&data).unwrap();
    for file in ["triples.tsv", "labels.tsv", "domains.txt"] {
        fs::copy(f.data().join(file), data.join(file)).unwrap();
    }
    let out = bin().arg("train").arg("--data").arg(&data).arg("--out").arg(dir.path().join("run")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("conversations.jsonl"));
}

#[test]
fn usage_errors_exit_2() {
    let out = bin().args(["train", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let f = fixture();
    let out = bin()
        .arg("train")
        .arg("--data")
        .arg(f.data())
        .args(["--out", "/nonexistent/x", "--ablation", "w/o-everything"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_checkpoint_and_effective_config() {
    let f = fixture();
    let run = f.run_dir();
    for file in ["config.toml", "tokenizer.json", "train_log.csv", "summary.json", "checkpoints/best.json", "checkpoints/best.bin", "checkpoints/last.json"] {
        assert!(run.join(file).is_file(), "{file} missing");
    }
    let log = app::read_train_log(&run).unwrap();
    assert_eq!(log.records.len(), 2);
}

#[test]
fn ablation_flag_sets_use_domain_false() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("wod");
    run_ok(
        bin()
            .arg("train")
            .arg("--config")
            .arg(f.config())
            .arg("--data")
            .arg(f.data())
            .arg("--out")
            .arg(&out)
            .args(["--epochs", "1", "--ablation", "w/o-domain"]),
    );
    let text = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(text.contains("use_domain = false"), "{text}");
}

#[test]
fn effective_config_reproduces_the_run() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("again");
    run_ok(bin().arg("train").arg("--config").arg(f.run_dir().join("config.toml")).arg("--out").arg(&again));
    for file in ["train_log.csv", "checkpoints/best.bin"] {
        assert_eq!(fs::read(f.run_dir().join(file)).unwrap(), fs::read(again.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn seed_environment_variable_overrides_config() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    run_ok(
        bin()
            .env("PRALINE_SEED", "99")
            .arg("train")
            .arg("--config")
            .arg(f.config())
            .arg("--data")
            .arg(f.data())
            .arg("--out")
            .arg(&out)
            .args(["--epochs", "1"]),
    );
    let text = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(text.lines().any(|l| l == "seed = 99"), "{text}");
}

#[test]
fn eval_report_parses_and_covers_every_domain() {
    let f = fixture();
    let text = fs::read_to_string(f.run_dir().join("report.json")).unwrap();
    let report: EvalReport = serde_json::from_str(&text).unwrap();
    let domains = fs::read_to_string(f.data().join("domains.txt")).unwrap();
    let names: Vec<&str> = domains.lines().filter(|l| !l.trim().is_empty()).collect();
    let rows: Vec<&str> = report.per_domain.iter().map(|d| d.domain.as_str()).collect();
    assert_eq!(rows, names);
    assert!(report.overall.turns > 0);
    let baseline: EvalReport = serde_json::from_str(&fs::read_to_string(f.run_dir().join("baseline.json")).unwrap()).unwrap();
    assert!(baseline.overall.mrr > 0.0 && baseline.overall.mrr <= 1.0);
    assert!(fs::read_to_string(f.run_dir().join("rankings.jsonl")).unwrap().lines().count() == report.overall.turns);
}

#[test]
fn eval_rerun_is_byte_identical() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    run_ok(bin().arg("eval").arg("--run").arg(f.run_dir()).arg("--out").arg(dir.path()));
    for file in ["report.json", "rankings.jsonl", "baseline.json"] {
        assert_eq!(fs::read(f.run_dir().join(file)).unwrap(), fs::read(dir.path().join(file)).unwrap(), "{file}");
    }
}

fn first_turn_questions(data: &Path) -> Vec<String> {
    load_conversations(&data.join("conversations.jsonl"))
        .unwrap()
        .iter()
        .map(|c| c.turns[0].question.clone())
        .collect()
}

fn ask(f: &Fixture, input: &str) -> String {
    let mut child = bin()
        .arg("ask")
        .arg("--run")
        .arg(f.run_dir())
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    stdout(&out)
}

#[test]
fn scripted_session_prints_three_blocks() {
    let f = fixture();
    let qs = first_turn_questions(&f.data());
    let text = ask(f, &format!("{}\nwhat is the genre of it ?\n{}\n", qs[0], qs[1]));
    assert_eq!(text.matches("response: ").count(), 3, "{text}");
    assert_eq!(text.matches("domain: ").count(), 3);
}

#[test]
fn unknown_entities_skip_the_turn() {
    let f = fixture();
    let text = ask(f, "who wrote nothing at all ?\n:reset\n");
    assert!(text.contains("no context entities found"), "{text}");
    assert!(text.contains("history cleared"));
    assert!(!text.contains("response: "));
}

#[test]
fn session_feeds_generated_responses_forward_and_resets() {
    let f = fixture();
    let run = Run::open(&f.run_dir(), "best").unwrap();
    let mut session = Session::new(&run).unwrap();
    let qs = first_turn_questions(&f.data());
    let first = session.ask(&qs[0], None).unwrap();
    assert!(session.ask("who wrote nothing known ?", Some(&[])).is_err());
    assert_eq!(session.history().len(), 1);
    let second = session.ask("what is the genre of it ?", None).unwrap();
    let response_ids = run.prepared.tokenizer.encode(&first.output.response);
    assert!(
        second.encoder_input.windows(response_ids.len()).any(|w| w == response_ids.as_slice()),
        "first response missing from second input"
    );
    session.reset();
    assert!(session.history().is_empty());
    assert!(session.ask("what is the genre of it ?", None).is_err());
}

#[test]
fn replay_uses_gold_context() {
    let f = fixture();
    let id = load_conversations(&f.data().join("conversations.jsonl")).unwrap()[0].id.clone();
    let out = run_ok(bin().arg("ask").arg("--run").arg(f.run_dir()).args(["--replay", &id]));
    assert_eq!(stdout(&out).matches("response: ").count(), 3);
}

#[test]
fn paths_lists_labelled_candidates() {
    let f = fixture();
    let convs = load_conversations(&f.data().join("conversations.jsonl")).unwrap();
    let turn = &convs[0].turns[0];
    let out = run_ok(bin().arg("paths").arg("--data").arg(f.data()).args(["--conversation", &convs[0].id]));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), turn.positives().len() + turn.negatives().len());
    assert_eq!(lines.iter().filter(|l| l.starts_with('+')).count(), turn.positives().len());
    let out = run_ok(bin().arg("paths").arg("--data").arg(f.data()).args(["--entities", &turn.context_entities[0], "--hops", "1"]));
    assert!(stdout(&out).lines().all(|l| l.starts_with('?')));
}

#[test]
fn report_compares_runs_and_plots() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let second = dir.path().join("copy");
    fs::create_dir_all(&second).unwrap();
    for file in ["report.json", "config.toml"] {
        fs::copy(f.run_dir().join(file), second.join(file)).unwrap();
    }
    let png = dir.path().join("hits.png");
    let out = run_ok(bin().arg("report").arg(f.run_dir()).arg(&second).arg("--plot").arg(&png));
    let text = stdout(&out);
    let table: Vec<&str> = text.lines().take_while(|l| !l.is_empty()).collect();
    assert_eq!(table.len(), 3, "{text}");
    assert!(table[1].contains("full"));
    assert_eq!(&fs::read(&png).unwrap()[1..4], b"PNG");

    let out = bin().arg("report").arg(dir.path().join("nope")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_with_relative_paths_reopens_from_elsewhere() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    run_ok(bin().current_dir(dir.path()).args(["synth", "--conversations", "20", "--entities", "30", "--out", "bench"]));
    fs::write(dir.path().join("small.toml"), SMALL_MODEL).unwrap();
    run_ok(bin().current_dir(dir.path()).args([
        "train", "--config", "small.toml", "--data", "bench", "--out", "run", "--epochs", "1",
    ]));
    // Evaluate from an unrelated working directory.
    run_ok(bin().current_dir(&f.root).arg("eval").arg("--run").arg(dir.path().join("run")));
    assert!(dir.path().join("run").join("report.json").is_file());
}
