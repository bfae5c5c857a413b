use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maat::scoring::read_scores_csv;

const TOY: &str = "\
window = 16
d_model = 8
n_heads = 2
e_layers = 1
block_size = 4
d_state = 4
d_conv = 3
epochs = 2
batch_size = 4
lr = 1e-3
seed = 3
synth.length = 200
synth.channels = 2
synth.seed = 11
synth.injections = 50:5:spike:8, 120:10:level-shift:6
anomaly_ratio = 5
";

fn maat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maat"))
        .args(args)
        .env("MAAT_RUN_ROOT", std::env::temp_dir().join("maat-cli-tests"))
        .output()
        .expect("spawn maat")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cfg: PathBuf,
}

impl Run {
    fn new() -> Run {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = root.join("run.cfg");
        let data = format!(
            "{TOY}data.train = {}\ndata.test = {}\n",
            root.join("data/train.csv").display(),
            root.join("data/test.csv").display()
        );
        fs::write(&cfg, data).unwrap();
        Run { _dir: dir, root, cfg }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn cmd(&self, sub: &str, out: &str, extra: &[&str]) -> Output {
        let out = self.path(out);
        let mut args = vec![
            sub,
            "--config",
            self.cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        maat(&args)
    }

    fn ok(&self, sub: &str, out: &str, extra: &[&str]) {
        let o = self.cmd(sub, out, extra);
        assert_eq!(code(&o), 0, "{sub} failed: {}", stderr(&o));
    }

    fn pipeline(&self, tag: &str) {
        self.ok("synth", "data", &[]);
        self.ok("train", tag, &[]);
        let ck = self.path(&format!("{tag}/checkpoint.bin"));
        self.ok("score", tag, &["--checkpoint", ck.to_str().unwrap()]);
    }
}

fn bytes(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn synth_is_deterministic_and_counts_labels() {
    let run = Run::new();
    run.ok("synth", "a", &[]);
    run.ok("synth", "b", &[]);
    for f in ["train.csv", "test.csv"] {
        assert_eq!(bytes(&run.path(&format!("a/{f}"))), bytes(&run.path(&format!("b/{f}"))));
    }
    let test = maat::data::load_csv(&run.path("a/test.csv"), true, Some("label")).unwrap();
    assert_eq!(test.len(), 200);
    assert_eq!(test.labels.unwrap().iter().filter(|&&v| v == 1).count(), 15);
}

#[test]
fn overlapping_injections_name_the_offender() {
    let run = Run::new();
    let o = run.cmd("synth", "x", &["--set", "synth.injections=10:5:spike:8, 12:3:spike:8"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("12:3:spike:8"), "{}", stderr(&o));
}

#[test]
fn missing_training_file_is_an_input_error() {
    let run = Run::new();
    let o = run.cmd("train", "x", &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("train.csv"), "{}", stderr(&o));
}

#[test]
fn bad_usage_exits_one_and_help_exits_zero() {
    assert_eq!(code(&maat(&["train", "--bogus"])), 1);
    assert_eq!(code(&maat(&["--help"])), 0);
    let run = Run::new();
    assert_eq!(code(&run.cmd("train", "x", &["--set", "colour=red"])), 1);
}

#[test]
fn train_and_score_are_deterministic() {
    let run = Run::new();
    run.pipeline("r1");
    run.pipeline("r2");
    for f in ["loss.csv", "checkpoint.bin", "scores.csv", "map_checks.csv"] {
        assert_eq!(
            bytes(&run.path(&format!("r1/{f}"))),
            bytes(&run.path(&format!("r2/{f}"))),
            "{f}"
        );
    }
    // 200 points, window 16: 12 complete windows.
    let rows = read_scores_csv(&run.path("r1/scores.csv")).unwrap();
    assert_eq!(rows.len(), 192);
    assert!(rows.iter().all(|r| r.score >= 0.0 && r.adjusted_pred.is_some()));
}

#[test]
fn score_rejects_channel_mismatch() {
    let run = Run::new();
    run.pipeline("r");
    let wide = run.cmd("synth", "wide", &["--set", "synth.channels=3"]);
    assert_eq!(code(&wide), 0);
    let ck = run.path("r/checkpoint.bin");
    let test = format!("data.test={}", run.path("wide/test.csv").display());
    let o = run.cmd("score", "r", &["--checkpoint", ck.to_str().unwrap(), "--set", &test]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("d = 2"), "{}", stderr(&o));
}

fn write_scores(path: &Path, truth: &[u8], pred: impl Fn(usize) -> u8) {
    let mut text = String::from("position,score,threshold,raw_pred,adjusted_pred\n");
    for (i, &t) in truth.iter().enumerate() {
        text.push_str(&format!("{i},{},0.5,{},\n", t as f64 * 0.5 + i as f64 * 1e-3, pred(i)));
    }
    fs::write(path, text).unwrap();
}

fn metrics(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn eval_perfect_and_empty_predictions() {
    let run = Run::new();
    run.ok("synth", "data", &[]);
    let truth_path = run.path("data/test.csv");
    let truth = maat::data::load_csv(&truth_path, true, Some("label"))
        .unwrap()
        .labels
        .unwrap();
    let scores = run.path("perfect.csv");
    write_scores(&scores, &truth, |i| truth[i]);
    run.ok(
        "eval",
        "perfect",
        &[
            "--scores",
            scores.to_str().unwrap(),
            "--truth",
            truth_path.to_str().unwrap(),
            "--curves",
        ],
    );
    let m = metrics(&run.path("perfect/metrics_raw.json"));
    for key in ["precision", "recall", "f1", "accuracy"] {
        assert_eq!(m[key].as_f64(), Some(1.0), "{key}");
    }
    assert!(run.path("perfect/curves.csv").exists());

    let scores = run.path("empty.csv");
    write_scores(&scores, &truth, |_| 0);
    run.ok(
        "eval",
        "empty",
        &[
            "--scores",
            scores.to_str().unwrap(),
            "--truth",
            truth_path.to_str().unwrap(),
        ],
    );
    let m = metrics(&run.path("empty/metrics_raw.json"));
    assert_eq!(m["precision"].as_f64(), Some(0.0));
    assert_eq!(m["f1"].as_f64(), Some(0.0));
    assert!(m["aff_p"].is_null());
}

#[test]
fn loss_diff_matches_direct_computation() {
    let run = Run::new();
    run.ok("synth", "data", &[]);
    run.ok("train", "at", &["--set", "seed=4"]);
    run.ok("train", "maat", &[]);
    let (a, b) = (run.path("at/loss.csv"), run.path("maat/loss.csv"));
    run.ok(
        "loss-diff",
        "diff",
        &["--reference", a.to_str().unwrap(), "--model", b.to_str().unwrap()],
    );
    let l_at = maat::cli::step_losses(&a).unwrap();
    let l_maat = maat::cli::step_losses(&b).unwrap();
    let text = fs::read_to_string(run.path("diff/loss_diff.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("batch,L_AT,L_MAAT,delta"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), l_at.len());
    for (i, r) in rows.iter().enumerate() {
        assert!((r[3] - (l_at[i].ln() - l_maat[i].ln())).abs() < 1e-12);
    }
}
