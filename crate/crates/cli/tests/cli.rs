use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn gfcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gfcn")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes a small synthetic train/valid pair and a run config for a
/// narrow 16-px model.
fn tiny_setup(dir: &Path, epochs: usize) -> std::path::PathBuf {
    let data = dir.join("data");
    for (split, count, seed) in [("train", "6", "1"), ("valid", "2", "2")] {
        let o = gfcn(&[
            "synth", "--symbols", "abc", "--count", count, "--seed", seed, "--split", split, "--out", p(&data),
            "--min-len", "2", "--max-len", "3",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let cfg = dir.join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            r#"
[architecture]
input_height = 16
convblock_filters = [2, 2]
gateblock_filters = [2, 2, 2]
ending_gate_count = 1
ending_channels = 4
dropout_p = 0.0
noise_std = 0.0

[training]
learning_rate = 0.001
max_epochs = {epochs}
seed = 5

[data]
charset = "data/charset.txt"
train = "data/train.tsv"
valid = "data/valid.tsv"
"#
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn analyze_reports_field_and_ending_delta() {
    let o = gfcn(&["analyze"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("receptive field (v, h): (196, 240)"), "{text}");
    assert!(text.contains("133888"));
    let o = gfcn(&["analyze", "--tsv"]);
    let tsv = stdout(&o);
    let total = tsv.lines().find(|l| l.starts_with("total\t")).unwrap();
    let cols: Vec<&str> = total.split('\t').collect();
    assert_eq!((cols[3], cols[4]), ("196", "240"));
}

#[test]
fn missing_charset_exits_2_naming_path() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[data]\ncharset = \"nope/charset.txt\"\ntrain = \"t.tsv\"\nvalid = \"v.tsv\"\n").unwrap();
    let o = gfcn(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope/charset.txt"), "{}", stderr(&o));
    assert!(!dir.path().join("run").exists(), "no partial run directory");
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[training]\nlearning_rat = 0.1\n").unwrap();
    let o = gfcn(&["analyze", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
}

#[test]
fn resume_on_fresh_directory_is_refused() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_setup(dir.path(), 1);
    let o = gfcn(&["train", "--config", p(&cfg), "--resume", "--out", p(&dir.path().join("fresh"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nothing to resume"), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_and_missing_image_exit_2() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"NOTACKPT\x01\x00\x00\x00").unwrap();
    let o = gfcn(&["predict", "--checkpoint", p(&bad), "x.pgm"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
    let o = gfcn(&["eval", "--checkpoint", p(&bad), "--manifest", "m.tsv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_is_reproducible_and_empty_split_is_valid() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = gfcn(&["synth", "--symbols", "ab c", "--count", "3", "--seed", "9", "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["train.tsv", "charset.txt", "images/train_00000.pgm", "images/train_00002.pgm"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let o = gfcn(&["synth", "--symbols", "ab", "--count", "0", "--split", "empty", "--out", p(&a)]);
    assert!(o.status.success());
    let m = gfcn::data::DatasetManifest::load(&a.join("empty.tsv")).unwrap();
    assert!(m.records.is_empty());
    let o = gfcn(&["synth", "--symbols", "aQ", "--count", "1", "--out", p(&dir.path().join("c"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tiny_run_end_to_end() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_setup(dir.path(), 2);
    let run = dir.path().join("run");
    let o = gfcn(&["train", "--config", p(&cfg), "--out", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["best.ckpt", "last.ckpt", "history.jsonl", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(run.join("history.jsonl")).unwrap().lines().count(), 2);

    // a finished run directory is never reused
    let o = gfcn(&["train", "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(o.status.code(), Some(2));

    let report = dir.path().join("report.txt");
    let best = run.join("best.ckpt");
    let manifest = dir.path().join("data/valid.tsv");
    let o = gfcn(&["eval", "--checkpoint", p(&best), "--manifest", p(&manifest), "--out", p(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), std::fs::read_to_string(&report).unwrap());
    assert!(report.with_extension("tsv").exists());

    let gray = dir.path().join("gray.pgm");
    let img = gfcn::data::GrayImage { width: 40, height: 16, maxval: 255, pixels: vec![128; 640] };
    gfcn::data::write_pgm(&gray, &img).unwrap();
    let first = gfcn(&["predict", "--checkpoint", p(&best), p(&gray)]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert_eq!(stdout(&first), stdout(&gfcn(&["predict", "--checkpoint", p(&best), p(&gray)])));
    let o = gfcn(&["predict", "--checkpoint", p(&best), p(&dir.path().join("missing.pgm"))]);
    assert_eq!(o.status.code(), Some(2));

    // a completed run stays as it is
    let o = gfcn(&["train", "--config", p(&cfg), "--resume", "--out", p(&run)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("complete"), "{}", stderr(&o));
}

#[test]
fn interrupted_run_resumes_to_its_budget() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_setup(dir.path(), 1);
    let done = dir.path().join("done");
    assert!(gfcn(&["train", "--config", p(&cfg), "--out", p(&done)]).status.success());

    // the one-epoch state of a three-epoch run, as if it had been stopped
    let mut ckpt = gfcn::train::Checkpoint::load(&done.join("last.ckpt")).unwrap();
    ckpt.header.training.max_epochs = 3;
    let cut = dir.path().join("cut");
    std::fs::create_dir_all(&cut).unwrap();
    ckpt.save(&cut.join("last.ckpt")).unwrap();
    std::fs::copy(done.join("history.jsonl"), cut.join("history.jsonl")).unwrap();

    let longer = std::fs::read_to_string(&cfg).unwrap().replace("max_epochs = 1", "max_epochs = 3");
    std::fs::write(&cfg, longer).unwrap();
    let o = gfcn(&["train", "--config", p(&cfg), "--resume", "--out", p(&cut)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let history = std::fs::read_to_string(cut.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 3);
    let first_line = std::fs::read_to_string(done.join("history.jsonl")).unwrap();
    assert!(history.starts_with(&first_line));
}

#[test]
fn eval_rejects_foreign_charset() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_setup(dir.path(), 1);
    let run = dir.path().join("run");
    assert!(gfcn(&["train", "--config", p(&cfg), "--out", p(&run)]).status.success());
    let other = dir.path().join("other");
    assert!(gfcn(&["synth", "--symbols", "cba", "--count", "1", "--out", p(&other), "--min-len", "2", "--max-len", "2"])
        .status
        .success());
    let o = gfcn(&["eval", "--checkpoint", p(&run.join("best.ckpt")), "--manifest", p(&other.join("train.tsv"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("charset"), "{}", stderr(&o));
}

#[test]
fn compare_norms_grid_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_setup(dir.path(), 1);
    let grid = |name: &str| {
        let out = dir.path().join(name);
        let o = gfcn(&["compare-norms", "--config", p(&cfg), "--checkpoints", "1,2", "--out", p(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let tsv = std::fs::read_to_string(out.join("compare_norms.tsv")).unwrap();
        // wall-clock column dropped
        tsv.lines().map(|l| l.rsplit_once('\t').unwrap().0.to_string()).collect::<Vec<_>>()
    };
    let first = grid("a");
    assert_eq!(first.len(), 5);
    assert_eq!(first[0], "norm\tcer_1\tcer_2");
    let kinds: Vec<&str> = first[1..].iter().map(|l| l.split('\t').next().unwrap()).collect();
    assert!(kinds.contains(&"batch") && kinds.contains(&"instance"), "{kinds:?}");
    assert_eq!(first, grid("b"));
}
