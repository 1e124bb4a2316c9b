use std::path::Path;
use std::process::{Command, Output};

fn tritemp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tritemp")).args(args).output().unwrap()
}

fn synth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synth-or")).args(args).output().unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Two 5-frame takes: take_1 for training, take_2 for validation.
fn corpus(dir: &Path) -> std::path::PathBuf {
    let spec = serde_json::json!({
        "takes": [
            {"name": "take_1", "spec": {"num_frames": 5, "seed": 3}},
            {"name": "take_2", "spec": {"num_frames": 5, "seed": 4}}
        ],
        "splits": {"train": ["take_1"], "val": ["take_2"]}
    });
    let spec_path = dir.join("spec.json");
    std::fs::write(&spec_path, spec.to_string()).unwrap();
    let root = dir.join("data");
    ok(&synth(&["generate", "--spec", s(&spec_path), "--out", s(&root)]));
    root
}

#[test]
fn generate_train_eval_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let root = corpus(tmp.path());
    assert!(root.join("splits.json").exists());
    assert!(root.join("take_1").is_dir());

    let run = tmp.path().join("run");
    let root_set = format!("dataset.root={}", s(&root));
    ok(&tritemp(&[
        "train", "--profile", "overfit", "--set", &root_set, "--set", "train.max_steps=2", "--set", "train.batch_size=1",
        "--out", s(&run),
    ]));
    let log = std::fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(run.join("e1.ckpt").exists());

    // evaluate the checkpoint with the config the run saved
    let cfg = run.join("config.json");
    let report = tmp.path().join("eval/report.json");
    let dump = tmp.path().join("eval/preds.jsonl");
    let o = tritemp(&[
        "eval", "--config", s(&cfg), "--ckpt", s(&run.join("e1.ckpt")), "--dump", s(&dump), "--report", s(&report),
    ]);
    ok(&o);
    assert!(!String::from_utf8_lossy(&o.stderr).contains("warning"));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().last().unwrap().starts_with("Avg"));
    for ext in ["json", "csv", "png"] {
        assert!(report.with_extension(ext).exists(), "missing report .{ext}");
    }
    let first: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();

    // the dump scored offline gives the same report
    let report2 = tmp.path().join("offline/report.json");
    ok(&tritemp(&["eval", "--pred", s(&dump), "--gt", s(&root), "--report", s(&report2)]));
    let second: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report2).unwrap()).unwrap();
    assert_eq!(first, second);

    // a different config only warns
    let o = tritemp(&[
        "eval", "--config", s(&cfg), "--set", "eval.dump_min_score=0.2", "--ckpt", s(&run.join("e1.ckpt")), "--report",
        s(&tmp.path().join("eval2/report.json")),
    ]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning: config hash"));
}

#[test]
fn ablate_embeddings_writes_two_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let root = corpus(tmp.path());
    let out = tmp.path().join("abl");
    let root_set = format!("dataset.root={}", s(&root));
    let o = tritemp(&[
        "ablate", "--axis", "embeddings", "--profile", "overfit", "--set", &root_set, "--set", "train.max_steps=1",
        "--set", "train.batch_size=1", "--out", s(&out),
    ]);
    ok(&o);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,precision,recall,f1");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("none,") && lines[2].starts_with("pseudo,"));
}

#[test]
fn unknown_axis_and_bad_overrides_fail() {
    let o = tritemp(&["ablate", "--axis", "sizes", "--profile", "desk"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown ablation axis"));
    let o = tritemp(&["train", "--profile", "desk", "--set", "model.nope=3"]);
    assert!(!o.status.success());
    let o = tritemp(&["eval", "--profile", "desk"]);
    assert!(!o.status.success());
}

#[test]
fn embed_pseudo_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let tax = tmp.path().join("tax.json");
    let labels: Vec<String> = (0..12).map(|i| format!("role_{i:02}")).collect();
    std::fs::write(&tax, serde_json::json!({ "entities": labels }).to_string()).unwrap();
    let a = tmp.path().join("a.txt");
    let b = tmp.path().join("b.txt");
    ok(&tritemp(&["embed-pseudo", "--taxonomy", s(&tax), "--out", s(&a), "--seed", "7"]));
    ok(&tritemp(&["embed-pseudo", "--taxonomy", s(&tax), "--out", s(&b), "--seed", "7"]));
    let ta = std::fs::read(&a).unwrap();
    assert_eq!(ta, std::fs::read(&b).unwrap());
    let c = tmp.path().join("c.txt");
    ok(&tritemp(&["embed-pseudo", "--taxonomy", s(&tax), "--out", s(&c), "--seed", "8"]));
    assert_ne!(ta, std::fs::read(&c).unwrap());
}

#[test]
fn show_config_round_trips_through_config_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tritemp(&["show-config", "--profile", "desk", "--set", "optimizer.lr=0.01"]);
    ok(&o);
    let path = tmp.path().join("desk.json");
    std::fs::write(&path, &o.stdout).unwrap();
    let again = tritemp(&["show-config", "--config", s(&path)]);
    ok(&again);
    assert_eq!(o.stdout, again.stdout);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["optimizer"]["lr"], 0.01);
}
