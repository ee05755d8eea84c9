use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn stgmfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stgmfm"))
        .args(args)
        .output()
        .expect("spawn stgmfm")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            let bytes = std::fs::read(&path).unwrap();
            (PathBuf::from(path.file_name().unwrap()), bytes)
        })
        .collect();
    out.sort();
    out
}

const SMALL: &str = r#"{
  "synth.n_subjects": 19, "synth.n_sessions": 2, "synth.trials_per_class": 1,
  "synth.n_channels": 4, "synth.n_samples": 128,
  "model.n_channels": 4, "model.n_samples": 128, "model.window_len": 32, "model.stride": 32,
  "model.d": 4, "model.k_s": 1, "model.k_t": 1, "model.mfm.width": 4,
  "train.epochs": 1, "train.batch_size": 16, "train.val_fraction": 0.0, "train.plv_top_k": 2
}"#;

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = stgmfm(&["synth", "--seed", "7", "--set", "synth.n_subjects=2", "--out", p(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let fa = files(&a);
    assert!(fa.iter().any(|(n, _)| n == Path::new("manifest.json")));
    assert_eq!(fa, files(&b));
}

#[test]
fn protocol_writes_one_row_per_subject() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("run");
    let o = stgmfm(&[
        "protocol",
        "--config",
        p(&cfg),
        "--protocol",
        "cross-subject",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "fold,subject,acc,kappa,f1");
    assert_eq!(lines.len(), 1 + 19 + 1);
    assert!(lines[20].starts_with("AVG±STD,,"));
    let subjects: Vec<&str> = lines[1..20].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    let want: Vec<String> = (0..19).map(|s| s.to_string()).collect();
    assert_eq!(subjects, want);
}

#[test]
fn gradcheck_succeeds() {
    let o = stgmfm(&["gradcheck", "--cases", "30"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("model max_rel_error="));
    assert!(text.contains("primitives cases=30"));
}

#[test]
fn errors_are_one_machine_readable_line() {
    let o = stgmfm(&["train", "--set", "model.nope=1"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[config]: "), "{err}");

    let o = stgmfm(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8(o.stderr).unwrap().starts_with("error[usage]: "));

    let o = stgmfm(&["finetune", "--out", "/nonexistent/x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_then_eval_and_graph_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(
        &cfg,
        SMALL.replace("\"synth.n_subjects\": 19", "\"synth.n_subjects\": 3"),
    )
    .unwrap();
    let run = dir.path().join("train");
    let o = stgmfm(&["train", "--config", p(&cfg), "--out", p(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["history.jsonl", "metrics.json", "config.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let ckpt = run.join("checkpoint");
    let ev = dir.path().join("eval");
    let o = stgmfm(&["eval", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--out", p(&ev)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let gd = dir.path().join("graphs");
    let o = stgmfm(&[
        "graph-dump",
        "--config",
        p(&cfg),
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&gd),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let names: Vec<String> = files(&gd)
        .into_iter()
        .map(|(n, _)| n.to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().any(|n| n.ends_with(".prior.csv")));
    assert!(names.iter().any(|n| n.ends_with(".learned.csv")));
}
