use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_hsi-fsl");

const TINY: &str = "\
synth_classes = 3
synth_bands_source = 8
synth_bands_target = 10
synth_height = 20
synth_width = 20
";

const TINY_RUN: &[&str] = &[
    "--set",
    "mapped_dim=5",
    "--set",
    "branch_width=6",
    "--set",
    "patch_size=5",
    "--set",
    "min_class=20",
    "--set",
    "source_per_class=20",
    "--set",
    "target_labeled=3",
    "--set",
    "augment_to=20",
    "--set",
    "N_q=2",
];

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates the tiny pair into `dir/data` and returns its config path.
fn synth(dir: &Path) -> PathBuf {
    let spec = dir.join("tiny.cfg");
    std::fs::write(&spec, TINY).unwrap();
    let data = dir.join("data");
    ok(&["synth", "-c", s(&spec), "--seed", "7", "--out", s(&data)]);
    data.join("synth.cfg")
}

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(TINY_RUN.iter().copied()).collect()
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("tiny.cfg");
    std::fs::write(&spec, TINY).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "-c", s(&spec), "--seed", "3", "--out", s(&a)]);
    ok(&["synth", "-c", s(&spec), "--seed", "3", "--out", s(&b)]);
    for f in ["source.hsi", "target.hsi", "synth.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("synth.json")).unwrap()).unwrap();
    assert!(meta["majority_baseline_target"].as_f64().is_some());
}

#[test]
fn train_writes_history_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    let out = dir.path().join("run");
    ok(&with_tiny(&["train", "-c", s(&cfg), "--episodes", "3", "--seed", "1", "--out", s(&out)]));
    let history = std::fs::read_to_string(out.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 6);
    assert!(out.join("checkpoint.psft").exists());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest.is_object());

    let straight = dir.path().join("straight");
    ok(&with_tiny(&["train", "-c", s(&cfg), "--episodes", "5", "--seed", "1", "--out", s(&straight)]));
    let resumed = dir.path().join("resumed");
    let ck = out.join("checkpoint.psft");
    ok(&with_tiny(&[
        "train",
        "-c",
        s(&cfg),
        "--episodes",
        "5",
        "--seed",
        "1",
        "--resume",
        s(&ck),
        "--out",
        s(&resumed),
    ]));
    let read = |p: &Path| std::fs::read_to_string(p.join("history.jsonl")).unwrap();
    let losses = |t: String| -> Vec<String> {
        t.lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().retain(|k, _| k != "seconds");
                v.to_string()
            })
            .collect()
    };
    assert_eq!(losses(read(&straight)), losses(read(&resumed)));
    assert_eq!(
        std::fs::read(straight.join("checkpoint.psft")).unwrap(),
        std::fs::read(resumed.join("checkpoint.psft")).unwrap()
    );

    let eval = dir.path().join("eval");
    ok(&with_tiny(&["eval", "-c", s(&cfg), "--checkpoint", s(&straight.join("checkpoint.psft")), "--out", s(&eval)]));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["runs"].as_array().unwrap().len(), 1);
    assert!(report["oa"].as_str().unwrap().ends_with("±0.00"));
    let again = dir.path().join("eval2");
    ok(&with_tiny(&["eval", "-c", s(&cfg), "--checkpoint", s(&straight.join("checkpoint.psft")), "--out", s(&again)]));
    assert_eq!(std::fs::read(eval.join("report.json")).unwrap(), std::fs::read(again.join("report.json")).unwrap());

    let mut args = with_tiny(&["train", "-c", s(&cfg), "--episodes", "5", "--seed", "1", "--resume", s(&ck)]);
    let bad = dir.path().join("bad");
    args.extend(["--set", "mapped_dim=7", "--out", s(&bad)]);
    assert_eq!(run(&args).status.code(), Some(3));
    let reseeded =
        with_tiny(&["train", "-c", s(&cfg), "--episodes", "5", "--seed", "2", "--resume", s(&ck), "--out", s(&bad)]);
    assert_eq!(run(&reseeded).status.code(), Some(2));
}

#[test]
fn single_run_eval_reports_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    let out = dir.path().join("eval");
    ok(&with_tiny(&["eval", "-c", s(&cfg), "--episodes", "2", "--runs", "1", "--out", s(&out)]));
    let table = std::fs::read_to_string(out.join("report.txt")).unwrap();
    let oa = table.lines().find(|l| l.split_whitespace().nth(1) == Some("OA")).unwrap();
    assert!(oa.ends_with("±0.00"), "{oa}");
    assert!(table.contains("runs: 1"));
}

#[test]
fn sweep_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    let out = dir.path().join("sweep");
    ok(&with_tiny(&["sweep", "-c", s(&cfg), "--episodes", "2", "--runs", "1", "--labeled", "1,2,3", "--out", s(&out)]));
    let sweep: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(sweep["series"][0]["points"].as_array().unwrap().len(), 3);
    let svg = dir.path().join("sweep.svg");
    ok(&["plot", "--input", s(&out.join("sweep.json")), "--out", s(&svg)]);
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") && (text.contains("<polyline") || text.contains("<path")));
}

#[test]
fn ablate_writes_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    let out = dir.path().join("ablate");
    ok(&with_tiny(&["ablate", "-c", s(&cfg), "--episodes", "1", "--runs", "1", "--out", s(&out)]));
    let table = std::fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.cfg");
    assert_eq!(run(&["train", "-c", s(&missing), "--out", s(dir.path())]).status.code(), Some(2));
    assert_eq!(run(&["info", "--set", "no_such_key=1"]).status.code(), Some(2));
    assert_eq!(run(&["info", "--set", "patch_size=4"]).status.code(), Some(2));
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, format!("source_path = {0}\ntarget_path = {0}\n", s(&dir.path().join("nope.hsi")))).unwrap();
    assert_eq!(run(&["train", "-c", s(&cfg), "--out", s(&dir.path().join("o"))]).status.code(), Some(2));
    let garbage = dir.path().join("g.hsi");
    std::fs::write(&garbage, b"not a cube").unwrap();
    std::fs::write(&cfg, format!("source_path = {0}\ntarget_path = {0}\n", s(&garbage))).unwrap();
    assert_eq!(run(&["train", "-c", s(&cfg), "--out", s(&dir.path().join("o"))]).status.code(), Some(3));
    let info = ok(&["info"]);
    let text = String::from_utf8_lossy(&info.stdout);
    assert!(text.contains("126660") || text.contains("126,660"), "{text}");
    let help = ok(&["--help"]);
    assert!(String::from_utf8_lossy(&help.stdout).contains("mmd_scales"));
}
