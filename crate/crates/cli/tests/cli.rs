use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const MICRO: &str = r#"
[synth]
num_classes = 2
clips_per_class = 2
frames_per_clip = 3

[train]
epochs = 1
batches_per_epoch = 2
batch_size = 4

[study]
seeds = [1]
"#;

fn bodyscene(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bodyscene"))
        .args(args)
        .output()
        .unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

/// Runs every stage in order, asserting each succeeds.
fn pipeline(config: &Path, out: &Path) -> String {
    let (c, o) = (config.to_str().unwrap(), out.to_str().unwrap());
    let mut last = Output {
        status: Default::default(),
        stdout: vec![],
        stderr: vec![],
    };
    for stage in ["synth", "version", "flow", "train", "report"] {
        last = bodyscene(&[stage, "--config", c, "--out", o]);
        assert!(last.status.success(), "{stage}: {}", text(&last.stderr));
    }
    text(&last.stdout)
}

fn micro_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("micro.toml");
    fs::write(&path, MICRO).unwrap();
    path
}

#[test]
fn help_prints_usage_and_succeeds() {
    let out = bodyscene(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let usage = text(&out.stdout);
    assert!(usage.contains("Usage"));
    for sub in [
        "synth", "version", "flow", "train", "eval", "report", "serve",
    ] {
        assert!(usage.contains(sub), "{sub} missing from\n{usage}");
    }
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let out = bodyscene(&["synth", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("Usage"));
    assert_eq!(bodyscene(&["train", "--rho", "0.5"]).status.code(), Some(2));
    assert_eq!(
        bodyscene(&["train", "--model", "resnet"]).status.code(),
        Some(2)
    );
}

#[test]
fn failures_give_a_one_line_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = bodyscene(&["version", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(
        err.starts_with("error: ") && err.contains("manifest.json"),
        "{err}"
    );

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[synth]\nclasses = 3\n").unwrap();
    let out = bodyscene(&["synth", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(text(&out.stderr).lines().count(), 1);
}

#[test]
fn micro_pipeline_reports_three_columns_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let printed = pipeline(&config, &a);
    pipeline(&config, &b);

    let report = fs::read_to_string(a.join("report/report.txt")).unwrap();
    assert_eq!(printed, report);
    let header = report.lines().find(|l| l.starts_with("model")).unwrap();
    assert_eq!(
        header.split_whitespace().collect::<Vec<_>>(),
        ["model", "orig", "body", "bg"]
    );
    for name in ["baseline-frames-seed1", "domainnet-frames-seed1"] {
        let row = report.lines().find(|l| l.starts_with(name)).unwrap();
        assert_eq!(row.split_whitespace().count(), 4, "{row}");
    }
    for file in [
        "data/manifest.json",
        "models/baseline-frames-seed1.ckpt",
        "models/domainnet-frames-seed1.ckpt",
        "report/report.txt",
        "report/report.json",
        "report/plot.csv",
    ] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn every_stage_records_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_config(dir.path());
    let out = dir.path().join("run");
    pipeline(&config, &out);
    let o = out.to_str().unwrap();
    let c = config.to_str().unwrap();
    let eval = bodyscene(&[
        "eval",
        "--config",
        c,
        "--out",
        o,
        "--model",
        "domainnet",
        "--version",
        "body",
    ]);
    assert!(eval.status.success(), "{}", text(&eval.stderr));
    let line = text(&eval.stdout);
    assert!(line.starts_with("domainnet-frames-seed1 body: "), "{line}");

    let mut hashes = Vec::new();
    for stage in [
        "synth",
        "version",
        "flow",
        "train-baseline-frames-seed1",
        "train-domainnet-frames-seed1",
        "eval-domainnet-frames-seed1",
        "report",
    ] {
        let path = out.join("provenance").join(format!("{stage}.json"));
        let prov: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(prov["stage"], stage);
        assert_eq!(prov["config"]["synth"]["num_classes"], 2);
        hashes.push(prov["config_hash"].as_str().unwrap().to_owned());
    }
    hashes.dedup();
    assert_eq!(hashes.len(), 1, "stages saw different configurations");
}

#[test]
fn synth_overrides_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_config(dir.path());
    let o = dir.path().join("run");
    let out = bodyscene(&[
        "synth",
        "--config",
        config.to_str().unwrap(),
        "--out",
        o.to_str().unwrap(),
        "--rho",
        "0.5",
        "--seed",
        "9",
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let prov: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(o.join("provenance/synth.json")).unwrap())
            .unwrap();
    assert_eq!(prov["config"]["synth"]["rho"], 0.5);
    assert_eq!(prov["seed"], 9);
}
