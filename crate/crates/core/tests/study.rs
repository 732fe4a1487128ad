use std::fs;
use std::path::Path;

use bodyscene::manifest::load_dataset;
use bodyscene::nets::{InputMode, Topology};
use bodyscene::study::{
    load_model, load_versions, run_eval, run_pipeline, run_synth, run_version, ModelChoice,
    Provenance, StudyConfig, StudyLayout, StudyPlan,
};
use bodyscene::synth::SynthConfig;
use bodyscene::train::TrainConfig;
use sha2::{Digest, Sha256};

fn micro() -> StudyConfig {
    StudyConfig {
        synth: SynthConfig {
            num_classes: 3,
            clips_per_class: 4,
            frames_per_clip: 3,
            ..SynthConfig::default()
        },
        train: TrainConfig {
            epochs: 1,
            batches_per_epoch: 3,
            batch_size: 4,
            ..TrainConfig::default()
        },
        study: StudyPlan {
            seeds: vec![1],
            ..StudyPlan::default()
        },
        ..StudyConfig::default()
    }
}

fn sha(path: &Path) -> String {
    Sha256::digest(fs::read(path).unwrap())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Every file under `root` with its digest, sorted by relative path.
fn tree(root: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, sha(&p)));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let config = micro();
    let ra = run_pipeline(&config, &StudyLayout::new(a.path()), |_, _| {}).unwrap();
    let rb = run_pipeline(&config, &StudyLayout::new(b.path()), |_, _| {}).unwrap();
    assert_eq!(ra, rb);
    let ta = tree(a.path());
    assert_eq!(ta, tree(b.path()));
    for needed in [
        "data/manifest.json",
        "flow/flow_check.json",
        "models/baseline-frames-seed1.ckpt",
        "models/domainnet-frames-seed1.history.jsonl",
        "report/report.txt",
        "report/report.json",
        "report/plot.csv",
        "provenance/report.json",
    ] {
        assert!(ta.iter().any(|(p, _)| p == needed), "missing {needed}");
    }
    assert_eq!(ra.choices_per_trial, 3);
    assert_eq!(ra.top_k, 3);
}

#[test]
fn provenance_records_config_and_digests() {
    let dir = tempfile::tempdir().unwrap();
    let layout = StudyLayout::new(dir.path());
    let config = micro();
    run_pipeline(&config, &layout, |_, _| {}).unwrap();
    let prov: Provenance = serde_json::from_str(
        &fs::read_to_string(layout.provenance("train-domainnet-frames-seed1")).unwrap(),
    )
    .unwrap();
    assert_eq!(prov.config, config);
    assert_eq!(prov.config_hash, config.hash());
    assert_eq!(prov.seed, Some(1));
    let ckpt = prov
        .outputs
        .iter()
        .find(|d| d.path == "models/domainnet-frames-seed1.ckpt")
        .unwrap();
    assert_eq!(
        ckpt.sha256,
        sha(&layout.checkpoint("domainnet-frames-seed1"))
    );
    let report: Provenance =
        serde_json::from_str(&fs::read_to_string(layout.provenance("report")).unwrap()).unwrap();
    assert_eq!(report.inputs.len(), 1 + 2);
    assert_eq!(report.outputs.len(), 3);
}

#[test]
fn written_versions_reload_identically() {
    let dir = tempfile::tempdir().unwrap();
    let layout = StudyLayout::new(dir.path());
    let config = micro();
    run_synth(&config, &layout).unwrap();
    let built = run_version(&config, &layout).unwrap();
    assert_eq!(load_versions(&layout).unwrap(), built);
    let (manifest, clips) = load_dataset(&layout.data()).unwrap();
    assert_eq!(manifest.clips.len(), clips.len());
}

#[test]
fn trained_models_reload_and_evaluate_alone() {
    let dir = tempfile::tempdir().unwrap();
    let layout = StudyLayout::new(dir.path());
    let config = micro();
    let full = run_pipeline(&config, &layout, |_, _| {}).unwrap();
    let data = load_versions(&layout).unwrap();
    let choice = ModelChoice {
        topology: Topology::DomainNet,
        input_mode: InputMode::Frames,
    };
    let single = run_eval(&config, &layout, &data, choice, 1).unwrap();
    assert_eq!(single.models.len(), 1);
    let row = full
        .models
        .iter()
        .find(|r| r.name == "domainnet-frames-seed1")
        .unwrap();
    assert_eq!(&single.models[0], row);
    assert!(layout
        .eval("domainnet-frames-seed1")
        .join("report.txt")
        .exists());
    assert!(load_model(&layout, choice, 2, 3).is_err());
    let wrong_mode = ModelChoice {
        input_mode: InputMode::FramesFlows,
        ..choice
    };
    assert!(load_model(&layout, wrong_mode, 1, 3).is_err());
}

#[test]
fn config_fills_defaults_and_rejects_unknown_fields() {
    let config: StudyConfig =
        serde_json::from_str(r#"{"synth": {"num_classes": 4}, "study": {"seeds": [7]}}"#).unwrap();
    assert_eq!(config.synth.num_classes, 4);
    assert_eq!(config.study.seeds, [7]);
    assert_eq!(config.train, TrainConfig::default());
    assert!(serde_json::from_str::<StudyConfig>(r#"{"synth": {"classes": 4}}"#).is_err());
    let empty = StudyConfig {
        study: StudyPlan {
            seeds: vec![],
            ..StudyPlan::default()
        },
        ..StudyConfig::default()
    };
    assert!(empty.validate().is_err());
    assert_ne!(micro().hash(), StudyConfig::default().hash());
}

#[test]
fn model_names_encode_topology_mode_and_seed() {
    let c = ModelChoice {
        topology: Topology::Baseline,
        input_mode: InputMode::FramesFlows,
    };
    assert_eq!(c.name(3), "baseline-frames-flows-seed3");
}
