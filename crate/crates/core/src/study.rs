//! The study as a sequence of stages over one output directory, shared by
//! the command line and the test suites.
//!
//! ```text
//! <out>/data/manifest.json, <clip_id>/...      synthetic clips
//! <out>/data/<orig|body|bg>/<clip_id>/...      stimulus versions
//! <out>/flow/flow_check.json                   flow accuracy on body interiors
//! <out>/models/<name>.ckpt  .spec.json  .history.jsonl
//! <out>/eval/<name>/report.{txt,json}, plot.csv
//! <out>/report/report.{txt,json}, plot.csv
//! <out>/provenance/<stage>.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tensorcore::checkpoint;

use crate::dataset::VersionedDataset;
use crate::error::{io_err, Error, Result};
use crate::manifest::{load_dataset, DatasetManifest, MANIFEST_FILE};
use crate::nets::{InputMode, ModelSpec, Network, Topology};
use crate::report::{build_report, EvalReport, ModelEntry, ParticipantBlocks, ReportOptions};
use crate::stimpipe::{estimate_flow, interior_epe};
use crate::synth::{generate_dataset, SynthConfig};
use crate::train::{train_with_progress, EpochRecord, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelChoice {
    pub topology: Topology,
    pub input_mode: InputMode,
}

impl ModelChoice {
    pub fn name(&self, seed: u64) -> String {
        let mode = self.input_mode.tag().replace('+', "-");
        format!("{}-{mode}-seed{seed}", self.topology)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyPlan {
    /// Training seeds; every model is trained once per seed.
    pub seeds: Vec<u64>,
    pub models: Vec<ModelChoice>,
}

impl Default for StudyPlan {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            models: vec![
                ModelChoice {
                    topology: Topology::Baseline,
                    input_mode: InputMode::Frames,
                },
                ModelChoice {
                    topology: Topology::DomainNet,
                    input_mode: InputMode::Frames,
                },
            ],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub study: StudyPlan,
    pub report: ReportOptions,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.study.seeds.is_empty() || self.study.models.is_empty() {
            return Err(Error::Config(
                "study needs at least one seed and one model".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the JSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("study config serializes");
        hex(&Sha256::digest(json))
    }

    /// Report options clamped to the dataset: at most as many choices as
    /// eligible categories, and top-k at most the number of classes.
    pub fn effective_report_options(&self, num_classes: usize) -> ReportOptions {
        let mut o = self.report.clone();
        let eligible = o.category_subset.as_ref().map_or(num_classes, Vec::len);
        o.choices_per_trial = o.choices_per_trial.min(eligible);
        o.top_k = o.top_k.clamp(1, num_classes);
        o
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
pub struct StudyLayout {
    pub root: PathBuf,
}

impl StudyLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn flow(&self) -> PathBuf {
        self.root.join("flow")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.models().join(format!("{name}.ckpt"))
    }

    pub fn eval(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(name)
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn provenance(&self, stage: &str) -> PathBuf {
        self.root.join("provenance").join(format!("{stage}.json"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the output root.
    pub path: String,
    pub sha256: String,
}

/// What a stage read and wrote, with the full configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub tool_version: String,
    pub stage: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub config: StudyConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn digest(layout: &StudyLayout, path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let rel = path.strip_prefix(&layout.root).unwrap_or(path);
    Ok(FileDigest {
        path: rel.to_string_lossy().replace('\\', "/"),
        sha256: hex(&Sha256::digest(bytes)),
    })
}

fn record(
    layout: &StudyLayout,
    config: &StudyConfig,
    stage: &str,
    seed: Option<u64>,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    let prov = Provenance {
        tool: env!("CARGO_PKG_NAME").into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        stage: stage.into(),
        config_hash: config.hash(),
        seed,
        config: config.clone(),
        inputs: inputs
            .iter()
            .map(|p| digest(layout, p))
            .collect::<Result<_>>()?,
        outputs: outputs
            .iter()
            .map(|p| digest(layout, p))
            .collect::<Result<_>>()?,
    };
    write_json(&layout.provenance(stage), &prov)
}

/// Renders the synthetic dataset into `<out>/data`.
pub fn run_synth(config: &StudyConfig, layout: &StudyLayout) -> Result<DatasetManifest> {
    config.validate()?;
    let manifest = generate_dataset(&config.synth, &layout.data())?;
    let path = layout.data().join(MANIFEST_FILE);
    record(
        layout,
        config,
        "synth",
        Some(config.synth.seed),
        &[],
        &[path],
    )?;
    Ok(manifest)
}

/// Derives and writes the original, body-only and background-only versions.
pub fn run_version(config: &StudyConfig, layout: &StudyLayout) -> Result<VersionedDataset> {
    let (manifest, clips) = load_dataset(&layout.data())?;
    let data = VersionedDataset::build(&manifest, &clips)?;
    data.write(&layout.data())?;
    let path = layout.data().join(MANIFEST_FILE);
    record(layout, config, "version", None, &[path], &[])?;
    Ok(data)
}

/// Loads the manifest and the versions written by [`run_version`].
pub fn load_versions(layout: &StudyLayout) -> Result<VersionedDataset> {
    let manifest = DatasetManifest::load(&layout.data())?;
    VersionedDataset::load(&layout.data(), &manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassFlowError {
    pub category: String,
    pub pairs: usize,
    /// Mean interior endpoint error in pixels; `None` without interior pixels.
    pub mean_epe: Option<f64>,
    pub max_epe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowCheck {
    pub per_class: Vec<ClassFlowError>,
    pub max_epe: Option<f64>,
}

/// Compares estimated flow on the original frames against the generator's
/// ground truth, over body-interior pixels.
pub fn flow_check(manifest: &DatasetManifest, clips: &[crate::synth::Clip]) -> Result<FlowCheck> {
    let k = manifest.num_classes();
    let mut sums = vec![(0usize, 0.0f64, 0usize, f64::NEG_INFINITY); k];
    for clip in clips {
        if clip.flows.is_empty() {
            continue;
        }
        for t in 0..clip.frames.len() - 1 {
            let est = estimate_flow(&clip.frames[t], &clip.frames[t + 1])?;
            let slot = &mut sums[clip.action];
            slot.0 += 1;
            if let Some(e) = interior_epe(&est, &clip.flows[t], &clip.masks[t])? {
                slot.1 += e;
                slot.2 += 1;
                slot.3 = slot.3.max(e);
            }
        }
    }
    let per_class: Vec<ClassFlowError> = sums
        .iter()
        .zip(&manifest.categories)
        .map(|(&(pairs, sum, n, max), name)| ClassFlowError {
            category: name.clone(),
            pairs,
            mean_epe: (n > 0).then(|| sum / n as f64),
            max_epe: (n > 0).then_some(max),
        })
        .collect();
    let max_epe = per_class.iter().filter_map(|c| c.mean_epe).reduce(f64::max);
    Ok(FlowCheck { per_class, max_epe })
}

pub fn run_flow(config: &StudyConfig, layout: &StudyLayout) -> Result<FlowCheck> {
    let (manifest, clips) = load_dataset(&layout.data())?;
    let check = flow_check(&manifest, &clips)?;
    let path = layout.flow().join("flow_check.json");
    write_json(&path, &check)?;
    record(
        layout,
        config,
        "flow",
        None,
        &[layout.data().join(MANIFEST_FILE)],
        &[path],
    )?;
    Ok(check)
}

/// Trains one model, writing its checkpoint, spec and per-epoch history.
pub fn run_train(
    config: &StudyConfig,
    layout: &StudyLayout,
    data: &VersionedDataset,
    choice: ModelChoice,
    seed: u64,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Network> {
    let spec = ModelSpec::new(choice.topology, choice.input_mode, data.num_classes());
    let train = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let trained = train_with_progress(&spec, &train, data, on_epoch)?;
    let name = choice.name(seed);
    let ckpt = layout.checkpoint(&name);
    write_file(
        &ckpt,
        &checkpoint::to_bytes(&spec.hash(), &trained.network.params),
    )?;
    let spec_path = layout.models().join(format!("{name}.spec.json"));
    write_json(&spec_path, &spec)?;
    let mut log = String::new();
    for r in &trained.history {
        log.push_str(&serde_json::to_string(r).map_err(|e| Error::Invalid(e.to_string()))?);
        log.push('\n');
    }
    let history = layout.models().join(format!("{name}.history.jsonl"));
    write_file(&history, log.as_bytes())?;
    record(
        layout,
        config,
        &format!("train-{name}"),
        Some(seed),
        &[layout.data().join(MANIFEST_FILE)],
        &[ckpt, spec_path],
    )?;
    Ok(trained.network)
}

/// Reads a checkpoint written by [`run_train`], checking it against the spec.
pub fn load_model(
    layout: &StudyLayout,
    choice: ModelChoice,
    seed: u64,
    num_classes: usize,
) -> Result<Network> {
    let spec = ModelSpec::new(choice.topology, choice.input_mode, num_classes);
    let path = layout.checkpoint(&choice.name(seed));
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let params = checkpoint::read_expecting(std::io::BufReader::new(file), &spec.hash())?;
    Network::from_params(spec, params)
}

fn evaluate(
    config: &StudyConfig,
    layout: &StudyLayout,
    data: &VersionedDataset,
    models: &[(ModelChoice, u64)],
    human: Option<&[ParticipantBlocks]>,
    dir: &Path,
    stage: &str,
) -> Result<EvalReport> {
    let k = data.num_classes();
    let nets = models
        .iter()
        .map(|&(c, s)| load_model(layout, c, s, k))
        .collect::<Result<Vec<_>>>()?;
    let entries: Vec<ModelEntry<'_>> = models
        .iter()
        .zip(&nets)
        .map(|(&(c, s), n)| ModelEntry {
            name: c.name(s),
            seed: s,
            network: n,
        })
        .collect();
    let report = build_report(&entries, data, &config.effective_report_options(k), human)?;
    report.write(dir)?;
    let mut inputs = vec![layout.data().join(MANIFEST_FILE)];
    inputs.extend(models.iter().map(|(c, s)| layout.checkpoint(&c.name(*s))));
    let outputs: Vec<PathBuf> = ["report.txt", "report.json", "plot.csv"]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    let seed = (models.len() == 1).then(|| models[0].1);
    record(layout, config, stage, seed, &inputs, &outputs)?;
    Ok(report)
}

/// Evaluates a single trained model into `<out>/eval/<name>`.
pub fn run_eval(
    config: &StudyConfig,
    layout: &StudyLayout,
    data: &VersionedDataset,
    choice: ModelChoice,
    seed: u64,
) -> Result<EvalReport> {
    let name = choice.name(seed);
    evaluate(
        config,
        layout,
        data,
        &[(choice, seed)],
        None,
        &layout.eval(&name),
        &format!("eval-{name}"),
    )
}

/// Evaluates every (model, seed) of the plan into `<out>/report`.
pub fn run_report(
    config: &StudyConfig,
    layout: &StudyLayout,
    data: &VersionedDataset,
    human: Option<&[ParticipantBlocks]>,
) -> Result<EvalReport> {
    let models: Vec<(ModelChoice, u64)> = config
        .study
        .models
        .iter()
        .flat_map(|&c| config.study.seeds.iter().map(move |&s| (c, s)))
        .collect();
    evaluate(
        config,
        layout,
        data,
        &models,
        human,
        &layout.report(),
        "report",
    )
}

/// Every stage in order: synth, version, flow, train for each (model, seed), report.
pub fn run_pipeline(
    config: &StudyConfig,
    layout: &StudyLayout,
    mut on_epoch: impl FnMut(&str, &EpochRecord),
) -> Result<EvalReport> {
    config.validate()?;
    run_synth(config, layout)?;
    let data = run_version(config, layout)?;
    run_flow(config, layout)?;
    for &choice in &config.study.models {
        for &seed in &config.study.seeds {
            let name = choice.name(seed);
            run_train(config, layout, &data, choice, seed, |r| on_epoch(&name, r))?;
        }
    }
    run_report(config, layout, &data, None)
}
