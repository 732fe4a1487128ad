//! Class-balanced frame sampling and SGD training for both topologies.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensorcore::{clip_grad_norm, Sgd, Tape};

use crate::dataset::{frame_and_flow, StudyClip, VersionedDataset};
use crate::error::{Error, Result};
use crate::eval::{predict_all, video_accuracy};
use crate::manifest::{DatasetManifest, Split};
use crate::nets::{domain_loss, input_tensor, InitConfig, InputMode, ModelSpec, Network, Topology};
use crate::raster::{FlowField, Frame};
use crate::stimpipe::{StimulusVersion, VersionedClip};
use crate::synth::mix_seed;

pub const CLIP_GRAD_NORM: f32 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    /// Global gradient-norm ceiling applied before each step; `None` disables it.
    pub clip_grad_norm: Option<f32>,
    pub seed: u64,
    pub init: InitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batches_per_epoch: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            momentum: 0.9,
            clip_grad_norm: Some(CLIP_GRAD_NORM),
            seed: 0,
            init: InitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "need learning_rate > 0 and momentum in [0, 1), got {} and {}",
                self.learning_rate, self.momentum
            )));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!(
                    "clip_grad_norm must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// One sampled training frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub clip: usize,
    pub frame: usize,
    pub label: usize,
}

/// Frames of one split grouped by category.
#[derive(Clone, Debug)]
pub struct FrameIndex {
    per_class: Vec<Vec<(usize, usize)>>,
}

impl FrameIndex {
    /// `clips` yields `(clip index, label, frame count)`. Every category must
    /// own at least one frame.
    pub fn new(
        num_classes: usize,
        clips: impl IntoIterator<Item = (usize, usize, usize)>,
    ) -> Result<Self> {
        let mut per_class = vec![Vec::new(); num_classes];
        for (clip, label, frames) in clips {
            let slot = per_class.get_mut(label).ok_or_else(|| {
                Error::Manifest(format!(
                    "label {label} out of range for {num_classes} categories"
                ))
            })?;
            slot.extend((0..frames).map(|t| (clip, t)));
        }
        if let Some(empty) = per_class.iter().position(Vec::is_empty) {
            return Err(Error::Manifest(format!(
                "category {empty} has no frames in this split"
            )));
        }
        Ok(Self { per_class })
    }

    pub fn from_manifest(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let clips = manifest
            .clips
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == split)
            .map(|(i, c)| (i, c.action, c.frames.len()));
        Self::new(manifest.num_classes(), clips)
    }

    pub fn from_dataset(data: &VersionedDataset, split: Split) -> Result<Self> {
        let clips = data
            .clips
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == split)
            .map(|(i, c)| (i, c.action, c.len()));
        Self::new(data.num_classes(), clips)
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn frames_in(&self, class: usize) -> usize {
        self.per_class[class].len()
    }

    /// Each slot draws a category uniformly, then a frame uniformly within it.
    pub fn sample_batch(&self, batch_size: usize, rng: &mut impl Rng) -> Vec<Sample> {
        (0..batch_size)
            .map(|_| {
                let label = rng.random_range(0..self.per_class.len());
                let frames = &self.per_class[label];
                let (clip, frame) = frames[rng.random_range(0..frames.len())];
                Sample { clip, frame, label }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_body: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_background: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_combined: Option<f64>,
    /// Per-frame accuracy over the epoch's training batches.
    pub train_accuracy: f64,
    /// Per-video accuracy on the validation split.
    pub val_accuracy: Option<f64>,
    pub val_loss: Option<f64>,
    /// Largest pre-clipping gradient norm seen during the epoch.
    pub max_grad_norm: f64,
    /// Not serialized, so written histories are reproducible.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub network: Network,
    pub history: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were kept; 0 means the initialisation.
    pub best_epoch: usize,
}

fn batch_input(
    data: &VersionedDataset,
    samples: &[Sample],
    mode: InputMode,
    pick: impl Fn(&StudyClip) -> &VersionedClip,
) -> Result<tensorcore::Tensor> {
    let pairs: Vec<(&Frame, &FlowField)> = samples
        .iter()
        .map(|s| frame_and_flow(pick(&data.clips[s.clip]), s.frame))
        .collect();
    let frames: Vec<&Frame> = pairs.iter().map(|p| p.0).collect();
    match mode {
        InputMode::Frames => input_tensor(&frames, None),
        InputMode::FramesFlows => {
            let flows: Vec<&FlowField> = pairs.iter().map(|p| p.1).collect();
            input_tensor(&frames, Some(&flows))
        }
    }
}

/// Per-video accuracy and mean per-video cross-entropy used for model
/// selection: the original version for a baseline, combined logits over
/// (body, background) inputs for a domainnet.
pub fn validation_score(
    net: &Network,
    data: &VersionedDataset,
    split: Split,
) -> Result<Option<(f64, f64)>> {
    let clips: Vec<&StudyClip> = data.clips.iter().filter(|c| c.split == split).collect();
    if clips.is_empty() {
        return Ok(None);
    }
    let probs = predict_all(net, &clips, StimulusVersion::Original)?;
    let labels: Vec<usize> = clips.iter().map(|c| c.action).collect();
    let loss = probs
        .iter()
        .zip(&labels)
        .map(|(p, &l)| -p[l].max(1e-300).ln())
        .sum::<f64>()
        / clips.len() as f64;
    Ok(Some((video_accuracy(&probs, &labels), loss)))
}

struct StepOutcome {
    loss: f32,
    parts: Option<[f32; 3]>,
    correct: usize,
    grad_norm: f32,
}

fn train_step(
    net: &mut Network,
    opt: &mut Sgd,
    clip: Option<f32>,
    data: &VersionedDataset,
    samples: &[Sample],
    epoch: usize,
    batch: usize,
) -> Result<StepOutcome> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mode = net.spec.input_mode;
    let mut tape = Tape::<f32>::new();
    let (loss, parts, logits) = match net.spec.topology {
        Topology::Baseline => {
            let x = tape.leaf(batch_input(data, samples, mode, |c| &c.orig)?, false);
            let logits = net.baseline_forward(&mut tape, x)?;
            (tape.softmax_cross_entropy(logits, &labels)?, None, logits)
        }
        Topology::DomainNet => {
            let xb = tape.leaf(batch_input(data, samples, mode, |c| &c.body)?, false);
            let xg = tape.leaf(batch_input(data, samples, mode, |c| &c.bg)?, false);
            let logits = net.domainnet_forward(&mut tape, xb, xg)?;
            let l = domain_loss(&mut tape, logits, &labels)?;
            let b = l.breakdown(&tape);
            (
                l.total,
                Some([b.l_body, b.l_background, b.l_combined]),
                logits.combined,
            )
        }
    };
    let loss_value = tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteLoss { epoch, batch });
    }
    let out = tape.value(logits);
    let k = out.shape()[1];
    let correct = out
        .data()
        .chunks_exact(k)
        .zip(&labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == l
        })
        .count();
    let grads = tape.backward(loss)?;
    grads.store_into(&mut net.params);
    let grad_norm = clip_grad_norm(&mut net.params, clip.unwrap_or(f32::INFINITY));
    opt.step(&mut net.params)?;
    Ok(StepOutcome {
        loss: loss_value,
        parts,
        correct,
        grad_norm,
    })
}

/// Runs `epochs x batches_per_epoch` SGD steps and keeps the parameters with
/// the best validation accuracy; the later epoch wins ties.
/// Without a validation split the final parameters are kept.
pub fn train(
    spec: &ModelSpec,
    config: &TrainConfig,
    data: &VersionedDataset,
) -> Result<TrainedModel> {
    train_with_progress(spec, config, data, |_| {})
}

pub fn train_with_progress(
    spec: &ModelSpec,
    config: &TrainConfig,
    data: &VersionedDataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    config.validate()?;
    if spec.num_classes != data.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes, dataset has {}",
            spec.num_classes,
            data.num_classes()
        )));
    }
    let mut net = Network::<f32>::init(spec, config.init, mix_seed(config.seed, 0x1717))?;
    let mut best = ((f64::NEG_INFINITY, f64::INFINITY), net.params.clone(), 0);
    let mut history = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok(TrainedModel {
            network: net,
            history,
            best_epoch: 0,
        });
    }
    let index = FrameIndex::from_dataset(data, Split::Train)?;
    let mut opt = Sgd::new(&net.params, config.learning_rate, config.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x5a3b));
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let (mut loss, mut parts, mut correct, mut seen) = (0.0f64, [0.0f64; 3], 0usize, 0usize);
        let mut max_grad = 0.0f64;
        for batch in 0..config.batches_per_epoch {
            let samples = index.sample_batch(config.batch_size, &mut rng);
            let step = train_step(
                &mut net,
                &mut opt,
                config.clip_grad_norm,
                data,
                &samples,
                epoch,
                batch,
            )?;
            max_grad = max_grad.max(step.grad_norm as f64);
            loss += step.loss as f64;
            if let Some(p) = step.parts {
                for (acc, v) in parts.iter_mut().zip(p) {
                    *acc += v as f64;
                }
            }
            correct += step.correct;
            seen += samples.len();
        }
        let nb = config.batches_per_epoch.max(1) as f64;
        let val = validation_score(&net, data, Split::Val)?;
        let domain = spec.topology == Topology::DomainNet;
        let record = EpochRecord {
            epoch,
            loss: loss / nb,
            l_body: domain.then(|| parts[0] / nb),
            l_background: domain.then(|| parts[1] / nb),
            l_combined: domain.then(|| parts[2] / nb),
            train_accuracy: if seen == 0 {
                0.0
            } else {
                correct as f64 / seen as f64
            },
            val_accuracy: val.map(|v| v.0),
            val_loss: val.map(|v| v.1),
            max_grad_norm: max_grad,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        let better = match val {
            None => true,
            Some((acc, _)) => acc >= best.0 .0,
        };
        if better {
            best = (val.unwrap_or_default(), net.params.clone(), epoch);
        }
        on_epoch(&record);
        history.push(record);
    }
    let network = Network::from_params(spec.clone(), best.1)?;
    Ok(TrainedModel {
        network,
        history,
        best_epoch: best.2,
    })
}
