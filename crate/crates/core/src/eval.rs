//! Per-video predictions and the accuracy metrics computed from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tensorcore::Tape;

use crate::dataset::{frame_and_flow, StudyClip};
use crate::error::{Error, Result};
use crate::nets::{input_tensor, InputMode, Network, Topology};
use crate::raster::{FlowField, Frame};
use crate::stimpipe::{StimulusVersion, VersionedClip};
use crate::synth::mix_seed;

fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&z| (z as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn clip_input(vc: &VersionedClip, mode: InputMode) -> Result<tensorcore::Tensor> {
    let n = vc.frames.len();
    let pairs: Vec<(&Frame, &FlowField)> = (0..n).map(|t| frame_and_flow(vc, t)).collect();
    let frames: Vec<&Frame> = pairs.iter().map(|p| p.0).collect();
    match mode {
        InputMode::Frames => input_tensor(&frames, None),
        InputMode::FramesFlows => {
            let flows: Vec<&FlowField> = pairs.iter().map(|p| p.1).collect();
            input_tensor(&frames, Some(&flows))
        }
    }
}

fn blank_clip(template: &VersionedClip) -> VersionedClip {
    let (h, w) = template.frames[0].dims();
    VersionedClip {
        source_id: template.source_id.clone(),
        version: template.version,
        frames: vec![Frame::black(h, w); template.frames.len()],
        flows: vec![FlowField::zeros(h, w); template.flows.len().max(1)],
        region: None,
    }
}

/// Per-frame logits for one clip shown as `version`.
///
/// Baseline models see the version's frames. DomainNet models get the body
/// version in the body stream and the background version in the background
/// stream for the original clip; for a body-only clip the background stream
/// sees black frames, and for a background-only clip the body stream does.
pub fn clip_logits(
    net: &Network,
    clip: &StudyClip,
    version: StimulusVersion,
) -> Result<Vec<Vec<f32>>> {
    let mode = net.spec.input_mode;
    let mut tape = Tape::<f32>::new();
    let logits = match net.spec.topology {
        Topology::Baseline => {
            let x = tape.leaf(clip_input(clip.version(version), mode)?, false);
            net.baseline_forward(&mut tape, x)?
        }
        Topology::DomainNet => {
            let (body, bg) = match version {
                StimulusVersion::Original => (clip.body.clone(), clip.bg.clone()),
                StimulusVersion::BodyOnly => (clip.body.clone(), blank_clip(&clip.bg)),
                StimulusVersion::BackgroundOnly => (blank_clip(&clip.body), clip.bg.clone()),
            };
            let xb = tape.leaf(clip_input(&body, mode)?, false);
            let xg = tape.leaf(clip_input(&bg, mode)?, false);
            net.domainnet_forward(&mut tape, xb, xg)?.combined
        }
    };
    let value = tape.value(logits);
    let k = value.shape()[1];
    Ok(value.data().chunks_exact(k).map(<[f32]>::to_vec).collect())
}

/// Softmax outputs averaged over all frames of the clip.
pub fn clip_probabilities(
    net: &Network,
    clip: &StudyClip,
    version: StimulusVersion,
) -> Result<Vec<f64>> {
    let frames = clip_logits(net, clip, version)?;
    Ok(average_probabilities(&frames))
}

pub fn average_probabilities(frame_logits: &[Vec<f32>]) -> Vec<f64> {
    let k = frame_logits.first().map_or(0, Vec::len);
    let mut avg = vec![0.0; k];
    for l in frame_logits {
        for (a, p) in avg.iter_mut().zip(softmax(l)) {
            *a += p;
        }
    }
    let n = frame_logits.len().max(1) as f64;
    avg.iter_mut().for_each(|a| *a /= n);
    avg
}

/// Averaged probabilities for many clips, evaluated in parallel.
pub fn predict_all(
    net: &Network,
    clips: &[&StudyClip],
    version: StimulusVersion,
) -> Result<Vec<Vec<f64>>> {
    clips
        .par_iter()
        .map(|c| clip_probabilities(net, c, version))
        .collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of clips whose unrestricted argmax is the true label.
pub fn video_accuracy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, &l)| argmax(p) == l)
        .count();
    hits as f64 / probs.len() as f64
}

/// The answer options offered for one clip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceSet {
    pub clip_id: String,
    pub label: usize,
    /// Sorted class indices, including `label`.
    pub choices: Vec<usize>,
}

/// Draws the true class plus `choices_per_trial - 1` distinct foils from
/// `subset` for every clip. Clip `i` uses its own stream derived from
/// `foil_seed`, so the sets do not depend on which models are evaluated.
pub fn draw_choice_sets(
    clips: &[(String, usize)],
    subset: &[usize],
    choices_per_trial: usize,
    foil_seed: u64,
) -> Result<Vec<ChoiceSet>> {
    if choices_per_trial == 0 || subset.len() < choices_per_trial {
        return Err(Error::Invalid(format!(
            "category subset of size {} is smaller than {choices_per_trial} choices per trial",
            subset.len()
        )));
    }
    let mut distinct = subset.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != subset.len() {
        return Err(Error::Invalid("category subset contains duplicates".into()));
    }
    clips
        .iter()
        .enumerate()
        .map(|(i, (id, label))| {
            if !subset.contains(label) {
                return Err(Error::Invalid(format!(
                    "clip {id:?}: label {label} is outside the category subset"
                )));
            }
            let mut pool: Vec<usize> = subset.iter().copied().filter(|c| c != label).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(foil_seed, i as u64));
            for j in 0..choices_per_trial - 1 {
                let pick = rng.random_range(j..pool.len());
                pool.swap(j, pick);
            }
            let mut choices: Vec<usize> = pool[..choices_per_trial - 1].to_vec();
            choices.push(*label);
            choices.sort_unstable();
            Ok(ChoiceSet {
                clip_id: id.clone(),
                label: *label,
                choices,
            })
        })
        .collect()
}

/// Argmax over `choices` only. Returns the winner and whether it was tied.
pub fn restricted_argmax(probs: &[f64], choices: &[usize]) -> (usize, bool) {
    let mut sorted = choices.to_vec();
    sorted.sort_unstable();
    let mut best = sorted[0];
    let mut tie = false;
    for &c in &sorted[1..] {
        if probs[c] > probs[best] {
            best = c;
            tie = false;
        } else if probs[c] == probs[best] {
            tie = true;
        }
    }
    (best, tie)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceScore {
    pub accuracy: f64,
    pub correct: usize,
    pub trials: usize,
    /// Trials where the restricted argmax was tied and resolved by lowest index.
    pub ties: usize,
}

/// Forced-choice accuracy over averaged per-clip probabilities.
pub fn human_aligned_accuracy(
    probs: &[Vec<f64>],
    choice_sets: &[ChoiceSet],
) -> Result<ChoiceScore> {
    if probs.len() != choice_sets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} choice sets",
            probs.len(),
            choice_sets.len()
        )));
    }
    let (mut correct, mut ties) = (0, 0);
    for (p, cs) in probs.iter().zip(choice_sets) {
        if let Some(&c) = cs.choices.iter().find(|&&c| c >= p.len()) {
            return Err(Error::Shape(format!(
                "choice {c} out of range for {} classes",
                p.len()
            )));
        }
        let (pick, tie) = restricted_argmax(p, &cs.choices);
        correct += usize::from(pick == cs.label);
        ties += usize::from(tie);
    }
    let trials = probs.len();
    Ok(ChoiceScore {
        accuracy: if trials == 0 {
            0.0
        } else {
            correct as f64 / trials as f64
        },
        correct,
        trials,
        ties,
    })
}

/// Fraction of clips whose label is among the `k` most probable classes
/// (ties ranked by lowest index).
pub fn topk_accuracy(probs: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (p, &label) in probs.iter().zip(labels) {
        if k > p.len() {
            return Err(Error::Invalid(format!(
                "k = {k} exceeds {} classes",
                p.len()
            )));
        }
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        hits += usize::from(order[..k].contains(&label));
    }
    Ok(hits as f64 / probs.len() as f64)
}
