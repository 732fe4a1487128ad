//! Session plans: which clip is shown in which block, trial order and choices.

use bodyscene::manifest::{DatasetManifest, Split};
use bodyscene::stimpipe::StimulusVersion;
use bodyscene::synth::mix_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ExpError, Result};

/// Blocks in presentation order.
pub const BLOCK_ORDER: [StimulusVersion; 3] = [
    StimulusVersion::BackgroundOnly,
    StimulusVersion::BodyOnly,
    StimulusVersion::Original,
];

pub const CHOICES_PER_TRIAL: usize = 5;

/// Test clips available to the experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub categories: Vec<String>,
    /// `(clip id, label)` in manifest order.
    pub clips: Vec<(String, usize)>,
    /// Frames per clip, keyed like `clips`.
    pub frames: Vec<usize>,
}

impl Catalog {
    pub fn from_manifest(manifest: &DatasetManifest) -> Self {
        let test: Vec<_> = manifest.clips_in(Split::Test).collect();
        Self {
            categories: manifest.categories.clone(),
            clips: test.iter().map(|c| (c.id.clone(), c.action)).collect(),
            frames: test.iter().map(|c| c.frames.len()).collect(),
        }
    }

    pub fn frames_of(&self, clip_id: &str) -> Option<usize> {
        self.clips
            .iter()
            .position(|(id, _)| id == clip_id)
            .map(|i| self.frames[i])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub clip_id: String,
    pub label: usize,
    /// Five distinct labels in presentation order, the true one included.
    pub choices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub version: StimulusVersion,
    pub trials: Vec<Trial>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub participant: String,
    pub seed: u64,
    pub categories: Vec<usize>,
    pub blocks: Vec<Block>,
}

impl TrialPlan {
    pub fn total_trials(&self) -> usize {
        self.blocks.iter().map(|b| b.trials.len()).sum()
    }

    /// 1-based (block, trial) of the `n`-th trial in plan order.
    pub fn position(&self, n: usize) -> Option<(usize, usize)> {
        let mut left = n;
        for (b, block) in self.blocks.iter().enumerate() {
            if left < block.trials.len() {
                return Some((b + 1, left + 1));
            }
            left -= block.trials.len();
        }
        None
    }

    pub fn trial(&self, block: usize, trial: usize) -> Option<&Trial> {
        self.blocks
            .get(block.checked_sub(1)?)?
            .trials
            .get(trial.checked_sub(1)?)
    }
}

/// Builds a plan over the first `n_categories` categories that have a test
/// clip. Each category contributes its first test clip, shown once per
/// block; trial order and foils are shuffled independently per block.
pub fn build_session(
    catalog: &Catalog,
    participant: &str,
    n_categories: usize,
    seed: u64,
) -> Result<TrialPlan> {
    if n_categories < CHOICES_PER_TRIAL {
        return Err(ExpError::Invalid(format!(
            "need at least {CHOICES_PER_TRIAL} categories for {CHOICES_PER_TRIAL} choices, got {n_categories}"
        )));
    }
    let mut picked: Vec<(usize, &str)> = Vec::with_capacity(n_categories);
    for (cat, _) in catalog.categories.iter().enumerate() {
        if picked.len() == n_categories {
            break;
        }
        if let Some((id, _)) = catalog.clips.iter().find(|(_, l)| *l == cat) {
            picked.push((cat, id));
        }
    }
    if picked.len() < n_categories {
        return Err(ExpError::Invalid(format!(
            "only {} categories have a test clip, {n_categories} requested",
            picked.len()
        )));
    }
    let categories: Vec<usize> = picked.iter().map(|p| p.0).collect();
    let blocks = BLOCK_ORDER
        .iter()
        .enumerate()
        .map(|(b, &version)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, b as u64));
            let mut trials: Vec<Trial> = picked
                .iter()
                .map(|&(label, id)| {
                    let mut foils: Vec<usize> =
                        categories.iter().copied().filter(|&c| c != label).collect();
                    foils.shuffle(&mut rng);
                    let mut choices = foils[..CHOICES_PER_TRIAL - 1].to_vec();
                    choices.push(label);
                    choices.shuffle(&mut rng);
                    Trial {
                        clip_id: id.to_string(),
                        label,
                        choices,
                    }
                })
                .collect();
            trials.shuffle(&mut rng);
            Block { version, trials }
        })
        .collect();
    Ok(TrialPlan {
        participant: participant.to_string(),
        seed,
        categories,
        blocks,
    })
}
