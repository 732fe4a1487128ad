//! All three stimulus versions of every clip, held in memory for training and
//! evaluation.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Split};
use crate::raster::{FlowField, Frame};
use crate::stimpipe::{self, StimulusVersion, VersionedClip};
use crate::synth::Clip;

#[derive(Clone, Debug, PartialEq)]
pub struct StudyClip {
    pub id: String,
    pub action: usize,
    pub split: Split,
    pub orig: VersionedClip,
    pub body: VersionedClip,
    pub bg: VersionedClip,
}

impl StudyClip {
    pub fn version(&self, v: StimulusVersion) -> &VersionedClip {
        match v {
            StimulusVersion::Original => &self.orig,
            StimulusVersion::BodyOnly => &self.body,
            StimulusVersion::BackgroundOnly => &self.bg,
        }
    }

    pub fn len(&self) -> usize {
        self.orig.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orig.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.orig.frames[0].dims()
    }
}

/// Frame `t` of a versioned clip and the flow paired with it. The last frame
/// has no successor and reuses the previous flow.
pub fn frame_and_flow(vc: &VersionedClip, t: usize) -> (&Frame, &FlowField) {
    let f = t.min(vc.flows.len().saturating_sub(1));
    (&vc.frames[t], &vc.flows[f])
}

#[derive(Clone, Debug, PartialEq)]
pub struct VersionedDataset {
    pub categories: Vec<String>,
    pub clips: Vec<StudyClip>,
}

impl VersionedDataset {
    /// Derives the three versions of every clip. `clips` must follow the
    /// manifest's clip order.
    pub fn build(manifest: &DatasetManifest, clips: &[Clip]) -> Result<Self> {
        if manifest.clips.len() != clips.len() {
            return Err(Error::Manifest(format!(
                "{} clip records but {} clips",
                manifest.clips.len(),
                clips.len()
            )));
        }
        let built = manifest
            .clips
            .par_iter()
            .zip(clips)
            .map(|(rec, clip)| {
                if rec.id != clip.id {
                    return Err(Error::Manifest(format!(
                        "clip order mismatch: {} vs {}",
                        rec.id, clip.id
                    )));
                }
                if clip.len() < 2 {
                    return Err(Error::Shape(format!(
                        "clip {:?} needs at least two frames",
                        clip.id
                    )));
                }
                Ok(StudyClip {
                    id: clip.id.clone(),
                    action: clip.action,
                    split: rec.split,
                    orig: stimpipe::original(clip)?,
                    body: stimpipe::body_version(clip)?,
                    bg: stimpipe::background_only(clip)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            categories: manifest.categories.clone(),
            clips: built,
        })
    }

    /// Reads versions previously written with [`VersionedDataset::write`].
    pub fn load(root: &Path, manifest: &DatasetManifest) -> Result<Self> {
        let clips = manifest
            .clips
            .par_iter()
            .map(|rec| {
                let n = rec.frames.len();
                let get = |v| stimpipe::load_version(root, v, &rec.id, n);
                Ok(StudyClip {
                    id: rec.id.clone(),
                    action: rec.action,
                    split: rec.split,
                    orig: get(StimulusVersion::Original)?,
                    body: get(StimulusVersion::BodyOnly)?,
                    bg: get(StimulusVersion::BackgroundOnly)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            categories: manifest.categories.clone(),
            clips,
        })
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        self.clips.par_iter().try_for_each(|c| {
            for v in [&c.orig, &c.body, &c.bg] {
                stimpipe::write_version(root, v)?;
            }
            Ok(())
        })
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.clips.len())
            .filter(|&i| self.clips[i].split == split)
            .collect()
    }
}
