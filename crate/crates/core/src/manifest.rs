//! On-disk dataset layout and the JSON manifest that indexes it.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<clip_id>/frame_0000.png  mask_0000.png  flow_0000.f32
//! <root>/<orig|body|bg>/<clip_id>/frame_0000.png  flow_0000.f32
//! ```
//!
//! All paths inside the manifest are relative to `<root>`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::raster::{FlowField, Frame, Mask};
use crate::synth::{Clip, SynthConfig};

pub const FORMAT: &str = "bodyscene.dataset.v1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.1,
            test: 0.3,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p))
            || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-6
        {
            return Err(Error::Config(format!(
                "split fractions must be in [0, 1] and sum to 1, got {parts:?}"
            )));
        }
        if self.train <= 0.0 || self.test <= 0.0 {
            return Err(Error::Config(
                "train and test fractions must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Per-class clip counts `(train, val, test)`. Train and test each get at
    /// least one clip when there are enough; validation is filled last.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        match n {
            0 => (0, 0, 0),
            1 => (1, 0, 0),
            2 => (1, 0, 1),
            _ => {
                let mut test = ((self.test * n as f64).round() as usize).max(1);
                let mut val = (self.val * n as f64).round() as usize;
                while test + val > n - 1 {
                    if val > 0 {
                        val -= 1;
                    } else {
                        test -= 1;
                    }
                }
                (n - test - val, val, test)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub id: String,
    pub action: usize,
    #[serde(default)]
    pub background: Option<usize>,
    pub split: Split,
    pub frames: Vec<String>,
    pub masks: Vec<String>,
    #[serde(default)]
    pub flows: Vec<String>,
}

impl ClipRecord {
    pub fn for_layout(clip: &Clip, split: Split) -> Self {
        let dir = &clip.id;
        Self {
            id: clip.id.clone(),
            action: clip.action,
            background: clip.background,
            split,
            frames: (0..clip.frames.len())
                .map(|t| format!("{dir}/frame_{t:04}.png"))
                .collect(),
            masks: (0..clip.masks.len())
                .map(|t| format!("{dir}/mask_{t:04}.png"))
                .collect(),
            flows: (0..clip.flows.len())
                .map(|t| format!("{dir}/flow_{t:04}.f32"))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub categories: Vec<String>,
    pub split_fractions: SplitFractions,
    #[serde(default)]
    pub generator: Option<SynthConfig>,
    pub clips: Vec<ClipRecord>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn clips_in(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn save(&self, root: &Path) -> Result<PathBuf> {
        let path = root.join(MANIFEST_FILE);
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(path)
    }

    /// Reads and checks a manifest. Works for generated and external datasets.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Manifest(m));
        if self.format != FORMAT {
            return bad(format!(
                "unsupported format {:?}, expected {FORMAT:?}",
                self.format
            ));
        }
        if self.categories.len() < 2 {
            return bad("at least two categories are required".into());
        }
        let k = self.categories.len();
        let mut seen = std::collections::HashSet::new();
        for c in &self.clips {
            if !seen.insert(c.id.as_str()) {
                return bad(format!("duplicate clip id {:?}", c.id));
            }
            if c.action >= k {
                return bad(format!(
                    "clip {:?}: action {} out of range for {k} categories",
                    c.id, c.action
                ));
            }
            if c.background.is_some_and(|b| b >= k) {
                return bad(format!("clip {:?}: background class out of range", c.id));
            }
            if c.frames.is_empty() {
                return bad(format!("clip {:?} has no frames", c.id));
            }
            if c.masks.len() != c.frames.len() {
                return bad(format!(
                    "clip {:?}: {} masks for {} frames",
                    c.id,
                    c.masks.len(),
                    c.frames.len()
                ));
            }
            if !c.flows.is_empty() && c.flows.len() + 1 != c.frames.len() {
                return bad(format!(
                    "clip {:?}: {} flows for {} frames (expected {})",
                    c.id,
                    c.flows.len(),
                    c.frames.len(),
                    c.frames.len() - 1
                ));
            }
            let all = c.frames.iter().chain(&c.masks).chain(&c.flows);
            if let Some(p) = all
                .into_iter()
                .find(|p| Path::new(p).is_absolute() || p.contains(".."))
            {
                return bad(format!(
                    "clip {:?}: path {p:?} must be relative to the dataset root",
                    c.id
                ));
            }
        }
        for split in [Split::Train, Split::Test] {
            if !self.clips.iter().any(|c| c.split == split) {
                return bad(format!("no clips in the {split:?} split"));
            }
        }
        Ok(())
    }
}

pub fn write_clip(root: &Path, clip: &Clip) -> Result<()> {
    let dir = root.join(&clip.id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for (t, frame) in clip.frames.iter().enumerate() {
        frame.save_png(&dir.join(format!("frame_{t:04}.png")))?;
    }
    for (t, mask) in clip.masks.iter().enumerate() {
        mask.save_png(&dir.join(format!("mask_{t:04}.png")))?;
    }
    for (t, flow) in clip.flows.iter().enumerate() {
        flow.save(&dir.join(format!("flow_{t:04}.f32")))?;
    }
    Ok(())
}

/// Loads the frames, masks and (if listed) flows of one clip.
pub fn load_clip(root: &Path, record: &ClipRecord) -> Result<Clip> {
    let frames = record
        .frames
        .iter()
        .map(|p| Frame::load_png(&root.join(p)))
        .collect::<Result<Vec<_>>>()?;
    let dims = frames[0].dims();
    if let Some(f) = frames.iter().find(|f| f.dims() != dims) {
        return Err(Error::Shape(format!(
            "clip {:?}: frame size {:?} differs from {:?}",
            record.id,
            f.dims(),
            dims
        )));
    }
    let masks = record
        .masks
        .iter()
        .map(|p| Mask::load_png(&root.join(p)))
        .collect::<Result<Vec<_>>>()?;
    let flows = record
        .flows
        .iter()
        .map(|p| FlowField::load(&root.join(p)))
        .collect::<Result<Vec<_>>>()?;
    let mask_dims = masks.iter().map(Mask::dims);
    let flow_dims = flows.iter().map(FlowField::dims);
    if let Some(d) = mask_dims.chain(flow_dims).find(|&d| d != dims) {
        return Err(Error::Shape(format!(
            "clip {:?}: mask or flow size {d:?} differs from frame size {dims:?}",
            record.id
        )));
    }
    Ok(Clip {
        id: record.id.clone(),
        action: record.action,
        background: record.background,
        frames,
        masks,
        flows,
    })
}

/// Loads a manifest and every clip it lists.
pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Vec<Clip>)> {
    let manifest = DatasetManifest::load(root)?;
    let clips = manifest
        .clips
        .iter()
        .map(|r| load_clip(root, r))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, clips))
}
