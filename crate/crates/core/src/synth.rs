//! Procedural action clips with exact body masks and ground-truth flow.
//!
//! Each action class is a motion pattern (a trajectory kind and a speed)
//! applied to the same textured sprite. The sprite is rendered with motion
//! blur, so a single frame already shows the direction and extent of its
//! movement. Backgrounds are static procedural textures; each action class has
//! one congruent background class, chosen for a clip with probability `rho`.

use std::f32::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{self, ClipRecord, DatasetManifest, Split, SplitFractions};
use crate::raster::{FlowField, Frame, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpriteParams {
    pub radius_min: f32,
    pub radius_max: f32,
    /// Speed of the slowest moving classes, pixels per frame.
    pub base_speed: f32,
    /// Speed added per repetition of the trajectory kinds.
    pub speed_step: f32,
    /// Length of the blur streak per unit of speed.
    pub blur_gain: f32,
    /// How far a path's line may sit from the frame center, as a fraction
    /// of the free range on each axis. Zero puts every path through the center.
    pub center_jitter: f32,
}

impl Default for SpriteParams {
    fn default() -> Self {
        Self {
            radius_min: 4.0,
            radius_max: 4.5,
            base_speed: 1.0,
            speed_step: 1.0,
            blur_gain: 5.0,
            center_jitter: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundParams {
    pub saturation: f32,
    pub value: f32,
    /// Relative brightness modulation of the texture pattern.
    pub contrast: f32,
    pub period_min: f32,
    pub period_max: f32,
}

impl Default for BackgroundParams {
    fn default() -> Self {
        Self {
            saturation: 0.7,
            value: 0.5,
            contrast: 0.2,
            period_min: 16.0,
            period_max: 28.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub frames_per_clip: usize,
    pub height: usize,
    pub width: usize,
    /// Probability that a clip's background class equals its action class.
    pub rho: f64,
    pub sprite: SpriteParams,
    pub background: BackgroundParams,
    pub split: SplitFractions,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            clips_per_class: 15,
            frames_per_clip: 12,
            height: 32,
            width: 32,
            rho: 0.95,
            sprite: SpriteParams::default(),
            background: BackgroundParams::default(),
            split: SplitFractions::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trajectory {
    Still,
    Horizontal,
    Vertical,
    Diagonal,
    AntiDiagonal,
}

const MOVING: [Trajectory; 4] = [
    Trajectory::Horizontal,
    Trajectory::Vertical,
    Trajectory::Diagonal,
    Trajectory::AntiDiagonal,
];

/// Motion pattern that defines an action class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Motion {
    pub trajectory: Trajectory,
    pub speed: f32,
}

impl SynthConfig {
    /// Class 0 stands still; the others cycle through the moving trajectory
    /// kinds, getting faster on every pass.
    pub fn motion(&self, class_idx: usize) -> Motion {
        if class_idx == 0 {
            return Motion {
                trajectory: Trajectory::Still,
                speed: 0.0,
            };
        }
        let j = class_idx - 1;
        Motion {
            trajectory: MOVING[j % MOVING.len()],
            speed: self.sprite.base_speed + (j / MOVING.len()) as f32 * self.sprite.speed_step,
        }
    }

    pub fn category_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|k| {
                let m = self.motion(k);
                let kind = serde_json::to_value(m.trajectory)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default();
                if m.trajectory == Trajectory::Still {
                    kind
                } else {
                    format!("{kind}-{}", m.speed)
                }
            })
            .collect()
    }

    fn blur_half(&self, speed: f32) -> f32 {
        0.5 * self.sprite.blur_gain * speed
    }

    fn margin(&self, motion: Motion) -> f32 {
        self.sprite.radius_max + self.blur_half(motion.speed) + 1.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if self.clips_per_class < 1 {
            return bad("clips_per_class must be >= 1".into());
        }
        if self.frames_per_clip < 2 {
            return bad(format!(
                "frames_per_clip must be >= 2, got {}",
                self.frames_per_clip
            ));
        }
        if self.height < 32 || self.width < 32 {
            return bad(format!(
                "frame size must be at least 32x32, got {}x{}",
                self.height, self.width
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        let s = &self.sprite;
        if !(s.radius_min > 0.0 && s.radius_min <= s.radius_max) {
            return bad("sprite radius range must satisfy 0 < min <= max".into());
        }
        if !(s.base_speed > 0.0 && s.speed_step >= 0.0 && s.blur_gain >= 0.0) {
            return bad("sprite speed must be positive and blur gain non-negative".into());
        }
        if !(0.0..=1.0).contains(&s.center_jitter) {
            return bad(format!(
                "sprite center_jitter must lie in [0, 1], got {}",
                s.center_jitter
            ));
        }
        let b = &self.background;
        if !(b.period_min > 0.0 && b.period_min <= b.period_max) {
            return bad("background period range must satisfy 0 < min <= max".into());
        }
        self.split.validate()?;
        let extent = self.height.min(self.width) as f32;
        for k in 0..self.num_classes {
            let m = self.motion(k);
            if 2.0 * self.margin(m) >= extent {
                return Err(Error::Config(format!(
                    "degenerate geometry: class {k} ({:?} at speed {}) needs {:.1} px of margin \
                     on each side of a {}x{} frame",
                    m.trajectory,
                    m.speed,
                    self.margin(m),
                    self.height,
                    self.width
                )));
            }
        }
        Ok(())
    }
}

/// One rendered clip. `flows` may be empty for external data without ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub action: usize,
    pub background: Option<usize>,
    pub frames: Vec<Frame>,
    pub masks: Vec<Mask>,
    pub flows: Vec<FlowField>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), Frame::dims)
    }
}

/// SplitMix64 finaliser, used to derive independent per-clip seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_clip(config: &SynthConfig, class_idx: usize, rng_seed: u64) -> Result<Clip> {
    config.validate()?;
    if class_idx >= config.num_classes {
        return Err(Error::Config(format!(
            "class {class_idx} out of range for {} classes",
            config.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let k = config.num_classes;
    let background = if rng.random_bool(config.rho) {
        class_idx
    } else {
        let j = rng.random_range(0..k - 1);
        if j >= class_idx {
            j + 1
        } else {
            j
        }
    };
    let texture = BackgroundTexture::sample(config, background, &mut rng);
    let motion = config.motion(class_idx);
    let path = SpritePath::sample(config, motion, &mut rng);
    let sprite = Sprite::sample(config, &mut rng);

    let (h, w) = (config.height, config.width);
    let bg = Frame::from_fn(h, w, |y, x| texture.color(y, x));
    let t_len = config.frames_per_clip;
    let mut frames = Vec::with_capacity(t_len);
    let mut masks = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let (pos, axis) = (path.position(t), path.blur_axis());
        let half = config.blur_half(motion.speed);
        let mut frame = bg.clone();
        let mask = Mask::from_fn(h, w, |y, x| {
            sprite.covers([x as f32 + 0.5, y as f32 + 0.5], pos, axis, half)
        });
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) {
                    frame.set_pixel(
                        y,
                        x,
                        sprite.color([x as f32 + 0.5 - pos[0], y as f32 + 0.5 - pos[1]]),
                    );
                }
            }
        }
        frame.quantize();
        frames.push(frame);
        masks.push(mask);
    }
    let flows = (0..t_len - 1)
        .map(|t| {
            let (a, b) = (path.position(t), path.position(t + 1));
            let d = [b[0] - a[0], b[1] - a[1]];
            let mut flow = FlowField::zeros(h, w);
            for y in 0..h {
                for x in 0..w {
                    if masks[t].get(y, x) {
                        flow.set(y, x, d);
                    }
                }
            }
            flow
        })
        .collect();
    Ok(Clip {
        id: format!("a{class_idx:02}-{rng_seed:016x}"),
        action: class_idx,
        background: Some(background),
        frames,
        masks,
        flows,
    })
}

/// Clip id, class and split for every clip of the dataset, before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedClip {
    pub id: String,
    pub action: usize,
    pub seed: u64,
    pub split: Split,
}

pub fn plan_dataset(config: &SynthConfig) -> Result<Vec<PlannedClip>> {
    config.validate()?;
    let n = config.clips_per_class;
    let (n_train, n_val, _) = config.split.counts(n);
    let mut out = Vec::with_capacity(n * config.num_classes);
    for class in 0..config.num_classes {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x5_1117 + class as u64));
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut splits = vec![Split::Test; n];
        for (rank, &idx) in order.iter().enumerate() {
            splits[idx] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        for (idx, split) in splits.into_iter().enumerate() {
            out.push(PlannedClip {
                id: format!("a{class:02}-{idx:03}"),
                action: class,
                seed: mix_seed(config.seed, ((class as u64) << 32) | idx as u64),
                split,
            });
        }
    }
    Ok(out)
}

/// Renders the whole dataset in memory. Records carry the paths the clips
/// would have under [`manifest::clip_layout`].
pub fn generate_dataset_in_memory(config: &SynthConfig) -> Result<(DatasetManifest, Vec<Clip>)> {
    let plan = plan_dataset(config)?;
    let clips = plan
        .par_iter()
        .map(|p| {
            let mut clip = generate_clip(config, p.action, p.seed)?;
            clip.id = p.id.clone();
            Ok(clip)
        })
        .collect::<Result<Vec<_>>>()?;
    let records = plan
        .iter()
        .zip(&clips)
        .map(|(p, clip)| ClipRecord::for_layout(clip, p.split))
        .collect();
    let manifest = DatasetManifest {
        format: manifest::FORMAT.to_owned(),
        categories: config.category_names(),
        split_fractions: config.split.clone(),
        generator: Some(config.clone()),
        clips: records,
    };
    Ok((manifest, clips))
}

/// Renders the dataset and writes it under `root` in the documented layout.
pub fn generate_dataset(config: &SynthConfig, root: &Path) -> Result<DatasetManifest> {
    let (manifest, clips) = generate_dataset_in_memory(config)?;
    std::fs::create_dir_all(root).map_err(crate::error::io_err(root))?;
    clips
        .par_iter()
        .try_for_each(|clip| manifest::write_clip(root, clip))?;
    manifest.save(root)?;
    Ok(manifest)
}

struct Sprite {
    radius: f32,
    freq: [[f32; 2]; 2],
    phase: [f32; 2],
}

impl Sprite {
    fn sample(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let s = &config.sprite;
        let radius = if s.radius_max > s.radius_min {
            rng.random_range(s.radius_min..=s.radius_max)
        } else {
            s.radius_min
        };
        Self {
            radius,
            freq: [[0.9, 0.4], [-0.35, 0.85]],
            phase: [0.0, 1.3],
        }
    }

    /// Capsule test: distance from `p` to the blur segment through `center`.
    fn covers(&self, p: [f32; 2], center: [f32; 2], axis: [f32; 2], half: f32) -> bool {
        let rel = [p[0] - center[0], p[1] - center[1]];
        let along = (rel[0] * axis[0] + rel[1] * axis[1]).clamp(-half, half);
        let dx = rel[0] - along * axis[0];
        let dy = rel[1] - along * axis[1];
        dx * dx + dy * dy <= self.radius * self.radius
    }

    /// Colour at sprite-local coordinates; the texture moves rigidly with the sprite.
    fn color(&self, local: [f32; 2]) -> [f32; 3] {
        let a = (self.freq[0][0] * local[0] + self.freq[0][1] * local[1] + self.phase[0]).sin();
        let b = (self.freq[1][0] * local[0] + self.freq[1][1] * local[1] + self.phase[1]).sin();
        let tex = 0.5 + 0.25 * a + 0.25 * b;
        [1.0, 0.5 + 0.45 * tex, 0.1 + 0.25 * tex]
    }
}

/// Linear classes shuttle back and forth along one line through the frame, so
/// the blur axis and the flow direction agree at every frame.
struct SpritePath {
    center: [f32; 2],
    axis: [f32; 2],
    tau0: f32,
    step: f32,
    range: (f32, f32),
}

impl SpritePath {
    fn sample(config: &SynthConfig, motion: Motion, rng: &mut ChaCha8Rng) -> Self {
        let margin = config.margin(motion);
        let lo = [margin, margin];
        let hi = [config.width as f32 - margin, config.height as f32 - margin];
        let d = 0.5f32.sqrt();
        let axis = match motion.trajectory {
            Trajectory::Still | Trajectory::Horizontal => [1.0, 0.0],
            Trajectory::Vertical => [0.0, 1.0],
            Trajectory::Diagonal => [d, d],
            Trajectory::AntiDiagonal => [d, -d],
        };
        let min_len = 0.5 * (hi[0] - lo[0]).min(hi[1] - lo[1]);
        let mid = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
        let spread = [
            config.sprite.center_jitter * 0.5 * (hi[0] - lo[0]),
            config.sprite.center_jitter * 0.5 * (hi[1] - lo[1]),
        ];
        let mut pick = || {
            let mut c = mid;
            for i in 0..2 {
                if spread[i] > 0.0 {
                    c[i] += rng.random_range(-spread[i]..=spread[i]);
                }
            }
            c
        };
        let mut center = pick();
        let mut range = line_extent(center, axis, lo, hi);
        for _ in 0..64 {
            if range.1 - range.0 >= min_len {
                break;
            }
            center = pick();
            range = line_extent(center, axis, lo, hi);
        }
        if range.1 - range.0 < min_len {
            center = mid;
            range = line_extent(center, axis, lo, hi);
        }
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        Self {
            center,
            axis,
            tau0: rng.random_range(range.0..=range.1),
            step: sign * motion.speed,
            range,
        }
    }

    fn position(&self, t: usize) -> [f32; 2] {
        let tau = reflect(self.tau0 + self.step * t as f32, self.range.0, self.range.1);
        [
            self.center[0] + tau * self.axis[0],
            self.center[1] + tau * self.axis[1],
        ]
    }

    /// Unit direction of the blur streak (sign is irrelevant for a capsule).
    fn blur_axis(&self) -> [f32; 2] {
        self.axis
    }
}

/// Range of `tau` for which `c + tau * u` stays inside the box.
fn line_extent(c: [f32; 2], u: [f32; 2], lo: [f32; 2], hi: [f32; 2]) -> (f32, f32) {
    let (mut a, mut b) = (f32::NEG_INFINITY, f32::INFINITY);
    for i in 0..2 {
        if u[i] != 0.0 {
            let (p, q) = ((lo[i] - c[i]) / u[i], (hi[i] - c[i]) / u[i]);
            a = a.max(p.min(q));
            b = b.min(p.max(q));
        }
    }
    (a, b)
}

/// Folds a coordinate back into `[lo, hi]` as if it bounced off both walls.
fn reflect(v: f32, lo: f32, hi: f32) -> f32 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let period = 2.0 * span;
    let u = (v - lo).rem_euclid(period);
    lo + if u <= span { u } else { period - u }
}

struct BackgroundTexture {
    hue: f32,
    family: usize,
    saturation: f32,
    value: f32,
    contrast: f32,
    period: f32,
    phase: [f32; 2],
    noise: Vec<f32>,
    noise_cells: usize,
}

impl BackgroundTexture {
    fn sample(config: &SynthConfig, class: usize, rng: &mut ChaCha8Rng) -> Self {
        let b = &config.background;
        let period = if b.period_max > b.period_min {
            rng.random_range(b.period_min..=b.period_max)
        } else {
            b.period_min
        };
        let noise_cells = 6;
        Self {
            hue: class as f32 / config.num_classes as f32,
            family: class % 4,
            saturation: b.saturation,
            value: b.value,
            contrast: b.contrast,
            period,
            phase: [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)],
            noise: (0..(noise_cells + 1) * (noise_cells + 1))
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            noise_cells,
        }
    }

    fn pattern(&self, y: usize, x: usize) -> f32 {
        let w = TAU / self.period;
        let (fy, fx) = (y as f32, x as f32);
        match self.family {
            0 => (w * fy + self.phase[0]).sin(),
            1 => (w * fx + self.phase[0]).sin(),
            2 => (w * fx + self.phase[0]).sin() * (w * fy + self.phase[1]).sin(),
            _ => {
                // bilinear value noise on a coarse grid
                let cell = 2.0 * self.period;
                let (gx, gy) = (fx / cell, fy / cell);
                let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
                let (tx, ty) = (gx - gx.floor(), gy - gy.floor());
                let n = self.noise_cells + 1;
                let at = |i: usize, j: usize| self.noise[(j % n) * n + (i % n)];
                let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                (top * (1.0 - ty) + bottom * ty) * 1.5
            }
        }
    }

    fn color(&self, y: usize, x: usize) -> [f32; 3] {
        let v = self.value * (1.0 + self.contrast * self.pattern(y, x).clamp(-1.0, 1.0));
        hsv_to_rgb(self.hue, self.saturation, v)
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}
