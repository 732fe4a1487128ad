//! Stimulus versions (original, body-only, background-only) and optic flow.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::raster::{FlowField, Frame, Mask};
use crate::synth::Clip;

/// Linear scale applied to the union body mask before inpainting.
pub const DILATION_FACTOR: f64 = 1.2;
/// Resolution of the scale sweep used by [`dilate`].
pub const DILATION_STEP: f64 = 0.01;
pub const INPAINT_TOLERANCE: f32 = 1e-4;
pub const INPAINT_MAX_ITERS: usize = 10_000;
/// Half-width of the Lucas-Kanade window (5x5).
pub const FLOW_RADIUS: usize = 2;
pub const FLOW_MIN_EIGEN: f32 = 1e-6;
pub const FLOW_ITERS: usize = 10;
/// Estimated displacements are clamped to this many pixels per component.
pub const FLOW_CLAMP: f32 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StimulusVersion {
    #[serde(rename = "orig")]
    Original,
    #[serde(rename = "body")]
    BodyOnly,
    #[serde(rename = "bg")]
    BackgroundOnly,
}

impl StimulusVersion {
    pub const ALL: [StimulusVersion; 3] = [Self::Original, Self::BodyOnly, Self::BackgroundOnly];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Original => "orig",
            Self::BodyOnly => "body",
            Self::BackgroundOnly => "bg",
        }
    }
}

impl fmt::Display for StimulusVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for StimulusVersion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == s).ok_or_else(|| {
            Error::Invalid(format!("unknown version {s:?}, expected orig, body or bg"))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VersionedClip {
    pub source_id: String,
    pub version: StimulusVersion,
    pub frames: Vec<Frame>,
    pub flows: Vec<FlowField>,
    /// Inpainted region, for the background-only version.
    pub region: Option<Mask>,
}

fn check_dims(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Sets every pixel outside the mask to black.
pub fn body_only(frame: &Frame, mask: &Mask) -> Result<Frame> {
    check_dims("body_only frame vs mask", frame.dims(), mask.dims())?;
    let (h, w) = frame.dims();
    Ok(Frame::from_fn(h, w, |y, x| {
        if mask.get(y, x) {
            frame.pixel(y, x)
        } else {
            [0.0; 3]
        }
    }))
}

/// Pixelwise OR of all masks.
pub fn union_of(masks: &[Mask]) -> Result<Mask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Invalid("union of zero masks".into()))?;
    let (h, w) = first.dims();
    for m in masks {
        check_dims("union_mask", m.dims(), (h, w))?;
    }
    Ok(Mask::from_fn(h, w, |y, x| {
        masks.iter().any(|m| m.get(y, x))
    }))
}

pub fn union_mask(clip: &Clip) -> Result<Mask> {
    union_of(&clip.masks)
}

/// Scales the mask about its centroid by `factor` with nearest-neighbour
/// sampling, OR-ed with the input.
///
/// Every scale on the grid `1, 1.01, ...` up to `factor` is included, so the
/// output grows monotonically with `factor`; the factor is effectively rounded
/// down to the grid.
pub fn dilate(mask: &Mask, factor: f64) -> Result<Mask> {
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(Error::Invalid(format!(
            "dilation factor must be >= 1, got {factor}"
        )));
    }
    if mask.is_empty() {
        return Ok(mask.clone());
    }
    let (h, w) = mask.dims();
    let (mut cy, mut cx, mut n) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                cy += y as f64 + 0.5;
                cx += x as f64 + 0.5;
                n += 1.0;
            }
        }
    }
    let (cy, cx) = (cy / n, cx / n);
    let steps = ((factor - 1.0) / DILATION_STEP + 1e-9).floor() as usize;
    let scales: Vec<f64> = (1..=steps)
        .map(|j| 1.0 + j as f64 * DILATION_STEP)
        .collect();
    let sample = |sy: f64, sx: f64| {
        let (iy, ix) = (sy.floor(), sx.floor());
        iy >= 0.0
            && ix >= 0.0
            && (iy as usize) < h
            && (ix as usize) < w
            && mask.get(iy as usize, ix as usize)
    };
    Ok(Mask::from_fn(h, w, |y, x| {
        if mask.get(y, x) {
            return true;
        }
        let (qy, qx) = (y as f64 + 0.5, x as f64 + 0.5);
        scales
            .iter()
            .any(|&s| sample(cy + (qy - cy) / s, cx + (qx - cx) / s))
    }))
}

/// Harmonic fill of `region`: Gauss-Seidel sweeps in row-major order replacing
/// each region pixel by the mean of its in-frame 4-neighbours.
pub fn inpaint(frame: &Frame, region: &Mask) -> Result<Frame> {
    check_dims("inpaint frame vs region", frame.dims(), region.dims())?;
    let (h, w) = frame.dims();
    if region.is_empty() {
        return Ok(frame.clone());
    }
    if region.area() == h * w {
        return Err(Error::RegionCoversFrame {
            height: h,
            width: w,
        });
    }
    let cells: Vec<(usize, Vec<usize>)> = (0..h * w)
        .filter(|&i| region.bits()[i])
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let mut nb = Vec::with_capacity(4);
            if y > 0 {
                nb.push(i - w);
            }
            if x > 0 {
                nb.push(i - 1);
            }
            if x + 1 < w {
                nb.push(i + 1);
            }
            if y + 1 < h {
                nb.push(i + w);
            }
            (i, nb)
        })
        .collect();

    let mut out = frame.data().to_vec();
    for c in 0..3 {
        let mut plane: Vec<f32> = (0..h * w).map(|i| out[i * 3 + c]).collect();
        let ring: Vec<f32> = cells
            .iter()
            .flat_map(|(_, nb)| nb.iter().copied())
            .filter(|&j| !region.bits()[j])
            .map(|j| plane[j])
            .collect();
        let init = if ring.is_empty() {
            0.0
        } else {
            ring.iter().sum::<f32>() / ring.len() as f32
        };
        for (i, _) in &cells {
            plane[*i] = init;
        }
        for _ in 0..INPAINT_MAX_ITERS {
            let mut max_change = 0.0f32;
            for (i, nb) in &cells {
                let v = nb.iter().map(|&j| plane[j]).sum::<f32>() / nb.len() as f32;
                max_change = max_change.max((v - plane[*i]).abs());
                plane[*i] = v;
            }
            if max_change < INPAINT_TOLERANCE {
                break;
            }
        }
        for (i, _) in &cells {
            out[i * 3 + c] = plane[*i];
        }
    }
    Frame::from_raw(h, w, out)
}

/// Flows for a frame sequence, one per consecutive pair.
pub fn estimate_flows(frames: &[Frame]) -> Result<Vec<FlowField>> {
    frames
        .windows(2)
        .map(|p| estimate_flow(&p[0], &p[1]))
        .collect()
}

pub fn original(clip: &Clip) -> Result<VersionedClip> {
    Ok(VersionedClip {
        source_id: clip.id.clone(),
        version: StimulusVersion::Original,
        frames: clip.frames.clone(),
        flows: estimate_flows(&clip.frames)?,
        region: None,
    })
}

pub fn body_version(clip: &Clip) -> Result<VersionedClip> {
    if clip.masks.len() != clip.frames.len() {
        return Err(Error::Shape(format!(
            "clip {:?}: {} masks for {} frames",
            clip.id,
            clip.masks.len(),
            clip.frames.len()
        )));
    }
    let frames = clip
        .frames
        .iter()
        .zip(&clip.masks)
        .map(|(f, m)| body_only(f, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(VersionedClip {
        source_id: clip.id.clone(),
        version: StimulusVersion::BodyOnly,
        flows: estimate_flows(&frames)?,
        frames,
        region: None,
    })
}

/// Inpaints the dilated union mask in every frame. Output frames are
/// quantized to 8 bits like the source frames.
pub fn background_only(clip: &Clip) -> Result<VersionedClip> {
    let region = dilate(&union_mask(clip)?, DILATION_FACTOR)?;
    let frames = clip
        .frames
        .iter()
        .map(|f| {
            let mut out = inpaint(f, &region)?;
            out.quantize();
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VersionedClip {
        source_id: clip.id.clone(),
        version: StimulusVersion::BackgroundOnly,
        flows: estimate_flows(&frames)?,
        frames,
        region: Some(region),
    })
}

pub fn make_version(clip: &Clip, version: StimulusVersion) -> Result<VersionedClip> {
    match version {
        StimulusVersion::Original => original(clip),
        StimulusVersion::BodyOnly => body_version(clip),
        StimulusVersion::BackgroundOnly => background_only(clip),
    }
}

/// Directory of one versioned clip: `<root>/<tag>/<clip_id>`.
pub fn version_dir(root: &Path, version: StimulusVersion, clip_id: &str) -> PathBuf {
    root.join(version.tag()).join(clip_id)
}

/// Writes frames as PNG (quantized to 8 bits) and flows in the raw flow format.
pub fn write_version(root: &Path, vc: &VersionedClip) -> Result<()> {
    let dir = version_dir(root, vc.version, &vc.source_id);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for (t, frame) in vc.frames.iter().enumerate() {
        frame.save_png(&dir.join(format!("frame_{t:04}.png")))?;
    }
    for (t, flow) in vc.flows.iter().enumerate() {
        flow.save(&dir.join(format!("flow_{t:04}.f32")))?;
    }
    if let Some(region) = &vc.region {
        region.save_png(&dir.join("region.png"))?;
    }
    Ok(())
}

pub fn load_version(
    root: &Path,
    version: StimulusVersion,
    clip_id: &str,
    num_frames: usize,
) -> Result<VersionedClip> {
    let dir = version_dir(root, version, clip_id);
    let frames = (0..num_frames)
        .map(|t| Frame::load_png(&dir.join(format!("frame_{t:04}.png"))))
        .collect::<Result<Vec<_>>>()?;
    let flows = (0..num_frames.saturating_sub(1))
        .map(|t| FlowField::load(&dir.join(format!("flow_{t:04}.f32"))))
        .collect::<Result<Vec<_>>>()?;
    let region_path = dir.join("region.png");
    let region = if region_path.exists() {
        Some(Mask::load_png(&region_path)?)
    } else {
        None
    };
    Ok(VersionedClip {
        source_id: clip_id.to_owned(),
        version,
        frames,
        flows,
        region,
    })
}

struct Plane {
    h: usize,
    w: usize,
    v: Vec<f32>,
}

impl Plane {
    fn at(&self, y: isize, x: isize) -> f32 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.v[y * self.w + x]
    }

    fn bilinear(&self, y: f32, x: f32) -> f32 {
        let (y0, x0) = (y.floor(), x.floor());
        let (ty, tx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let top = self.at(y0, x0) * (1.0 - tx) + self.at(y0, x0 + 1) * tx;
        let bottom = self.at(y0 + 1, x0) * (1.0 - tx) + self.at(y0 + 1, x0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// Dense iterative Lucas-Kanade on luma with a 5x5 window. Returns the
/// displacement from `a` to `b` in pixels (x, y); zero where the structure
/// tensor's smaller eigenvalue is below [`FLOW_MIN_EIGEN`].
pub fn estimate_flow(a: &Frame, b: &Frame) -> Result<FlowField> {
    check_dims("estimate_flow", a.dims(), b.dims())?;
    let (h, w) = a.dims();
    let pa = Plane { h, w, v: a.luma() };
    let pb = Plane { h, w, v: b.luma() };
    let mut gx = vec![0.0f32; h * w];
    let mut gy = vec![0.0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = 0.5 * (pa.at(y, x + 1) - pa.at(y, x - 1));
            gy[i] = 0.5 * (pa.at(y + 1, x) - pa.at(y - 1, x));
        }
    }
    let r = FLOW_RADIUS as isize;
    let mut flow = FlowField::zeros(h, w);
    let mut window = Vec::with_capacity((2 * FLOW_RADIUS + 1).pow(2));
    for y in 0..h as isize {
        for x in 0..w as isize {
            window.clear();
            let (mut sxx, mut sxy, mut syy) = (0.0f32, 0.0f32, 0.0f32);
            for wy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for wx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    let i = wy as usize * w + wx as usize;
                    sxx += gx[i] * gx[i];
                    sxy += gx[i] * gy[i];
                    syy += gy[i] * gy[i];
                    window.push((wy, wx, i));
                }
            }
            let tr = sxx + syy;
            let det = sxx * syy - sxy * sxy;
            let lambda_min = 0.5 * tr - (0.25 * tr * tr - det).max(0.0).sqrt();
            if lambda_min < FLOW_MIN_EIGEN || det <= 0.0 {
                continue;
            }
            let mut d = [0.0f32, 0.0f32];
            for _ in 0..FLOW_ITERS {
                let (mut bx, mut by) = (0.0f32, 0.0f32);
                for &(wy, wx, i) in &window {
                    let it = pb.bilinear(wy as f32 + d[1], wx as f32 + d[0]) - pa.v[i];
                    bx += gx[i] * it;
                    by += gy[i] * it;
                }
                let dx = -(syy * bx - sxy * by) / det;
                let dy = -(sxx * by - sxy * bx) / det;
                d[0] = (d[0] + dx).clamp(-FLOW_CLAMP, FLOW_CLAMP);
                d[1] = (d[1] + dy).clamp(-FLOW_CLAMP, FLOW_CLAMP);
                if dx * dx + dy * dy < 1e-6 {
                    break;
                }
            }
            flow.set(y as usize, x as usize, d);
        }
    }
    Ok(flow)
}

/// Mean endpoint error of `estimate` against `truth` over pixels whose whole
/// flow window lies inside `mask`. `None` when no pixel qualifies.
pub fn interior_epe(estimate: &FlowField, truth: &FlowField, mask: &Mask) -> Result<Option<f64>> {
    check_dims("interior_epe", estimate.dims(), truth.dims())?;
    check_dims("interior_epe", estimate.dims(), mask.dims())?;
    let (h, w) = mask.dims();
    let r = FLOW_RADIUS;
    let (mut sum, mut n) = (0.0f64, 0usize);
    for y in r..h.saturating_sub(r) {
        for x in r..w.saturating_sub(r) {
            let inside = (y - r..=y + r).all(|wy| (x - r..=x + r).all(|wx| mask.get(wy, wx)));
            if !inside {
                continue;
            }
            let (e, t) = (estimate.get(y, x), truth.get(y, x));
            sum += (((e[0] - t[0]) as f64).powi(2) + ((e[1] - t[1]) as f64).powi(2)).sqrt();
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}
