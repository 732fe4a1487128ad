//! Baseline (single stream) and DomainNet (body + background streams) classifiers.
//!
//! Each stream is a small residual network:
//!
//! ```text
//! stem 3x3/2 -> relu
//! per stage: [3x3 projection -> relu if the width changes]
//!            blocks: y = relu(x + conv_b(relu(conv_a(x))))
//!            max-pool 2x2
//! global average pool -> dense (with bias) -> K logits
//! ```
//!
//! Convolutions carry no bias, so a network with zero weights outputs its
//! head bias for every input.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tensorcore::checkpoint::SpecHash;
use tensorcore::{Element, ParamId, ParamSet, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::raster::{FlowField, Frame};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Baseline,
    DomainNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputMode {
    #[serde(rename = "frames")]
    Frames,
    #[serde(rename = "frames+flows")]
    FramesFlows,
}

impl InputMode {
    pub fn channels(self) -> usize {
        match self {
            Self::Frames => 3,
            Self::FramesFlows => 5,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Self::Frames => "frames",
            Self::FramesFlows => "frames+flows",
        }
    }
}

impl Topology {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::DomainNet => "domainnet",
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "domainnet" => Ok(Self::DomainNet),
            _ => Err(Error::Invalid(format!(
                "unknown model {s:?}, expected baseline or domainnet"
            ))),
        }
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frames" => Ok(Self::Frames),
            "frames+flows" => Ok(Self::FramesFlows),
            _ => Err(Error::Invalid(format!(
                "unknown mode {s:?}, expected frames or frames+flows"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub topology: Topology,
    pub input_mode: InputMode,
    pub num_classes: usize,
    pub stem_width: usize,
    pub stem_stride: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl ModelSpec {
    pub fn new(topology: Topology, input_mode: InputMode, num_classes: usize) -> Self {
        Self {
            topology,
            input_mode,
            num_classes,
            stem_width: 16,
            stem_stride: 2,
            stage_widths: vec![16, 32, 64],
            blocks_per_stage: 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.input_mode.channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.stem_width == 0 || self.stem_stride == 0 || self.stage_widths.contains(&0) {
            return Err(Error::Config(
                "widths and stem stride must be positive".into(),
            ));
        }
        if self.stage_widths.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding; stored in checkpoints.
    pub fn hash(&self) -> SpecHash {
        let json = serde_json::to_vec(self).expect("model spec serializes");
        Sha256::digest(&json).into()
    }

    pub fn stream_prefixes(&self) -> &'static [&'static str] {
        match self.topology {
            Topology::Baseline => &["main"],
            Topology::DomainNet => &["body", "bg"],
        }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    proj: Option<ParamId>,
    blocks: Vec<(ParamId, ParamId)>,
}

/// Parameter ids of one stream.
#[derive(Clone, Debug)]
pub struct StreamLayout {
    pub prefix: String,
    stem: ParamId,
    stages: Vec<Stage>,
    head_w: ParamId,
    head_b: ParamId,
}

impl StreamLayout {
    /// Ids of every parameter that belongs to this stream.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.stem];
        for s in &self.stages {
            ids.extend(s.proj);
            for &(a, b) in &s.blocks {
                ids.push(a);
                ids.push(b);
            }
        }
        ids.push(self.head_w);
        ids.push(self.head_b);
        ids
    }
}

/// Weight shapes of one stream, in insertion order.
fn stream_shapes(spec: &ModelSpec, prefix: &str) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![(
        format!("{prefix}.stem.w"),
        vec![spec.stem_width, spec.in_channels(), 3, 3],
    )];
    let mut c = spec.stem_width;
    for (i, &w) in spec.stage_widths.iter().enumerate() {
        if w != c {
            out.push((format!("{prefix}.s{i}.proj.w"), vec![w, c, 3, 3]));
            c = w;
        }
        for j in 0..spec.blocks_per_stage {
            out.push((format!("{prefix}.s{i}.b{j}.conv_a.w"), vec![c, c, 3, 3]));
            out.push((format!("{prefix}.s{i}.b{j}.conv_b.w"), vec![c, c, 3, 3]));
        }
    }
    out.push((format!("{prefix}.head.w"), vec![spec.num_classes, c]));
    out.push((format!("{prefix}.head.b"), vec![spec.num_classes]));
    out
}

fn layout_for<T: Element>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    prefix: &str,
) -> Result<StreamLayout> {
    for (name, shape) in stream_shapes(spec, prefix) {
        let id = params
            .find(&name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
        if params.value(id).shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "parameter {name}: shape {:?}, expected {shape:?}",
                params.value(id).shape()
            )));
        }
    }
    let get = |name: String| -> Result<ParamId> {
        params
            .find(&name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    };
    let stem = get(format!("{prefix}.stem.w"))?;
    let mut c = spec.stem_width;
    let mut stages = Vec::new();
    for (i, &w) in spec.stage_widths.iter().enumerate() {
        let proj = if w != c {
            c = w;
            Some(get(format!("{prefix}.s{i}.proj.w"))?)
        } else {
            None
        };
        let blocks = (0..spec.blocks_per_stage)
            .map(|j| {
                Ok((
                    get(format!("{prefix}.s{i}.b{j}.conv_a.w"))?,
                    get(format!("{prefix}.s{i}.b{j}.conv_b.w"))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        stages.push(Stage { proj, blocks });
    }
    Ok(StreamLayout {
        prefix: prefix.to_owned(),
        stem,
        stages,
        head_w: get(format!("{prefix}.head.w"))?,
        head_b: get(format!("{prefix}.head.b"))?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Multiplies every He-normal standard deviation.
    pub gain: f64,
    /// Extra factor on the second convolution of each residual block.
    pub residual_scale: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            gain: 1.0,
            residual_scale: 0.5,
        }
    }
}

/// A classifier: spec, parameters and the per-stream parameter layout.
#[derive(Clone, Debug)]
pub struct Network<T: Element = f32> {
    pub spec: ModelSpec,
    pub params: ParamSet<T>,
    streams: Vec<StreamLayout>,
}

impl<T: Element> Network<T> {
    /// He-normal fan-in initialisation; biases start at zero.
    pub fn init(spec: &ModelSpec, init: InitConfig, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for prefix in spec.stream_prefixes() {
            for (name, shape) in stream_shapes(spec, prefix) {
                let value = if name.ends_with(".head.b") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let mut std = init.gain * (2.0 / fan_in as f64).sqrt();
                    if name.ends_with(".conv_b.w") {
                        std *= init.residual_scale;
                    }
                    if name.ends_with(".head.w") {
                        std *= 0.5f64.sqrt();
                    }
                    let dist = Normal::new(0.0, std.max(0.0))
                        .map_err(|e| Error::Config(format!("init: {e}")))?;
                    Tensor::from_fn(shape, |_| T::of(dist.sample(&mut rng)))
                };
                params.insert(name, value)?;
            }
        }
        Self::from_params(spec.clone(), params)
    }

    /// Wraps existing parameters, checking names and shapes against the spec.
    pub fn from_params(spec: ModelSpec, params: ParamSet<T>) -> Result<Self> {
        spec.validate()?;
        let streams = spec
            .stream_prefixes()
            .iter()
            .map(|p| layout_for(&spec, &params, p))
            .collect::<Result<Vec<_>>>()?;
        let expected: usize = streams.iter().map(|s| s.param_ids().len()).sum();
        if expected != params.len() {
            return Err(Error::Shape(format!(
                "parameter set has {} entries, spec expects {expected}",
                params.len()
            )));
        }
        Ok(Self {
            spec,
            params,
            streams,
        })
    }

    pub fn streams(&self) -> &[StreamLayout] {
        &self.streams
    }

    pub fn stream(&self, prefix: &str) -> Option<&StreamLayout> {
        self.streams.iter().find(|s| s.prefix == prefix)
    }

    pub fn cast<U: Element>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self.params.cast(),
            streams: self.streams.clone(),
        }
    }

    /// Logits `[N, K]` of one stream.
    pub fn backbone_forward(
        &self,
        tape: &mut Tape<T>,
        stream: &StreamLayout,
        x: Var,
    ) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.spec.in_channels() {
            return Err(Error::Shape(format!(
                "input {shape:?}: expected [N, {}, H, W] for {} input",
                self.spec.in_channels(),
                self.spec.input_mode
            )));
        }
        let p = &self.params;
        let k = tape.param(p, stream.stem);
        let mut h = tape.conv2d(x, k, self.spec.stem_stride, 1)?;
        h = tape.relu(h);
        for (i, stage) in stream.stages.iter().enumerate() {
            if i > 0 {
                h = tape.max_pool2(h)?;
            }
            if let Some(proj) = stage.proj {
                let k = tape.param(p, proj);
                h = tape.conv2d(h, k, 1, 1)?;
                h = tape.relu(h);
            }
            for &(a, b) in &stage.blocks {
                let ka = tape.param(p, a);
                let kb = tape.param(p, b);
                let mut r = tape.conv2d(h, ka, 1, 1)?;
                r = tape.relu(r);
                r = tape.conv2d(r, kb, 1, 1)?;
                h = tape.add(h, r)?;
                h = tape.relu(h);
            }
        }
        let g = tape.global_avg_pool(h)?;
        let w = tape.param(p, stream.head_w);
        let b = tape.param(p, stream.head_b);
        Ok(tape.dense(g, w, b)?)
    }

    pub fn baseline_forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if self.spec.topology != Topology::Baseline {
            return Err(Error::Invalid(
                "baseline_forward on a domainnet model".into(),
            ));
        }
        self.backbone_forward(tape, &self.streams[0], x)
    }

    /// Returns `(logits_body, logits_bg, logits_combined)`; the combined logits
    /// are the elementwise sum of the two streams.
    pub fn domainnet_forward(
        &self,
        tape: &mut Tape<T>,
        body: Var,
        bg: Var,
    ) -> Result<DomainLogits> {
        if self.spec.topology != Topology::DomainNet {
            return Err(Error::Invalid(
                "domainnet_forward on a baseline model".into(),
            ));
        }
        let (sb, sg) = (
            tape.value(body).shape().to_vec(),
            tape.value(bg).shape().to_vec(),
        );
        if sb != sg {
            return Err(Error::Shape(format!(
                "body input {sb:?} vs background input {sg:?}"
            )));
        }
        let body = self.backbone_forward(tape, &self.streams[0], body)?;
        let bg = self.backbone_forward(tape, &self.streams[1], bg)?;
        let combined = tape.add(body, bg)?;
        Ok(DomainLogits { body, bg, combined })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DomainLogits {
    pub body: Var,
    pub bg: Var,
    pub combined: Var,
}

/// The three cross-entropy terms and their sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_body: f32,
    pub l_background: f32,
    pub l_combined: f32,
    pub total: f32,
}

#[derive(Clone, Copy, Debug)]
pub struct DomainLossVars {
    pub body: Var,
    pub bg: Var,
    pub combined: Var,
    pub total: Var,
}

/// Records `(l_body + l_bg) + l_combined` on the tape.
pub fn domain_loss<T: Element>(
    tape: &mut Tape<T>,
    logits: DomainLogits,
    labels: &[usize],
) -> Result<DomainLossVars> {
    let body = tape.softmax_cross_entropy(logits.body, labels)?;
    let bg = tape.softmax_cross_entropy(logits.bg, labels)?;
    let combined = tape.softmax_cross_entropy(logits.combined, labels)?;
    let partial = tape.add(body, bg)?;
    let total = tape.add(partial, combined)?;
    Ok(DomainLossVars {
        body,
        bg,
        combined,
        total,
    })
}

impl DomainLossVars {
    pub fn breakdown(&self, tape: &Tape<f32>) -> LossBreakdown {
        let item = |v: Var| tape.value(v).data()[0];
        LossBreakdown {
            l_body: item(self.body),
            l_background: item(self.bg),
            l_combined: item(self.combined),
            total: item(self.total),
        }
    }
}

/// Packs frames (and optionally flows) into an `[N, C, H, W]` tensor.
pub fn input_tensor(frames: &[&Frame], flows: Option<&[&FlowField]>) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Shape("empty input batch".into()))?;
    let (h, w) = first.dims();
    let c = if flows.is_some() { 5 } else { 3 };
    if let Some(fl) = flows {
        if fl.len() != frames.len() {
            return Err(Error::Shape(format!(
                "{} flows for {} frames",
                fl.len(),
                frames.len()
            )));
        }
    }
    let plane = h * w;
    let mut data = vec![0.0f32; frames.len() * c * plane];
    for (n, frame) in frames.iter().enumerate() {
        if frame.dims() != (h, w) {
            return Err(Error::Shape(format!(
                "frame {:?} vs {:?} in one batch",
                frame.dims(),
                (h, w)
            )));
        }
        let base = n * c * plane;
        for (i, px) in frame.data().chunks_exact(3).enumerate() {
            for ch in 0..3 {
                data[base + ch * plane + i] = px[ch];
            }
        }
        if let Some(fl) = flows {
            let f = fl[n];
            if f.dims() != (h, w) {
                return Err(Error::Shape(format!(
                    "flow {:?} vs frame {:?}",
                    f.dims(),
                    (h, w)
                )));
            }
            for (i, d) in f.data().chunks_exact(2).enumerate() {
                data[base + 3 * plane + i] = d[0];
                data[base + 4 * plane + i] = d[1];
            }
        }
    }
    Ok(Tensor::new([frames.len(), c, h, w], data)?)
}
