//! Segment-based classifier with HF temporal-interaction blocks.
//!
//! The backbone is a small stack of `3×3` convolution stages with ReLU and
//! `2×2` mean downsampling between stages. An HF block mixes each frame's
//! features with the next frame's through a learned per-channel pair kernel,
//! which covers both temporal averaging and temporal differencing.

use serde::{Deserialize, Serialize};

use crate::autodiff::{stack, Var};
use crate::error::{Error, Result};
use crate::heads::{consensus_rows, structured_rows, ScoreVars, StructuredHeadParams};
use crate::params::{init_relu_uniform, param_struct, Binder, ParamStore};
use crate::tensor::{Padding, Tensor};

param_struct! {
    /// Per-channel temporal pair kernel, each `C × 1 × 1`.
    pub struct HfBlockParams { w0, w1 }
}

impl HfBlockParams {
    /// `w0 = 1`, `w1 = 0`: the block passes its input through unchanged.
    pub fn identity(channels: usize) -> Self {
        Self {
            w0: Tensor::full(&[channels, 1, 1], 1.0),
            w1: Tensor::zeros(&[channels, 1, 1]),
        }
    }

    pub fn uniform(channels: usize, w0: f64, w1: f64) -> Self {
        Self {
            w0: Tensor::full(&[channels, 1, 1], w0),
            w1: Tensor::full(&[channels, 1, 1], w1),
        }
    }
}

param_struct! {
    /// One backbone stage: `C_out × C_in × 3 × 3` kernel and `C_out × 1 × 1` bias.
    pub struct StageParams { kernel, bias }
}

impl StageParams {
    pub fn init(seed: u64, prefix: &str, c_in: usize, c_out: usize) -> Self {
        let fan_in = c_in * 9;
        Self {
            kernel: init_relu_uniform(seed, &format!("{prefix}.kernel"), &[c_out, c_in, 3, 3], fan_in),
            bias: Tensor::zeros(&[c_out, 1, 1]),
        }
    }
}

/// `G_t = w0⊙F_t + w1⊙F_{t+1}` for `t < T`, `G_T = w0⊙F_T`, on a list of
/// `C × H × W` frame features.
pub fn hf_block_frames<'t>(frames: &[Var<'t>], p: &HfBlockParams<Var<'t>>) -> Result<Vec<Var<'t>>> {
    let c = p.w0.shape()[0];
    if frames.is_empty() {
        return Err(Error::Invalid("hf_block: no frames".into()));
    }
    for f in frames {
        if f.shape().len() != 3 || f.shape()[0] != c {
            return Err(Error::shape("hf_block", format!("frame {:?}, block has {c} channels", f.shape())));
        }
    }
    let mut out = Vec::with_capacity(frames.len());
    for t in 0..frames.len() {
        let own = frames[t].mul(&p.w0)?;
        out.push(match frames.get(t + 1) {
            Some(next) => own.add(&next.mul(&p.w1)?)?,
            None => own,
        });
    }
    Ok(out)
}

/// [`hf_block_frames`] on a `T × C × H × W` tensor.
pub fn hf_block<'t>(features: &Var<'t>, p: &HfBlockParams<Var<'t>>) -> Result<Var<'t>> {
    let s = features.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::shape("hf_block", format!("expected T×C×H×W, got {s:?}")));
    }
    let frames = (0..s[0])
        .map(|t| features.narrow(0, t, 1)?.reshape(&s[1..]))
        .collect::<Result<Vec<_>>>()?;
    let mixed = hf_block_frames(&frames, p)?;
    stack(&mixed.iter().collect::<Vec<_>>())
}

/// Shared linear layer on every segment row of `T × F`, then the mean over
/// segments.
pub fn consensus<'t>(segments: &Var<'t>, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    let (ss, ws) = (segments.shape(), w.shape());
    if ss.len() != 2 || ws.len() != 2 || ws[1] != ss[1] || b.shape() != [ws[0]] {
        return Err(Error::shape(
            "consensus",
            format!("segments {ss:?}, weights {ws:?}, bias {:?}", b.shape()),
        ));
    }
    segments
        .matmul(&w.transpose()?)?
        .add(&b.reshape(&[1, ws[0]])?)?
        .mean_rows()
}

/// The toy convolutional backbone and where HF blocks sit in it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stages: Vec<usize>,
    #[serde(default)]
    pub hf_positions: Vec<usize>,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stages.is_empty() || self.stages.contains(&0) {
            return Err(Error::Invalid(format!(
                "backbone needs nonzero channels and at least one stage, got {} → {:?}",
                self.in_channels, self.stages
            )));
        }
        let mut seen = Vec::new();
        for &p in &self.hf_positions {
            if p >= self.stages.len() {
                return Err(Error::OutOfRange {
                    what: "hf position",
                    index: p,
                    size: self.stages.len(),
                });
            }
            if seen.contains(&p) {
                return Err(Error::Invalid(format!("hf position {p} listed twice")));
            }
            seen.push(p);
        }
        Ok(())
    }

    /// Channels entering stage `k`.
    pub fn stage_input(&self, k: usize) -> usize {
        if k == 0 {
            self.in_channels
        } else {
            self.stages[k - 1]
        }
    }

    pub fn out_channels(&self) -> usize {
        *self.stages.last().expect("validated backbone has stages")
    }

    pub fn last_stage(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn num_hf_blocks(&self) -> usize {
        self.hf_positions.len()
    }

    /// Adds `prefix.stage{k}.*` and `prefix.hf{k}.*` entries to `store`.
    pub fn init_params(&self, seed: u64, prefix: &str, store: &mut ParamStore) -> Result<()> {
        self.validate()?;
        for (k, &c_out) in self.stages.iter().enumerate() {
            let name = format!("{prefix}.stage{k}");
            StageParams::init(seed, &name, self.stage_input(k), c_out).store_into(store, &name);
        }
        for &k in &self.hf_positions {
            HfBlockParams::identity(self.stage_input(k)).store_into(store, &format!("{prefix}.hf{k}"));
        }
        Ok(())
    }

    /// Runs every frame through the stages; HF blocks mix frames at the input
    /// of their stage. Returns the final-stage feature maps per frame.
    pub fn forward<'t>(
        &self,
        store: &ParamStore,
        binder: &Binder<'t>,
        prefix: &str,
        frames: &[Var<'t>],
    ) -> Result<Vec<Var<'t>>> {
        self.validate()?;
        let mut xs: Vec<Var<'t>> = frames.to_vec();
        for k in 0..self.stages.len() {
            if k > 0 {
                xs = xs.iter().map(Var::avg_pool2).collect::<Result<_>>()?;
            }
            if self.hf_positions.contains(&k) {
                let hf = HfBlockParams::bind_store(store, binder, &format!("{prefix}.hf{k}"))?;
                xs = hf_block_frames(&xs, &hf)?;
            }
            let stage = StageParams::bind_store(store, binder, &format!("{prefix}.stage{k}"))?;
            xs = xs
                .iter()
                .map(|x| x.conv2d(&stage.kernel, Padding::Same)?.add(&stage.bias)?.relu())
                .collect::<Result<_>>()?;
        }
        Ok(xs)
    }
}

/// The HF-TSN model description: `{"segments":16,"stages":[..],"hf_positions":[..]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HfTsnConfig {
    pub segments: usize,
    pub stages: Vec<usize>,
    pub hf_positions: Vec<usize>,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

fn default_in_channels() -> usize {
    3
}

impl HfTsnConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: self.in_channels,
            stages: self.stages.clone(),
            hf_positions: self.hf_positions.clone(),
        }
    }

    /// The same network without HF blocks.
    pub fn plain(&self) -> Self {
        Self {
            hf_positions: Vec::new(),
            ..self.clone()
        }
    }
}

/// Optional dropout applied to segment features before the head.
pub type FeatureHook<'a, 't> = &'a mut dyn FnMut(Var<'t>) -> Result<Var<'t>>;

/// Backbone over all `T` frames, per-segment pooled features `T × F`, the
/// structured head on each segment, and the consensus mean.
pub fn hf_tsn_forward<'t>(
    frames: &[Var<'t>],
    config: &HfTsnConfig,
    store: &ParamStore,
    binder: &Binder<'t>,
    head: &StructuredHeadParams<Var<'t>>,
    feature_hook: Option<FeatureHook<'_, 't>>,
) -> Result<ScoreVars<'t>> {
    if frames.len() != config.segments {
        return Err(Error::shape(
            "hf_tsn_forward",
            format!("{} frames for {} segments", frames.len(), config.segments),
        ));
    }
    let maps = config.backbone().forward(store, binder, "backbone", frames)?;
    let pooled = maps.iter().map(Var::spatial_avg_pool).collect::<Result<Vec<_>>>()?;
    let mut rows = stack(&pooled.iter().collect::<Vec<_>>())?;
    if let Some(hook) = feature_hook {
        rows = hook(rows)?;
    }
    consensus_rows(&structured_rows(&rows, head)?)
}
