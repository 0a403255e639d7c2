//! Complete models over a flat [`ParamStore`], with parameter groups for
//! staged training.
//!
//! Parameter names by prefix:
//!
//! | prefix              | content                                   |
//! |---------------------|-------------------------------------------|
//! | `backbone.`         | appearance stages and HF blocks           |
//! | `motion_backbone.`  | flow-stack stages                         |
//! | `motion.attn`       | motion spatial attention kernel           |
//! | `lsta.`, `convlstm.`| recurrent cells                           |
//! | `gru_a.`, `gru_b.`  | output-state aggregators                  |
//! | `fusion.`           | cross-modal gate-bias kernels             |
//! | `head*`             | structured heads                          |

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{stack, Tape, Var};
use crate::cells::{lsta_step, run_lsta_gru, CellState, ConvLstmParams, GruParams, LstaParams};
use crate::error::{Error, Result};
use crate::heads::{
    consensus_rows, fuse_score_vars, structured_forward, structured_rows, LabelSpace, ScoreTriple, ScoreVars,
    StructuredHeadParams,
};
use crate::hf_tsn::{hf_tsn_forward, BackboneConfig, HfTsnConfig};
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;
use crate::two_stream::{cross_modal_rollout, inflate_first_conv, motion_spatial_attention, FusionParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// LSTA whose output states feed two GRUs; LSTA and GRU scores averaged.
    LstaGru,
    /// LSTA alone, classified from its final memory.
    Lsta,
    HfTsn,
    /// Flow-stack network with spatial attention and segment consensus.
    Motion,
    /// Appearance LSTA and motion ConvLSTM with cross-modal gate biases.
    TwoStream,
}

/// Every group name a schedule may list.
pub const GROUPS: [&str; 10] = [
    "all",
    "heads",
    "lsta",
    "grus",
    "convlstm",
    "fusion",
    "backbone",
    "motion_backbone",
    "backbone_last_stage",
    "hf",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub in_channels: usize,
    /// Backbone stage widths; the motion backbone uses the same widths.
    pub stages: Vec<usize>,
    #[serde(default)]
    pub hf_positions: Vec<usize>,
    pub segments: usize,
    /// LSTA / ConvLSTM memory and GRU hidden size.
    pub memory: usize,
    #[serde(default = "default_flow_frames")]
    pub flow_frames: usize,
}

fn default_flow_frames() -> usize {
    crate::two_stream::FLOW_FRAMES
}

impl ModelConfig {
    pub fn uses_frames(&self) -> bool {
        self.kind != ModelKind::Motion
    }

    pub fn uses_flow(&self) -> bool {
        matches!(self.kind, ModelKind::Motion | ModelKind::TwoStream)
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: self.in_channels,
            stages: self.stages.clone(),
            hf_positions: if self.kind == ModelKind::HfTsn {
                self.hf_positions.clone()
            } else {
                Vec::new()
            },
        }
    }

    pub fn motion_backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: 2 * self.flow_frames,
            stages: self.stages.clone(),
            hf_positions: Vec::new(),
        }
    }

    pub fn hf_tsn(&self) -> HfTsnConfig {
        HfTsnConfig {
            segments: self.segments,
            stages: self.stages.clone(),
            hf_positions: self.hf_positions.clone(),
            in_channels: self.in_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 || self.memory == 0 || self.flow_frames == 0 {
            return Err(Error::Invalid("segments, memory and flow_frames must be positive".into()));
        }
        if self.kind != ModelKind::HfTsn && !self.hf_positions.is_empty() {
            return Err(Error::Invalid(format!("{:?} has no HF blocks", self.kind)));
        }
        self.backbone().validate()?;
        self.hf_tsn().backbone().validate()
    }
}

/// One network input: sampled frames and, for motion models, the flow stack
/// at each sampled frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: Vec<Tensor>,
    pub flow: Vec<Tensor>,
}

/// Inverted dropout on feature vectors during training.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply<'t>(&mut self, x: Var<'t>) -> Result<Var<'t>> {
        if self.p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.p;
        let mask: Vec<f64> = (0..x.value().len())
            .map(|_| if self.rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = x.tape().constant(Tensor::new(x.shape().to_vec(), mask)?);
        x.mul(&mask)
    }
}

fn maybe_drop<'t>(x: Var<'t>, dropout: &mut Option<Dropout<'_>>) -> Result<Var<'t>> {
    match dropout {
        Some(d) => d.apply(x),
        None => Ok(x),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub space: LabelSpace,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Description {
    config: ModelConfig,
    label_space: serde_json::Value,
}

impl Model {
    pub fn new(config: ModelConfig, space: LabelSpace, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let d = config.memory;
        let c_last = *config.stages.last().expect("validated");
        let head = |p: &mut ParamStore, name: &str, features: usize| {
            StructuredHeadParams::init(seed, name, features, &space).store_into(p, name)
        };
        if config.uses_frames() {
            config.backbone().init_params(seed, "backbone", &mut p)?;
        }
        if config.uses_flow() {
            config.motion_backbone().init_params(seed, "motion_backbone", &mut p)?;
            p.insert("motion.attn", Tensor::zeros(&[1, c_last, 1, 1]));
        }
        match config.kind {
            ModelKind::LstaGru => {
                LstaParams::init(seed, "lsta", c_last, d).store_into(&mut p, "lsta");
                GruParams::init(seed, "gru_a", d, d).store_into(&mut p, "gru_a");
                GruParams::init(seed, "gru_b", d, d).store_into(&mut p, "gru_b");
                head(&mut p, "head_lsta", d);
                head(&mut p, "head_gru", 2 * d);
            }
            ModelKind::Lsta => {
                LstaParams::init(seed, "lsta", c_last, d).store_into(&mut p, "lsta");
                head(&mut p, "head", d);
            }
            ModelKind::HfTsn | ModelKind::Motion => head(&mut p, "head", c_last),
            ModelKind::TwoStream => {
                LstaParams::init(seed, "lsta", c_last, d).store_into(&mut p, "lsta");
                ConvLstmParams::init(seed, "convlstm", c_last, d).store_into(&mut p, "convlstm");
                FusionParams::zeros(c_last, c_last, d, d).store_into(&mut p, "fusion");
                head(&mut p, "head_app", d);
                head(&mut p, "head_motion", d);
            }
        }
        Ok(Self {
            config,
            space,
            params: p,
        })
    }

    /// Groups a parameter belongs to.
    pub fn groups_of(&self, name: &str) -> Vec<&'static str> {
        let mut g = vec!["all"];
        let last = self.config.stages.len() - 1;
        let stage_of = |rest: &str| -> Option<(bool, usize)> {
            let kind = rest.split_once('.').map_or(rest, |(k, _)| k);
            if let Some(k) = kind.strip_prefix("stage") {
                return k.parse().ok().map(|k| (false, k));
            }
            kind.strip_prefix("hf").and_then(|k| k.parse().ok()).map(|k| (true, k))
        };
        if name.starts_with("head") {
            g.push("heads");
        } else if name.starts_with("lsta.") {
            g.push("lsta");
        } else if name.starts_with("gru_a.") || name.starts_with("gru_b.") {
            g.push("grus");
        } else if name.starts_with("convlstm.") {
            g.push("convlstm");
        } else if name == "fusion.app_to_motion" {
            g.extend(["fusion", "convlstm"]);
        } else if name == "fusion.motion_to_app" {
            g.extend(["fusion", "lsta"]);
        } else if name == "motion.attn" {
            g.extend(["motion_backbone", "backbone_last_stage"]);
        } else if let Some(rest) = name.strip_prefix("backbone.") {
            g.push("backbone");
            if let Some((hf, k)) = stage_of(rest) {
                if hf {
                    g.push("hf");
                }
                if k == last {
                    g.push("backbone_last_stage");
                }
            }
        } else if let Some(rest) = name.strip_prefix("motion_backbone.") {
            g.push("motion_backbone");
            if let Some((_, k)) = stage_of(rest) {
                if k == last {
                    g.push("backbone_last_stage");
                }
            }
        }
        g
    }

    /// Predicate selecting the parameters in any of `groups`.
    pub fn trainable(&self, groups: &[String]) -> Result<impl Fn(&str) -> bool + '_> {
        if let Some(bad) = groups.iter().find(|g| !GROUPS.contains(&g.as_str())) {
            return Err(Error::Invalid(format!("unknown parameter group {bad:?}")));
        }
        let groups = groups.to_vec();
        Ok(move |name: &str| {
            let own = self.groups_of(name);
            groups.iter().any(|g| own.contains(&g.as_str()))
        })
    }

    /// Logits for one clip.
    pub fn forward<'t>(
        &self,
        binder: &Binder<'t>,
        clip: &Clip,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<ScoreVars<'t>> {
        let tape = binder.tape();
        let t = self.config.segments;
        let consts = |xs: &[Tensor], what: &str| -> Result<Vec<Var<'t>>> {
            if xs.len() != t {
                return Err(Error::shape("model", format!("{} {what} for {t} segments", xs.len())));
            }
            Ok(xs.iter().map(|x| tape.constant(x.clone())).collect())
        };
        let head = |name: &str| StructuredHeadParams::bind_store(&self.params, binder, name);
        let p = &self.params;

        match self.config.kind {
            ModelKind::HfTsn => {
                let frames = consts(&clip.frames, "frames")?;
                let mut hook = |rows: Var<'t>| maybe_drop(rows, &mut dropout);
                hf_tsn_forward(&frames, &self.config.hf_tsn(), p, binder, &head("head")?, Some(&mut hook))
            }
            ModelKind::LstaGru => {
                let feats = self.appearance(binder, &consts(&clip.frames, "frames")?)?;
                let lsta = LstaParams::bind_store(p, binder, "lsta")?;
                let gru_a = GruParams::bind_store(p, binder, "gru_a")?;
                let gru_b = GruParams::bind_store(p, binder, "gru_b")?;
                let out = run_lsta_gru(&feats, &lsta, &gru_a, &gru_b)?;
                let l = maybe_drop(out.lsta_descriptor, &mut dropout)?;
                let g = maybe_drop(out.gru_descriptor, &mut dropout)?;
                let a = structured_forward(&l, &head("head_lsta")?)?;
                let b = structured_forward(&g, &head("head_gru")?)?;
                fuse_score_vars(&a, &b)
            }
            ModelKind::Lsta => {
                let feats = self.appearance(binder, &consts(&clip.frames, "frames")?)?;
                let lsta = LstaParams::bind_store(p, binder, "lsta")?;
                let (h, w) = (feats[0].shape()[1], feats[0].shape()[2]);
                let mut state = CellState::zeros(tape, self.config.memory, h, w);
                for x in &feats {
                    state = lsta_step(x, &state, &lsta, None)?.0;
                }
                let desc = maybe_drop(state.c.spatial_avg_pool()?, &mut dropout)?;
                structured_forward(&desc, &head("head")?)
            }
            ModelKind::Motion => {
                let feats = self.motion(binder, &consts(&clip.flow, "flow stacks")?)?;
                let pooled = feats.iter().map(Var::spatial_avg_pool).collect::<Result<Vec<_>>>()?;
                let rows = maybe_drop(stack(&pooled.iter().collect::<Vec<_>>())?, &mut dropout)?;
                consensus_rows(&structured_rows(&rows, &head("head")?)?)
            }
            ModelKind::TwoStream => {
                let app = self.appearance(binder, &consts(&clip.frames, "frames")?)?;
                let motion = self.motion(binder, &consts(&clip.flow, "flow stacks")?)?;
                let out = cross_modal_rollout(
                    &app,
                    &motion,
                    &LstaParams::bind_store(p, binder, "lsta")?,
                    &ConvLstmParams::bind_store(p, binder, "convlstm")?,
                    &FusionParams::bind_store(p, binder, "fusion")?,
                )?;
                let a = maybe_drop(out.app_descriptor, &mut dropout)?;
                let m = maybe_drop(out.motion_descriptor, &mut dropout)?;
                let sa = structured_forward(&a, &head("head_app")?)?;
                let sm = structured_forward(&m, &head("head_motion")?)?;
                fuse_score_vars(&sa, &sm)
            }
        }
    }

    fn appearance<'t>(&self, binder: &Binder<'t>, frames: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        self.config.backbone().forward(&self.params, binder, "backbone", frames)
    }

    fn motion<'t>(&self, binder: &Binder<'t>, stacks: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let feats = self
            .config
            .motion_backbone()
            .forward(&self.params, binder, "motion_backbone", stacks)?;
        let attn = binder.bind("motion.attn", self.params.get("motion.attn")?);
        feats.iter().map(|f| motion_spatial_attention(f, &attn)).collect()
    }

    /// Inference logits, averaged over `views` (each a clip).
    pub fn predict(&self, views: &[Clip]) -> Result<ScoreTriple> {
        if views.is_empty() {
            return Err(Error::Invalid("predict: no views".into()));
        }
        let mut acc: Option<ScoreTriple> = None;
        for clip in views {
            let tape = Tape::new();
            let binder = Binder::frozen(&tape);
            let s = self.forward(&binder, clip, None)?.to_triple();
            acc = Some(match acc {
                None => s,
                Some(mut a) => {
                    for (x, y) in a.verb.iter_mut().zip(&s.verb) {
                        *x += y;
                    }
                    for (x, y) in a.noun.iter_mut().zip(&s.noun) {
                        *x += y;
                    }
                    for (x, y) in a.action.iter_mut().zip(&s.action) {
                        *x += y;
                    }
                    a
                }
            });
        }
        let mut a = acc.expect("nonempty");
        let n = views.len() as f64;
        for v in a.verb.iter_mut().chain(a.noun.iter_mut()).chain(a.action.iter_mut()) {
            *v /= n;
        }
        Ok(a)
    }

    /// Initializes the motion backbone from an appearance backbone: the first
    /// kernel is inflated to the flow-stack width, later stages are copied.
    pub fn inflate_motion_from(&mut self, appearance: &ParamStore) -> Result<()> {
        let first = appearance.get("backbone.stage0.kernel")?;
        let inflated = inflate_first_conv(first, 2 * self.config.flow_frames)?;
        let slot = self.params.get_mut("motion_backbone.stage0.kernel")?;
        if slot.shape() != inflated.shape() {
            return Err(Error::shape(
                "inflate_motion_from",
                format!("{:?} into {:?}", inflated.shape(), slot.shape()),
            ));
        }
        *slot = inflated;
        *self.params.get_mut("motion_backbone.stage0.bias")? = appearance.get("backbone.stage0.bias")?.clone();
        for k in 1..self.config.stages.len() {
            self.params
                .copy_prefix(appearance, &format!("backbone.stage{k}"), &format!("motion_backbone.stage{k}"))?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &std::path::Path, stem: &str) -> Result<()> {
        let desc = serde_json::json!({
            "config": self.config,
            "label_space": serde_json::from_str::<serde_json::Value>(&self.space.to_json()?)?,
        });
        self.params.save(dir, stem, desc)
    }

    pub fn load(dir: &std::path::Path, stem: &str) -> Result<Self> {
        let (params, desc) = ParamStore::load(dir, stem)?;
        let desc: Description = serde_json::from_value(desc)?;
        let space = LabelSpace::from_json(&desc.label_space.to_string())?;
        let mut model = Self::new(desc.config, space, 0)?;
        model.params.load_from(&params)?;
        Ok(model)
    }
}
