//! Stage schedules, the built-in presets and the learning-rate rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Verb, noun and action cross-entropies.
    Structured,
    VerbOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Decay {
    /// Multiply by `factor` once for every listed epoch already completed.
    Step { epochs: Vec<usize>, factor: f64 },
    /// Multiply by `factor` after every epoch.
    PerEpoch { factor: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub name: String,
    pub epochs: usize,
    pub base_lr: f64,
    pub decay: Decay,
    pub optimizer: OptimizerKind,
    /// SGD momentum; unused by Adam.
    pub momentum: f64,
    pub dropout_p: f64,
    pub batch_size: usize,
    pub frames_t: usize,
    pub memory_d: usize,
    pub trainable_groups: Vec<String>,
    pub loss: LossKind,
}

pub const PRESET_NAMES: [&str; 6] = [
    "lsta_stage1",
    "lsta_stage2",
    "hf_tsn",
    "flow_pretrain",
    "flow_stage2",
    "two_stream",
];

fn groups(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// The built-in stage definitions.
pub fn preset(name: &str) -> Result<StageSchedule> {
    let step = |epochs: &[usize], factor| Decay::Step {
        epochs: epochs.to_vec(),
        factor,
    };
    let s = match name {
        "lsta_stage1" => StageSchedule {
            name: name.into(),
            epochs: 200,
            base_lr: 1e-3,
            decay: step(&[25, 75, 150], 0.1),
            optimizer: OptimizerKind::Adam,
            momentum: 0.0,
            dropout_p: 0.7,
            batch_size: 32,
            frames_t: 20,
            memory_d: 512,
            trainable_groups: groups(&["heads", "lsta", "grus"]),
            loss: LossKind::Structured,
        },
        "lsta_stage2" => StageSchedule {
            name: name.into(),
            epochs: 150,
            base_lr: 1e-4,
            decay: step(&[25, 75], 0.1),
            trainable_groups: groups(&["heads", "lsta", "grus", "backbone_last_stage"]),
            ..preset("lsta_stage1")?
        },
        "hf_tsn" => StageSchedule {
            name: name.into(),
            epochs: 120,
            base_lr: 0.01,
            decay: step(&[50, 100], 0.1),
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            dropout_p: 0.5,
            batch_size: 32,
            frames_t: 16,
            memory_d: 512,
            trainable_groups: groups(&["all"]),
            loss: LossKind::Structured,
        },
        "flow_pretrain" => StageSchedule {
            name: name.into(),
            epochs: 700,
            base_lr: 0.01,
            decay: step(&[75, 150, 250, 500], 0.5),
            loss: LossKind::VerbOnly,
            ..preset("hf_tsn")?
        },
        "flow_stage2" => StageSchedule {
            name: name.into(),
            epochs: 500,
            base_lr: 0.01,
            decay: step(&[50, 100], 0.5),
            loss: LossKind::Structured,
            ..preset("flow_pretrain")?
        },
        "two_stream" => StageSchedule {
            name: name.into(),
            epochs: 100,
            base_lr: 0.01,
            decay: Decay::PerEpoch { factor: 0.99 },
            optimizer: OptimizerKind::Adam,
            momentum: 0.0,
            dropout_p: 0.7,
            batch_size: 32,
            frames_t: 20,
            memory_d: 512,
            trainable_groups: groups(&["heads", "lsta", "convlstm", "backbone_last_stage"]),
            loss: LossKind::Structured,
        },
        other => return Err(Error::Invalid(format!("unknown preset {other:?}"))),
    };
    Ok(s)
}

/// Field replacements applied on top of a preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub epochs: Option<usize>,
    pub base_lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub frames_t: Option<usize>,
    #[serde(rename = "frames_T")]
    pub frames_t_upper: Option<usize>,
    pub memory_d: Option<usize>,
    #[serde(rename = "memory_D")]
    pub memory_d_upper: Option<usize>,
    pub dropout_p: Option<f64>,
    pub momentum: Option<f64>,
}

impl StageSchedule {
    /// A copy with `o` applied. Shortening `epochs` drops decay points that
    /// would no longer fall inside the stage.
    pub fn with_overrides(&self, o: &Overrides) -> Result<Self> {
        let mut s = self.clone();
        if let Some(e) = o.epochs {
            s.epochs = e;
            if let Decay::Step { epochs, .. } = &mut s.decay {
                epochs.retain(|&d| d < e);
            }
        }
        if let Some(v) = o.base_lr {
            s.base_lr = v;
        }
        if let Some(v) = o.batch_size {
            s.batch_size = v;
        }
        if let Some(v) = o.frames_t.or(o.frames_t_upper) {
            s.frames_t = v;
        }
        if let Some(v) = o.memory_d.or(o.memory_d_upper) {
            s.memory_d = v;
        }
        if let Some(v) = o.dropout_p {
            s.dropout_p = v;
        }
        if let Some(v) = o.momentum {
            s.momentum = v;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("schedule {}: {m}", self.name)));
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.batch_size == 0 || self.frames_t == 0 || self.memory_d == 0 {
            return bad("batch_size, frames_t and memory_d must be positive".into());
        }
        match &self.decay {
            Decay::Step { epochs, factor } => {
                if epochs.windows(2).any(|w| w[0] >= w[1]) {
                    return bad(format!("decay epochs {epochs:?} not strictly increasing"));
                }
                if epochs.iter().any(|&d| d >= self.epochs) {
                    return bad(format!("decay epochs {epochs:?} must be below {}", self.epochs));
                }
                if !(*factor > 0.0 && *factor <= 1.0) {
                    return bad(format!("decay factor {factor}"));
                }
            }
            Decay::PerEpoch { factor } => {
                if !(*factor > 0.0 && *factor <= 1.0) {
                    return bad(format!("decay factor {factor}"));
                }
            }
        }
        Ok(())
    }
}

/// Learning rate for 1-based `epoch`: epochs after a decay point use the
/// decayed rate.
pub fn lr_at(s: &StageSchedule, epoch: usize) -> Result<f64> {
    if epoch == 0 || epoch > s.epochs {
        return Err(Error::OutOfRange {
            what: "epoch",
            index: epoch,
            size: s.epochs,
        });
    }
    Ok(match &s.decay {
        Decay::Step { epochs, factor } => {
            let k = epochs.iter().filter(|&&d| d < epoch).count();
            s.base_lr * factor.powf(k as f64)
        }
        Decay::PerEpoch { factor } => s.base_lr * factor.powf((epoch - 1) as f64),
    })
}
