//! Multi-phase training recipes. A phase builds one model, optionally
//! initializes parts of it from earlier phases, and runs its stages in order.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::LabelSpace;
use crate::models::{Model, ModelConfig, ModelKind};
use crate::training::sampling::{AugmentationConfig, CropMode, CropSpec};
use crate::training::schedule::{preset, Overrides, StageSchedule};
use crate::training::synthetic::Sample;
use crate::training::trainer::{run_stage, EvalHook, EvalSpec, TrainingLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub preset: String,
    #[serde(default)]
    pub overrides: Overrides,
}

impl StageSpec {
    fn new(preset: &str, epochs: usize) -> Self {
        StageSpec {
            preset: preset.into(),
            overrides: Overrides {
                epochs: Some(epochs),
                ..Default::default()
            },
        }
    }

    /// The preset with overrides applied. Frame count and memory size come
    /// from the model unless the overrides name them explicitly.
    pub fn schedule(&self, model: &ModelConfig) -> Result<StageSchedule> {
        let mut o = self.overrides.clone();
        if o.frames_t.is_none() && o.frames_t_upper.is_none() {
            o.frames_t = Some(model.segments);
        }
        if o.memory_d.is_none() && o.memory_d_upper.is_none() {
            o.memory_d = Some(model.memory);
        }
        let s = preset(&self.preset)?.with_overrides(&o)?;
        if s.memory_d != model.memory {
            return Err(Error::Invalid(format!(
                "stage {} sets memory {}, model has {}",
                self.preset, s.memory_d, model.memory
            )));
        }
        Ok(s)
    }
}

/// Parameters taken from an earlier phase's model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub from: String,
    /// Name prefixes copied verbatim, e.g. `"backbone"` or `"lsta"`.
    #[serde(default)]
    pub copy: Vec<String>,
    /// Initialize the motion backbone by inflating the source's appearance
    /// backbone.
    #[serde(default)]
    pub inflate_motion: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub name: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub init: Vec<InitSpec>,
    pub stages: Vec<StageSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub phases: Vec<PhaseSpec>,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    pub eval: EvalSpec,
    /// Evaluate on the held-out split every this many epochs (0: only at the
    /// end of each stage).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Names of the built-in recipes.
pub const RECIPES: [&str; 4] = ["desk_lsta_gru", "desk_hf_tsn", "desk_two_stream", "desk_all"];

fn desk_model(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        in_channels: 3,
        stages: vec![8, 16, 16],
        hf_positions: if kind == ModelKind::HfTsn { vec![0, 1, 2] } else { Vec::new() },
        segments: 8,
        memory: 16,
        flow_frames: crate::two_stream::FLOW_FRAMES,
    }
}

fn with(mut s: StageSpec, f: impl FnOnce(&mut Overrides)) -> StageSpec {
    f(&mut s.overrides);
    s
}

impl ExperimentConfig {
    /// Desk-scale recipes for the 16×16, 8-frame synthetic task.
    ///
    /// The LSTA models start from a backbone trained as a plain segment
    /// network, standing in for a pretrained backbone; their first stage
    /// keeps it frozen.
    pub fn recipe(name: &str) -> Result<Self> {
        let pretrain = PhaseSpec {
            name: "backbone_pretrain".into(),
            model: ModelConfig {
                kind: ModelKind::HfTsn,
                hf_positions: Vec::new(),
                ..desk_model(ModelKind::HfTsn)
            },
            init: Vec::new(),
            stages: vec![StageSpec::new("hf_tsn", 10)],
        };
        let from = |phase: &str, copy: &[&str]| InitSpec {
            from: phase.into(),
            copy: copy.iter().map(|s| s.to_string()).collect(),
            inflate_motion: false,
        };
        let lsta_stage1 = with(StageSpec::new("lsta_stage1", 30), |o| o.dropout_p = Some(0.3));
        let lsta_gru = PhaseSpec {
            name: "lsta_gru".into(),
            model: desk_model(ModelKind::LstaGru),
            init: vec![from("backbone_pretrain", &["backbone"])],
            stages: vec![lsta_stage1.clone()],
        };
        let hf_tsn = PhaseSpec {
            name: "hf_tsn".into(),
            model: desk_model(ModelKind::HfTsn),
            init: Vec::new(),
            stages: vec![StageSpec::new("hf_tsn", 30)],
        };
        let appearance = PhaseSpec {
            name: "appearance".into(),
            model: desk_model(ModelKind::Lsta),
            init: vec![from("backbone_pretrain", &["backbone"])],
            stages: vec![lsta_stage1],
        };
        let motion = PhaseSpec {
            name: "motion".into(),
            model: desk_model(ModelKind::Motion),
            init: vec![InitSpec {
                inflate_motion: true,
                ..from("backbone_pretrain", &[])
            }],
            stages: vec![StageSpec::new("flow_pretrain", 10), StageSpec::new("flow_stage2", 20)],
        };
        let two_stream = PhaseSpec {
            name: "two_stream".into(),
            model: desk_model(ModelKind::TwoStream),
            init: vec![
                from("appearance", &["backbone", "lsta"]),
                from("motion", &["motion_backbone", "motion"]),
            ],
            stages: vec![with(StageSpec::new("two_stream", 20), |o| {
                o.dropout_p = Some(0.3);
                o.base_lr = Some(1e-3);
            })],
        };
        let phases = match name {
            "desk_lsta_gru" => vec![pretrain, lsta_gru],
            "desk_hf_tsn" => vec![hf_tsn],
            "desk_two_stream" => vec![pretrain, appearance, motion, two_stream],
            "desk_all" => vec![pretrain, lsta_gru, hf_tsn, appearance, motion, two_stream],
            other => {
                return Err(Error::Invalid(format!("unknown recipe {other:?}; expected one of {RECIPES:?}")))
            }
        };
        Ok(ExperimentConfig {
            phases,
            augmentation: AugmentationConfig::default(),
            eval: EvalSpec {
                crop: CropSpec { mode: CropMode::Center },
                crop_size: 14,
            },
            eval_every: 0,
            seed: 1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.augmentation.validate()?;
        let mut seen: Vec<&str> = Vec::new();
        for p in &self.phases {
            if seen.contains(&p.name.as_str()) {
                return Err(Error::Invalid(format!("duplicate phase name {:?}", p.name)));
            }
            for i in &p.init {
                if !seen.contains(&i.from.as_str()) {
                    return Err(Error::Invalid(format!(
                        "phase {:?} initializes from {:?}, which does not run before it",
                        p.name, i.from
                    )));
                }
            }
            p.model.validate()?;
            for s in &p.stages {
                s.schedule(&p.model)?.validate()?;
            }
            seen.push(&p.name);
        }
        if self.phases.is_empty() {
            return Err(Error::Invalid("experiment has no phases".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PhaseResult {
    pub name: String,
    pub model: Model,
    pub logs: Vec<TrainingLog>,
    pub seconds: f64,
}

fn phase_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Runs every phase in order on `train`, evaluating on `eval` when given.
/// `progress` receives each finished phase.
pub fn run_experiment(
    config: &ExperimentConfig,
    space: &LabelSpace,
    train: &[Sample],
    eval: Option<&[Sample]>,
    progress: &mut dyn FnMut(&PhaseResult),
) -> Result<Vec<PhaseResult>> {
    config.validate()?;
    let mut done: BTreeMap<String, Model> = BTreeMap::new();
    let mut results = Vec::new();
    for (k, phase) in config.phases.iter().enumerate() {
        let started = Instant::now();
        let seed = phase_seed(config.seed, k);
        let mut model = Model::new(phase.model.clone(), space.clone(), seed)?;
        for init in &phase.init {
            let src = &done[&init.from];
            for prefix in &init.copy {
                model.params.copy_prefix(&src.params, prefix, prefix)?;
            }
            if init.inflate_motion {
                model.inflate_motion_from(&src.params)?;
            }
        }
        let hook = eval.map(|samples| EvalHook {
            samples,
            spec: config.eval,
            every: config.eval_every,
        });
        let mut logs = Vec::new();
        for (j, stage) in phase.stages.iter().enumerate() {
            let schedule = stage.schedule(&phase.model)?;
            logs.push(run_stage(
                &mut model,
                train,
                &schedule,
                &config.augmentation,
                phase_seed(seed, j + 1),
                hook.as_ref(),
            )?);
        }
        let result = PhaseResult {
            name: phase.name.clone(),
            model: model.clone(),
            logs,
            seconds: started.elapsed().as_secs_f64(),
        };
        progress(&result);
        done.insert(phase.name.clone(), model);
        results.push(result);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::synthetic::{Dataset, SyntheticSpec};

    #[test]
    fn recipes_validate_and_roundtrip() {
        for r in RECIPES {
            let c = ExperimentConfig::recipe(r).unwrap();
            c.validate().unwrap();
            let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
            assert_eq!(back, c);
        }
        assert!(ExperimentConfig::recipe("nope").is_err());
    }

    #[test]
    fn init_order_enforced() {
        let mut c = ExperimentConfig::recipe("desk_lsta_gru").unwrap();
        c.phases.swap(0, 1);
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::recipe("desk_lsta_gru").unwrap();
        c.phases[1].name = c.phases[0].name.clone();
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_config_fields_rejected() {
        let c = ExperimentConfig::recipe("desk_hf_tsn").unwrap();
        let mut v = serde_json::to_value(&c).unwrap();
        v["phases"][0]["stages"][0]["overrides"]["learning_rate"] = serde_json::json!(1.0);
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn model_governs_frames_and_memory() {
        let c = ExperimentConfig::recipe("desk_lsta_gru").unwrap();
        let s = c.phases[1].stages[0].schedule(&c.phases[1].model).unwrap();
        assert_eq!((s.frames_t, s.memory_d, s.epochs), (8, 16, 30));
        let mut bad = c.phases[1].stages[0].clone();
        bad.overrides.memory_d = Some(32);
        assert!(bad.schedule(&c.phases[1].model).is_err());
    }

    #[test]
    fn tiny_two_stream_pipeline_runs() {
        let data = Dataset::generate(&SyntheticSpec {
            frames: 6,
            height: 8,
            width: 8,
            n_train: 4,
            n_test: 2,
            ..SyntheticSpec::desk()
        })
        .unwrap();
        let mut c = ExperimentConfig::recipe("desk_two_stream").unwrap();
        for p in &mut c.phases {
            p.model.stages = vec![4, 4];
            p.model.segments = 3;
            p.model.memory = 4;
            p.model.flow_frames = 2;
            if p.model.kind == ModelKind::HfTsn {
                p.model.hf_positions.clear();
            }
            for s in &mut p.stages {
                s.overrides.epochs = Some(1);
            }
        }
        c.eval.crop_size = 6;
        let mut seen = Vec::new();
        let out = run_experiment(&c, &data.space, &data.train, Some(&data.test), &mut |r| seen.push(r.name.clone())).unwrap();
        assert_eq!(seen, ["backbone_pretrain", "appearance", "motion", "two_stream"]);
        let ts = &out[3].model;
        let app = &out[1].model;
        // the copied appearance backbone is frozen in the joint stage except its last stage
        assert_eq!(ts.params.get("backbone.stage0.kernel").unwrap(), app.params.get("backbone.stage0.kernel").unwrap());
        assert!(out.iter().all(|r| r.logs.iter().all(|l| l.rows.last().unwrap().eval_acc.is_some())));
    }
}
