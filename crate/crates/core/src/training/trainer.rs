//! The stage loop: sampling, augmentation, per-sample tapes, gradient
//! accumulation in fixed order, optimizer steps, and multi-view evaluation.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::heads::{multi_task_loss, verb_loss, ScoreTriple, Task};
use crate::models::{Clip, Dropout, Model, ModelConfig};
use crate::params::Binder;
use crate::tensor::{argmax, Tensor};
use crate::two_stream::flow_stack;

use super::optim::Optimizer;
use super::sampling::{eval_multiview, resize_bilinear, sample_frames, AugmentationConfig, CropSpec, SampleMode, SpatialTransform};
use super::schedule::{lr_at, LossKind, StageSchedule};
use super::synthetic::Sample;

/// Deterministic per-purpose RNG derived from the run seed.
pub fn derived_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    // splitmix64 over the parts
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        x = x.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x = z ^ (z >> 31);
    }
    ChaCha8Rng::seed_from_u64(x)
}

/// Frames (and flow stacks, if the model reads them) at `indices`, each
/// passed through `transform`.
pub fn build_clip(config: &ModelConfig, video: &Tensor, indices: &[usize], transform: Option<&SpatialTransform>) -> Result<Clip> {
    let apply = |t: Tensor| match transform {
        Some(tr) => tr.apply(&t),
        None => Ok(t),
    };
    let frames = if config.uses_frames() {
        indices.iter().map(|&i| apply(video.index0(i)?)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let flow = if config.uses_flow() {
        indices
            .iter()
            .map(|&i| apply(flow_stack(video, i, config.flow_frames)?))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(Clip { frames, flow })
}

/// How test clips are viewed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub crop: CropSpec,
    pub crop_size: usize,
}

/// One clip per view: eval-mode frame sampling, then the view's crop of
/// every frame resized back to the frame size.
pub fn eval_views(config: &ModelConfig, video: &Tensor, spec: &EvalSpec) -> Result<Vec<Clip>> {
    let s = video.shape();
    let (h, w) = (s[2], s[3]);
    let indices = sample_frames(s[0], config.segments, SampleMode::Eval, &mut derived_rng(0, &[]))?;
    let base = build_clip(config, video, &indices, None)?;
    let views = |xs: &[Tensor]| -> Result<Vec<Vec<Tensor>>> {
        xs.iter()
            .map(|x| {
                eval_multiview(x, spec.crop, spec.crop_size)?
                    .iter()
                    .map(|v| resize_bilinear(v, h, w))
                    .collect()
            })
            .collect()
    };
    let (fv, ov) = (views(&base.frames)?, views(&base.flow)?);
    Ok((0..spec.crop.views())
        .map(|v| Clip {
            frames: fv.iter().map(|per| per[v].clone()).collect(),
            flow: ov.iter().map(|per| per[v].clone()).collect(),
        })
        .collect())
}

/// View-averaged logits for every sample, in input order.
pub fn evaluate(model: &Model, samples: &[Sample], spec: &EvalSpec) -> Result<Vec<(String, ScoreTriple)>> {
    samples
        .iter()
        .map(|s| Ok((s.id.clone(), model.predict(&eval_views(&model.config, &s.video, spec)?)?)))
        .collect()
}

/// Top-1 accuracy per task of `scores` against the samples' labels.
pub fn top1(samples: &[Sample], scores: &[(String, ScoreTriple)]) -> [f64; 3] {
    let mut hits = [0usize; 3];
    for (s, (_, t)) in samples.iter().zip(scores) {
        for (k, task) in Task::ALL.iter().enumerate() {
            hits[k] += usize::from(argmax(t.task(*task)) == task.label(&s.labels));
        }
    }
    hits.map(|h| h as f64 / samples.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: [f64; 3],
    /// Top-1 verb/noun/action on the evaluation set, when evaluated.
    pub eval_acc: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub stage: String,
    pub rows: Vec<EpochRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "stage,epoch,lr,train_loss,train_acc_verb,train_acc_noun,train_acc_action,eval_acc_verb,eval_acc_noun,eval_acc_action\n",
        );
        for r in &self.rows {
            let eval = r
                .eval_acc
                .map_or(",,".to_string(), |e| format!("{},{},{}", e[0], e[1], e[2]));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.stage, r.epoch, r.lr, r.train_loss, r.train_acc[0], r.train_acc[1], r.train_acc[2], eval
            );
        }
        out
    }
}

/// Optional held-out evaluation after selected epochs.
pub struct EvalHook<'a> {
    pub samples: &'a [Sample],
    pub spec: EvalSpec,
    /// Evaluate after every `every` epochs and after the last one.
    pub every: usize,
}

/// Trains `model` for one stage. Sample order, frame sampling, augmentation
/// and dropout are all drawn from `seed`, so a rerun is bit-identical.
pub fn run_stage(
    model: &mut Model,
    data: &[Sample],
    schedule: &StageSchedule,
    aug: &AugmentationConfig,
    seed: u64,
    eval: Option<&EvalHook<'_>>,
) -> Result<TrainingLog> {
    schedule.validate()?;
    aug.validate()?;
    if schedule.frames_t != model.config.segments {
        return Err(Error::Invalid(format!(
            "schedule samples {} frames, model expects {}",
            schedule.frames_t, model.config.segments
        )));
    }
    if data.is_empty() && schedule.epochs > 0 {
        return Err(Error::Invalid("run_stage: empty training set".into()));
    }
    let trainable: HashSet<String> = {
        let pred = model.trainable(&schedule.trainable_groups)?;
        model.params.names().filter(|n| pred(n)).cloned().collect()
    };
    let is_trainable = |n: &str| trainable.contains(n);
    let mut opt = Optimizer::new(schedule.optimizer, schedule.momentum);
    let mut log = TrainingLog {
        stage: schedule.name.clone(),
        rows: Vec::new(),
    };

    for epoch in 1..=schedule.epochs {
        let lr = lr_at(schedule, epoch)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut derived_rng(seed, &[epoch as u64]));
        let (mut loss_sum, mut hits) = (0.0, [0usize; 3]);

        for batch in order.chunks(schedule.batch_size) {
            let mut acc: HashMap<String, Tensor> = HashMap::new();
            for &i in batch {
                let sample = &data[i];
                let mut rng = derived_rng(seed, &[epoch as u64, i as u64]);
                let n = sample.video.shape()[0];
                let mode = if aug.temporal_jitter { SampleMode::Train } else { SampleMode::Eval };
                let indices = sample_frames(n, schedule.frames_t, mode, &mut rng)?;
                let s = sample.video.shape();
                let transform = aug.draw(s[2], s[3], &mut rng);
                let clip = build_clip(&model.config, &sample.video, &indices, Some(&transform))?;

                let tape = Tape::new();
                let binder = Binder::new(&tape, is_trainable);
                let dropout = Dropout {
                    p: schedule.dropout_p,
                    rng: &mut rng,
                };
                let scores = model.forward(&binder, &clip, Some(dropout))?;
                let loss = match schedule.loss {
                    LossKind::Structured => multi_task_loss(&scores, &sample.labels)?,
                    LossKind::VerbOnly => verb_loss(&scores, &sample.labels)?,
                };
                let value = loss.value().item()?;
                if !value.is_finite() {
                    return Err(Error::NonFinite { op: "run_stage loss" });
                }
                loss_sum += value;
                let triple = scores.to_triple();
                for (k, task) in Task::ALL.iter().enumerate() {
                    hits[k] += usize::from(argmax(triple.task(*task)) == task.label(&sample.labels));
                }
                let grads = binder.named_grads(&tape.backward(&loss)?);
                for (name, g) in grads {
                    match acc.get_mut(&name) {
                        Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                        None => {
                            acc.insert(name, g);
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in acc.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            opt.step(&mut model.params, &acc, lr, &is_trainable)?;
        }

        let total = data.len() as f64;
        let eval_acc = match eval {
            Some(h) if epoch == schedule.epochs || (h.every > 0 && epoch % h.every == 0) => {
                Some(top1(h.samples, &evaluate(model, h.samples, &h.spec)?))
            }
            _ => None,
        };
        log.rows.push(EpochRow {
            epoch,
            lr,
            train_loss: loss_sum / total,
            train_acc: hits.map(|h| h as f64 / total),
            eval_acc,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelKind;
    use crate::training::sampling::CropMode;
    use crate::training::schedule::preset;
    use crate::training::synthetic::{Dataset, SyntheticSpec};
    use crate::training::Overrides;

    fn tiny_data() -> Dataset {
        Dataset::generate(&SyntheticSpec {
            frames: 8,
            height: 8,
            width: 8,
            n_train: 12,
            n_test: 4,
            ..SyntheticSpec::desk()
        })
        .unwrap()
    }

    fn tiny_model(kind: ModelKind, data: &Dataset) -> Model {
        let config = ModelConfig {
            kind,
            in_channels: 3,
            stages: vec![4, 4],
            hf_positions: if kind == ModelKind::HfTsn { vec![0, 1] } else { vec![] },
            segments: 4,
            memory: 4,
            flow_frames: 2,
        };
        Model::new(config, data.space.clone(), 5).unwrap()
    }

    fn schedule(name: &str, epochs: usize) -> StageSchedule {
        preset(name)
            .unwrap()
            .with_overrides(&Overrides {
                epochs: Some(epochs),
                frames_t: Some(4),
                memory_d: Some(4),
                batch_size: Some(4),
                ..Default::default()
            })
            .unwrap()
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let data = tiny_data();
        let mut m = tiny_model(ModelKind::HfTsn, &data);
        let before = m.clone();
        let log = run_stage(&mut m, &data.train, &schedule("hf_tsn", 0), &AugmentationConfig::default(), 1, None).unwrap();
        assert!(log.rows.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn frozen_groups_are_bit_invariant_and_runs_reproduce() {
        let data = tiny_data();
        let start = tiny_model(ModelKind::LstaGru, &data);
        let s = schedule("lsta_stage1", 2);
        let mut a = start.clone();
        run_stage(&mut a, &data.train, &s, &AugmentationConfig::default(), 3, None).unwrap();
        let mut b = start.clone();
        run_stage(&mut b, &data.train, &s, &AugmentationConfig::default(), 3, None).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.params.iter() {
            let frozen = name.starts_with("backbone.");
            let same = t == start.params.get(name).unwrap();
            assert_eq!(same, frozen, "{name}");
        }
    }

    #[test]
    fn frame_count_must_match_model() {
        let data = tiny_data();
        let mut m = tiny_model(ModelKind::Lsta, &data);
        let s = preset("lsta_stage1").unwrap();
        assert!(run_stage(&mut m, &data.train, &s, &AugmentationConfig::default(), 0, None).is_err());
    }

    #[test]
    fn eval_views_and_log() {
        let data = tiny_data();
        let mut m = tiny_model(ModelKind::TwoStream, &data);
        let spec = EvalSpec {
            crop: CropSpec { mode: CropMode::Lsta10view },
            crop_size: 6,
        };
        let views = eval_views(&m.config, &data.test[0].video, &spec).unwrap();
        assert_eq!(views.len(), 10);
        assert_eq!(views[0].frames[0].shape(), &[3, 8, 8]);
        assert_eq!(views[0].flow[0].shape(), &[4, 8, 8]);
        let hook = EvalHook {
            samples: &data.test,
            spec,
            every: 0,
        };
        let log = run_stage(&mut m, &data.train, &schedule("two_stream", 1), &AugmentationConfig::default(), 0, Some(&hook)).unwrap();
        assert!(log.rows[0].eval_acc.is_some());
        let csv = log.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("stage,epoch,lr,train_loss,"));
    }
}
