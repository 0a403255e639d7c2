//! The gradient suite: finite-difference checks of every differentiable
//! building block and of one end-to-end loss per model family, on small
//! random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{compare_gradients, grad_check, GradReport, Tape, Var};
use crate::cells::{convlstm_step, gru_step, lsta_step, run_lsta_gru, CellState, ConvLstmParams, GruParams, LstaParams};
use crate::error::{Error, Result};
use crate::heads::{multi_task_loss, structured_forward, LabelSpace, Labels, ScoreVars, StructuredHeadParams};
use crate::hf_tsn::{consensus, hf_block, HfBlockParams};
use crate::models::{Clip, Model, ModelConfig, ModelKind};
use crate::params::Binder;
use crate::tensor::Tensor;
use crate::two_stream::{cross_modal_rollout, motion_spatial_attention, FusionParams};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

pub const CHECKS: [&str; 15] = [
    "lsta_step",
    "convlstm_step",
    "gru_step",
    "run_lsta_gru",
    "hf_block",
    "consensus",
    "structured_forward",
    "multi_task_loss",
    "motion_spatial_attention",
    "cross_modal_rollout",
    "model_lsta_gru",
    "model_lsta",
    "model_hf_tsn",
    "model_motion",
    "model_two_stream",
];

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub check: &'static str,
    pub instance: usize,
    pub report: GradReport,
}

/// Runs every check on `instances` random instances each.
pub fn gradient_suite(seed: u64, instances: usize, eps: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::with_capacity(CHECKS.len() * instances);
    for check in CHECKS {
        for instance in 0..instances {
            let s = seed.wrapping_mul(7919).wrapping_add(instance as u64);
            out.push(SuiteEntry {
                check,
                instance,
                report: run_check(check, s, eps, tol)?,
            });
        }
    }
    Ok(out)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::uniform(shape, scale, rng)
}

/// Named leaves in a fixed order.
#[derive(Default)]
struct Leaves {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Leaves {
    fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.values.push(t);
    }

    fn params(&self) -> Vec<(&str, Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().cloned()).collect()
    }

    fn pick<'t>(&self, vars: &[Var<'t>], name: &str) -> Result<Var<'t>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| vars[i].clone())
            .ok_or_else(|| Error::Invalid(format!("no leaf {name}")))
    }
}

macro_rules! push_struct {
    ($leaves:expr, $value:expr, $prefix:expr) => {{
        let v = $value;
        v.for_each(|n, t| $leaves.push(format!("{}.{n}", $prefix), t.clone()));
        v
    }};
}

macro_rules! pick_struct {
    ($leaves:expr, $vars:expr, $template:expr, $prefix:expr) => {
        $template.try_map(|n, _| $leaves.pick($vars, &format!("{}.{n}", $prefix)))
    };
}

fn random_struct_lsta(rng: &mut ChaCha8Rng, c: usize, d: usize) -> LstaParams {
    let p = LstaParams::init(rng.random(), "lsta", c, d);
    p.try_map(|_, t| Ok::<_, Error>(rand_t(rng, t.shape(), 0.5))).expect("infallible")
}

fn space() -> LabelSpace {
    let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect();
    LabelSpace::from_pairs(names("v", 3), names("n", 4), &[(0, 0), (1, 1), (2, 2), (0, 3), (2, 1)]).expect("valid pairs")
}

/// One check on one random instance.
pub fn run_check(check: &str, seed: u64, eps: f64, tol: f64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut leaves = Leaves::default();
    let (c, d, hw) = (2, 3, 4);
    match check {
        "lsta_step" => {
            leaves.push("x", rand_t(&mut rng, &[c, hw, hw], 1.0));
            leaves.push("c", rand_t(&mut rng, &[d, hw, hw], 1.0));
            leaves.push("h", rand_t(&mut rng, &[d, hw, hw], 1.0));
            let t = push_struct!(leaves, random_struct_lsta(&mut rng, c, d), "lsta");
            grad_check(
                |_tape, v| {
                    let p = pick_struct!(leaves, v, t, "lsta")?;
                    let s = CellState {
                        c: leaves.pick(v, "c")?,
                        h: leaves.pick(v, "h")?,
                    };
                    let (next, alpha) = lsta_step(&leaves.pick(v, "x")?, &s, &p, None)?;
                    next.h.tanh()?.sum()?.add(&next.c.mul(&next.c)?.sum()?)?.add(&alpha.exp()?.sum()?)
                },
                &leaves.params(),
                eps,
                tol,
            )
        }
        "convlstm_step" => {
            leaves.push("x", rand_t(&mut rng, &[c, hw, hw], 1.0));
            leaves.push("c", rand_t(&mut rng, &[d, hw, hw], 1.0));
            leaves.push("h", rand_t(&mut rng, &[d, hw, hw], 1.0));
            let init = ConvLstmParams::init(rng.random(), "convlstm", c, d);
            let init = init.try_map(|_, t| Ok::<_, Error>(rand_t(&mut rng, t.shape(), 0.5)))?;
            let t = push_struct!(leaves, init, "convlstm");
            grad_check(
                |_tape, v| {
                    let p = pick_struct!(leaves, v, t, "convlstm")?;
                    let s = CellState {
                        c: leaves.pick(v, "c")?,
                        h: leaves.pick(v, "h")?,
                    };
                    let next = convlstm_step(&leaves.pick(v, "x")?, &s, &p, None)?;
                    next.h.tanh()?.sum()?.add(&next.c.mul(&next.c)?.sum()?)
                },
                &leaves.params(),
                eps,
                tol,
            )
        }
        "gru_step" => {
            leaves.push("x", rand_t(&mut rng, &[4], 1.0));
            leaves.push("h", rand_t(&mut rng, &[d], 1.0));
            let init = GruParams::init(rng.random(), "gru", 4, d);
            let init = init.try_map(|_, t| Ok::<_, Error>(rand_t(&mut rng, t.shape(), 0.7)))?;
            let t = push_struct!(leaves, init, "gru");
            grad_check(
                |_tape, v| {
                    let p = pick_struct!(leaves, v, t, "gru")?;
                    gru_step(&leaves.pick(v, "x")?, &leaves.pick(v, "h")?, &p)?.tanh()?.sum()
                },
                &leaves.params(),
                eps,
                tol,
            )
        }
        "run_lsta_gru" => {
            let frames: Vec<Tensor> = (0..4).map(|_| rand_t(&mut rng, &[c, hw, hw], 1.0)).collect();
            let t = push_struct!(leaves, random_struct_lsta(&mut rng, c, d), "lsta");
            let mut gru = |name: &str, leaves: &mut Leaves| -> Result<GruParams> {
                let g = GruParams::init(rng.random(), name, d, d).try_map(|_, t| Ok::<_, Error>(rand_t(&mut rng, t.shape(), 0.7)))?;
                Ok(push_struct!(leaves, g, name))
            };
            let ga = gru("gru_a", &mut leaves)?;
            let gb = gru("gru_b", &mut leaves)?;
            grad_check(
                |tape, v| {
                    let xs: Vec<_> = frames.iter().map(|f| tape.constant(f.clone())).collect();
                    let out = run_lsta_gru(
                        &xs,
                        &pick_struct!(leaves, v, t, "lsta")?,
                        &pick_struct!(leaves, v, ga, "gru_a")?,
                        &pick_struct!(leaves, v, gb, "gru_b")?,
                    )?;
                    out.lsta_descriptor.tanh()?.sum()?.add(&out.gru_descriptor.mul(&out.gru_descriptor)?.sum()?)
                },
                &leaves.params(),
                eps,
                tol,
            )
        }
        "hf_block" => {
            leaves.push("features", rand_t(&mut rng, &[3, c, hw, hw], 1.0));
            leaves.push("w0", rand_t(&mut rng, &[c, 1, 1], 1.0));
            leaves.push("w1", rand_t(&mut rng, &[c, 1, 1], 1.0));
            grad_check(
                |_tape, v| {
                    let p = HfBlockParams {
                        w0: leaves.pick(v, "w0")?,
                        w1: leaves.pick(v, "w1")?,
                    };
                    hf_block(&leaves.pick(v, "features")?, &p)?.tanh()?.sum()
                },
                &leaves.params(),
                eps,
                tol,
            )
        }
        "consensus" => {
            leaves.push("segments", rand_t(&mut rng, &[4, 3], 1.0));
            leaves.push("weight", rand_t(&mut rng, &[5, 3], 1.0));
            leaves.push("bias", rand_t(&mut rng, &[5], 1.0));
            let label = rng.random_range(0..5);
            grad_check(
                |_tape, v| consensus(&v[0], &v[1], &v[2])?.cross_entropy(label),
                &leaves.params(),
                eps,
                tol,
            )
        }
        "structured_forward" | "multi_task_loss" => {
            let space = space();
            let labels = random_labels(&space, &mut rng)?;
            if check == "multi_task_loss" {
                leaves.push("verb", rand_t(&mut rng, &[3], 2.0));
                leaves.push("noun", rand_t(&mut rng, &[4], 2.0));
                leaves.push("action", rand_t(&mut rng, &[5], 2.0));
                return grad_check(
                    |_tape, v| {
                        let s = ScoreVars {
                            verb: v[0].clone(),
                            noun: v[1].clone(),
                            action: v[2].clone(),
                        };
                        multi_task_loss(&s, &labels)
                    },
                    &leaves.params(),
                    eps,
                    tol,
                );
            }
            leaves.push("feature", rand_t(&mut rng, &[6], 1.0));
            let head = StructuredHeadParams::init(rng.random(), "head", 6, &space)
                .try_map(|_, t| Ok::<_, Error>(rand_t(&mut rng, t.shape(), 0.5)))?;
            let t = push_struct!(leaves, head, "head");
            grad_check(
                |_tape, v| {
                    let s = structured_forward(&leaves.pick(v, "feature")?, &pick_struct!(leaves, v, t, "head")?)?;
                    s.verb.tanh()?.sum()?.add(&s.noun.mul(&s.noun)?.sum()?)?.add(&s.action.sigmoid()?.sum()?)
                },
                &leaves.params(),
                eps,
                tol,
            )
        }
        "motion_spatial_attention" => {
            leaves.push("features", rand_t(&mut rng, &[3, hw, hw], 1.0));
            leaves.push("motion.attn", rand_t(&mut rng, &[1, 3, 1, 1], 1.0));
            grad_check(
                |_tape, v| motion_spatial_attention(&v[0], &v[1])?.tanh()?.sum(),
                &leaves.params(),
                eps,
                tol,
            )
        }
        "cross_modal_rollout" => {
            let (ca, cm, steps) = (2, 3, 3);
            let app: Vec<Tensor> = (0..steps).map(|_| rand_t(&mut rng, &[ca, hw, hw], 1.0)).collect();
            let motion: Vec<Tensor> = (0..steps).map(|_| rand_t(&mut rng, &[cm, hw, hw], 1.0)).collect();
            let lsta = push_struct!(leaves, random_struct_lsta(&mut rng, ca, d), "lsta");
            let clstm = ConvLstmParams::init(rng.random(), "convlstm", cm, d)
                .try_map(|_, t| Ok::<_, Error>(rand_t(&mut rng, t.shape(), 0.5)))?;
            let clstm = push_struct!(leaves, clstm, "convlstm");
            let fusion = FusionParams::zeros(ca, cm, d, d).try_map(|_, t| Ok::<_, Error>(rand_t(&mut rng, t.shape(), 0.3)))?;
            let fusion = push_struct!(leaves, fusion, "fusion");
            grad_check(
                |tape, v| {
                    let a: Vec<_> = app.iter().map(|x| tape.constant(x.clone())).collect();
                    let m: Vec<_> = motion.iter().map(|x| tape.constant(x.clone())).collect();
                    let out = cross_modal_rollout(
                        &a,
                        &m,
                        &pick_struct!(leaves, v, lsta, "lsta")?,
                        &pick_struct!(leaves, v, clstm, "convlstm")?,
                        &pick_struct!(leaves, v, fusion, "fusion")?,
                    )?;
                    out.app_descriptor.tanh()?.sum()?.add(&out.motion_descriptor.mul(&out.motion_descriptor)?.sum()?)
                },
                &leaves.params(),
                eps,
                tol,
            )
        }
        "model_lsta_gru" => model_check(ModelKind::LstaGru, &mut rng, eps, tol),
        "model_lsta" => model_check(ModelKind::Lsta, &mut rng, eps, tol),
        "model_hf_tsn" => model_check(ModelKind::HfTsn, &mut rng, eps, tol),
        "model_motion" => model_check(ModelKind::Motion, &mut rng, eps, tol),
        "model_two_stream" => model_check(ModelKind::TwoStream, &mut rng, eps, tol),
        other => Err(Error::Invalid(format!("unknown gradient check {other:?}"))),
    }
}

fn random_labels(space: &LabelSpace, rng: &mut ChaCha8Rng) -> Result<Labels> {
    let (v, n) = space.actions()[rng.random_range(0..space.num_actions())];
    space.labels(v, n)
}

/// Structured loss of a tiny model of `kind` with every parameter drawn at
/// random, checked over all of its parameters.
fn model_check(kind: ModelKind, rng: &mut ChaCha8Rng, eps: f64, tol: f64) -> Result<GradReport> {
    let space = space();
    let config = ModelConfig {
        kind,
        in_channels: 3,
        stages: vec![2, 3],
        hf_positions: if kind == ModelKind::HfTsn { vec![0, 1] } else { Vec::new() },
        segments: 2,
        memory: 2,
        flow_frames: 1,
    };
    let mut model = Model::new(config, space.clone(), rng.random())?;
    for (_, t) in model.params.iter_mut() {
        *t = rand_t(rng, t.shape(), 0.5);
    }
    let clip = Clip {
        frames: if model.config.uses_frames() {
            (0..2).map(|_| rand_t(rng, &[3, 4, 4], 1.0)).collect()
        } else {
            Vec::new()
        },
        flow: if model.config.uses_flow() {
            (0..2).map(|_| rand_t(rng, &[2, 4, 4], 1.0)).collect()
        } else {
            Vec::new()
        },
    };
    let labels = random_labels(&space, rng)?;

    let names: Vec<String> = model.params.names().cloned().collect();
    let tape = Tape::new();
    let binder = Binder::new(&tape, |_| true);
    let loss = multi_task_loss(&model.forward(&binder, &clip, None)?, &labels)?;
    let grads = binder.named_grads(&tape.backward(&loss)?);
    let analytic: Vec<Tensor> = names
        .iter()
        .map(|n| grads.get(n).cloned().unwrap_or_else(|| Tensor::zeros(model.params.get(n).expect("listed").shape())))
        .collect();
    let params: Vec<(&str, Tensor)> = model.params.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    compare_gradients(
        |tape, v| {
            let mut m = model.clone();
            for (n, x) in names.iter().zip(v) {
                *m.params.get_mut(n)? = x.value().clone();
            }
            multi_task_loss(&m.forward(&Binder::frozen(tape), &clip, None)?, &labels)
        },
        &params,
        &analytic,
        eps,
        tol,
    )
}
