//! Flow-stream input adaptation and cross-modal gate-bias fusion between an
//! appearance LSTA and a motion ConvLSTM.

use crate::autodiff::{concat, Var};
use crate::cells::{convlstm_step, lsta_step, CellState, ConvLstmParams, GateBias, LstaParams};
use crate::error::{Error, Result};
use crate::params::param_struct;
use crate::tensor::{Padding, Tensor};

/// Flow frames per stack.
pub const FLOW_FRAMES: usize = 5;

/// Builds the `2L × H × W` flow stack starting at frame `t` of an
/// `n × C × H × W` video. Entry `j` holds the temporal differences of
/// channels 0 and 1 between frames `t+j+1` and `t+j`, interleaved as
/// `x1, y1, …, xL, yL`; steps past the end of the video are zero.
pub fn flow_stack(video: &Tensor, t: usize, frames: usize) -> Result<Tensor> {
    let s = video.shape();
    if s.len() != 4 || s[1] < 2 {
        return Err(Error::shape("flow_stack", format!("expected n×C×H×W with C ≥ 2, got {s:?}")));
    }
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    if t >= n {
        return Err(Error::OutOfRange {
            what: "flow start frame",
            index: t,
            size: n,
        });
    }
    let d = video.data();
    let mut out = vec![0.0; 2 * frames * plane];
    for j in 0..frames {
        let (a, b) = (t + j, t + j + 1);
        if b >= n {
            break;
        }
        for comp in 0..2 {
            let dst = &mut out[(2 * j + comp) * plane..(2 * j + comp + 1) * plane];
            let src_a = &d[(a * c + comp) * plane..(a * c + comp + 1) * plane];
            let src_b = &d[(b * c + comp) * plane..(b * c + comp + 1) * plane];
            for ((o, x), y) in dst.iter_mut().zip(src_a).zip(src_b) {
                *o = y - x;
            }
        }
    }
    Tensor::new(vec![2 * frames, s[2], s[3]], out)
}

/// Widens a first-layer kernel `C_out × 3 × k × k` to `target_in` input
/// slices, each the mean of the three source slices.
pub fn inflate_first_conv(w: &Tensor, target_in: usize) -> Result<Tensor> {
    let s = w.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape("inflate_first_conv", format!("expected C_out×3×k×k, got {s:?}")));
    }
    if target_in == 0 {
        return Err(Error::Invalid("inflate_first_conv: target_in must be positive".into()));
    }
    let (c_out, area) = (s[0], s[2] * s[3]);
    let d = w.data();
    let mut out = Vec::with_capacity(c_out * target_in * area);
    for o in 0..c_out {
        let base = o * 3 * area;
        let mean: Vec<f64> = (0..area)
            .map(|i| (d[base + i] + d[base + area + i] + d[base + 2 * area + i]) / 3.0)
            .collect();
        for _ in 0..target_in {
            out.extend_from_slice(&mean);
        }
    }
    Tensor::new(vec![c_out, target_in, s[2], s[3]], out)
}

/// `feat ⊙ (α · H·W)` with `α = softmax_spatial(conv2d(feat, attn))` and
/// `attn` a `1 × C × 1 × 1` kernel. A uniform map leaves features unchanged.
pub fn motion_spatial_attention<'t>(feat: &Var<'t>, attn: &Var<'t>) -> Result<Var<'t>> {
    let s = feat.shape();
    if s.len() != 3 || attn.shape() != [1, s[0], 1, 1] {
        return Err(Error::shape(
            "motion_spatial_attention",
            format!("features {s:?}, attention kernel {:?}", attn.shape()),
        ));
    }
    let area = (s[1] * s[2]) as f64;
    let alpha = feat.conv2d(attn, Padding::Same)?.softmax_spatial()?;
    feat.mul(&alpha.scale(area)?)
}

param_struct! {
    /// Cross-modal gate-bias kernels.
    pub struct FusionParams {
        /// `4·D_m × C_a × 3 × 3 × 3`, over time-stacked appearance features.
        app_to_motion,
        /// `4·D_a × C_m × 3 × 3`, per motion frame.
        motion_to_app,
    }
}

impl FusionParams {
    pub fn zeros(app_channels: usize, motion_channels: usize, app_memory: usize, motion_memory: usize) -> Self {
        Self {
            app_to_motion: Tensor::zeros(&[4 * motion_memory, app_channels, 3, 3, 3]),
            motion_to_app: Tensor::zeros(&[4 * app_memory, motion_channels, 3, 3]),
        }
    }
}

/// Final states of both recurrences.
#[derive(Clone, Debug)]
pub struct RolloutOutput<'t> {
    /// Spatially pooled final LSTA memory.
    pub app_descriptor: Var<'t>,
    /// Spatially pooled final ConvLSTM memory.
    pub motion_descriptor: Var<'t>,
    pub app_state: CellState<'t>,
    pub motion_state: CellState<'t>,
}

/// Runs the appearance LSTA and the motion ConvLSTM side by side. The 3D
/// convolution of the stacked appearance features biases the ConvLSTM gates
/// at every step; the 2D convolution of each motion frame biases the LSTA
/// gates at that step.
pub fn cross_modal_rollout<'t>(
    app_frames: &[Var<'t>],
    motion_frames: &[Var<'t>],
    lsta: &LstaParams<Var<'t>>,
    clstm: &ConvLstmParams<Var<'t>>,
    fusion: &FusionParams<Var<'t>>,
) -> Result<RolloutOutput<'t>> {
    if app_frames.is_empty() || app_frames.len() != motion_frames.len() {
        return Err(Error::shape(
            "cross_modal_rollout",
            format!("{} appearance vs {} motion frames", app_frames.len(), motion_frames.len()),
        ));
    }
    let tape = app_frames[0].tape();
    let (ca, h, w) = match app_frames[0].shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape("cross_modal_rollout", format!("appearance frame {s:?}"))),
    };
    if motion_frames[0].shape().len() != 3 || motion_frames[0].shape()[1..] != [h, w] {
        return Err(Error::shape(
            "cross_modal_rollout",
            format!("motion frame {:?} vs appearance {h}×{w}", motion_frames[0].shape()),
        ));
    }
    let t_len = app_frames.len();
    let app_memory = lsta.pool_kernel.shape()[0];
    let motion_memory = clstm.gate_kernel.shape()[0] / 4;

    let lifted = app_frames
        .iter()
        .map(|f| f.reshape(&[ca, 1, h, w]))
        .collect::<Result<Vec<_>>>()?;
    let volume = concat(&lifted.iter().collect::<Vec<_>>(), 1)?;
    let app_bias = volume.conv3d(&fusion.app_to_motion, Padding::Same)?;
    let gates = 4 * motion_memory;
    if app_bias.shape()[0] != gates {
        return Err(Error::shape(
            "cross_modal_rollout",
            format!("app_to_motion emits {} maps, ConvLSTM needs {gates}", app_bias.shape()[0]),
        ));
    }

    let mut app = CellState::zeros(tape, app_memory, h, w);
    let mut motion = CellState::zeros(tape, motion_memory, h, w);
    for t in 0..t_len {
        let to_app = GateBias {
            maps: motion_frames[t].conv2d(&fusion.motion_to_app, Padding::Same)?,
        };
        let to_motion = GateBias {
            maps: app_bias.narrow(1, t, 1)?.reshape(&[gates, h, w])?,
        };
        let (next_app, _) = lsta_step(&app_frames[t], &app, lsta, Some(&to_app))?;
        motion = convlstm_step(&motion_frames[t], &motion, clstm, Some(&to_motion))?;
        app = next_app;
    }
    Ok(RolloutOutput {
        app_descriptor: app.c.spatial_avg_pool()?,
        motion_descriptor: motion.c.spatial_avg_pool()?,
        app_state: app,
        motion_state: motion,
    })
}

/// The two streams run without any cross-modal bias.
pub fn independent_rollout<'t>(
    app_frames: &[Var<'t>],
    motion_frames: &[Var<'t>],
    lsta: &LstaParams<Var<'t>>,
    clstm: &ConvLstmParams<Var<'t>>,
) -> Result<(Var<'t>, Var<'t>)> {
    let first = app_frames
        .first()
        .ok_or_else(|| Error::Invalid("independent_rollout: no frames".into()))?;
    let (tape, h, w) = (first.tape(), first.shape()[1], first.shape()[2]);
    let mut app = CellState::zeros(tape, lsta.pool_kernel.shape()[0], h, w);
    for x in app_frames {
        app = lsta_step(x, &app, lsta, None)?.0;
    }
    let mut motion = CellState::zeros(tape, clstm.gate_kernel.shape()[0] / 4, h, w);
    for x in motion_frames {
        motion = convlstm_step(x, &motion, clstm, None)?;
    }
    Ok((app.c.spatial_avg_pool()?, motion.c.spatial_avg_pool()?))
}
