//! Recurrent units: the attentive LSTA cell, ConvLSTM and GRU, plus the
//! LSTA→GRU sequence runner.
//!
//! Fused gate tensors are ordered (input, forget, candidate, output).

use crate::autodiff::{concat, Var};
use crate::error::{Error, Result};
use crate::params::{init_uniform, param_struct};
use crate::tensor::{Padding, Tensor};

/// Full-scale memory size of every recurrent unit.
pub const DEFAULT_MEMORY: usize = 512;

param_struct! {
    /// LSTA cell weights for input channels `C` and memory size `D`.
    pub struct LstaParams {
        /// `1 × (C+D) × 3 × 3`, produces the spatial attention logits.
        attn_kernel,
        /// `4D × (C+D) × 3 × 3`.
        gate_kernel,
        /// `D × D × 1 × 1`, channel mixing of memory before output gating.
        pool_kernel,
        /// `4D × 1 × 1`.
        gate_bias,
    }
}

param_struct! {
    pub struct ConvLstmParams {
        /// `4D × (C+D) × 3 × 3`.
        gate_kernel,
        /// `4D × 1 × 1`.
        gate_bias,
    }
}

param_struct! {
    /// GRU over input size `C` and hidden size `D`. Each matrix is `D × (C+D)`.
    pub struct GruParams {
        w_update,
        b_update,
        w_reset,
        b_reset,
        w_candidate,
        b_candidate,
    }
}

/// Forget-gate bias at initialization.
const FORGET_BIAS_INIT: f64 = 1.0;

fn gate_bias_init(memory: usize) -> Tensor {
    let mut b = Tensor::zeros(&[4 * memory, 1, 1]);
    b.data_mut()[memory..2 * memory].fill(FORGET_BIAS_INIT);
    b
}

impl LstaParams {
    pub fn init(seed: u64, prefix: &str, input: usize, memory: usize) -> Self {
        let fan = (input + memory) * 9;
        Self {
            attn_kernel: init_uniform(seed, &format!("{prefix}.attn_kernel"), &[1, input + memory, 3, 3], fan),
            gate_kernel: init_uniform(
                seed,
                &format!("{prefix}.gate_kernel"),
                &[4 * memory, input + memory, 3, 3],
                fan,
            ),
            pool_kernel: init_uniform(seed, &format!("{prefix}.pool_kernel"), &[memory, memory, 1, 1], memory),
            gate_bias: gate_bias_init(memory),
        }
    }

    pub fn zeros(input: usize, memory: usize) -> Self {
        Self {
            attn_kernel: Tensor::zeros(&[1, input + memory, 3, 3]),
            gate_kernel: Tensor::zeros(&[4 * memory, input + memory, 3, 3]),
            pool_kernel: Tensor::zeros(&[memory, memory, 1, 1]),
            gate_bias: Tensor::zeros(&[4 * memory, 1, 1]),
        }
    }

    pub fn memory(&self) -> usize {
        self.pool_kernel.shape()[0]
    }

    pub fn input(&self) -> usize {
        self.gate_kernel.shape()[1] - self.memory()
    }
}

impl ConvLstmParams {
    pub fn init(seed: u64, prefix: &str, input: usize, memory: usize) -> Self {
        Self {
            gate_kernel: init_uniform(
                seed,
                &format!("{prefix}.gate_kernel"),
                &[4 * memory, input + memory, 3, 3],
                (input + memory) * 9,
            ),
            gate_bias: gate_bias_init(memory),
        }
    }

    pub fn zeros(input: usize, memory: usize) -> Self {
        Self {
            gate_kernel: Tensor::zeros(&[4 * memory, input + memory, 3, 3]),
            gate_bias: Tensor::zeros(&[4 * memory, 1, 1]),
        }
    }

    pub fn memory(&self) -> usize {
        self.gate_kernel.shape()[0] / 4
    }
}

impl GruParams {
    pub fn init(seed: u64, prefix: &str, input: usize, hidden: usize) -> Self {
        let w = |n: &str| init_uniform(seed, &format!("{prefix}.{n}"), &[hidden, input + hidden], hidden);
        let b = |n: &str| init_uniform(seed, &format!("{prefix}.{n}"), &[hidden], hidden);
        Self {
            w_update: w("w_update"),
            b_update: b("b_update"),
            w_reset: w("w_reset"),
            b_reset: b("b_reset"),
            w_candidate: w("w_candidate"),
            b_candidate: b("b_candidate"),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = Tensor::zeros(&[hidden, input + hidden]);
        let b = Tensor::zeros(&[hidden]);
        Self {
            w_update: w.clone(),
            b_update: b.clone(),
            w_reset: w.clone(),
            b_reset: b.clone(),
            w_candidate: w,
            b_candidate: b,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_update.shape()[0]
    }
}

/// Memory and output maps of an LSTA or ConvLSTM cell.
#[derive(Clone, Debug)]
pub struct CellState<'t> {
    pub c: Var<'t>,
    pub h: Var<'t>,
}

pub type LstaState<'t> = CellState<'t>;
pub type ConvLstmState<'t> = CellState<'t>;

impl<'t> CellState<'t> {
    pub fn zeros(tape: &'t crate::autodiff::Tape, memory: usize, h: usize, w: usize) -> Self {
        Self {
            c: tape.constant(Tensor::zeros(&[memory, h, w])),
            h: tape.constant(Tensor::zeros(&[memory, h, w])),
        }
    }
}

/// Additive pre-activation maps for the four gates, stacked as `4D × H × W`.
#[derive(Clone, Debug)]
pub struct GateBias<'t> {
    pub maps: Var<'t>,
}

impl<'t> GateBias<'t> {
    pub fn from_gates(i: &Var<'t>, f: &Var<'t>, g: &Var<'t>, o: &Var<'t>) -> Result<Self> {
        Ok(Self {
            maps: concat(&[i, f, g, o], 0)?,
        })
    }
}

fn check_state(op: &'static str, x: &Var<'_>, state: &CellState<'_>, input: usize, memory: usize) -> Result<()> {
    let xs = x.shape();
    if xs.len() != 3 || xs[0] != input {
        return Err(Error::shape(op, format!("input {xs:?}, expected {input} channels")));
    }
    let expected = [memory, xs[1], xs[2]];
    if state.c.shape() != expected || state.h.shape() != expected {
        return Err(Error::shape(
            op,
            format!("state {:?}/{:?}, expected {expected:?}", state.c.shape(), state.h.shape()),
        ));
    }
    Ok(())
}

/// Shared gate arithmetic: returns `(c, o)` from fused pre-activations.
fn lstm_gates<'t>(
    op: &'static str,
    z: Var<'t>,
    c_prev: &Var<'t>,
    memory: usize,
    bias: Option<&GateBias<'t>>,
) -> Result<(Var<'t>, Var<'t>)> {
    let z = match bias {
        Some(b) => {
            if b.maps.shape() != z.shape() {
                return Err(Error::shape(
                    op,
                    format!("gate bias {:?} vs pre-activations {:?}", b.maps.shape(), z.shape()),
                ));
            }
            z.add(&b.maps)?
        }
        None => z,
    };
    let i = z.narrow(0, 0, memory)?.sigmoid()?;
    let f = z.narrow(0, memory, memory)?.sigmoid()?;
    let g = z.narrow(0, 2 * memory, memory)?.tanh()?;
    let o = z.narrow(0, 3 * memory, memory)?.sigmoid()?;
    let c = f.mul(c_prev)?.add(&i.mul(&g)?)?;
    Ok((c, o))
}

/// One LSTA step. Returns the new state and the spatial attention map `1×H×W`.
///
/// The input is reweighted by a softmax attention map computed from
/// `[x; h_prev]`, gated into memory as in an LSTM, and the output is
/// `o ⊙ tanh(pool_kernel * c)`.
pub fn lsta_step<'t>(
    x: &Var<'t>,
    state: &LstaState<'t>,
    params: &LstaParams<Var<'t>>,
    bias: Option<&GateBias<'t>>,
) -> Result<(LstaState<'t>, Var<'t>)> {
    let memory = params.pool_kernel.shape()[0];
    let input = params.gate_kernel.shape()[1] - memory;
    check_state("lsta_step", x, state, input, memory)?;

    let xh = concat(&[x, &state.h], 0)?;
    let alpha = xh.conv2d(&params.attn_kernel, Padding::Same)?.softmax_spatial()?;
    let attended = x.mul(&alpha)?;
    let z = concat(&[&attended, &state.h], 0)?
        .conv2d(&params.gate_kernel, Padding::Same)?
        .add(&params.gate_bias)?;
    let (c, o) = lstm_gates("lsta_step", z, &state.c, memory, bias)?;
    let h = o.mul(&c.conv2d(&params.pool_kernel, Padding::Same)?.tanh()?)?;
    Ok((CellState { c, h }, alpha))
}

pub fn convlstm_step<'t>(
    x: &Var<'t>,
    state: &ConvLstmState<'t>,
    params: &ConvLstmParams<Var<'t>>,
    bias: Option<&GateBias<'t>>,
) -> Result<ConvLstmState<'t>> {
    let memory = params.gate_kernel.shape()[0] / 4;
    let input = params.gate_kernel.shape()[1] - memory;
    check_state("convlstm_step", x, state, input, memory)?;

    let z = concat(&[x, &state.h], 0)?
        .conv2d(&params.gate_kernel, Padding::Same)?
        .add(&params.gate_bias)?;
    let (c, o) = lstm_gates("convlstm_step", z, &state.c, memory, bias)?;
    let h = o.mul(&c.tanh()?)?;
    Ok(CellState { c, h })
}

/// `W·v + b` for a vector `v`.
pub(crate) fn linear<'t>(w: &Var<'t>, v: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    let n = v.shape()[0];
    let out = w.shape()[0];
    w.matmul(&v.reshape(&[n, 1])?)?.reshape(&[out])?.add(b)
}

pub fn gru_step<'t>(x: &Var<'t>, h: &Var<'t>, params: &GruParams<Var<'t>>) -> Result<Var<'t>> {
    let hidden = params.w_update.shape()[0];
    let input = params.w_update.shape()[1] - hidden;
    if x.shape() != [input] || h.shape() != [hidden] {
        return Err(Error::shape(
            "gru_step",
            format!("x {:?}, h {:?}; expected [{input}], [{hidden}]", x.shape(), h.shape()),
        ));
    }
    let xh = concat(&[x, h], 0)?;
    let z = linear(&params.w_update, &xh, &params.b_update)?.sigmoid()?;
    let r = linear(&params.w_reset, &xh, &params.b_reset)?.sigmoid()?;
    let xrh = concat(&[x, &r.mul(h)?], 0)?;
    let n = linear(&params.w_candidate, &xrh, &params.b_candidate)?.tanh()?;
    z.affine(-1.0, 1.0)?.mul(&n)?.add(&z.mul(h)?)
}

/// Output of [`run_lsta_gru`].
#[derive(Clone, Debug)]
pub struct LstaGruOutput<'t> {
    /// Spatially pooled final LSTA memory, length `D`.
    pub lsta_descriptor: Var<'t>,
    /// Final hidden states of both GRUs, concatenated.
    pub gru_descriptor: Var<'t>,
    /// Attention map of every step.
    pub attention: Vec<Var<'t>>,
}

/// Runs LSTA over `frames`; at each step the pooled output state feeds two
/// GRUs.
pub fn run_lsta_gru<'t>(
    frames: &[Var<'t>],
    lsta: &LstaParams<Var<'t>>,
    gru_a: &GruParams<Var<'t>>,
    gru_b: &GruParams<Var<'t>>,
) -> Result<LstaGruOutput<'t>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Invalid("run_lsta_gru: empty frame sequence".into()))?;
    let tape = first.tape();
    let memory = lsta.pool_kernel.shape()[0];
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let mut state = CellState::zeros(tape, memory, h, w);
    let mut ha = tape.constant(Tensor::zeros(&[gru_a.w_update.shape()[0]]));
    let mut hb = tape.constant(Tensor::zeros(&[gru_b.w_update.shape()[0]]));
    let mut attention = Vec::with_capacity(frames.len());
    for x in frames {
        let (next, alpha) = lsta_step(x, &state, lsta, None)?;
        state = next;
        attention.push(alpha);
        let pooled = state.h.spatial_avg_pool()?;
        ha = gru_step(&pooled, &ha, gru_a)?;
        hb = gru_step(&pooled, &hb, gru_b)?;
    }
    Ok(LstaGruOutput {
        lsta_descriptor: state.c.spatial_avg_pool()?,
        gru_descriptor: concat(&[&ha, &hb], 0)?,
        attention,
    })
}
