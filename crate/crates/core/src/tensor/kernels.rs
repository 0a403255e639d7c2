//! Raw loops over row-major buffers. All reductions run in a fixed
//! left-to-right order so repeated runs are bit-identical.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2` on each side; requires odd kernel extents.
    Same,
    /// No padding; output shrinks by `k - 1`.
    Valid,
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For every row-major index of `out`, the matching offset into a tensor of
/// shape `src` broadcast up to `out`.
pub(crate) fn broadcast_offsets(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut src_strides = vec![0usize; rank];
    let mut stride = 1;
    for ax in (0..rank).rev() {
        src_strides[ax] = if src[ax] == 1 { 0 } else { stride };
        stride *= src[ax];
    }
    let n: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

pub(crate) fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok((a.shape().to_vec(), data));
    }
    let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        Error::shape(op, format!("{:?} and {:?} do not broadcast", a.shape(), b.shape()))
    })?;
    let oa = broadcast_offsets(&shape, a.shape());
    let ob = broadcast_offsets(&shape, b.shape());
    let (ad, bd) = (a.data(), b.data());
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(ad[i], bd[j])).collect();
    Ok((shape, data))
}

/// Sums a gradient of shape `out` down to the broadcast source shape `src`.
pub(crate) fn reduce_to(grad: &[f64], out: &[usize], src: &[usize]) -> Vec<f64> {
    if out == src {
        return grad.to_vec();
    }
    let n: usize = src.iter().product();
    let mut acc = vec![0.0; n];
    for (g, off) in grad.iter().zip(broadcast_offsets(out, src)) {
        acc[off] += g;
    }
    acc
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (m, k, n) = match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
        (sa, sb) => {
            return Err(Error::shape("matmul", format!("{sa:?} · {sb:?}")));
        }
    };
    Ok((m, n, matmul_raw(a.data(), b.data(), m, k, n)))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Geometry of a (possibly degenerate) 3-D correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub pt: usize,
    pub ph: usize,
    pub pw: usize,
    pub ot: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn new(
        op: &'static str,
        input: [usize; 4],
        kernel: [usize; 5],
        padding: Padding,
    ) -> Result<Self> {
        let [c_in, t, h, w] = input;
        let [c_out, kc, kt, kh, kw] = kernel;
        if kc != c_in {
            return Err(Error::shape(
                op,
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        let (pt, ph, pw) = match padding {
            Padding::Same => {
                if kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::shape(
                        op,
                        format!("same padding needs odd kernel extents, got {kt}×{kh}×{kw}"),
                    ));
                }
                (kt / 2, kh / 2, kw / 2)
            }
            Padding::Valid => {
                if kt > t || kh > h || kw > w {
                    return Err(Error::shape(op, "kernel larger than input under valid padding"));
                }
                (0, 0, 0)
            }
        };
        Ok(Self {
            c_in,
            c_out,
            t,
            h,
            w,
            kt,
            kh,
            kw,
            pt,
            ph,
            pw,
            ot: t + 2 * pt + 1 - kt,
            oh: h + 2 * ph + 1 - kh,
            ow: w + 2 * pw + 1 - kw,
        })
    }

    pub fn for_conv2d(input: &[usize], kernel: &[usize], padding: Padding) -> Result<Self> {
        match (input, kernel) {
            (&[c, h, w], &[co, ci, kh, kw]) => {
                Self::new("conv2d", [c, 1, h, w], [co, ci, 1, kh, kw], padding)
            }
            _ => Err(Error::shape(
                "conv2d",
                format!("expected C×H×W input and 4-D kernel, got {input:?}, {kernel:?}"),
            )),
        }
    }

    pub fn for_conv3d(input: &[usize], kernel: &[usize], padding: Padding) -> Result<Self> {
        match (input, kernel) {
            (&[c, t, h, w], &[co, ci, kt, kh, kw]) => {
                Self::new("conv3d", [c, t, h, w], [co, ci, kt, kh, kw], padding)
            }
            _ => Err(Error::shape(
                "conv3d",
                format!("expected C×T×H×W input and 5-D kernel, got {input:?}, {kernel:?}"),
            )),
        }
    }

    /// Valid output range `[lo, hi)` along an axis for a kernel tap `d`.
    #[inline]
    fn range(out: usize, inp: usize, pad: usize, d: usize) -> (usize, usize) {
        // input index = o + d - pad must lie in [0, inp)
        let lo = pad.saturating_sub(d);
        let hi = (inp + pad).saturating_sub(d).min(out);
        (lo, hi.max(lo))
    }

    pub fn forward(&self, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let g = *self;
        let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
        let mut out = vec![0.0; g.c_out * g.ot * ohw];
        let ksz = g.kt * g.kh * g.kw;
        for co in 0..g.c_out {
            let obase = co * g.ot * ohw;
            for ci in 0..g.c_in {
                let ibase = ci * g.t * hw;
                for dt in 0..g.kt {
                    let (t0, t1) = Self::range(g.ot, g.t, g.pt, dt);
                    for dy in 0..g.kh {
                        let (y0, y1) = Self::range(g.oh, g.h, g.ph, dy);
                        for dx in 0..g.kw {
                            let (x0, x1) = Self::range(g.ow, g.w, g.pw, dx);
                            let kv = kernel[(co * g.c_in + ci) * ksz + (dt * g.kh + dy) * g.kw + dx];
                            for ot in t0..t1 {
                                let it = ot + dt - g.pt;
                                for oy in y0..y1 {
                                    let iy = oy + dy - g.ph;
                                    let orow = obase + ot * ohw + oy * g.ow;
                                    let irow = ibase + it * hw + iy * g.w + dx;
                                    let o = &mut out[orow + x0..orow + x1];
                                    let i = &input[irow + x0 - g.pw..irow + x1 - g.pw];
                                    for (ov, iv) in o.iter_mut().zip(i) {
                                        *ov += kv * iv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward_input(&self, kernel: &[f64], grad_out: &[f64]) -> Vec<f64> {
        let g = *self;
        let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
        let mut gin = vec![0.0; g.c_in * g.t * hw];
        let ksz = g.kt * g.kh * g.kw;
        for co in 0..g.c_out {
            let obase = co * g.ot * ohw;
            for ci in 0..g.c_in {
                let ibase = ci * g.t * hw;
                for dt in 0..g.kt {
                    let (t0, t1) = Self::range(g.ot, g.t, g.pt, dt);
                    for dy in 0..g.kh {
                        let (y0, y1) = Self::range(g.oh, g.h, g.ph, dy);
                        for dx in 0..g.kw {
                            let (x0, x1) = Self::range(g.ow, g.w, g.pw, dx);
                            let kv = kernel[(co * g.c_in + ci) * ksz + (dt * g.kh + dy) * g.kw + dx];
                            for ot in t0..t1 {
                                let it = ot + dt - g.pt;
                                for oy in y0..y1 {
                                    let iy = oy + dy - g.ph;
                                    let orow = obase + ot * ohw + oy * g.ow;
                                    let irow = ibase + it * hw + iy * g.w + dx;
                                    let o = &grad_out[orow + x0..orow + x1];
                                    let i = &mut gin[irow + x0 - g.pw..irow + x1 - g.pw];
                                    for (iv, ov) in i.iter_mut().zip(o) {
                                        *iv += kv * ov;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        gin
    }

    pub fn backward_kernel(&self, input: &[f64], grad_out: &[f64]) -> Vec<f64> {
        let g = *self;
        let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
        let ksz = g.kt * g.kh * g.kw;
        let mut gk = vec![0.0; g.c_out * g.c_in * ksz];
        for co in 0..g.c_out {
            let obase = co * g.ot * ohw;
            for ci in 0..g.c_in {
                let ibase = ci * g.t * hw;
                for dt in 0..g.kt {
                    let (t0, t1) = Self::range(g.ot, g.t, g.pt, dt);
                    for dy in 0..g.kh {
                        let (y0, y1) = Self::range(g.oh, g.h, g.ph, dy);
                        for dx in 0..g.kw {
                            let (x0, x1) = Self::range(g.ow, g.w, g.pw, dx);
                            let mut s = 0.0;
                            for ot in t0..t1 {
                                let it = ot + dt - g.pt;
                                for oy in y0..y1 {
                                    let iy = oy + dy - g.ph;
                                    let orow = obase + ot * ohw + oy * g.ow;
                                    let irow = ibase + it * hw + iy * g.w + dx;
                                    let o = &grad_out[orow + x0..orow + x1];
                                    let i = &input[irow + x0 - g.pw..irow + x1 - g.pw];
                                    for (ov, iv) in o.iter().zip(i) {
                                        s += ov * iv;
                                    }
                                }
                            }
                            gk[(co * g.c_in + ci) * ksz + (dt * g.kh + dy) * g.kw + dx] = s;
                        }
                    }
                }
            }
        }
        gk
    }
}

pub(crate) fn conv2d(input: &Tensor, kernel: &Tensor, padding: Padding) -> Result<(Vec<usize>, Vec<f64>)> {
    let g = ConvGeom::for_conv2d(input.shape(), kernel.shape(), padding)?;
    Ok((vec![g.c_out, g.oh, g.ow], g.forward(input.data(), kernel.data())))
}

pub(crate) fn conv3d(input: &Tensor, kernel: &Tensor, padding: Padding) -> Result<(Vec<usize>, Vec<f64>)> {
    let g = ConvGeom::for_conv3d(input.shape(), kernel.shape(), padding)?;
    Ok((vec![g.c_out, g.ot, g.oh, g.ow], g.forward(input.data(), kernel.data())))
}

/// Max-stabilized softmax over the whole buffer.
pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let mut s = 0.0;
    for v in &e {
        s += v;
    }
    e.into_iter().map(|v| v / s).collect()
}

/// `ln Σ exp(x)` with max subtraction.
pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut s = 0.0;
    for &v in x {
        s += (v - m).exp();
    }
    m + s.ln()
}

pub(crate) fn spatial_avg_pool(x: &Tensor) -> Result<(usize, Vec<f64>)> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::shape(
            "spatial_avg_pool",
            format!("expected C×H×W, got {:?}", x.shape()),
        ));
    };
    let plane = h * w;
    let data = x
        .data()
        .chunks(plane)
        .map(|p| {
            let mut s = 0.0;
            for v in p {
                s += v;
            }
            s / plane as f64
        })
        .collect();
    Ok((c, data))
}

/// 2×2 mean downsampling of a `C×H×W` map (odd trailing rows/columns dropped).
pub(crate) fn avg_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = ch * h * w + 2 * y * w + 2 * xx;
                out[ch * oh * ow + y * ow + xx] =
                    (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]) * 0.25;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let v = g[ch * oh * ow + y * ow + xx] * 0.25;
                let base = ch * h * w + 2 * y * w + 2 * xx;
                out[base] += v;
                out[base + 1] += v;
                out[base + w] += v;
                out[base + w + 1] += v;
            }
        }
    }
    out
}
