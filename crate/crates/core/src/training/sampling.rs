//! Frame sampling, training-time augmentation and multi-view evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Train,
    Eval,
}

/// Splits the time axis into `t` equal segments `[kn/t, (k+1)n/t)` and picks
/// one frame index per segment: the center `⌊(lo+hi)/2⌋` of the frames
/// `lo..hi` inside it in eval mode, a uniform draw among them in train mode.
/// A segment holding no frame (only when `n_available < t`) takes the frame
/// its start falls in.
pub fn sample_frames<R: Rng + ?Sized>(n_available: usize, t: usize, mode: SampleMode, rng: &mut R) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(Error::Invalid("sample_frames: T must be positive".into()));
    }
    if n_available == 0 {
        return Err(Error::Invalid("sample_frames: no frames available".into()));
    }
    Ok((0..t)
        .map(|k| {
            let (lo, hi) = segment(n_available, t, k);
            if lo >= hi {
                return k * n_available / t;
            }
            match mode {
                SampleMode::Eval => (lo + hi) / 2,
                SampleMode::Train => rng.random_range(lo..hi),
            }
        })
        .collect())
}

/// Frames `lo..hi` whose index lies in segment `k`.
fn segment(n: usize, t: usize, k: usize) -> (usize, usize) {
    ((k * n).div_ceil(t), ((k + 1) * n).div_ceil(t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Crop side as a fraction of the frame side, drawn uniformly.
    pub scale_jitter: (f64, f64),
    pub horizontal_flip: f64,
    pub temporal_jitter: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            scale_jitter: (0.8, 1.0),
            horizontal_flip: 0.5,
            temporal_jitter: true,
        }
    }
}

impl AugmentationConfig {
    /// No spatial or temporal randomness.
    pub fn none() -> Self {
        Self {
            scale_jitter: (1.0, 1.0),
            horizontal_flip: 0.0,
            temporal_jitter: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.scale_jitter;
        if !(a > 0.0 && a <= b && b <= 1.0) {
            return Err(Error::Invalid(format!("scale_jitter ({a}, {b}) must satisfy 0 < a ≤ b ≤ 1")));
        }
        if !(0.0..=1.0).contains(&self.horizontal_flip) {
            return Err(Error::Invalid(format!("horizontal_flip {} outside [0, 1]", self.horizontal_flip)));
        }
        Ok(())
    }

    /// Draws one spatial transform for a clip of `h × w` frames.
    pub fn draw<R: Rng + ?Sized>(&self, h: usize, w: usize, rng: &mut R) -> SpatialTransform {
        let (a, b) = self.scale_jitter;
        let s = if a < b { rng.random_range(a..=b) } else { a };
        let side = |n: usize| ((n as f64 * s).round() as usize).clamp(1, n);
        let (ch, cw) = (side(h), side(w));
        let y = if ch < h { rng.random_range(0..=h - ch) } else { 0 };
        let x = if cw < w { rng.random_range(0..=w - cw) } else { 0 };
        let flip = self.horizontal_flip > 0.0 && rng.random_bool(self.horizontal_flip);
        SpatialTransform { y, x, h: ch, w: cw, flip }
    }
}

/// A crop window, optional mirror, then resize back to the frame size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatialTransform {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
    pub flip: bool,
}

impl SpatialTransform {
    pub fn apply(&self, frame: &Tensor) -> Result<Tensor> {
        let s = frame.shape();
        let mut out = crop(frame, self.y, self.x, self.h, self.w)?;
        if self.flip {
            out = hflip(&out)?;
        }
        resize_bilinear(&out, s[1], s[2])
    }
}

fn dims(op: &'static str, frame: &Tensor) -> Result<(usize, usize, usize)> {
    match frame.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::shape(op, format!("expected C×H×W, got {s:?}"))),
    }
}

pub fn crop(frame: &Tensor, y: usize, x: usize, ch: usize, cw: usize) -> Result<Tensor> {
    let (c, h, w) = dims("crop", frame)?;
    if ch == 0 || cw == 0 || y + ch > h || x + cw > w {
        return Err(Error::shape("crop", format!("window {ch}×{cw} at ({y},{x}) outside {h}×{w}")));
    }
    let d = frame.data();
    let mut out = Vec::with_capacity(c * ch * cw);
    for k in 0..c {
        for r in y..y + ch {
            let row = (k * h + r) * w;
            out.extend_from_slice(&d[row + x..row + x + cw]);
        }
    }
    Tensor::new(vec![c, ch, cw], out)
}

pub fn hflip(frame: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims("hflip", frame)?;
    let d = frame.data();
    let mut out = Vec::with_capacity(c * h * w);
    for row in 0..c * h {
        out.extend(d[row * w..(row + 1) * w].iter().rev());
    }
    Tensor::new(vec![c, h, w], out)
}

/// Bilinear resampling with half-pixel centers; same size is a plain copy.
pub fn resize_bilinear(frame: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (c, h, w) = dims("resize", frame)?;
    if oh == 0 || ow == 0 {
        return Err(Error::shape("resize", format!("target {oh}×{ow}")));
    }
    if (oh, ow) == (h, w) {
        return Ok(frame.clone());
    }
    let axis = |o: usize, n: usize, i: usize| {
        let pos = ((i as f64 + 0.5) * n as f64 / o as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, pos - lo as f64)
    };
    let d = frame.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for k in 0..c {
        let plane = &d[k * h * w..(k + 1) * h * w];
        for i in 0..oh {
            let (y0, y1, fy) = axis(oh, h, i);
            for j in 0..ow {
                let (x0, x1, fx) = axis(ow, w, j);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Four corners and center, plain and mirrored.
    Lsta10view,
    /// Same ten crops, as used for segment networks.
    Tsn10crop,
    Center,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub mode: CropMode,
}

impl CropSpec {
    pub fn views(&self) -> usize {
        match self.mode {
            CropMode::Lsta10view | CropMode::Tsn10crop => 10,
            CropMode::Center => 1,
        }
    }

    /// Crop windows `(y, x)` in view order: TL, TR, BL, BR, center (then the
    /// same five mirrored).
    fn origins(&self, h: usize, w: usize, size: usize) -> Vec<(usize, usize)> {
        let center = ((h - size) / 2, (w - size) / 2);
        match self.mode {
            CropMode::Center => vec![center],
            _ => vec![(0, 0), (0, w - size), (h - size, 0), (h - size, w - size), center],
        }
    }
}

/// The deterministic list of views of `frame`.
pub fn eval_multiview(frame: &Tensor, spec: CropSpec, crop_size: usize) -> Result<Vec<Tensor>> {
    let (_, h, w) = dims("eval_multiview", frame)?;
    if crop_size == 0 || crop_size > h || crop_size > w {
        return Err(Error::shape("eval_multiview", format!("crop {crop_size} larger than frame {h}×{w}")));
    }
    let crops = spec
        .origins(h, w, crop_size)
        .into_iter()
        .map(|(y, x)| crop(frame, y, x, crop_size, crop_size))
        .collect::<Result<Vec<_>>>()?;
    if spec.views() == 1 {
        return Ok(crops);
    }
    let flipped = crops.iter().map(hflip).collect::<Result<Vec<_>>>()?;
    Ok(crops.into_iter().chain(flipped).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn eval_sampling_examples() {
        let r = &mut rng();
        assert_eq!(sample_frames(20, 20, SampleMode::Eval, r).unwrap(), (0..20).collect::<Vec<_>>());
        assert_eq!(
            sample_frames(40, 20, SampleMode::Eval, r).unwrap(),
            (0..20).map(|k| 2 * k + 1).collect::<Vec<_>>()
        );
        assert_eq!(
            sample_frames(5, 10, SampleMode::Eval, r).unwrap(),
            vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4]
        );
        assert!(sample_frames(5, 0, SampleMode::Eval, r).is_err());
    }

    #[test]
    fn eval_centers_match_explicit_segments() {
        for n in 1..40 {
            for t in 1..25 {
                let got = sample_frames(n, t, SampleMode::Eval, &mut rng()).unwrap();
                let mut segments: Vec<Vec<usize>> = vec![Vec::new(); t];
                for k in 0..t {
                    for i in 0..n {
                        if i * t >= k * n && i * t < (k + 1) * n {
                            segments[k].push(i);
                        }
                    }
                }
                for (k, seg) in segments.iter().enumerate() {
                    let want = match seg.as_slice() {
                        [] => (k * n / t).min(n - 1),
                        s => (s[0] + s[s.len() - 1]).div_ceil(2),
                    };
                    assert_eq!(got[k], want, "n={n} t={t} k={k}");
                }
                assert!(got.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn train_indices_stay_in_segments() {
        let r = &mut rng();
        for _ in 0..200 {
            let n = r.random_range(1..60);
            let t = r.random_range(1..25);
            let got = sample_frames(n, t, SampleMode::Train, r).unwrap();
            for (k, &i) in got.iter().enumerate() {
                // frame i spans [i, i+1) on the time axis; it must overlap segment k
                assert!(i * t < (k + 1) * n && (i + 1) * t > k * n, "n={n} t={t} k={k} i={i}");
            }
            assert!(got.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(vec![c, h, w], (0..c * h * w).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn views_and_flips() {
        let f = ramp(2, 4, 4);
        let spec = CropSpec { mode: CropMode::Lsta10view };
        let v = eval_multiview(&f, spec, 4).unwrap();
        assert_eq!(v.len(), 10);
        for k in 0..5 {
            assert_eq!(v[k], f);
            assert_eq!(v[5 + k], hflip(&f).unwrap());
        }
        let v = eval_multiview(&f, spec, 2).unwrap();
        assert_eq!(v[0].data()[..4], [0.0, 1.0, 4.0, 5.0]);
        assert_eq!(v[1].data()[..4], [2.0, 3.0, 6.0, 7.0]);
        assert_eq!(v[4].data()[..4], [5.0, 6.0, 9.0, 10.0]);
        assert_eq!(eval_multiview(&f, CropSpec { mode: CropMode::Center }, 3).unwrap().len(), 1);
        assert!(eval_multiview(&f, spec, 5).is_err());
    }

    #[test]
    fn symmetric_input_flip_invariance() {
        let mut r = rng();
        let half = Tensor::uniform(&[1, 6, 3], 1.0, &mut r);
        let mut data = Vec::new();
        for row in 0..6 {
            let s = &half.data()[row * 3..row * 3 + 3];
            data.extend_from_slice(s);
            data.extend(s.iter().rev());
        }
        let f = Tensor::new(vec![1, 6, 6], data).unwrap();
        let views = eval_multiview(&f, CropSpec { mode: CropMode::Lsta10view }, 4).unwrap();
        let mean = |vs: &[Tensor]| {
            let mut acc = vec![0.0; 16];
            for v in vs {
                for (a, x) in acc.iter_mut().zip(v.data()) {
                    *a += x / vs.len() as f64;
                }
            }
            acc
        };
        let all = mean(&views);
        let plain = mean(&views[..5]);
        let flipped_mean = mean(&views[5..]);
        // mirrored crops of a mirror-symmetric frame are the plain crops in swapped order
        for i in 0..16 {
            assert!((flipped_mean[i] - plain[i]).abs() < 1e-12);
            assert!((all[i] - plain[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_and_transform() {
        let f = ramp(1, 4, 4);
        assert_eq!(resize_bilinear(&f, 4, 4).unwrap(), f);
        let up = resize_bilinear(&crop(&f, 0, 0, 2, 2).unwrap(), 4, 4).unwrap();
        assert_eq!(up.data()[0], 0.0);
        assert_eq!(up.data()[15], 5.0);
        let c = Tensor::full(&[2, 5, 5], 3.0);
        assert!(resize_bilinear(&c, 8, 3).unwrap().data().iter().all(|&v| (v - 3.0).abs() < 1e-15));

        let aug = AugmentationConfig::none();
        let t = aug.draw(4, 4, &mut rng());
        assert_eq!(t.apply(&f).unwrap(), f);
        let aug = AugmentationConfig::default();
        aug.validate().unwrap();
        let mut r = rng();
        for _ in 0..50 {
            let t = aug.draw(16, 16, &mut r);
            assert!(t.h >= 13 && t.y + t.h <= 16 && t.x + t.w <= 16);
            assert_eq!(t.apply(&ramp(3, 16, 16)).unwrap().shape(), &[3, 16, 16]);
        }
    }
}
