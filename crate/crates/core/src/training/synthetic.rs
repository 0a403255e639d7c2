//! Synthetic verb/noun videos with planted temporal and spatial signatures.
//!
//! Channel 0 carries the verb: a spatially uniform half-period sinusoid over
//! the video whose phase depends on the verb. The noun is a Gaussian blob in
//! a noun-specific corner whose color (the amplitudes on channels 1 and 2)
//! is a noun-specific point on the unit circle, so it survives spatial
//! pooling and horizontal flips.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{Annotation, LabelSpace, Labels};
use crate::tensor::Tensor;
use crate::tnsf;

/// One labeled clip: `n × C × H × W` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub video: Tensor,
    pub labels: Labels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub verbs: usize,
    pub nouns: usize,
    pub actions: usize,
    /// Frames stored per video.
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The desk-scale task: 6 verbs, 8 nouns, 12 actions, 16×16 RGB-like
    /// frames, 500/200 split, noise 0.5.
    pub fn desk() -> Self {
        Self {
            verbs: 6,
            nouns: 8,
            actions: 12,
            frames: 16,
            channels: 3,
            height: 16,
            width: 16,
            noise_sigma: 0.5,
            n_train: 500,
            n_test: 200,
            seed: 7,
        }
    }
}

/// `V` verbs and `N` nouns with `A` distinct observed pairs. The first pairs
/// are `(i mod V, i mod N)`, which covers every verb and noun once
/// `A ≥ max(V, N)`; further pairs are taken in row-major order.
pub fn desk_label_space(verbs: usize, nouns: usize, actions: usize) -> Result<LabelSpace> {
    if verbs == 0 || nouns == 0 || actions == 0 || actions > verbs * nouns {
        return Err(Error::Invalid(format!(
            "cannot pick {actions} actions from {verbs} verbs × {nouns} nouns"
        )));
    }
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(actions);
    let cycle = (0..verbs * nouns).map(|i| (i % verbs, i % nouns));
    let grid = (0..verbs).flat_map(|v| (0..nouns).map(move |n| (v, n)));
    for p in cycle.chain(grid) {
        if pairs.len() == actions {
            break;
        }
        if !pairs.contains(&p) {
            pairs.push(p);
        }
    }
    let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect();
    let ann: Vec<Annotation> = pairs
        .iter()
        .enumerate()
        .map(|(i, &(v, n))| Annotation {
            segment_id: format!("seed{i}"),
            verb: v,
            noun: n,
        })
        .collect();
    LabelSpace::build(names("verb", verbs), names("noun", nouns), &ann)
}

/// Verb signal on channel 0 at frame `j` of `n`.
pub fn verb_signal(verb: usize, verbs: usize, j: usize, n: usize) -> f64 {
    let progress = if n > 1 { j as f64 / (n - 1) as f64 } else { 0.0 };
    (PI * progress + 2.0 * PI * verb as f64 / verbs as f64).sin()
}

/// Unit-mass-free Gaussian blob of the noun at pixel `(y, x)`.
pub fn noun_blob(noun: usize, y: usize, x: usize, h: usize, w: usize) -> f64 {
    let corner = noun % 4;
    let cy = if corner < 2 { h as f64 / 4.0 } else { 3.0 * h as f64 / 4.0 };
    let cx = if corner.is_multiple_of(2) { w as f64 / 4.0 } else { 3.0 * w as f64 / 4.0 };
    let sigma = h.max(w) as f64 / 6.0;
    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
    (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()
}

pub fn noun_color(noun: usize, nouns: usize) -> (f64, f64) {
    let angle = 2.0 * PI * noun as f64 / nouns as f64;
    (angle.cos(), angle.sin())
}

/// The noise-free `n × C × H × W` video for a pair.
pub fn template(space: &LabelSpace, verb: usize, noun: usize, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let (v_count, n_count) = (space.num_verbs(), space.num_nouns());
    let (c1, c2) = noun_color(noun, n_count);
    let plane = h * w;
    let mut data = vec![0.0; n * c * plane];
    for j in 0..n {
        let base = j * c * plane;
        data[base..base + plane].fill(verb_signal(verb, v_count, j, n));
        for y in 0..h {
            for x in 0..w {
                let b = noun_blob(noun, y, x, h, w);
                data[base + plane + y * w + x] = c1 * b;
                data[base + 2 * plane + y * w + x] = c2 * b;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], data).expect("finite template")
}

/// `n_samples` clips whose pairs are drawn uniformly from the observed
/// actions, plus i.i.d. Gaussian noise.
#[allow(clippy::too_many_arguments)]
pub fn make_synthetic(
    space: &LabelSpace,
    n_samples: usize,
    frames: usize,
    c: usize,
    h: usize,
    w: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<Sample>> {
    if space.num_actions() == 0 {
        return Err(Error::Invalid("make_synthetic: empty label space".into()));
    }
    if c < 3 || frames == 0 || h == 0 || w == 0 {
        return Err(Error::Invalid(format!(
            "make_synthetic: need ≥ 3 channels and nonempty frames, got {frames}×{c}×{h}×{w}"
        )));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::Invalid(format!("noise_sigma {noise_sigma}")));
    }
    let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let action = rng.random_range(0..space.num_actions());
        let (verb, noun) = space.derive_pair(action)?;
        let mut video = template(space, verb, noun, frames, c, h, w);
        if noise_sigma > 0.0 {
            for v in video.data_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        out.push(Sample {
            id: format!("seg{i:05}"),
            video,
            labels: Labels { verb, noun, action },
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub space: LabelSpace,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    id: String,
    verb: usize,
    noun: usize,
    action: usize,
}

impl Dataset {
    /// One generator stream; the first `n_train` samples train, the rest test.
    pub fn generate(spec: &SyntheticSpec) -> Result<Self> {
        let space = desk_label_space(spec.verbs, spec.nouns, spec.actions)?;
        let mut all = make_synthetic(
            &space,
            spec.n_train + spec.n_test,
            spec.frames,
            spec.channels,
            spec.height,
            spec.width,
            spec.noise_sigma,
            spec.seed,
        )?;
        let test = all.split_off(spec.n_train);
        Ok(Self {
            space,
            train: all,
            test,
        })
    }

    /// Writes `label_space.json` and, per split, `<split>.tnsf` (all videos
    /// stacked) with `<split>_labels.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("label_space.json"), self.space.to_json()?)?;
        for (name, split) in [("train", &self.train), ("test", &self.test)] {
            let videos: Vec<Tensor> = split.iter().map(|s| s.video.clone()).collect();
            if !videos.is_empty() {
                tnsf::write_tensor(&dir.join(format!("{name}.tnsf")), &Tensor::stack(&videos)?, tnsf::Dtype::F64)?;
            }
            let rows: Vec<LabelRow> = split
                .iter()
                .map(|s| LabelRow {
                    id: s.id.clone(),
                    verb: s.labels.verb,
                    noun: s.labels.noun,
                    action: s.labels.action,
                })
                .collect();
            fs::write(dir.join(format!("{name}_labels.json")), serde_json::to_string_pretty(&rows)?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let space = LabelSpace::from_json(&fs::read_to_string(dir.join("label_space.json"))?)?;
        let mut splits = Vec::new();
        for name in ["train", "test"] {
            let rows: Vec<LabelRow> = serde_json::from_str(&fs::read_to_string(dir.join(format!("{name}_labels.json")))?)?;
            let mut samples = Vec::with_capacity(rows.len());
            if !rows.is_empty() {
                let all = tnsf::read_tensor(&dir.join(format!("{name}.tnsf")))?;
                if all.rank() != 5 || all.shape()[0] != rows.len() {
                    return Err(Error::schema(
                        format!("{name}.tnsf"),
                        format!("shape {:?} for {} labels", all.shape(), rows.len()),
                    ));
                }
                for (i, r) in rows.into_iter().enumerate() {
                    let labels = space.labels(r.verb, r.noun)?;
                    if labels.action != r.action {
                        return Err(Error::schema(
                            format!("{name}_labels.json[{i}].action"),
                            format!("{} does not match pair ({}, {})", r.action, r.verb, r.noun),
                        ));
                    }
                    samples.push(Sample {
                        id: r.id,
                        video: all.index0(i)?,
                        labels,
                    });
                }
            }
            splits.push(samples);
        }
        let test = splits.pop().expect("two splits");
        let train = splits.pop().expect("two splits");
        Ok(Self { space, train, test })
    }
}
