//! Frozen two-head classifier used as the evaluation oracle.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{foreground_count, quantize, Corpus, Transform, OBJECTS};
use crate::denoiser::ImageLatent;
use crate::error::{Error, Result};
use crate::io;
use crate::nn::{self, Bound};
use crate::optim::AdamConfig;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::trainer::Moments;

/// Object classes plus "none".
pub const OBJECT_CLASSES: usize = OBJECTS.len() + 1;
/// Physics classes plus "none" (clean).
pub const PHYSICS_CLASSES: usize = Transform::ALL.len() + 1;
pub const NONE_OBJECT: usize = OBJECTS.len();
pub const NONE_PHYSICS: usize = Transform::ALL.len();
pub const REQUIRED_ACCURACY: f64 = 0.95;

pub fn object_class(name: &str) -> Result<usize> {
    OBJECTS
        .iter()
        .position(|&o| o == name)
        .ok_or_else(|| Error::UnknownObject(name.to_string()))
}

pub fn physics_class(t: Option<Transform>) -> usize {
    t.map_or(NONE_PHYSICS, Transform::index)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Every `holdout_every`-th item of each cell is held out.
    pub holdout_every: usize,
    /// Adds copies of each training image shifted by one pixel.
    pub shift_augment: bool,
    pub required_accuracy: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 128,
            epochs: 60,
            batch: 64,
            lr: 3e-3,
            seed: 0,
            holdout_every: 5,
            shift_augment: true,
            required_accuracy: REQUIRED_ACCURACY,
        }
    }
}

/// Held-out accuracy with a 95% Wilson interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub n: usize,
}

impl Accuracy {
    pub fn new(correct: usize, n: usize) -> Self {
        if n == 0 {
            return Accuracy {
                value: 0.0,
                lower: 0.0,
                upper: 1.0,
                n,
            };
        }
        let z = 1.959_963_984_540_054;
        let nf = n as f64;
        let p = correct as f64 / nf;
        let denom = 1.0 + z * z / nf;
        let center = (p + z * z / (2.0 * nf)) / denom;
        let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
        Accuracy {
            value: p,
            lower: (center - half).max(0.0),
            upper: (center + half).min(1.0),
            n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub object: Accuracy,
    pub physics: Accuracy,
}

/// Class probabilities of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutput {
    pub object: Vec<f64>,
    pub physics: Vec<f64>,
    /// Set when the image has no foreground or the physics head is unsure.
    pub flagged: bool,
}

impl ProbeOutput {
    pub fn object_argmax(&self) -> usize {
        argmax(&self.object)
    }

    pub fn physics_argmax(&self) -> usize {
        argmax(&self.physics)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeClassifier {
    pub params: ParamStore<f32>,
    pub dataset_hash: String,
    pub report: ProbeReport,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeMeta {
    kind: String,
    dataset_hash: String,
    report: ProbeReport,
}

fn forward(g: &Graph<f32>, p: &Bound, x: Var) -> Result<(Var, Var)> {
    let h = g.affine(x, p.get("fc.w")?, p.get("fc.b")?)?;
    let h = g.tanh(h)?;
    let o = g.affine(h, p.get("object.w")?, p.get("object.b")?)?;
    let f = g.affine(h, p.get("physics.w")?, p.get("physics.b")?)?;
    Ok((g.softmax(o)?, g.softmax(f)?))
}

/// Mean negative log-likelihood of `labels` under row-wise probabilities.
fn nll(g: &Graph<f32>, probs: Var, labels: &[usize]) -> Result<Var> {
    let cols = g.shape(probs)[1];
    let idx: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| i * cols + l)
        .collect();
    let picked = g.take(probs, idx.into(), &[labels.len()])?;
    let logp = g.ln(g.add_scalar(picked, 1e-7)?)?;
    g.scale(g.mean(logp)?, -1.0)
}

/// Background-only and noise images labelled "none" for both heads.
pub fn none_images(n: usize, size: usize, seed: u64) -> Vec<ImageLatent<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let img = if i % 3 == 2 {
                Tensor::from_fn(&[size, size], |_| rng.random_range(-1.0f32..=1.0))
            } else {
                let std = rng.random_range(0.0..0.6);
                let normal = Normal::new(0.0, std).expect("valid std");
                Tensor::from_fn(&[size, size], |_| {
                    (-1.0 + normal.sample(&mut rng) as f32).clamp(-1.0, 1.0)
                })
            };
            quantize(&img)
        })
        .collect()
}

struct Example {
    pixels: Vec<f32>,
    object: usize,
    physics: usize,
}

/// Translates a square image, filling with background.
fn shift(pixels: &[f32], size: usize, dr: isize, dc: isize) -> Vec<f32> {
    let n = size as isize;
    let mut out = vec![-1.0; pixels.len()];
    for r in 0..n {
        for c in 0..n {
            let (sr, sc) = (r - dr, c - dc);
            if (0..n).contains(&sr) && (0..n).contains(&sc) {
                out[(r * n + c) as usize] = pixels[(sr * n + sc) as usize];
            }
        }
    }
    out
}

fn stack(examples: &[&Example]) -> Result<Tensor<f32>> {
    let d = examples[0].pixels.len();
    let mut data = Vec::with_capacity(examples.len() * d);
    for e in examples {
        data.extend_from_slice(&e.pixels);
    }
    Tensor::new(vec![examples.len(), d], data)
}

impl ProbeClassifier {
    /// Trains on the grid corpus plus generated "none" images, then measures
    /// held-out accuracy. Refuses to return a probe below the threshold.
    pub fn train(corpus: &Corpus, config: &ProbeConfig) -> Result<Self> {
        let (probe, report) = Self::fit(corpus, config)?;
        for (head, acc) in [("object", report.object), ("physics", report.physics)] {
            if acc.value < config.required_accuracy {
                return Err(Error::ProbeAccuracy {
                    head,
                    accuracy: acc.value,
                    required: config.required_accuracy,
                });
            }
        }
        Ok(probe)
    }

    /// Training without the accuracy gate.
    pub fn fit(corpus: &Corpus, config: &ProbeConfig) -> Result<(Self, ProbeReport)> {
        let size = corpus
            .images
            .first()
            .ok_or(Error::Empty("probe corpus"))?
            .shape()[0];
        let every = config.holdout_every.max(2);
        let mut train = Vec::new();
        let mut held = Vec::new();
        let mut cell_counts = std::collections::HashMap::new();
        for (r, img) in corpus.manifest.items.iter().zip(&corpus.images) {
            let key = (r.object.clone(), r.transform);
            let k = cell_counts.entry(key).or_insert(0usize);
            let e = Example {
                pixels: img.data().to_vec(),
                object: object_class(&r.object)?,
                physics: physics_class(r.transform),
            };
            if *k % every == every - 1 {
                held.push(e);
            } else {
                train.push(e);
            }
            *k += 1;
        }
        if held.is_empty() {
            return Err(Error::Config(format!(
                "probe needs at least {every} images per cell to hold any out"
            )));
        }
        let per_cell = corpus.images.len() / cell_counts.len().max(1);
        for (i, img) in none_images(2 * per_cell, size, config.seed ^ 0x6e6f6e65)
            .into_iter()
            .enumerate()
        {
            let e = Example {
                pixels: img.into_data(),
                object: NONE_OBJECT,
                physics: NONE_PHYSICS,
            };
            if i % every == every - 1 {
                held.push(e);
            } else {
                train.push(e);
            }
        }

        if config.shift_augment {
            let shifted: Vec<Example> = train
                .iter()
                .flat_map(|e| {
                    [(0, 1), (0, -1), (1, 0), (-1, 0)].map(|(dr, dc)| Example {
                        pixels: shift(&e.pixels, size, dr, dc),
                        object: e.object,
                        physics: e.physics,
                    })
                })
                .collect();
            train.extend(shifted);
        }
        let d = size * size;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        params.insert("fc.w", nn::dense(&mut rng, d, config.hidden));
        params.insert("fc.b", Tensor::zeros(&[config.hidden]));
        params.insert(
            "object.w",
            nn::dense(&mut rng, config.hidden, OBJECT_CLASSES),
        );
        params.insert("object.b", Tensor::zeros(&[OBJECT_CLASSES]));
        params.insert(
            "physics.w",
            nn::dense(&mut rng, config.hidden, PHYSICS_CLASSES),
        );
        params.insert("physics.b", Tensor::zeros(&[PHYSICS_CLASSES]));
        let adam = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut groups = vec![params];
        let mut moments = Moments::zeros_like(&groups);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut t = 0;
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch.max(1)) {
                let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
                let g = Graph::new();
                let p = Bound::bind(&g, &groups[0], true);
                let x = g.constant(&stack(&batch)?);
                let (po, pp) = forward(&g, &p, x)?;
                let lo = nll(&g, po, &batch.iter().map(|e| e.object).collect::<Vec<_>>())?;
                let lp = nll(&g, pp, &batch.iter().map(|e| e.physics).collect::<Vec<_>>())?;
                let loss = g.add(lo, lp)?;
                let grads = p.grad_vars(&g, loss)?;
                let flat: Vec<f64> = nn::flat_values(&g, &grads)
                    .iter()
                    .map(|&x| x as f64)
                    .collect();
                t += 1;
                moments.apply(&adam, config.lr, t, &mut groups, &[flat])?;
            }
        }
        let mut probe = ProbeClassifier {
            params: groups.pop().expect("one group"),
            dataset_hash: corpus.hash(),
            report: ProbeReport {
                object: Accuracy::new(0, 0),
                physics: Accuracy::new(0, 0),
            },
        };
        let refs: Vec<&Example> = held.iter().collect();
        let outs = probe.predict_pixels(&stack(&refs)?)?;
        let (mut co, mut cp) = (0, 0);
        for (e, o) in held.iter().zip(&outs) {
            co += usize::from(o.object_argmax() == e.object);
            cp += usize::from(o.physics_argmax() == e.physics);
        }
        probe.report = ProbeReport {
            object: Accuracy::new(co, held.len()),
            physics: Accuracy::new(cp, held.len()),
        };
        let report = probe.report;
        Ok((probe, report))
    }

    fn predict_pixels(&self, x: &Tensor<f32>) -> Result<Vec<ProbeOutput>> {
        let g = Graph::new();
        let p = Bound::bind(&g, &self.params, false);
        let xv = g.constant(x);
        let (po, pp) = forward(&g, &p, xv)?;
        let (vo, vp) = (g.value(po), g.value(pp));
        let n = x.shape()[0];
        let d = x.shape()[1];
        Ok((0..n)
            .map(|i| {
                let object: Vec<f64> = vo[i * OBJECT_CLASSES..(i + 1) * OBJECT_CLASSES]
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                let physics: Vec<f64> = vp[i * PHYSICS_CLASSES..(i + 1) * PHYSICS_CLASSES]
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                let empty = x.data()[i * d..(i + 1) * d].iter().all(|&v| v <= 0.0);
                let unsure = physics.iter().cloned().fold(0.0, f64::max) < 0.5;
                ProbeOutput {
                    object,
                    physics,
                    flagged: empty || unsure,
                }
            })
            .collect())
    }

    pub fn predict(&self, img: &ImageLatent<f32>) -> Result<ProbeOutput> {
        let d = img.numel();
        let x = Tensor::new(vec![1, d], img.data().to_vec())?;
        let mut out = self.predict_pixels(&x)?;
        out[0].flagged |= foreground_count(img) == 0;
        Ok(out.remove(0))
    }

    pub fn predict_batch(&self, imgs: &[ImageLatent<f32>]) -> Result<Vec<ProbeOutput>> {
        if imgs.is_empty() {
            return Ok(vec![]);
        }
        let d = imgs[0].numel();
        let mut data = Vec::with_capacity(imgs.len() * d);
        for im in imgs {
            if im.numel() != d {
                return Err(Error::shape("probe", "images of different sizes"));
            }
            data.extend_from_slice(im.data());
        }
        self.predict_pixels(&Tensor::new(vec![imgs.len(), d], data)?)
    }

    /// Errors unless the probe was trained on a corpus with this hash.
    pub fn check_hash(&self, dataset_hash: &str) -> Result<()> {
        if self.dataset_hash == dataset_hash {
            Ok(())
        } else {
            Err(Error::HashMismatch {
                probe: self.dataset_hash.clone(),
                dataset: dataset_hash.to_string(),
            })
        }
    }

    pub fn to_store(&self) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.merge_prefixed("probe.", &self.params);
        let meta = ProbeMeta {
            kind: "probe".into(),
            dataset_hash: self.dataset_hash.clone(),
            report: self.report,
        };
        s.insert(
            "meta.json",
            checkpoint::bytes_tensor(io::to_json(&meta).as_bytes()),
        );
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_store())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = checkpoint::load(path)?;
        let bytes = checkpoint::tensor_bytes(store.get("meta.json")?)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Config("probe metadata is not UTF-8".into()))?;
        let meta: ProbeMeta = io::parse_json(path, &text)?;
        if meta.kind != "probe" {
            return Err(Error::Config(format!(
                "{} is not a probe file",
                path.display()
            )));
        }
        Ok(ProbeClassifier {
            params: store.subset("probe."),
            dataset_hash: meta.dataset_hash,
            report: meta.report,
        })
    }
}

/// `(Proxy-V, Proxy-V-O)`: the physics-head probability of `physics`, and
/// its product with the object-head probability of `object`.
pub fn proxy_scores(out: &ProbeOutput, object: usize, physics: usize) -> Result<(f64, f64)> {
    let pv = *out.physics.get(physics).ok_or(Error::Config(format!(
        "physics class {physics} out of range"
    )))?;
    let po = *out
        .object
        .get(object)
        .ok_or(Error::Config(format!("object class {object} out of range")))?;
    Ok((pv, pv * po))
}
