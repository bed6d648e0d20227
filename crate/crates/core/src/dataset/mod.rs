//! Procedural corpus: concept datasets (object set + cross-object physics
//! set + anchor prompt), the full object × transform grid used by the probe,
//! and the on-disk manifest format.

mod render;

pub use render::{
    apply_physics, components, coverage_mass, dequantize_byte, foreground_count, quantize,
    quantize_byte, rasterize_object, ObjectSpec, PhysicsTransform, Transform, OBJECTS,
};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::ImageLatent;
use crate::error::{Error, Result};
use crate::io;
use crate::text::{PromptTokens, Vocabulary, OBJECT_TOKEN, PHYSICS_TOKEN};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGE_DIR: &str = "images";
pub const DEFAULT_SIZE: usize = 16;
pub const DEFAULT_SEVERITY: f64 = 0.4;
pub const DEFAULT_SEVERITY_JITTER: f64 = 0.2;
pub const DEFAULT_PER_CELL: usize = 40;
/// Cross-object prompts per physics concept.
pub const DEFAULT_CROSS_OBJECTS: usize = 3;
pub const DEFAULT_OBJECT_IMAGES: usize = 4;

/// Caption used when pretraining the base model.
pub fn base_prompt(object: &str) -> String {
    format!("a photo of {object}")
}

pub fn object_prompt(object: &str) -> String {
    format!("a photo of {OBJECT_TOKEN} {object}")
}

pub fn physics_prompt(object: &str) -> String {
    format!("a photo of {PHYSICS_TOKEN} {object}")
}

pub fn anchor_prompt() -> String {
    format!("a photo of {PHYSICS_TOKEN} object")
}

/// Prompt combining both learned concepts.
pub fn composed_prompt(object: &str) -> String {
    format!("a photo of {PHYSICS_TOKEN} {OBJECT_TOKEN} {object}")
}

pub fn check_object(name: &str) -> Result<()> {
    if OBJECTS.contains(&name) {
        Ok(())
    } else {
        Err(Error::UnknownObject(name.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Object,
    Physics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemRecord {
    pub png_path: String,
    pub prompt: String,
    pub role: Role,
    pub object: String,
    pub transform: Option<Transform>,
    pub severity: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptInfo {
    pub object: String,
    pub physics: Transform,
    pub anchor_prompt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub vocabulary: Vocabulary,
    pub objects: Vec<String>,
    pub physics: Vec<Transform>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept: Option<ConceptInfo>,
    pub items: Vec<ItemRecord>,
}

/// A manifest together with its decoded images, index-aligned with
/// `manifest.items`.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: Manifest,
    pub images: Vec<ImageLatent<f32>>,
}

impl Corpus {
    /// Content hash over the manifest and the quantized pixels.
    pub fn hash(&self) -> String {
        let mut bytes = io::to_json(&self.manifest).into_bytes();
        for img in &self.images {
            bytes.extend(img.data().iter().map(|&x| quantize_byte(x)));
        }
        io::sha256_hex(&bytes)
    }
}

/// One image with its prompt and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub record: ItemRecord,
    pub image: ImageLatent<f32>,
}

/// Deterministic per-item seed from the global seed and the item index.
pub fn item_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.next_u64()
}

/// Renders `object` with a small random placement, then applies the
/// transform (if any). Everything is drawn from `seed`; the result is
/// already quantized.
pub fn render_item(
    object: &str,
    transform: Option<Transform>,
    severity: f64,
    seed: u64,
    size: usize,
) -> Result<ImageLatent<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = ObjectSpec::new(object);
    spec.center = (rng.random_range(-0.5..=0.5), rng.random_range(-0.5..=0.5));
    spec.scale = rng.random_range(0.75..=0.85);
    let img = rasterize_object(&spec, size)?;
    let tf_seed = rng.next_u64();
    let img = match transform {
        Some(kind) => apply_physics(
            &img,
            &PhysicsTransform {
                kind,
                severity,
                seed: tf_seed,
            },
        )?,
        None => img,
    };
    Ok(quantize(&img))
}

fn image_name(index: usize, object: &str, transform: Option<Transform>) -> String {
    let t = transform.map_or("clean", Transform::name);
    format!("{IMAGE_DIR}/{index:05}_{object}_{t}.png")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptDataset {
    pub object: String,
    pub physics: Transform,
    pub vocab: Vocabulary,
    pub object_items: Vec<Item>,
    pub physics_items: Vec<Item>,
    pub anchor_prompt: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptOptions {
    pub object_images: usize,
    pub cross_objects: usize,
    pub severity: f64,
    pub size: usize,
}

impl Default for ConceptOptions {
    fn default() -> Self {
        ConceptOptions {
            object_images: DEFAULT_OBJECT_IMAGES,
            cross_objects: DEFAULT_CROSS_OBJECTS,
            severity: DEFAULT_SEVERITY,
            size: DEFAULT_SIZE,
        }
    }
}

impl ConceptOptions {
    fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.object_images) {
            return Err(Error::Config(format!(
                "object_images must be in 2..=5, got {}",
                self.object_images
            )));
        }
        if self.cross_objects == 0 {
            return Err(Error::Config("cross_objects must be >= 1".into()));
        }
        Ok(())
    }
}

fn pick_others<R: Rng + ?Sized>(
    pool: &[&str],
    target: &str,
    d: usize,
    rng: &mut R,
) -> Result<Vec<String>> {
    let mut others: Vec<&str> = pool.iter().copied().filter(|&o| o != target).collect();
    if others.len() < d {
        return Err(Error::InsufficientObjects {
            needed: d,
            have: others.len(),
        });
    }
    others.shuffle(rng);
    Ok(others[..d].iter().map(|s| s.to_string()).collect())
}

/// Renders a fresh concept dataset: `object_images` clean renderings of
/// `target` and one rendering of each of `cross_objects` other objects under
/// `physics`.
pub fn build_concept_dataset(
    target: &str,
    physics: Transform,
    options: ConceptOptions,
    seed: u64,
) -> Result<ConceptDataset> {
    check_object(target)?;
    options.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let others = pick_others(&OBJECTS, target, options.cross_objects, &mut rng)?;
    let base = rng.next_u64();
    let mut index = 0u64;
    let mut next_item = |object: &str, transform: Option<Transform>, role, prompt: String| {
        let s = item_seed(base, index);
        let image = render_item(object, transform, options.severity, s, options.size)?;
        let record = ItemRecord {
            png_path: image_name(index as usize, object, transform),
            prompt,
            role,
            object: object.to_string(),
            transform,
            severity: if transform.is_some() {
                options.severity
            } else {
                0.0
            },
            seed: s,
        };
        index += 1;
        Ok::<_, Error>(Item { record, image })
    };
    let object_items = (0..options.object_images)
        .map(|_| next_item(target, None, Role::Object, object_prompt(target)))
        .collect::<Result<Vec<_>>>()?;
    let physics_items = others
        .iter()
        .map(|o| next_item(o, Some(physics), Role::Physics, physics_prompt(o)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConceptDataset {
        object: target.to_string(),
        physics,
        vocab: Vocabulary::with_objects(&OBJECTS),
        object_items,
        physics_items,
        anchor_prompt: anchor_prompt(),
    })
}

impl ConceptDataset {
    /// Picks a concept dataset out of a grid corpus: the first
    /// `object_images` clean renderings of `target`, and one `physics`
    /// rendering for each of `cross_objects` randomly chosen other objects.
    pub fn from_grid(
        corpus: &Corpus,
        target: &str,
        physics: Transform,
        options: ConceptOptions,
        seed: u64,
    ) -> Result<Self> {
        options.validate()?;
        let m = &corpus.manifest;
        if !m.objects.iter().any(|o| o == target) {
            return Err(Error::UnknownObject(target.to_string()));
        }
        if !m.physics.contains(&physics) {
            return Err(Error::UnknownTransform(physics.name().to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool: Vec<&str> = m.objects.iter().map(String::as_str).collect();
        let others = pick_others(&pool, target, options.cross_objects, &mut rng)?;
        let find =
            |object: &str, transform: Option<Transform>| -> Vec<(&ItemRecord, &ImageLatent<f32>)> {
                m.items
                    .iter()
                    .zip(&corpus.images)
                    .filter(|(r, _)| r.object == object && r.transform == transform)
                    .collect()
            };
        let object_items: Vec<Item> = find(target, None)
            .into_iter()
            .take(options.object_images)
            .map(|(r, img)| Item {
                record: ItemRecord {
                    prompt: object_prompt(target),
                    role: Role::Object,
                    ..r.clone()
                },
                image: img.clone(),
            })
            .collect();
        if object_items.len() < 2 {
            return Err(Error::Empty("clean renderings of the target object"));
        }
        let mut physics_items = Vec::with_capacity(others.len());
        for o in &others {
            let candidates = find(o, Some(physics));
            if candidates.is_empty() {
                return Err(Error::Empty("physics renderings of a cross object"));
            }
            let (r, img) = candidates[rng.random_range(0..candidates.len())];
            physics_items.push(Item {
                record: ItemRecord {
                    prompt: physics_prompt(o),
                    role: Role::Physics,
                    ..r.clone()
                },
                image: img.clone(),
            });
        }
        Ok(ConceptDataset {
            object: target.to_string(),
            physics,
            vocab: m.vocabulary.clone(),
            object_items,
            physics_items,
            anchor_prompt: anchor_prompt(),
        })
    }

    /// Rebuilds a concept dataset from a corpus written by [`Self::to_corpus`].
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        let info = corpus
            .manifest
            .concept
            .as_ref()
            .ok_or(Error::Config("manifest has no concept section".into()))?;
        let mut object_items = Vec::new();
        let mut physics_items = Vec::new();
        for (r, img) in corpus.manifest.items.iter().zip(&corpus.images) {
            let item = Item {
                record: r.clone(),
                image: img.clone(),
            };
            match r.role {
                Role::Object => object_items.push(item),
                Role::Physics => physics_items.push(item),
            }
        }
        let ds = ConceptDataset {
            object: info.object.clone(),
            physics: info.physics,
            vocab: corpus.manifest.vocabulary.clone(),
            object_items,
            physics_items,
            anchor_prompt: info.anchor_prompt.clone(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn to_corpus(&self) -> Corpus {
        let items: Vec<&Item> = self
            .object_items
            .iter()
            .chain(&self.physics_items)
            .collect();
        let mut objects: Vec<String> = vec![self.object.clone()];
        for it in &self.physics_items {
            if !objects.contains(&it.record.object) {
                objects.push(it.record.object.clone());
            }
        }
        Corpus {
            manifest: Manifest {
                vocabulary: self.vocab.clone(),
                objects,
                physics: vec![self.physics],
                concept: Some(ConceptInfo {
                    object: self.object.clone(),
                    physics: self.physics,
                    anchor_prompt: self.anchor_prompt.clone(),
                }),
                items: items.iter().map(|it| it.record.clone()).collect(),
            },
            images: items.iter().map(|it| it.image.clone()).collect(),
        }
    }

    /// Checks the structural invariants: distinct cross objects that exclude
    /// the target, and prompts that tokenize.
    pub fn validate(&self) -> Result<()> {
        if self.object_items.is_empty() {
            return Err(Error::Empty("object items"));
        }
        if self.physics_items.is_empty() {
            return Err(Error::Empty("physics items"));
        }
        let mut seen: Vec<&str> = Vec::new();
        for it in &self.physics_items {
            let o = it.record.object.as_str();
            if o == self.object || seen.contains(&o) {
                return Err(Error::Config(format!(
                    "cross-object set must hold distinct objects other than {}",
                    self.object
                )));
            }
            seen.push(o);
        }
        for it in self.object_items.iter().chain(&self.physics_items) {
            self.vocab.tokenize(&it.record.prompt)?;
        }
        self.vocab.tokenize(&self.anchor_prompt)?;
        Ok(())
    }

    pub fn object_training_items(&self) -> Result<Vec<(ImageLatent<f32>, PromptTokens)>> {
        self.tokenized(&self.object_items)
    }

    pub fn physics_training_items(&self) -> Result<Vec<(ImageLatent<f32>, PromptTokens)>> {
        self.tokenized(&self.physics_items)
    }

    fn tokenized(&self, items: &[Item]) -> Result<Vec<(ImageLatent<f32>, PromptTokens)>> {
        items
            .iter()
            .map(|it| Ok((it.image.clone(), self.vocab.tokenize(&it.record.prompt)?)))
            .collect()
    }

    /// Anchor tokens and the cross-object physics prompt tokens.
    pub fn isometric_prompts(&self) -> Result<(PromptTokens, Vec<PromptTokens>)> {
        let anchor = self.vocab.tokenize(&self.anchor_prompt)?;
        let prompts = self
            .physics_items
            .iter()
            .map(|it| self.vocab.tokenize(&it.record.prompt))
            .collect::<Result<Vec<_>>>()?;
        Ok((anchor, prompts))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridOptions {
    pub objects: usize,
    pub per_cell: usize,
    pub size: usize,
    pub severity: f64,
    pub severity_jitter: f64,
    pub seed: u64,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            objects: OBJECTS.len(),
            per_cell: DEFAULT_PER_CELL,
            size: DEFAULT_SIZE,
            severity: DEFAULT_SEVERITY,
            severity_jitter: DEFAULT_SEVERITY_JITTER,
            seed: 0,
        }
    }
}

/// Every object × {clean, six transforms}, `per_cell` renderings each with
/// jittered severity. Items are rendered in parallel; each one depends only
/// on `(seed, index)`.
pub fn generate_grid(options: GridOptions) -> Result<Corpus> {
    if options.objects == 0 || options.objects > OBJECTS.len() {
        return Err(Error::Config(format!(
            "objects must be in 1..={}, got {}",
            OBJECTS.len(),
            options.objects
        )));
    }
    if options.per_cell == 0 {
        return Err(Error::Config("per_cell must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&options.severity) || !(options.severity_jitter >= 0.0) {
        return Err(Error::Config(
            "severity must be in [0, 1] and jitter >= 0".into(),
        ));
    }
    let objects = &OBJECTS[..options.objects];
    let cells: Vec<(&str, Option<Transform>)> = objects
        .iter()
        .flat_map(|&o| {
            std::iter::once(None)
                .chain(Transform::ALL.into_iter().map(Some))
                .map(move |t| (o, t))
        })
        .collect();
    let jobs: Vec<(usize, &str, Option<Transform>)> = cells
        .iter()
        .flat_map(|&(o, t)| std::iter::repeat_n((o, t), options.per_cell))
        .enumerate()
        .map(|(i, (o, t))| (i, o, t))
        .collect();
    let rendered = jobs
        .par_iter()
        .map(|&(i, object, transform)| {
            let seed = item_seed(options.seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let j = options.severity_jitter;
            let severity = match transform {
                Some(_) => (options.severity + rng.random_range(-j..=j)).clamp(0.0, 1.0),
                None => 0.0,
            };
            let image = render_item(object, transform, severity, seed, options.size)?;
            let prompt = match transform {
                Some(_) => physics_prompt(object),
                None => object_prompt(object),
            };
            let record = ItemRecord {
                png_path: image_name(i, object, transform),
                prompt,
                role: if transform.is_some() {
                    Role::Physics
                } else {
                    Role::Object
                },
                object: object.to_string(),
                transform,
                severity,
                seed,
            };
            Ok((record, image))
        })
        .collect::<Result<Vec<_>>>()?;
    let (items, images) = rendered.into_iter().unzip();
    Ok(Corpus {
        manifest: Manifest {
            vocabulary: Vocabulary::with_objects(&OBJECTS),
            objects: objects.iter().map(|s| s.to_string()).collect(),
            physics: Transform::ALL.to_vec(),
            concept: None,
            items,
        },
        images,
    })
}

/// Clean renderings of the listed objects (all objects when empty),
/// captioned for base-model pretraining.
pub fn pretrain_items<S: AsRef<str>>(
    corpus: &Corpus,
    objects: &[S],
) -> Result<Vec<(ImageLatent<f32>, PromptTokens)>> {
    let vocab = &corpus.manifest.vocabulary;
    let keep = |o: &str| objects.is_empty() || objects.iter().any(|x| x.as_ref() == o);
    let items: Vec<_> = corpus
        .manifest
        .items
        .iter()
        .zip(&corpus.images)
        .filter(|(r, _)| r.transform.is_none() && keep(&r.object))
        .map(|(r, img)| Ok((img.clone(), vocab.tokenize(&base_prompt(&r.object))?)))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Empty("clean pretraining images"));
    }
    Ok(items)
}

/// Writes `images/*.png` and `manifest.json` under `dir`.
pub fn write_manifest(dir: &Path, corpus: &Corpus) -> Result<()> {
    if corpus.images.len() != corpus.manifest.items.len() {
        return Err(Error::LengthMismatch {
            expected: corpus.manifest.items.len(),
            got: corpus.images.len(),
        });
    }
    io::create_dir(&dir.join(IMAGE_DIR))?;
    let encoded = corpus
        .manifest
        .items
        .par_iter()
        .zip(&corpus.images)
        .map(|(r, img)| {
            let path = io::safe_join(dir, &r.png_path)?;
            Ok((path, io::encode_png(img)?))
        })
        .collect::<Result<Vec<_>>>()?;
    for (path, bytes) in encoded {
        io::write_bytes(&path, &bytes)?;
    }
    io::write_json(&dir.join(MANIFEST_FILE), &corpus.manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Corpus> {
    let manifest: Manifest = io::read_json(&dir.join(MANIFEST_FILE))?;
    let images = manifest
        .items
        .par_iter()
        .map(|r| io::read_png(&io::safe_join(dir, &r.png_path)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { manifest, images })
}
