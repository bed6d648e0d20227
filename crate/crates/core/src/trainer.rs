//! Base-model pretraining and the single-stage concept training loop.
//!
//! Each concept step computes the object-branch diffusion loss, the
//! physics-branch diffusion loss, the isometric loss on the text encoder and
//! the decoupling loss between the two branch gradients. The decoupling
//! term reaches the branch parameters through one Hessian-vector product per
//! branch. Everything trainable moves under a single AdamW update; the base
//! denoiser stays frozen.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::ConceptDataset;
use crate::denoiser::{AttentionMaps, Denoiser, DenoiserConfig, ImageLatent};
use crate::diffusion::{
    self, make_training_batch, Conditioning, DiffusionSchedule, NoisySample, SamplerConfig,
    SamplingModel, DEFAULT_UNCOND_PROB,
};
use crate::error::{Error, Result};
use crate::io;
use crate::lora::{self, ActiveLoras, Branch, DEFAULT_RANK};
use crate::losses::{self, decouple_grad, DecoupleForm, DecoupleValue, LossReport, LossWeights};
use crate::nn::{self, Bound};
use crate::optim::AdamConfig;
use crate::scalar::Scalar;
use crate::tensor::{cosine_similarity, Graph, ParamStore, Tensor, NORM_EPS};
use crate::text::{PromptTokens, TextEncoder, TextEncoderConfig, Vocabulary};

pub const CSV_HEADER: &str = "step,L_total,L_o,L_p,L_iso,L_dec,cos_raw";
pub const DEFAULT_CHECKPOINT_EVERY: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub rank: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub schedule: DiffusionSchedule,
    pub adam: AdamConfig,
    pub uncond_prob: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 1e-4,
            batch: 4,
            rank: DEFAULT_RANK,
            weights: LossWeights::default(),
            seed: 0,
            schedule: DiffusionSchedule::default(),
            adam: AdamConfig::default(),
            uncond_prob: DEFAULT_UNCOND_PROB,
            checkpoint_every: DEFAULT_CHECKPOINT_EVERY,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch == 0 || self.rank == 0 {
            return Err(Error::Config("batch and rank must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.uncond_prob) {
            return Err(Error::Config("uncond_prob must be in [0, 1]".into()));
        }
        self.weights.validate()?;
        self.adam.validate()
    }
}

/// Per-step generator: depends only on the run seed and the step index, so a
/// resumed run draws the same batches as an uninterrupted one.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Text encoder sized to match a denoiser's conditioning width.
pub fn text_encoder_for(vocab: &Vocabulary, denoiser: &DenoiserConfig) -> TextEncoder {
    TextEncoder::new(TextEncoderConfig {
        vocab_size: vocab.len(),
        dim: denoiser.text_dim,
        mlp_hidden: 2 * denoiser.text_dim,
    })
}

/// Encodes every distinct prompt of `batch` once with frozen text weights.
fn conditioning<T: Scalar>(
    encoder: &TextEncoder,
    text: &ParamStore<T>,
    batches: &[&[NoisySample<T>]],
) -> Result<HashMap<PromptTokens, Tensor<T>>> {
    let mut out = HashMap::new();
    for s in batches.iter().flat_map(|b| b.iter()) {
        if !out.contains_key(&s.tokens) {
            out.insert(s.tokens, encoder.encode(&s.tokens, text)?.values().clone());
        }
    }
    Ok(out)
}

/// First- and second-order quantities of the two diffusion losses.
#[derive(Clone, Debug)]
pub struct BranchPass<T> {
    pub l_o: f64,
    pub l_p: f64,
    /// ∂L_o/∂θ_object, flattened in name order.
    pub g_o: Vec<T>,
    /// ∂L_p/∂θ_physics, flattened in name order.
    pub g_p: Vec<T>,
    /// `None` when not requested or when a gradient norm is degenerate.
    pub decouple: Option<DecoupleStep<T>>,
    pub cos_raw: Option<f64>,
}

/// Gradient of the decoupling loss with respect to each branch.
#[derive(Clone, Debug)]
pub struct DecoupleStep<T> {
    pub value: DecoupleValue,
    pub d_object: Vec<T>,
    pub d_physics: Vec<T>,
}

/// Frozen parts of one concept step.
pub struct BranchModel<'a, T> {
    pub denoiser: &'a Denoiser,
    pub base: &'a ParamStore<T>,
    pub encoder: &'a TextEncoder,
    pub text: &'a ParamStore<T>,
}

impl<T: Scalar> BranchModel<'_, T> {
    fn diffusion_loss(
        &self,
        g: &Graph<T>,
        base: &Bound,
        branch: &Bound,
        batch: &[NoisySample<T>],
        conds: &HashMap<PromptTokens, Tensor<T>>,
    ) -> Result<crate::tensor::Var> {
        let cvars: Vec<_> = batch
            .iter()
            .map(|s| g.constant(&conds[&s.tokens]))
            .collect();
        losses::loss_mse(
            g,
            self.denoiser,
            batch,
            &cvars,
            base,
            &ActiveLoras::new(vec![branch]),
        )
    }

    /// Values of `(L_o, L_p)` only.
    pub fn losses(
        &self,
        object: &ParamStore<T>,
        physics: &ParamStore<T>,
        obj_batch: &[NoisySample<T>],
        phys_batch: &[NoisySample<T>],
    ) -> Result<(f64, f64)> {
        let conds = conditioning(self.encoder, self.text, &[obj_batch, phys_batch])?;
        let g = Graph::new();
        let base = Bound::bind(&g, self.base, false);
        let ob = Bound::bind(&g, object, false);
        let pb = Bound::bind(&g, physics, false);
        let l_o = self.diffusion_loss(&g, &base, &ob, obj_batch, &conds)?;
        let l_p = self.diffusion_loss(&g, &base, &pb, phys_batch, &conds)?;
        Ok((g.item(l_o)?.as_f64(), g.item(l_p)?.as_f64()))
    }

    /// Both diffusion losses, their branch gradients, and, if `form` is
    /// given, the decoupling gradient assembled from closed-form
    /// `∂form/∂g` and one Hessian-vector product per branch.
    pub fn pass(
        &self,
        object: &ParamStore<T>,
        physics: &ParamStore<T>,
        obj_batch: &[NoisySample<T>],
        phys_batch: &[NoisySample<T>],
        form: Option<DecoupleForm>,
    ) -> Result<BranchPass<T>> {
        let conds = conditioning(self.encoder, self.text, &[obj_batch, phys_batch])?;
        let g = Graph::new();
        let base = Bound::bind(&g, self.base, false);
        let ob = Bound::bind(&g, object, true);
        let pb = Bound::bind(&g, physics, true);
        let l_o = self.diffusion_loss(&g, &base, &ob, obj_batch, &conds)?;
        let l_p = self.diffusion_loss(&g, &base, &pb, phys_batch, &conds)?;
        let (ov, pv) = (ob.vars(), pb.vars());
        let gv_o = g.grad(l_o, &ov)?;
        let gv_p = g.grad(l_p, &pv)?;
        let g_o = nn::flat_values(&g, &gv_o);
        let g_p = nn::flat_values(&g, &gv_p);
        let cos_raw = cosine_similarity(&g_o, &g_p).ok();
        let decouple = match (form, cos_raw) {
            (Some(form), Some(_)) => {
                let dg = decouple_grad(&g_o, &g_p, form)?;
                let cast = |v: &[f64]| v.iter().map(|&x| T::of(x)).collect::<Vec<T>>();
                let inner_o = g.inner_with_constant(&gv_o, &cast(&dg.d_object))?;
                let inner_p = g.inner_with_constant(&gv_p, &cast(&dg.d_physics))?;
                let hv_o = g.grad(inner_o, &ov)?;
                let hv_p = g.grad(inner_p, &pv)?;
                Some(DecoupleStep {
                    value: dg.value,
                    d_object: nn::flat_values(&g, &hv_o),
                    d_physics: nn::flat_values(&g, &hv_p),
                })
            }
            _ => None,
        };
        Ok(BranchPass {
            l_o: g.item(l_o)?.as_f64(),
            l_p: g.item(l_p)?.as_f64(),
            g_o,
            g_p,
            decouple,
            cos_raw,
        })
    }
}

/// Isometric loss value and its gradient over the text parameters,
/// flattened in name order.
pub fn isometric_pass<T: Scalar>(
    encoder: &TextEncoder,
    text: &ParamStore<T>,
    anchor: &PromptTokens,
    prompts: &[PromptTokens],
) -> Result<(f64, Vec<T>)> {
    let g = Graph::new();
    let tb = Bound::bind(&g, text, true);
    let a = encoder.encode_var(&g, anchor, &tb)?;
    let ps = prompts
        .iter()
        .map(|p| encoder.encode_var(&g, p, &tb))
        .collect::<Result<Vec<_>>>()?;
    let l = losses::loss_isometric(&g, a, &ps)?;
    let grads = tb.grad_vars(&g, l)?;
    Ok((g.item(l)?.as_f64(), nn::flat_values(&g, &grads)))
}

/// Frozen denoiser weights plus the text encoder they were trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    pub denoiser: DenoiserConfig,
    pub vocab: Vocabulary,
    pub base: ParamStore<f32>,
    pub text: ParamStore<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaseMeta {
    kind: String,
    denoiser: DenoiserConfig,
    vocabulary: Vocabulary,
}

impl BaseModel {
    /// Freshly initialized weights; the output head starts at zero.
    pub fn init(denoiser: DenoiserConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        denoiser.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Denoiser::new(denoiser)?;
        let base = d.init(&mut rng);
        let text = text_encoder_for(&vocab, &denoiser).init(&mut rng);
        Ok(BaseModel {
            denoiser,
            vocab,
            base,
            text,
        })
    }

    pub fn to_store(&self) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.merge_prefixed("base.", &self.base);
        s.merge_prefixed("text.", &self.text);
        let meta = BaseMeta {
            kind: "base".into(),
            denoiser: self.denoiser,
            vocabulary: self.vocab.clone(),
        };
        s.insert(
            "meta.json",
            checkpoint::bytes_tensor(io::to_json(&meta).as_bytes()),
        );
        s
    }

    pub fn from_store(store: &ParamStore<f32>) -> Result<Self> {
        let meta: BaseMeta = meta_json(store)?;
        Ok(BaseModel {
            denoiser: meta.denoiser,
            vocab: meta.vocabulary,
            base: store.subset("base."),
            text: store.subset("text."),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_store())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = checkpoint::load(path)?;
        if store.contains("meta.step") {
            return Ok(TrainState::from_store(&store)?.base_model());
        }
        Self::from_store(&store)
    }
}

/// Samples `prompt` once per seed from frozen weights plus the given
/// LoRA branches.
#[allow(clippy::too_many_arguments)]
pub fn sample_prompt(
    denoiser: DenoiserConfig,
    vocab: &Vocabulary,
    base: &ParamStore<f32>,
    loras: Vec<&ParamStore<f32>>,
    text: &ParamStore<f32>,
    schedule: &DiffusionSchedule,
    prompt: &str,
    sampler: SamplerConfig,
    seeds: &[u64],
) -> Result<Vec<ImageLatent<f32>>> {
    let d = Denoiser::new(denoiser)?;
    let encoder = text_encoder_for(vocab, &denoiser);
    let tokens = vocab.tokenize(prompt)?;
    let empty = PromptTokens::empty();
    let cond = encoder.encode(&tokens, text)?;
    let uncond = encoder.encode(&empty, text)?;
    let model = SamplingModel {
        denoiser: &d,
        base,
        loras,
        schedule,
    };
    let c = Conditioning {
        tokens: &tokens,
        cond: &cond,
        uncond: &uncond,
    };
    diffusion::sample(&model, &c, sampler, seeds)
}

impl BaseModel {
    pub fn sample(
        &self,
        prompt: &str,
        schedule: &DiffusionSchedule,
        sampler: SamplerConfig,
        seeds: &[u64],
    ) -> Result<Vec<ImageLatent<f32>>> {
        sample_prompt(
            self.denoiser,
            &self.vocab,
            &self.base,
            vec![],
            &self.text,
            schedule,
            prompt,
            sampler,
            seeds,
        )
    }
}

fn meta_json<M: serde::de::DeserializeOwned>(store: &ParamStore<f32>) -> Result<M> {
    let bytes = checkpoint::tensor_bytes(store.get("meta.json")?)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Config("checkpoint metadata is not UTF-8".into()))?;
    io::parse_json(Path::new("meta.json"), &text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub denoiser: DenoiserConfig,
    pub schedule: DiffusionSchedule,
    pub adam: AdamConfig,
    pub uncond_prob: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            lr: 4e-3,
            batch: 16,
            seed: 0,
            denoiser: DenoiserConfig::default(),
            schedule: DiffusionSchedule::default(),
            adam: AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            uncond_prob: DEFAULT_UNCOND_PROB,
        }
    }
}

/// Trains the whole denoiser and text encoder on captioned images.
/// `log` receives `(step, loss)` after every update.
pub fn pretrain(
    config: &PretrainConfig,
    vocab: &Vocabulary,
    items: &[(ImageLatent<f32>, PromptTokens)],
    mut log: impl FnMut(usize, f64),
) -> Result<BaseModel> {
    config.adam.validate()?;
    if config.steps == 0 || config.batch == 0 || !(config.lr > 0.0) {
        return Err(Error::Config(
            "pretrain needs steps, batch and lr > 0".into(),
        ));
    }
    let mut model = BaseModel::init(config.denoiser, vocab.clone(), config.seed)?;
    let denoiser = Denoiser::new(config.denoiser)?;
    let encoder = text_encoder_for(vocab, &config.denoiser);
    let mut groups = vec![model.base.clone(), model.text.clone()];
    let mut moments = Moments::zeros_like(&groups);
    for step in 0..config.steps {
        let mut rng = step_rng(config.seed ^ 0x7072_6574, step);
        let batch = make_training_batch(
            items,
            config.batch,
            &config.schedule,
            config.uncond_prob,
            &mut rng,
        )?;
        let g = Graph::new();
        let base = Bound::bind(&g, &groups[0], true);
        let text = Bound::bind(&g, &groups[1], true);
        let mut cache: HashMap<PromptTokens, crate::tensor::Var> = HashMap::new();
        let mut conds = Vec::with_capacity(batch.len());
        for s in &batch {
            let v = match cache.get(&s.tokens) {
                Some(&v) => v,
                None => {
                    let v = encoder.encode_var(&g, &s.tokens, &text)?;
                    cache.insert(s.tokens, v);
                    v
                }
            };
            conds.push(v);
        }
        let loss = losses::loss_mse(&g, &denoiser, &batch, &conds, &base, &ActiveLoras::none())?;
        let value = g.item(loss)?.as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: "L_mse",
                step,
            });
        }
        let gb = base.grad_vars(&g, loss)?;
        let gt = text.grad_vars(&g, loss)?;
        let grads = [
            to_f64(&nn::flat_values(&g, &gb)),
            to_f64(&nn::flat_values(&g, &gt)),
        ];
        moments.apply(&config.adam, config.lr, step + 1, &mut groups, &grads)?;
        log(step, value);
    }
    model.text = groups.pop().expect("text group");
    model.base = groups.pop().expect("base group");
    Ok(model)
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// AdamW first and second moments, one store per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<ParamStore<f32>>,
    pub v: Vec<ParamStore<f32>>,
}

impl Moments {
    pub fn zeros_like(groups: &[ParamStore<f32>]) -> Self {
        let zeros = |s: &ParamStore<f32>| {
            s.iter()
                .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape())))
                .collect::<ParamStore<f32>>()
        };
        Moments {
            m: groups.iter().map(zeros).collect(),
            v: groups.iter().map(zeros).collect(),
        }
    }

    /// Applies one AdamW step to every tensor of every group; `grads[i]` is
    /// group `i`'s gradient flattened in name order.
    pub fn apply(
        &mut self,
        adam: &AdamConfig,
        lr: f64,
        t: usize,
        groups: &mut [ParamStore<f32>],
        grads: &[Vec<f64>],
    ) -> Result<()> {
        for (gi, group) in groups.iter_mut().enumerate() {
            let grad = &grads[gi];
            if grad.len() != group.numel() {
                return Err(Error::LengthMismatch {
                    expected: group.numel(),
                    got: grad.len(),
                });
            }
            let mut offset = 0;
            for (name, p) in group.iter_mut() {
                let n = p.numel();
                let m = self.m[gi].get_mut(name)?;
                let v = self.v[gi].get_mut(name)?;
                adam.update(lr, t, p, &grad[offset..offset + n], m, v)?;
                offset += n;
            }
        }
        Ok(())
    }
}

const GROUPS: [&str; 3] = ["object", "physics", "text"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    kind: String,
    config: TrainConfig,
    denoiser: DenoiserConfig,
    vocabulary: Vocabulary,
    object: String,
    physics: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data_hash: Option<String>,
}

/// Everything needed to continue or sample from a concept run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub denoiser: DenoiserConfig,
    pub vocab: Vocabulary,
    pub object_name: String,
    pub physics_name: String,
    /// Hash of the grid corpus the concept data was drawn from.
    pub data_hash: Option<String>,
    pub step: usize,
    pub base: ParamStore<f32>,
    /// `[object LoRA, physics LoRA, text encoder]`.
    pub groups: Vec<ParamStore<f32>>,
    pub moments: Moments,
}

impl TrainState {
    pub fn new(config: TrainConfig, base: &BaseModel, object: &str, physics: &str) -> Result<Self> {
        config.validate()?;
        let denoiser = Denoiser::new(base.denoiser)?;
        let hosts = denoiser.lora_hosts();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (_, obj) = lora::attach(&base.base, &hosts, config.rank, Branch::Object, &mut rng)?;
        let (_, phys) = lora::attach(&base.base, &hosts, config.rank, Branch::Physics, &mut rng)?;
        let groups = vec![obj, phys, base.text.clone()];
        Ok(TrainState {
            moments: Moments::zeros_like(&groups),
            config,
            denoiser: base.denoiser,
            vocab: base.vocab.clone(),
            object_name: object.to_string(),
            physics_name: physics.to_string(),
            data_hash: None,
            step: 0,
            base: base.base.clone(),
            groups,
        })
    }

    pub fn object(&self) -> &ParamStore<f32> {
        &self.groups[0]
    }

    pub fn physics(&self) -> &ParamStore<f32> {
        &self.groups[1]
    }

    pub fn text(&self) -> &ParamStore<f32> {
        &self.groups[2]
    }

    pub fn base_model(&self) -> BaseModel {
        BaseModel {
            denoiser: self.denoiser,
            vocab: self.vocab.clone(),
            base: self.base.clone(),
            text: self.text().clone(),
        }
    }

    pub fn to_store(&self) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.merge_prefixed("base.", &self.base);
        for (i, name) in GROUPS.iter().enumerate() {
            s.merge_prefixed(&format!("{name}."), &self.groups[i]);
            s.merge_prefixed(&format!("adam.m.{name}."), &self.moments.m[i]);
            s.merge_prefixed(&format!("adam.v.{name}."), &self.moments.v[i]);
        }
        s.insert("meta.step", Tensor::scalar(self.step as f32));
        let meta = StateMeta {
            kind: "concept".into(),
            config: self.config.clone(),
            denoiser: self.denoiser,
            vocabulary: self.vocab.clone(),
            object: self.object_name.clone(),
            physics: self.physics_name.clone(),
            data_hash: self.data_hash.clone(),
        };
        s.insert(
            "meta.json",
            checkpoint::bytes_tensor(io::to_json(&meta).as_bytes()),
        );
        s
    }

    pub fn from_store(store: &ParamStore<f32>) -> Result<Self> {
        let meta: StateMeta = meta_json(store)?;
        let step = store.get("meta.step")?.item()? as usize;
        let pick = |p: &str| {
            GROUPS
                .iter()
                .map(|g| store.subset(&format!("{p}{g}.")))
                .collect()
        };
        Ok(TrainState {
            config: meta.config,
            denoiser: meta.denoiser,
            vocab: meta.vocabulary,
            object_name: meta.object,
            physics_name: meta.physics,
            data_hash: meta.data_hash,
            step,
            base: store.subset("base."),
            groups: pick(""),
            moments: Moments {
                m: pick("adam.m."),
                v: pick("adam.v."),
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_store())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(&checkpoint::load(path)?)
    }

    /// Cross-attention of `prompt` over `z_t` with both branches active.
    pub fn attention_maps(
        &self,
        prompt: &str,
        z_t: &ImageLatent<f32>,
        t: usize,
    ) -> Result<AttentionMaps<f32>> {
        let d = Denoiser::new(self.denoiser)?;
        let tokens = self.vocab.tokenize(prompt)?;
        let cond = text_encoder_for(&self.vocab, &self.denoiser).encode(&tokens, self.text())?;
        d.export_attention_maps(
            z_t,
            t,
            &cond,
            &tokens,
            &self.base,
            &[self.object(), self.physics()],
        )
    }

    /// Samples with both branches and the tuned text encoder active.
    pub fn sample(
        &self,
        prompt: &str,
        sampler: SamplerConfig,
        seeds: &[u64],
    ) -> Result<Vec<ImageLatent<f32>>> {
        sample_prompt(
            self.denoiser,
            &self.vocab,
            &self.base,
            vec![self.object(), self.physics()],
            self.text(),
            &self.config.schedule,
            prompt,
            sampler,
            seeds,
        )
    }

    /// One concept step. Batches are drawn from the step's own generator.
    pub fn train_step(&mut self, data: &ConceptData) -> Result<LossReport> {
        let step = self.step;
        let cfg = &self.config;
        let mut rng = step_rng(cfg.seed, step);
        let obj_batch = make_training_batch(
            &data.object,
            cfg.batch,
            &cfg.schedule,
            cfg.uncond_prob,
            &mut rng,
        )?;
        let phys_batch = make_training_batch(
            &data.physics,
            cfg.batch,
            &cfg.schedule,
            cfg.uncond_prob,
            &mut rng,
        )?;
        let denoiser = Denoiser::new(self.denoiser)?;
        let encoder = text_encoder_for(&self.vocab, &self.denoiser);
        let model = BranchModel {
            denoiser: &denoiser,
            base: &self.base,
            encoder: &encoder,
            text: self.text(),
        };
        let w = cfg.weights;
        let form = (w.lambda_dec > 0.0).then_some(w.decouple_form);
        let pass = model.pass(self.object(), self.physics(), &obj_batch, &phys_batch, form)?;
        let (l_iso, g_iso) = isometric_pass(&encoder, self.text(), &data.anchor, &data.cross)?;

        for (term, v) in [("L_o", pass.l_o), ("L_p", pass.l_p), ("L_iso", l_iso)] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { term, step });
            }
        }
        let mut g_obj = to_f64(&pass.g_o);
        let mut g_phys = to_f64(&pass.g_p);
        let g_text: Vec<f64> = g_iso.iter().map(|x| w.lambda_iso * x.as_f64()).collect();
        let cos_raw = pass.cos_raw.unwrap_or(f64::NAN);
        let l_dec = match (&pass.decouple, form) {
            (Some(d), _) => {
                for (g, h) in g_obj.iter_mut().zip(&d.d_object) {
                    *g += w.lambda_dec * h.as_f64();
                }
                for (g, h) in g_phys.iter_mut().zip(&d.d_physics) {
                    *g += w.lambda_dec * h.as_f64();
                }
                d.value.value
            }
            (None, Some(_)) => {
                log::warn!(
                    "step {step}: branch gradient norm below {NORM_EPS:e}, decouple term skipped"
                );
                0.0
            }
            (None, None) => pass.cos_raw.map_or(0.0, |c| w.decouple_form.apply(c)),
        };
        if !l_dec.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: "L_dec",
                step,
            });
        }
        let total =
            losses::total_objective(pass.l_o, pass.l_p, l_iso, l_dec, &w).map_err(|_| {
                Error::NonFiniteLoss {
                    term: "L_total",
                    step,
                }
            })?;

        self.moments.apply(
            &cfg.adam,
            cfg.lr,
            step + 1,
            &mut self.groups,
            &[g_obj, g_phys, g_text],
        )?;
        self.step += 1;
        Ok(LossReport {
            l_o: pass.l_o,
            l_p: pass.l_p,
            l_iso,
            l_dec,
            cos_raw,
            total,
        })
    }
}

/// Tokenized training material of a concept dataset.
#[derive(Clone, Debug)]
pub struct ConceptData {
    pub object: Vec<(ImageLatent<f32>, PromptTokens)>,
    pub physics: Vec<(ImageLatent<f32>, PromptTokens)>,
    pub anchor: PromptTokens,
    pub cross: Vec<PromptTokens>,
}

impl ConceptData {
    pub fn new(ds: &ConceptDataset) -> Result<Self> {
        ds.validate()?;
        let (anchor, cross) = ds.isometric_prompts()?;
        Ok(ConceptData {
            object: ds.object_training_items()?,
            physics: ds.physics_training_items()?,
            anchor,
            cross,
        })
    }
}

pub fn csv_row(step: usize, r: &LossReport) -> String {
    format!(
        "{step},{},{},{},{},{},{}\n",
        r.total, r.l_o, r.l_p, r.l_iso, r.l_dec, r.cos_raw
    )
}

/// Where a run writes its outputs.
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub checkpoint: PathBuf,
    pub csv: PathBuf,
}

impl RunOutputs {
    /// `<dir>/final.phyc` and `<dir>/loss.csv`.
    pub fn in_dir(dir: &Path) -> Self {
        RunOutputs {
            checkpoint: dir.join("final.phyc"),
            csv: dir.join("loss.csv"),
        }
    }

    pub fn intermediate(&self, step: usize) -> PathBuf {
        let stem = self
            .checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "ckpt".into());
        self.checkpoint
            .with_file_name(format!("{stem}.step{step:05}.phyc"))
    }
}

/// Trains from the current step up to `until` (capped at the configured
/// step count), appending to the loss CSV and writing periodic
/// checkpoints. The final checkpoint is written when the configured step
/// count is reached. Returns the reports of the steps taken.
pub fn train_until(
    state: &mut TrainState,
    data: &ConceptData,
    until: usize,
    out: Option<&RunOutputs>,
) -> Result<Vec<LossReport>> {
    let until = until.min(state.config.steps);
    let mut csv = String::new();
    if let Some(o) = out {
        csv = if state.step == 0 {
            format!("{CSV_HEADER}\n")
        } else {
            let existing = io::read_text(&o.csv).unwrap_or_default();
            existing
                .split_inclusive('\n')
                .take(state.step + 1)
                .collect()
        };
    }
    let mut reports = Vec::with_capacity(until.saturating_sub(state.step));
    while state.step < until {
        let r = state.train_step(data)?;
        let _ = write!(csv, "{}", csv_row(state.step, &r));
        reports.push(r);
        if let Some(o) = out {
            let every = state.config.checkpoint_every;
            if every > 0 && state.step % every == 0 && state.step < state.config.steps {
                state.save(&o.intermediate(state.step))?;
                io::write_bytes(&o.csv, csv.as_bytes())?;
            }
        }
    }
    if let Some(o) = out {
        io::write_bytes(&o.csv, csv.as_bytes())?;
        state.save(&o.checkpoint)?;
    }
    Ok(reports)
}

/// Full run: fresh LoRA branches on `base`, `config.steps` updates.
pub fn run_training(
    config: &TrainConfig,
    base: &BaseModel,
    dataset: &ConceptDataset,
    out: Option<&RunOutputs>,
) -> Result<(TrainState, Vec<LossReport>)> {
    let mut state = TrainState::new(
        config.clone(),
        base,
        &dataset.object,
        dataset.physics.name(),
    )?;
    let data = ConceptData::new(dataset)?;
    let reports = train_until(&mut state, &data, config.steps, out)?;
    Ok((state, reports))
}
