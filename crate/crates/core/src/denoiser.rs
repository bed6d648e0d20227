//! Patch-transformer noise predictor conditioned on text through
//! cross-attention. LoRA branches adapt the cross-attention projections and
//! the MLP layers of every block.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::ActiveLoras;
use crate::nn::{self, Bound};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::text::{PromptTokens, TextEmbedding, MAX_LEN, TEXT_DIM};

/// Pixel-space image, `[H, W]`.
pub type ImageLatent<T> = Tensor<T>;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub mlp_hidden: usize,
    pub text_dim: usize,
    /// Number of diffusion timesteps the time embedding accepts.
    pub timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 16,
            patch_size: 4,
            d_model: 64,
            n_blocks: 2,
            mlp_hidden: 128,
            text_dim: TEXT_DIM,
            timesteps: 200,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }
}

/// One item of a denoising batch. `cond` is a `[MAX_LEN, text_dim]` node.
#[derive(Clone, Copy, Debug)]
pub struct DenoiseInput<'a, T> {
    pub z_t: &'a [T],
    pub t: usize,
    pub cond: Var,
    pub tokens: &'a PromptTokens,
}

/// Cross-attention weights of one forward pass, `[block][item]`, each
/// `[image tokens, MAX_LEN]`.
pub type AttentionRecord<T> = Vec<Vec<Tensor<T>>>;

#[derive(Clone, Copy, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
}

/// Fixed sinusoidal embedding of a timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[i + half] = (t as f64 * freq).cos();
    }
    out
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        Ok(Denoiser { config })
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<T> {
        let c = self.config;
        let (d, h) = (c.d_model, c.mlp_hidden);
        let mut p = ParamStore::new();
        p.insert("patch_in.w", nn::dense(rng, c.patch_dim(), d));
        p.insert("patch_in.b", Tensor::zeros(&[d]));
        p.insert("pos", nn::normal(rng, &[c.tokens(), d], 0.1));
        p.insert("time.fc1.w", nn::dense(rng, d, d));
        p.insert("time.fc1.b", Tensor::zeros(&[d]));
        p.insert("time.fc2.w", nn::dense(rng, d, d));
        p.insert("time.fc2.b", Tensor::zeros(&[d]));
        for i in 0..c.n_blocks {
            let pre = format!("blocks.{i}");
            for ln in ["ln1", "ln2", "ln3"] {
                p.insert(format!("{pre}.{ln}.g"), Tensor::full(&[d], T::one()));
                p.insert(format!("{pre}.{ln}.b"), Tensor::zeros(&[d]));
            }
            for proj in ["q", "k", "v", "o"] {
                p.insert(format!("{pre}.self.{proj}.w"), nn::dense(rng, d, d));
            }
            p.insert(format!("{pre}.cross.q.w"), nn::dense(rng, d, d));
            p.insert(format!("{pre}.cross.k.w"), nn::dense(rng, c.text_dim, d));
            p.insert(format!("{pre}.cross.v.w"), nn::dense(rng, c.text_dim, d));
            p.insert(format!("{pre}.cross.o.w"), nn::dense(rng, d, d));
            p.insert(format!("{pre}.mlp.fc1.w"), nn::dense(rng, d, h));
            p.insert(format!("{pre}.mlp.fc1.b"), Tensor::zeros(&[h]));
            p.insert(format!("{pre}.mlp.fc2.w"), nn::dense(rng, h, d));
            p.insert(format!("{pre}.mlp.fc2.b"), Tensor::zeros(&[d]));
        }
        p.insert("ln_out.g", Tensor::full(&[d], T::one()));
        p.insert("ln_out.b", Tensor::zeros(&[d]));
        p.insert("head.w", Tensor::zeros(&[d, c.patch_dim()]));
        p.insert("head.b", Tensor::zeros(&[c.patch_dim()]));
        p
    }

    /// Weights adapted by LoRA: the four cross-attention projections and
    /// both MLP layers of every block.
    pub fn lora_hosts(&self) -> Vec<String> {
        let mut hosts = Vec::new();
        for i in 0..self.config.n_blocks {
            for proj in ["q", "k", "v", "o"] {
                hosts.push(format!("blocks.{i}.cross.{proj}.w"));
            }
            hosts.push(format!("blocks.{i}.mlp.fc1.w"));
            hosts.push(format!("blocks.{i}.mlp.fc2.w"));
        }
        hosts
    }

    /// True when the output head is all zeros, i.e. the model predicts zero
    /// noise for every input.
    pub fn is_untrained<T: Scalar>(&self, base: &ParamStore<T>) -> bool {
        ["head.w", "head.b"].iter().all(|n| {
            base.get(n)
                .map(|t| t.data().iter().all(|&x| x == T::zero()))
                .unwrap_or(true)
        })
    }

    /// Patch-major token layout: row = patch index, column = pixel in patch.
    fn patch_index(&self) -> Vec<usize> {
        let c = self.config;
        let (s, ps, grid) = (c.image_size, c.patch_size, c.grid());
        let mut idx = Vec::with_capacity(c.pixels());
        for py in 0..grid {
            for px in 0..grid {
                for dy in 0..ps {
                    for dx in 0..ps {
                        idx.push((py * ps + dy) * s + px * ps + dx);
                    }
                }
            }
        }
        idx
    }

    fn layer_norm<T: Scalar>(&self, g: &Graph<T>, x: Var, p: &Bound, name: &str) -> Result<Var> {
        let y = g.layer_norm(x, LN_EPS)?;
        let y = g.mul_bcast(y, p.get(&format!("{name}.g"))?)?;
        g.add_bcast(y, p.get(&format!("{name}.b"))?)
    }

    /// Predicted noise for a batch, `[batch, H·W]` in row-major pixel order.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        batch: &[DenoiseInput<'_, T>],
        base: &Bound,
        loras: &ActiveLoras<'_>,
        mut record: Option<&mut AttentionRecord<T>>,
    ) -> Result<Var> {
        let c = self.config;
        let (n_items, n_tok, pdim, d) = (batch.len(), c.tokens(), c.patch_dim(), c.d_model);
        if n_items == 0 {
            return Err(Error::Empty("denoiser batch"));
        }
        let pidx = self.patch_index();
        let mut patches = Vec::with_capacity(n_items * c.pixels());
        let mut temb = Vec::with_capacity(n_items * d);
        for item in batch {
            if item.z_t.len() != c.pixels() {
                return Err(Error::shape(
                    "predict_noise",
                    format!("expected {} pixels, got {}", c.pixels(), item.z_t.len()),
                ));
            }
            if item.t >= c.timesteps {
                return Err(Error::TimestepOutOfRange {
                    t: item.t,
                    steps: c.timesteps,
                });
            }
            let cs = g.shape(item.cond);
            if cs[..] != [MAX_LEN, c.text_dim] {
                return Err(Error::shape(
                    "predict_noise",
                    format!("condition {cs:?}, expected [{MAX_LEN}, {}]", c.text_dim),
                ));
            }
            patches.extend(pidx.iter().map(|&i| item.z_t[i]));
            temb.extend(timestep_embedding(item.t, d).into_iter().map(T::of));
        }
        let rows = n_items * n_tok;
        let x = g.constant(&Tensor::new(vec![rows, pdim], patches)?);
        let mut h = g.affine(x, base.get("patch_in.w")?, base.get("patch_in.b")?)?;

        let pos_idx: Rc<[usize]> = (0..rows * d).map(|i| (i / d % n_tok) * d + i % d).collect();
        let pos = g.take(base.get("pos")?, pos_idx, &[rows, d])?;
        h = g.add(h, pos)?;

        let te = g.constant(&Tensor::new(vec![n_items, d], temb)?);
        let te = g.affine(te, base.get("time.fc1.w")?, base.get("time.fc1.b")?)?;
        let te = g.silu(te)?;
        let te = g.affine(te, base.get("time.fc2.w")?, base.get("time.fc2.b")?)?;
        let rep_idx: Rc<[usize]> = (0..rows * d).map(|i| (i / d / n_tok) * d + i % d).collect();
        let te = g.take(te, rep_idx, &[rows, d])?;
        h = g.add(h, te)?;

        let conds: Vec<Var> = batch.iter().map(|b| b.cond).collect();
        let text = g.concat(&conds)?;
        let masks: Vec<Var> = batch
            .iter()
            .map(|b| g.constant(&nn::key_mask(n_tok, &b.tokens.pad_mask())))
            .collect();

        for blk in 0..c.n_blocks {
            let pre = format!("blocks.{blk}");

            let a = self.layer_norm(g, h, base, &format!("{pre}.ln1"))?;
            let q = g.matmul(a, base.get(&format!("{pre}.self.q.w"))?)?;
            let k = g.matmul(a, base.get(&format!("{pre}.self.k.w"))?)?;
            let v = g.matmul(a, base.get(&format!("{pre}.self.v.w"))?)?;
            let mut outs = Vec::with_capacity(n_items);
            for b in 0..n_items {
                let (r0, r1) = (b * n_tok, (b + 1) * n_tok);
                let (o, _) = nn::attention(
                    g,
                    g.slice_rows(q, r0, r1)?,
                    g.slice_rows(k, r0, r1)?,
                    g.slice_rows(v, r0, r1)?,
                    None,
                )?;
                outs.push(o);
            }
            let o = g.concat(&outs)?;
            let o = g.matmul(o, base.get(&format!("{pre}.self.o.w"))?)?;
            h = g.add(h, o)?;

            let a = self.layer_norm(g, h, base, &format!("{pre}.ln2"))?;
            let host = |p: &str| format!("{pre}.cross.{p}.w");
            let q = loras.project(g, a, base.get(&host("q"))?, &host("q"))?;
            let k = loras.project(g, text, base.get(&host("k"))?, &host("k"))?;
            let v = loras.project(g, text, base.get(&host("v"))?, &host("v"))?;
            let mut outs = Vec::with_capacity(n_items);
            let mut weights = Vec::new();
            for (b, &mask) in masks.iter().enumerate() {
                let (o, w) = nn::attention(
                    g,
                    g.slice_rows(q, b * n_tok, (b + 1) * n_tok)?,
                    g.slice_rows(k, b * MAX_LEN, (b + 1) * MAX_LEN)?,
                    g.slice_rows(v, b * MAX_LEN, (b + 1) * MAX_LEN)?,
                    Some(mask),
                )?;
                outs.push(o);
                if record.is_some() {
                    weights.push(g.tensor(w));
                }
            }
            if let Some(rec) = record.as_deref_mut() {
                rec.push(weights);
            }
            let o = g.concat(&outs)?;
            let o = loras.project(g, o, base.get(&host("o"))?, &host("o"))?;
            h = g.add(h, o)?;

            let a = self.layer_norm(g, h, base, &format!("{pre}.ln3"))?;
            let fc1 = format!("{pre}.mlp.fc1.w");
            let fc2 = format!("{pre}.mlp.fc2.w");
            let m = loras.project(g, a, base.get(&fc1)?, &fc1)?;
            let m = g.add_bcast(m, base.get(&format!("{pre}.mlp.fc1.b"))?)?;
            let m = g.tanh(m)?;
            let m = loras.project(g, m, base.get(&fc2)?, &fc2)?;
            let m = g.add_bcast(m, base.get(&format!("{pre}.mlp.fc2.b"))?)?;
            h = g.add(h, m)?;
        }

        let a = self.layer_norm(g, h, base, "ln_out")?;
        let y = g.affine(a, base.get("head.w")?, base.get("head.b")?)?;

        // token layout back to pixels
        let mut inverse = vec![0usize; c.pixels()];
        for (slot, &pix) in pidx.iter().enumerate() {
            inverse[pix] = slot;
        }
        let px = c.pixels();
        let out_idx: Rc<[usize]> = (0..n_items * px)
            .map(|i| (i / px) * px + inverse[i % px])
            .collect();
        g.take(y, out_idx, &[n_items, px])
    }

    /// Noise prediction for one image outside any caller graph.
    pub fn predict_noise<T: Scalar>(
        &self,
        z_t: &ImageLatent<T>,
        t: usize,
        cond: &TextEmbedding<T>,
        tokens: &PromptTokens,
        base: &ParamStore<T>,
        loras: &[&ParamStore<T>],
    ) -> Result<ImageLatent<T>> {
        let g = Graph::new();
        let bound = Bound::bind(&g, base, false);
        let lb: Vec<Bound> = loras.iter().map(|p| Bound::bind(&g, p, false)).collect();
        let active = ActiveLoras::new(lb.iter().collect());
        let cond = g.constant(cond.values());
        let input = DenoiseInput {
            z_t: z_t.data(),
            t,
            cond,
            tokens,
        };
        let out = self.forward(&g, &[input], &bound, &active, None)?;
        let s = self.config.image_size;
        g.tensor(out).reshape(&[s, s])
    }

    /// Cross-attention weights for one image, one `[tokens, MAX_LEN]` matrix
    /// per block.
    pub fn export_attention_maps<T: Scalar>(
        &self,
        z_t: &ImageLatent<T>,
        t: usize,
        cond: &TextEmbedding<T>,
        tokens: &PromptTokens,
        base: &ParamStore<T>,
        loras: &[&ParamStore<T>],
    ) -> Result<AttentionMaps<T>> {
        let g = Graph::new();
        let bound = Bound::bind(&g, base, false);
        let lb: Vec<Bound> = loras.iter().map(|p| Bound::bind(&g, p, false)).collect();
        let active = ActiveLoras::new(lb.iter().collect());
        let cond = g.constant(cond.values());
        let input = DenoiseInput {
            z_t: z_t.data(),
            t,
            cond,
            tokens,
        };
        let mut record = AttentionRecord::new();
        self.forward(&g, &[input], &bound, &active, Some(&mut record))?;
        Ok(AttentionMaps {
            grid: self.config.grid(),
            layers: record.into_iter().map(|mut l| l.remove(0)).collect(),
        })
    }
}

/// Per-layer cross-attention, image tokens × text tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps<T> {
    pub grid: usize,
    pub layers: Vec<Tensor<T>>,
}

impl<T: Scalar> AttentionMaps<T> {
    /// Attention paid to text position `pos` by every image token, laid out
    /// as a `grid × grid` row-major map.
    pub fn token_grid(&self, layer: usize, pos: usize) -> Result<Vec<T>> {
        let m = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::shape("attention_maps", format!("no layer {layer}")))?;
        let (rows, cols) = (m.shape()[0], m.shape()[1]);
        if pos >= cols {
            return Err(Error::shape(
                "attention_maps",
                format!("text position {pos} out of {cols}"),
            ));
        }
        Ok((0..rows).map(|r| m.at2(r, pos)).collect())
    }

    /// `Σ min(p, q)` of the two columns, each normalized to sum to one.
    /// 1 means identical spatial distributions, 0 disjoint support.
    pub fn overlap(&self, layer: usize, pos_a: usize, pos_b: usize) -> Result<f64> {
        let norm = |v: Vec<T>| -> Vec<f64> {
            let s: f64 = v.iter().map(|x| x.as_f64()).sum();
            v.iter()
                .map(|x| if s > 0.0 { x.as_f64() / s } else { 0.0 })
                .collect()
        };
        let a = norm(self.token_grid(layer, pos_a)?);
        let b = norm(self.token_grid(layer, pos_b)?);
        Ok(a.iter().zip(&b).map(|(x, y)| x.min(*y)).sum())
    }
}
