//! Subcommand arguments and their implementations.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use phyc_core::dataset::{
    self, composed_prompt, generate_grid, pretrain_items, read_manifest, write_manifest,
    ConceptDataset, ConceptOptions, Corpus, GridOptions, Transform,
};
use phyc_core::denoiser::DenoiserConfig;
use phyc_core::diffusion::{
    q_sample, standard_normal, DiffusionSchedule, SamplerConfig, DEFAULT_UNCOND_PROB,
};
use phyc_core::error::{Error, Result};
use phyc_core::evalbench::{
    self, contact_sheet, find_checkpoints, parse_grid, EvalConfig, ProbeClassifier, ProbeConfig,
};
use phyc_core::io;
use phyc_core::losses::{DecoupleForm, LossWeights};
use phyc_core::optim::AdamConfig;
use phyc_core::trainer::{
    self, train_until, BaseModel, ConceptData, PretrainConfig, RunOutputs, TrainConfig, TrainState,
    DEFAULT_CHECKPOINT_EVERY,
};

use crate::config::write_lock;
use crate::{need, parent_dir};

fn adam_pretrain() -> AdamConfig {
    PretrainConfig::default().adam
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GenData {
    /// JSON config; flags given on the command line override it
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of object classes (1 to 8)
    #[arg(long, default_value_t = 8)]
    pub objects: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image side in pixels
    #[arg(long, default_value_t = dataset::DEFAULT_SIZE)]
    pub size: usize,
    /// Base physics severity
    #[arg(long, default_value_t = dataset::DEFAULT_SEVERITY)]
    pub severity: f64,
    /// Uniform severity jitter half-width
    #[arg(long, default_value_t = dataset::DEFAULT_SEVERITY_JITTER)]
    pub severity_jitter: f64,
    /// Renderings per object × physics cell
    #[arg(long, default_value_t = dataset::DEFAULT_PER_CELL)]
    pub per_cell: usize,
}

pub fn gen_data(a: &GenData) -> Result<()> {
    let out = need(&a.out, "out")?;
    let corpus = generate_grid(GridOptions {
        objects: a.objects,
        per_cell: a.per_cell,
        size: a.size,
        severity: a.severity,
        severity_jitter: a.severity_jitter,
        seed: a.seed,
    })?;
    write_manifest(out, &corpus)?;
    write_lock(out, a)?;
    println!(
        "wrote {} images to {} (hash {})",
        corpus.images.len(),
        out.display(),
        corpus.hash()
    );
    Ok(())
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct Pretrain {
    /// JSON config; flags given on the command line override it
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Grid corpus directory
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Base checkpoint to write
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    #[arg(long, default_value_t = 4e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated objects to train on; empty means all
    #[arg(long, default_value = "")]
    pub objects: String,
    #[arg(skip)]
    #[serde(default)]
    pub denoiser: DenoiserConfig,
    #[arg(skip)]
    #[serde(default)]
    pub schedule: DiffusionSchedule,
    #[arg(skip = adam_pretrain())]
    #[serde(default = "adam_pretrain")]
    pub adam: AdamConfig,
    #[arg(skip = DEFAULT_UNCOND_PROB)]
    #[serde(default = "uncond_prob")]
    pub uncond_prob: f64,
}

fn uncond_prob() -> f64 {
    DEFAULT_UNCOND_PROB
}

fn checkpoint_every() -> usize {
    DEFAULT_CHECKPOINT_EVERY
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(str::to_string)
        .collect()
}

fn run_pretrain(corpus: &Corpus, config: &PretrainConfig, objects: &[String]) -> Result<BaseModel> {
    for o in objects {
        dataset::check_object(o)?;
    }
    let items = pretrain_items(corpus, objects)?;
    let every = (config.steps / 10).max(1);
    trainer::pretrain(config, &corpus.manifest.vocabulary, &items, |step, loss| {
        if (step + 1) % every == 0 {
            log::info!("pretrain step {} loss {loss:.5}", step + 1);
        }
    })
}

pub fn pretrain(a: &Pretrain) -> Result<()> {
    let (data, out) = (need(&a.data, "data")?, need(&a.out, "out")?);
    let corpus = read_manifest(data)?;
    let config = PretrainConfig {
        steps: a.steps,
        lr: a.lr,
        batch: a.batch,
        seed: a.seed,
        denoiser: a.denoiser,
        schedule: a.schedule.clone(),
        adam: a.adam,
        uncond_prob: a.uncond_prob,
    };
    let base = run_pretrain(&corpus, &config, &split_list(&a.objects))?;
    base.save(out)?;
    write_lock(&parent_dir(out), a)?;
    println!("wrote base model {}", out.display());
    Ok(())
}

/// Base model from `--base`, or pretrained inline on the corpus.
fn base_model(
    corpus: &Corpus,
    base: Option<&Path>,
    pretrain_steps: usize,
    seed: u64,
) -> Result<BaseModel> {
    if let Some(p) = base {
        return BaseModel::load(p);
    }
    log::warn!("no --base given; pretraining for {pretrain_steps} steps");
    let config = PretrainConfig {
        steps: pretrain_steps,
        seed,
        ..PretrainConfig::default()
    };
    run_pretrain(corpus, &config, &[])
}

fn concept_dataset(
    corpus: &Corpus,
    object: &str,
    physics: Transform,
    options: ConceptOptions,
    seed: u64,
) -> Result<ConceptDataset> {
    match &corpus.manifest.concept {
        Some(_) => {
            let ds = ConceptDataset::from_corpus(corpus)?;
            if ds.object != object || ds.physics != physics {
                return Err(Error::Config(format!(
                    "dataset holds {}+{}, not {object}+{}",
                    ds.object,
                    ds.physics.name(),
                    physics.name()
                )));
            }
            Ok(ds)
        }
        None => ConceptDataset::from_grid(corpus, object, physics, options, seed),
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct Train {
    /// JSON config; flags given on the command line override it
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Grid or concept corpus directory
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Target object
    #[arg(long)]
    pub object: Option<String>,
    /// Physics concept
    #[arg(long)]
    pub physics: Option<String>,
    /// Final checkpoint path; the loss CSV and lock file go beside it
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pretrained base model; pretrains inline when absent
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Pretraining steps when no base is given
    #[arg(long, default_value_t = 3000)]
    pub pretrain_steps: usize,
    /// Continue from this checkpoint instead of starting fresh
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many steps (default: --steps)
    #[arg(long)]
    pub stop_at: Option<usize>,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_iso: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_dec: f64,
    /// cos, cos_sq or cos_abs
    #[arg(long, default_value_t = DecoupleForm::CosSq)]
    pub decouple_form: DecoupleForm,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed choosing the concept images out of a grid corpus
    #[arg(long, default_value_t = 0)]
    pub dataset_seed: u64,
    #[arg(skip)]
    #[serde(default)]
    pub concept: ConceptOptions,
    #[arg(skip)]
    #[serde(default)]
    pub schedule: DiffusionSchedule,
    #[arg(skip)]
    #[serde(default)]
    pub adam: AdamConfig,
    #[arg(skip = DEFAULT_UNCOND_PROB)]
    #[serde(default = "uncond_prob")]
    pub uncond_prob: f64,
    #[arg(skip = DEFAULT_CHECKPOINT_EVERY)]
    #[serde(default = "checkpoint_every")]
    pub checkpoint_every: usize,
}

impl Train {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            batch: self.batch,
            rank: self.rank,
            weights: LossWeights {
                lambda_iso: self.lambda_iso,
                lambda_dec: self.lambda_dec,
                decouple_form: self.decouple_form,
            },
            seed: self.seed,
            schedule: self.schedule.clone(),
            adam: self.adam,
            uncond_prob: self.uncond_prob,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

fn loss_csv_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("loss.csv")
}

pub fn train(a: &Train) -> Result<()> {
    let (data, out) = (need(&a.data, "data")?, need(&a.out, "out")?);
    let object = need(&a.object, "object")?;
    let physics: Transform = need(&a.physics, "physics")?.parse()?;
    dataset::check_object(object)?;
    let corpus = read_manifest(data)?;
    let ds = concept_dataset(&corpus, object, physics, a.concept, a.dataset_seed)?;
    let config = a.train_config();
    let mut state = match &a.resume {
        Some(p) => {
            let s = TrainState::load(p)?;
            if s.object_name != *object || s.physics_name != physics.name() {
                return Err(Error::Config(format!(
                    "{} holds {}+{}",
                    p.display(),
                    s.object_name,
                    s.physics_name
                )));
            }
            if s.config != config {
                return Err(Error::Config(
                    "resume config differs from the checkpoint's".into(),
                ));
            }
            s
        }
        None => {
            let base = base_model(&corpus, a.base.as_deref(), a.pretrain_steps, a.seed)?;
            let mut s = TrainState::new(config, &base, object, physics.name())?;
            s.data_hash = Some(corpus.hash());
            s
        }
    };
    let outputs = RunOutputs {
        checkpoint: out.clone(),
        csv: loss_csv_path(out),
    };
    write_lock(&parent_dir(out), a)?;
    let data = ConceptData::new(&ds)?;
    let until = a.stop_at.unwrap_or(state.config.steps);
    let reports = train_until(&mut state, &data, until, Some(&outputs))?;
    if let Some(r) = reports.last() {
        println!(
            "step {} L_total {:.5} L_iso {:.3e} cos_raw {:.4}",
            state.step, r.total, r.l_iso, r.cos_raw
        );
    }
    println!("wrote {} and {}", out.display(), outputs.csv.display());
    Ok(())
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    /// JSON config; flags given on the command line override it
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Concept checkpoint
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Object named in the composed prompt
    #[arg(long)]
    pub object: Option<String>,
    /// Physics concept; must match the checkpoint
    #[arg(long)]
    pub physics: Option<String>,
    /// Number of images; seeds are seed..seed+n
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    /// Sampling steps
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Classifier-free guidance scale
    #[arg(long, default_value_t = 7.5)]
    pub guidance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write cross-attention maps of the first image
    #[arg(long, default_value_t = false)]
    pub attention: bool,
}

#[derive(Serialize)]
struct AttentionExport {
    prompt: String,
    tokens: Vec<String>,
    t: usize,
    grid: usize,
    /// Per block: image tokens × text positions.
    layers: Vec<Vec<Vec<f32>>>,
}

pub fn sample(a: &Sample) -> Result<()> {
    let (ckpt, out) = (need(&a.ckpt, "ckpt")?, need(&a.out, "out")?);
    let object = need(&a.object, "object")?;
    let physics = need(&a.physics, "physics")?;
    dataset::check_object(object)?;
    let state = TrainState::load(ckpt)?;
    if state.physics_name != *physics {
        return Err(Error::Config(format!(
            "{} was trained on physics {:?}",
            ckpt.display(),
            state.physics_name
        )));
    }
    if a.n == 0 {
        return Err(Error::Config("--n must be >= 1".into()));
    }
    let prompt = composed_prompt(object);
    let seeds: Vec<u64> = (a.seed..a.seed + a.n as u64).collect();
    let sampler = SamplerConfig {
        steps: a.steps,
        guidance: a.guidance,
    };
    let images = state.sample(&prompt, sampler, &seeds)?;
    io::create_dir(out)?;
    for (img, s) in images.iter().zip(&seeds) {
        io::write_png(&out.join(format!("sample_{s:04}.png")), img)?;
    }
    io::write_bytes(&out.join("sheet.png"), &contact_sheet(&images, 5)?)?;
    if a.attention {
        let t = state.config.schedule.steps / 2;
        let eps = standard_normal(&mut trainer::step_rng(a.seed, 0), images[0].shape());
        let tokens = state.vocab.tokenize(&prompt)?;
        let noisy = q_sample(&state.config.schedule, &images[0], t, &eps, tokens)?;
        let maps = state.attention_maps(&prompt, &noisy.z_t, t)?;
        let export = AttentionExport {
            tokens: tokens
                .ids()
                .iter()
                .map(|&i| state.vocab.token(i).unwrap_or("?").to_string())
                .collect(),
            prompt: prompt.clone(),
            t,
            grid: maps.grid,
            layers: maps
                .layers
                .iter()
                .map(|m| m.data().chunks(m.shape()[1]).map(<[f32]>::to_vec).collect())
                .collect(),
        };
        io::write_json(&out.join("attention.json"), &export)?;
    }
    write_lock(out, a)?;
    println!("wrote {} samples to {}", images.len(), out.display());
    Ok(())
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ProbeTrain {
    /// JSON config; flags given on the command line override it
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Grid corpus directory
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Probe file to write
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Every n-th item of a cell is held out
    #[arg(long, default_value_t = 5)]
    pub holdout_every: usize,
    /// Held-out accuracy both heads must reach
    #[arg(long, default_value_t = evalbench::REQUIRED_ACCURACY)]
    pub required_accuracy: f64,
    #[arg(skip = true)]
    #[serde(default = "yes")]
    pub shift_augment: bool,
}

fn yes() -> bool {
    true
}

pub fn probe_train(a: &ProbeTrain) -> Result<()> {
    let (data, out) = (need(&a.data, "data")?, need(&a.out, "out")?);
    let corpus = read_manifest(data)?;
    let probe = ProbeClassifier::train(
        &corpus,
        &ProbeConfig {
            hidden: a.hidden,
            epochs: a.epochs,
            batch: a.batch,
            lr: a.lr,
            seed: a.seed,
            holdout_every: a.holdout_every,
            shift_augment: a.shift_augment,
            required_accuracy: a.required_accuracy,
        },
    )?;
    probe.save(out)?;
    write_lock(&parent_dir(out), a)?;
    let r = probe.report;
    println!(
        "object {:.4} [{:.4}, {:.4}]  physics {:.4} [{:.4}, {:.4}]  n={}",
        r.object.value,
        r.object.lower,
        r.object.upper,
        r.physics.value,
        r.physics.lower,
        r.physics.upper,
        r.object.n
    );
    Ok(())
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct Eval {
    /// JSON config; flags given on the command line override it
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Directory of concept checkpoints (searched one level deep)
    #[arg(long)]
    pub ckpt_dir: Option<PathBuf>,
    /// Frozen probe
    #[arg(long)]
    pub probe: Option<PathBuf>,
    /// results.csv path; contact sheets go to a sheets/ directory beside it
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Images per combination
    #[arg(long, default_value_t = evalbench::DEFAULT_BENCH_SEEDS)]
    pub seeds: usize,
    /// Sampling steps
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 7.5)]
    pub guidance: f64,
}

pub fn eval(a: &Eval) -> Result<()> {
    let dir = need(&a.ckpt_dir, "ckpt-dir")?;
    let (probe_path, out) = (need(&a.probe, "probe")?, need(&a.out, "out")?);
    let probe = ProbeClassifier::load(probe_path)?;
    let ckpts = find_checkpoints(dir)?;
    let cfg = EvalConfig {
        sampler: SamplerConfig {
            steps: a.steps,
            guidance: a.guidance,
        },
        samples: a.seeds,
    };
    let parent = parent_dir(out);
    let result = evalbench::run_benchmark(&ckpts, &probe, &cfg, Some(&parent.join("sheets")))?;
    io::write_bytes(out, result.to_csv().as_bytes())?;
    write_lock(&parent, a)?;
    for c in &result.combos {
        println!(
            "{}: Proxy-V {:.4} Proxy-V-O {:.4} (seed {})",
            c.combination(),
            c.proxy_v(),
            c.proxy_v_o(),
            c.seeds[c.selected]
        );
    }
    println!(
        "mean over {} combinations: Proxy-V {:.4} Proxy-V-O {:.4}",
        result.combos.len(),
        result.mean_proxy_v(),
        result.mean_proxy_v_o()
    );
    Ok(())
}

/// Flags shared by the ablation and sweep harnesses.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct HarnessFlags {
    /// Pretrained base model; pretrains inline when absent
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Frozen probe; trained on --data when absent
    #[arg(long)]
    pub probe: Option<PathBuf>,
    /// Pretraining steps when no base is given
    #[arg(long, default_value_t = 3000)]
    pub pretrain_steps: usize,
    /// Training steps per run
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    /// cos, cos_sq or cos_abs
    #[arg(long, default_value_t = DecoupleForm::CosSq)]
    pub decouple_form: DecoupleForm,
    /// Seed choosing the concept images out of the grid
    #[arg(long, default_value_t = 0)]
    pub dataset_seed: u64,
    /// Images sampled per run
    #[arg(long, default_value_t = evalbench::DEFAULT_BENCH_SEEDS)]
    pub samples: usize,
    /// Sampling steps
    #[arg(long, default_value_t = 50)]
    pub sample_steps: usize,
    #[arg(long, default_value_t = 7.5)]
    pub guidance: f64,
}

struct Harness {
    corpus: Corpus,
    base: BaseModel,
    probe: ProbeClassifier,
    dataset: ConceptDataset,
    config: TrainConfig,
    eval: EvalConfig,
}

impl HarnessFlags {
    fn load(&self, data: &Path, object: &str, physics: &str) -> Result<Harness> {
        dataset::check_object(object)?;
        let physics: Transform = physics.parse()?;
        let corpus = read_manifest(data)?;
        let probe = match &self.probe {
            Some(p) => ProbeClassifier::load(p)?,
            None => ProbeClassifier::train(&corpus, &ProbeConfig::default())?,
        };
        probe.check_hash(&corpus.hash())?;
        let base = base_model(&corpus, self.base.as_deref(), self.pretrain_steps, 0)?;
        let dataset = concept_dataset(
            &corpus,
            object,
            physics,
            ConceptOptions::default(),
            self.dataset_seed,
        )?;
        let mut config = TrainConfig {
            steps: self.steps,
            lr: self.lr,
            batch: self.batch,
            rank: self.rank,
            ..TrainConfig::default()
        };
        config.weights.decouple_form = self.decouple_form;
        let eval = EvalConfig {
            sampler: SamplerConfig {
                steps: self.sample_steps,
                guidance: self.guidance,
            },
            samples: self.samples,
        };
        Ok(Harness {
            corpus,
            base,
            probe,
            dataset,
            config,
            eval,
        })
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct Ablate {
    /// JSON config; flags given on the command line override it
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Grid corpus directory
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub object: Option<String>,
    #[arg(long)]
    pub physics: Option<String>,
    /// Training seeds per variant; seeds are 0..n
    #[arg(long, default_value_t = evalbench::DEFAULT_ABLATION_SEEDS)]
    pub seeds: usize,
    /// ablation.csv path; per-run scores go to ablation.runs.csv beside it
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub harness: HarnessFlags,
}

pub fn ablate(a: &Ablate) -> Result<()> {
    let (data, out) = (need(&a.data, "data")?, need(&a.out, "out")?);
    let h = a.harness.load(
        data,
        need(&a.object, "object")?,
        need(&a.physics, "physics")?,
    )?;
    let seeds: Vec<u64> = (0..a.seeds as u64).collect();
    let hash = h.corpus.hash();
    let r = evalbench::run_ablation(
        &h.base,
        &h.dataset,
        &h.config,
        &seeds,
        &h.probe,
        &h.eval,
        Some(&hash),
    )?;
    io::write_bytes(out, r.to_csv().as_bytes())?;
    io::write_bytes(&out.with_extension("runs.csv"), r.runs_csv().as_bytes())?;
    write_lock(&parent_dir(out), a)?;
    for row in &r.rows {
        println!(
            "{:>7}: Proxy-V {:.4} ± {:.4}  Proxy-V-O {:.4} ± {:.4}",
            row.variant,
            row.proxy_v_mean(),
            evalbench::std_dev(&row.proxy_v),
            row.proxy_v_o_mean(),
            evalbench::std_dev(&row.proxy_v_o)
        );
    }
    Ok(())
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct Sweep {
    /// JSON config; flags given on the command line override it
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Grid corpus directory
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// λ values used for both weights
    #[arg(long, default_value = "0.1,0.5,1.0,2.0")]
    pub grid: String,
    #[arg(long, default_value = "square")]
    pub object: String,
    #[arg(long, default_value = "melt")]
    pub physics: String,
    /// Training seeds per cell; seeds are 0..n
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    /// sweep.csv path
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub harness: HarnessFlags,
}

pub fn sweep(a: &Sweep) -> Result<()> {
    let (data, out) = (need(&a.data, "data")?, need(&a.out, "out")?);
    let grid = parse_grid(&a.grid)?;
    let h = a.harness.load(data, &a.object, &a.physics)?;
    let seeds: Vec<u64> = (0..a.seeds as u64).collect();
    let hash = h.corpus.hash();
    let r = evalbench::run_sweep(
        &h.base,
        &h.dataset,
        &h.config,
        &grid,
        &seeds,
        &h.probe,
        &h.eval,
        Some(&hash),
    )?;
    io::write_bytes(out, r.to_csv().as_bytes())?;
    write_lock(&parent_dir(out), a)?;
    print!("{}", r.to_csv());
    Ok(())
}
