//! Best-of-N benchmark, loss ablation and λ sweep.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::probe::{object_class, physics_class, proxy_scores, ProbeClassifier};
use crate::dataset::{composed_prompt, quantize_byte, ConceptDataset, Transform};
use crate::denoiser::ImageLatent;
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::losses::LossReport;
use crate::trainer::{run_training, BaseModel, TrainConfig, TrainState};

pub const DEFAULT_BENCH_SEEDS: usize = 20;
pub const DEFAULT_ABLATION_SEEDS: usize = 5;
pub const DEFAULT_SWEEP_GRID: [f64; 4] = [0.1, 0.5, 1.0, 2.0];

pub const RESULTS_HEADER: &str = "combination,seed,proxy_v,proxy_v_o,selected";
pub const ABLATION_HEADER: &str =
    "variant,proxy_v_mean,proxy_v_std,proxy_v_o_mean,proxy_v_o_std,seeds";
pub const ABLATION_RUNS_HEADER: &str = "variant,seed,proxy_v,proxy_v_o";
pub const SWEEP_HEADER: &str = "lambda_iso,lambda_dec,proxy_v,proxy_v_o,seeds";

/// How evaluation images are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    /// Sampling seeds are `0..samples`.
    pub samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sampler: SamplerConfig::default(),
            samples: DEFAULT_BENCH_SEEDS,
        }
    }
}

impl EvalConfig {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.samples as u64).collect()
    }
}

/// Scores of one (object, physics) combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComboResult {
    pub object: String,
    pub physics: String,
    pub seeds: Vec<u64>,
    /// `(Proxy-V, Proxy-V-O)` per seed.
    pub scores: Vec<(f64, f64)>,
    /// Index of the highest Proxy-V; ties go to the earliest seed.
    pub selected: usize,
}

impl ComboResult {
    pub fn new(
        object: &str,
        physics: &str,
        seeds: Vec<u64>,
        scores: Vec<(f64, f64)>,
    ) -> Result<Self> {
        if scores.is_empty() || scores.len() != seeds.len() {
            return Err(Error::LengthMismatch {
                expected: seeds.len(),
                got: scores.len(),
            });
        }
        let mut selected = 0;
        for (i, s) in scores.iter().enumerate() {
            if s.0 > scores[selected].0 {
                selected = i;
            }
        }
        Ok(ComboResult {
            object: object.to_string(),
            physics: physics.to_string(),
            seeds,
            scores,
            selected,
        })
    }

    pub fn combination(&self) -> String {
        format!("{}+{}", self.object, self.physics)
    }

    pub fn proxy_v(&self) -> f64 {
        self.scores[self.selected].0
    }

    pub fn proxy_v_o(&self) -> f64 {
        self.scores[self.selected].1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub combos: Vec<ComboResult>,
}

impl BenchmarkResult {
    pub fn mean_proxy_v(&self) -> f64 {
        mean(
            &self
                .combos
                .iter()
                .map(ComboResult::proxy_v)
                .collect::<Vec<_>>(),
        )
    }

    pub fn mean_proxy_v_o(&self) -> f64 {
        mean(
            &self
                .combos
                .iter()
                .map(ComboResult::proxy_v_o)
                .collect::<Vec<_>>(),
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{RESULTS_HEADER}\n");
        for c in &self.combos {
            for (i, (seed, (v, vo))) in c.seeds.iter().zip(&c.scores).enumerate() {
                let _ = writeln!(
                    out,
                    "{},{seed},{v},{vo},{}",
                    c.combination(),
                    u8::from(i == c.selected)
                );
            }
        }
        out
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for a single value.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Samples the composed prompt of a concept state and scores every image.
pub fn score_state(
    state: &TrainState,
    probe: &ProbeClassifier,
    eval: &EvalConfig,
) -> Result<(ComboResult, Vec<ImageLatent<f32>>)> {
    if let Some(h) = &state.data_hash {
        probe.check_hash(h)?;
    }
    let seeds = eval.seeds();
    let images = state.sample(&composed_prompt(&state.object_name), eval.sampler, &seeds)?;
    let physics: Transform = state.physics_name.parse()?;
    let (oi, pi) = (
        object_class(&state.object_name)?,
        physics_class(Some(physics)),
    );
    let scores = probe
        .predict_batch(&images)?
        .iter()
        .map(|o| proxy_scores(o, oi, pi))
        .collect::<Result<Vec<_>>>()?;
    let combo = ComboResult::new(&state.object_name, &state.physics_name, seeds, scores)?;
    Ok((combo, images))
}

/// Tiles images into one 8-bit PNG, `cols` per row, one-pixel gray gutters.
pub fn contact_sheet(images: &[ImageLatent<f32>], cols: usize) -> Result<Vec<u8>> {
    let first = images.first().ok_or(Error::Empty("contact sheet"))?;
    let (h, w) = (first.shape()[0], first.shape()[1]);
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (sh, sw) = (rows * (h + 1) + 1, cols * (w + 1) + 1);
    let mut px = vec![128u8; sh * sw];
    for (k, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(Error::shape("contact_sheet", "images of different sizes"));
        }
        let (r0, c0) = (1 + (k / cols) * (h + 1), 1 + (k % cols) * (w + 1));
        for r in 0..h {
            for c in 0..w {
                px[(r0 + r) * sw + c0 + c] = quantize_byte(img.data()[r * w + c]);
            }
        }
    }
    io::encode_gray(&[sh, sw], &px)
}

/// Final concept checkpoints in `dir` and its immediate subdirectories,
/// sorted by path. Periodic `*.stepNNNNN.phyc` snapshots are skipped.
pub fn find_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for path in list_dir(dir)? {
        if path.is_dir() {
            out.extend(
                list_dir(&path)?
                    .into_iter()
                    .filter(|p| is_final_checkpoint(p)),
            );
        } else if is_final_checkpoint(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    entries
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect()
}

fn is_final_checkpoint(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    let Some(stem) = name.strip_suffix(".phyc") else {
        return false;
    };
    let snapshot = stem
        .rsplit_once(".step")
        .is_some_and(|(_, n)| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()));
    !snapshot && path.is_file()
}

/// Scores every checkpoint. When `sheets` is set a contact sheet per
/// combination is written there. Combinations are sampled in parallel;
/// results do not depend on the thread count.
pub fn run_benchmark(
    checkpoints: &[PathBuf],
    probe: &ProbeClassifier,
    eval: &EvalConfig,
    sheets: Option<&Path>,
) -> Result<BenchmarkResult> {
    if checkpoints.is_empty() {
        return Err(Error::Empty("checkpoint list"));
    }
    for p in checkpoints {
        if !p.is_file() {
            return Err(Error::MissingCheckpoint(p.clone()));
        }
    }
    if let Some(dir) = sheets {
        io::create_dir(dir)?;
    }
    let combos = checkpoints
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let state = TrainState::load(p)?;
            let (combo, images) = score_state(&state, probe, eval)?;
            if let Some(dir) = sheets {
                let name = format!("{k:02}_{}_{}.png", combo.object, combo.physics);
                io::write_bytes(&dir.join(name), &contact_sheet(&images, 5)?)?;
            }
            Ok(combo)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkResult { combos })
}

/// One trained-and-scored run of a harness.
#[derive(Clone, Debug)]
pub struct HarnessRun {
    pub label: String,
    pub config: TrainConfig,
    pub reports: Vec<LossReport>,
    pub combo: ComboResult,
}

fn train_and_score(
    label: String,
    config: TrainConfig,
    base: &BaseModel,
    dataset: &ConceptDataset,
    data_hash: Option<&str>,
    probe: &ProbeClassifier,
    eval: &EvalConfig,
) -> Result<HarnessRun> {
    log::info!("training {label} (seed {})", config.seed);
    let (mut state, reports) = run_training(&config, base, dataset, None)?;
    state.data_hash = data_hash.map(str::to_string);
    let (combo, _) = score_state(&state, probe, eval)?;
    Ok(HarnessRun {
        label,
        config,
        reports,
        combo,
    })
}

pub const ABLATION_VARIANTS: [&str; 3] = ["full", "w/o IL", "w/o DL"];

/// The three ablation configs. Only the two loss weights differ from `base`.
pub fn ablation_variants(base: &TrainConfig) -> [(&'static str, TrainConfig); 3] {
    let with = |iso: f64, dec: f64| {
        let mut c = base.clone();
        c.weights.lambda_iso = iso;
        c.weights.lambda_dec = dec;
        c
    };
    [
        (ABLATION_VARIANTS[0], with(1.0, 1.0)),
        (ABLATION_VARIANTS[1], with(0.0, 1.0)),
        (ABLATION_VARIANTS[2], with(1.0, 0.0)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub proxy_v: Vec<f64>,
    pub proxy_v_o: Vec<f64>,
}

impl AblationRow {
    pub fn proxy_v_mean(&self) -> f64 {
        mean(&self.proxy_v)
    }

    pub fn proxy_v_o_mean(&self) -> f64 {
        mean(&self.proxy_v_o)
    }
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<HarnessRun>,
}

impl AblationResult {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{ABLATION_HEADER}\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.variant,
                r.proxy_v_mean(),
                std_dev(&r.proxy_v),
                r.proxy_v_o_mean(),
                std_dev(&r.proxy_v_o),
                seeds.join(";")
            );
        }
        out
    }

    pub fn runs_csv(&self) -> String {
        let mut out = format!("{ABLATION_RUNS_HEADER}\n");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.label,
                r.config.seed,
                r.combo.proxy_v(),
                r.combo.proxy_v_o()
            );
        }
        out
    }
}

/// Trains full, w/o IL and w/o DL once per training seed and scores each
/// run with the benchmark protocol.
pub fn run_ablation(
    base: &BaseModel,
    dataset: &ConceptDataset,
    config: &TrainConfig,
    seeds: &[u64],
    probe: &ProbeClassifier,
    eval: &EvalConfig,
    data_hash: Option<&str>,
) -> Result<AblationResult> {
    if seeds.is_empty() {
        return Err(Error::Empty("ablation seed list"));
    }
    let variants = ablation_variants(config);
    let jobs: Vec<(&str, TrainConfig)> = variants
        .iter()
        .flat_map(|(name, c)| {
            seeds.iter().map(move |&s| {
                let mut c = c.clone();
                c.seed = s;
                (*name, c)
            })
        })
        .collect();
    let runs = jobs
        .into_par_iter()
        .map(|(name, c)| {
            train_and_score(name.to_string(), c, base, dataset, data_hash, probe, eval)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = variants
        .iter()
        .map(|(name, _)| {
            let mine: Vec<&HarnessRun> = runs.iter().filter(|r| r.label == *name).collect();
            AblationRow {
                variant: name.to_string(),
                seeds: mine.iter().map(|r| r.config.seed).collect(),
                proxy_v: mine.iter().map(|r| r.combo.proxy_v()).collect(),
                proxy_v_o: mine.iter().map(|r| r.combo.proxy_v_o()).collect(),
            }
        })
        .collect();
    Ok(AblationResult { rows, runs })
}

/// Comma-separated λ values, each finite and non-negative.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let values = text
        .split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| Error::Config(format!("bad grid value {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::Empty("grid"));
    }
    Ok(values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lambda_iso: f64,
    pub lambda_dec: f64,
    pub seeds: Vec<u64>,
    pub proxy_v: Vec<f64>,
    pub proxy_v_o: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_HEADER}\n");
        for c in &self.cells {
            let seeds: Vec<String> = c.seeds.iter().map(u64::to_string).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.lambda_iso,
                c.lambda_dec,
                mean(&c.proxy_v),
                mean(&c.proxy_v_o),
                seeds.join(";")
            );
        }
        out
    }
}

/// One model per (λ_iso, λ_dec) cell and training seed; cells are listed
/// with λ_iso varying slowest.
pub fn run_sweep(
    base: &BaseModel,
    dataset: &ConceptDataset,
    config: &TrainConfig,
    grid: &[f64],
    seeds: &[u64],
    probe: &ProbeClassifier,
    eval: &EvalConfig,
    data_hash: Option<&str>,
) -> Result<SweepResult> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::Empty("sweep grid or seed list"));
    }
    let cells: Vec<(f64, f64)> = grid
        .iter()
        .flat_map(|&i| grid.iter().map(move |&d| (i, d)))
        .collect();
    let jobs: Vec<(usize, TrainConfig)> = cells
        .iter()
        .enumerate()
        .flat_map(|(k, &(iso, dec))| {
            seeds.iter().map(move |&s| {
                let mut c = config.clone();
                c.weights.lambda_iso = iso;
                c.weights.lambda_dec = dec;
                c.seed = s;
                (k, c)
            })
        })
        .collect();
    let runs = jobs
        .into_par_iter()
        .map(|(k, c)| {
            let label = format!("cell{k}");
            train_and_score(label, c, base, dataset, data_hash, probe, eval).map(|r| (k, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let cells = cells
        .iter()
        .enumerate()
        .map(|(k, &(lambda_iso, lambda_dec))| {
            let mine: Vec<&HarnessRun> = runs
                .iter()
                .filter(|(j, _)| *j == k)
                .map(|(_, r)| r)
                .collect();
            SweepCell {
                lambda_iso,
                lambda_dec,
                seeds: mine.iter().map(|r| r.config.seed).collect(),
                proxy_v: mine.iter().map(|r| r.combo.proxy_v()).collect(),
                proxy_v_o: mine.iter().map(|r| r.combo.proxy_v_o()).collect(),
            }
        })
        .collect();
    Ok(SweepResult { cells })
}
