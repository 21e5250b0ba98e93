//! Run configuration: `key=value` lines, `#` comments, later keys win.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use tdlm_core::{LevelWeightConfig, NoiseSchedule};
use tdlm_model::{AdamWConfig, DenoiserConfig, LrSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub tree: PathBuf,
    pub out: PathBuf,
    /// Fraction of chunks held out for validation.
    pub split: f64,
    pub seq_len: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub warmup: usize,
    pub lr_final_ratio: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Joint neighborhood length; 0 disables the joint head.
    pub joint: usize,
    pub clip: f64,
    pub denom_floor: f64,
    pub level_weights: LevelWeightConfig,
    pub seed: u64,
    pub eval_interval: usize,
    /// Validation chunks scored at each evaluation.
    pub eval_rows: usize,
    /// Corruption draws per validation chunk.
    pub eval_samples: usize,
    /// Must be a multiple of `eval_interval`.
    pub ckpt_interval: usize,
    pub precision: Precision,
    /// Train on the first batch and its corruption over and over.
    pub overfit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus.txt"),
            tree: PathBuf::from("tree.txt"),
            out: PathBuf::from("run"),
            split: 0.05,
            seq_len: 256,
            batch: 32,
            steps: 5000,
            lr: 3e-4,
            warmup: 250,
            lr_final_ratio: 0.1,
            weight_decay: 0.02,
            grad_clip: 1.0,
            d: 128,
            layers: 4,
            heads: 4,
            joint: 0,
            clip: 10.0,
            denom_floor: 1e-4,
            level_weights: LevelWeightConfig::none(),
            seed: 0,
            eval_interval: 100,
            eval_rows: 64,
            eval_samples: 4,
            ckpt_interval: 500,
            precision: Precision::F32,
            overfit: false,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .ok()
        .with_context(|| format!("config key {key}: cannot parse {value:?}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "corpus" => self.corpus = v.into(),
            "tree" => self.tree = v.into(),
            "out" => self.out = v.into(),
            "split" => self.split = num(key, v)?,
            "seq_len" => self.seq_len = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "warmup" => self.warmup = num(key, v)?,
            "lr_final_ratio" => self.lr_final_ratio = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "grad_clip" => self.grad_clip = num(key, v)?,
            "model.d" => self.d = num(key, v)?,
            "model.layers" => self.layers = num(key, v)?,
            "model.heads" => self.heads = num(key, v)?,
            "model.joint" => self.joint = num(key, v)?,
            "schedule.family" => ensure!(
                v == "linear",
                "schedule.family: only 'linear' is implemented, got {v:?}"
            ),
            "schedule.clip" => self.clip = num(key, v)?,
            "schedule.denom_floor" => self.denom_floor = num(key, v)?,
            "levelweight.kind" => {
                let gamma = self.level_weights.gamma;
                self.level_weights = match v {
                    "none" => LevelWeightConfig::none(),
                    "linear" => LevelWeightConfig::linear(gamma),
                    "exp" => LevelWeightConfig::exponential(gamma),
                    _ => bail!("levelweight.kind: expected none, linear or exp, got {v:?}"),
                };
            }
            "levelweight.gamma" => self.level_weights.gamma = num(key, v)?,
            "levelweight" => self.level_weights = LevelWeightConfig::parse(v)?,
            "seed" => self.seed = num(key, v)?,
            "eval.interval" => self.eval_interval = num(key, v)?,
            "eval.rows" => self.eval_rows = num(key, v)?,
            "eval.samples" => self.eval_samples = num(key, v)?,
            "ckpt.interval" => self.ckpt_interval = num(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => bail!("precision: expected f32 or f64, got {v:?}"),
                }
            }
            "overfit" => self.overfit = num(key, v)?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn assign(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("expected key=value, got {kv:?}"))?;
        self.set(k, v)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            self.assign(line)
                .with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text)
            .with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq_len", self.seq_len),
            ("batch", self.batch),
            ("steps", self.steps),
            ("model.d", self.d),
            ("model.layers", self.layers),
            ("model.heads", self.heads),
            ("eval.interval", self.eval_interval),
            ("eval.rows", self.eval_rows),
            ("eval.samples", self.eval_samples),
            ("ckpt.interval", self.ckpt_interval),
        ];
        for (k, v) in positive {
            ensure!(v > 0, "{k} must be positive");
        }
        ensure!(
            self.split > 0.0 && self.split < 1.0,
            "split must lie in (0, 1), got {}",
            self.split
        );
        ensure!(self.lr > 0.0, "lr must be positive");
        ensure!(
            self.lr_final_ratio > 0.0 && self.lr_final_ratio <= 1.0,
            "lr_final_ratio must lie in (0, 1]"
        );
        ensure!(self.weight_decay >= 0.0, "weight_decay must be >= 0");
        ensure!(self.grad_clip > 0.0, "grad_clip must be positive");
        ensure!(
            self.ckpt_interval.is_multiple_of(self.eval_interval),
            "ckpt.interval ({}) must be a multiple of eval.interval ({}) so resumed runs log identical lines",
            self.ckpt_interval,
            self.eval_interval
        );
        Ok(())
    }

    pub fn schedule(&self, height: usize) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::uniform(height)?
            .with_clip_cap(self.clip)?
            .with_denom_floor(self.denom_floor)?)
    }

    pub fn model(&self, node_vocab: usize, branching: usize) -> DenoiserConfig {
        DenoiserConfig {
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            seq_len: self.seq_len,
            node_vocab,
            branching,
            joint: (self.joint > 0).then_some(self.joint),
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            clip_norm: Some(self.grad_clip),
            ..AdamWConfig::default()
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            warmup: self.warmup,
            total: self.steps,
            final_ratio: self.lr_final_ratio,
        }
    }

    /// Every key as a `key=value` line; [`apply_text`](Self::apply_text)
    /// reads it back to an equal config.
    pub fn render(&self) -> String {
        let lw = self.level_weights;
        let kind = match lw.kind {
            tdlm_core::LevelWeightKind::None => "none",
            tdlm_core::LevelWeightKind::Linear => "linear",
            tdlm_core::LevelWeightKind::Exponential => "exp",
        };
        let lines = [
            format!("corpus={}", self.corpus.display()),
            format!("tree={}", self.tree.display()),
            format!("out={}", self.out.display()),
            format!("split={}", self.split),
            format!("seq_len={}", self.seq_len),
            format!("batch={}", self.batch),
            format!("steps={}", self.steps),
            format!("lr={}", self.lr),
            format!("warmup={}", self.warmup),
            format!("lr_final_ratio={}", self.lr_final_ratio),
            format!("weight_decay={}", self.weight_decay),
            format!("grad_clip={}", self.grad_clip),
            format!("model.d={}", self.d),
            format!("model.layers={}", self.layers),
            format!("model.heads={}", self.heads),
            format!("model.joint={}", self.joint),
            "schedule.family=linear".to_string(),
            format!("schedule.clip={}", self.clip),
            format!("schedule.denom_floor={}", self.denom_floor),
            format!("levelweight.kind={kind}"),
            format!("levelweight.gamma={}", lw.gamma),
            format!("seed={}", self.seed),
            format!("eval.interval={}", self.eval_interval),
            format!("eval.rows={}", self.eval_rows),
            format!("eval.samples={}", self.eval_samples),
            format!("ckpt.interval={}", self.ckpt_interval),
            format!(
                "precision={}",
                match self.precision {
                    Precision::F32 => "f32",
                    Precision::F64 => "f64",
                }
            ),
            format!("overfit={}", self.overfit),
        ];
        lines.join("\n") + "\n"
    }
}
