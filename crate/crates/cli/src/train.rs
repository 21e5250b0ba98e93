//! Training loop with periodic validation ELBO and checkpoints.
//!
//! Step `s` draws its batch and corruption from stream `s + 1` of the run
//! seed, and every evaluation reuses one fixed stream, so a resumed run
//! repeats the lines an uninterrupted run would have written.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdlm_core::loss::{corrupt, elbo_estimate, ElboOptions, ElboReport, TimeSampling};
use tdlm_core::predictor::ChildPredictor;
use tdlm_core::{height_weights, LevelWeightConfig, NoiseSchedule, TokenId, TokenTree};
use tdlm_model::checkpoint;
use tdlm_model::{AdamW, Denoiser, ModelError, Real};

use crate::config::{Precision, RunConfig};
use crate::corpus::{ingest, Split};
use crate::tokenizer::Tokenizer;

/// Stream reserved for validation draws.
const EVAL_STREAM: u64 = 0;
/// Rows per forward call during evaluation.
const EVAL_BATCH_ROWS: usize = 32;

/// One line of `metrics.log`:
/// `step=<n> train_J=<j> val_nats=<e> val_ppl=<p> val_weighted=<w> lvl:0=<e0> ... lr=<lr> grad_norm=<g>`.
/// `train_J` averages the steps since the previous line; `val_weighted` is
/// the clipped, level-weighted objective on the validation draws.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricLine {
    pub step: usize,
    pub train_j: f64,
    pub val_nats: f64,
    pub val_ppl: f64,
    pub val_weighted: f64,
    pub per_level: Vec<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

impl MetricLine {
    pub fn render(&self) -> String {
        let mut s = format!(
            "step={} train_J={} val_nats={} val_ppl={} val_weighted={}",
            self.step, self.train_j, self.val_nats, self.val_ppl, self.val_weighted
        );
        for (h, v) in self.per_level.iter().enumerate() {
            let _ = write!(s, " lvl:{h}={v}");
        }
        let _ = write!(s, " lr={} grad_norm={}", self.lr, self.grad_norm);
        s
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut m = MetricLine {
            step: 0,
            train_j: f64::NAN,
            val_nats: f64::NAN,
            val_ppl: f64::NAN,
            val_weighted: f64::NAN,
            per_level: Vec::new(),
            lr: f64::NAN,
            grad_norm: f64::NAN,
        };
        let mut seen_step = false;
        for field in line.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .with_context(|| format!("bad metrics field {field:?}"))?;
            let x = || {
                v.parse::<f64>()
                    .with_context(|| format!("bad value in {field:?}"))
            };
            match k {
                "step" => {
                    m.step = v.parse().with_context(|| format!("bad step {v:?}"))?;
                    seen_step = true;
                }
                "train_J" => m.train_j = x()?,
                "val_nats" => m.val_nats = x()?,
                "val_ppl" => m.val_ppl = x()?,
                "val_weighted" => m.val_weighted = x()?,
                "lr" => m.lr = x()?,
                "grad_norm" => m.grad_norm = x()?,
                _ => {
                    let h: usize = k
                        .strip_prefix("lvl:")
                        .and_then(|h| h.parse().ok())
                        .with_context(|| format!("unknown metrics field {k:?}"))?;
                    ensure!(
                        h == m.per_level.len(),
                        "level fields out of order in {line:?}"
                    );
                    m.per_level.push(x()?);
                }
            }
        }
        ensure!(seen_step, "metrics line without step: {line:?}");
        Ok(m)
    }
}

/// Reads every metric line of a log, skipping `#` header lines.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricLine>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(MetricLine::parse)
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out: PathBuf,
    pub height: usize,
    pub branching: usize,
    pub level_weights: Vec<f64>,
    pub params: usize,
    pub train_chunks: usize,
    pub val_chunks: usize,
    pub start_step: usize,
    /// Lines written by this invocation.
    pub lines: Vec<MetricLine>,
    pub elapsed: Duration,
}

/// Tree, tokenizer and chunked corpus for a run.
pub fn load_data(
    tree_path: &Path,
    corpus: &Path,
    seq_len: usize,
    split: f64,
    seed: u64,
) -> Result<(TokenTree, Tokenizer, Split)> {
    let tree = TokenTree::load(tree_path)
        .with_context(|| format!("loading tree {}", tree_path.display()))?;
    let tok = Tokenizer::for_tree(tree_path, &tree)?;
    let bytes = fs::read(corpus).with_context(|| format!("reading corpus {}", corpus.display()))?;
    let ids = tok
        .encode(&bytes)
        .with_context(|| format!("tokenizing {}", corpus.display()))?;
    let data = ingest(&ids, seq_len, split, seed, tok.pad())?;
    Ok((tree, tok, data))
}

/// Validation ELBO on `seqs` with a fixed draw stream.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &dyn ChildPredictor,
    tree: &TokenTree,
    sched: &NoiseSchedule,
    seqs: &[TokenId],
    seq_len: usize,
    samples: usize,
    pad: Option<TokenId>,
    level_weights: LevelWeightConfig,
    seed: u64,
) -> Result<ElboReport> {
    let opts = ElboOptions {
        samples_per_seq: samples,
        batch_rows: EVAL_BATCH_ROWS,
        pad,
        sampling: TimeSampling::Stratified,
        level_weights,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM);
    Ok(elbo_estimate(
        model, tree, sched, seqs, seq_len, &opts, &mut rng,
    )?)
}

pub fn train(cfg: &RunConfig, resume: bool, echo: bool) -> Result<TrainSummary> {
    match cfg.precision {
        Precision::F32 => run::<f32>(cfg, resume, echo),
        Precision::F64 => run::<f64>(cfg, resume, echo),
    }
}

fn header(
    cfg: &RunConfig,
    tree: &TokenTree,
    data: &Split,
    params: usize,
    weights: &[f64],
    eval_rows: usize,
) -> String {
    let mut s = String::from("# tdlm train\n");
    for line in cfg.render().lines() {
        let _ = writeln!(s, "# config {line}");
    }
    let _ = writeln!(
        s,
        "# tree H={} K={} nodes={} vocab={}",
        tree.tree_height(),
        tree.branching(),
        tree.node_count(),
        tree.vocab_size()
    );
    let _ = writeln!(
        s,
        "# data train_chunks={} val_chunks={} eval_chunks={eval_rows}",
        data.train_rows(),
        data.val_rows()
    );
    let _ = writeln!(s, "# model params={params}");
    let w: Vec<String> = weights.iter().map(|w| w.to_string()).collect();
    let _ = writeln!(s, "# level_weights {} ({})", w.join(","), cfg.level_weights);
    s
}

fn run<T: Real>(cfg: &RunConfig, resume: bool, echo: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let (tree, tok, data) = load_data(&cfg.tree, &cfg.corpus, cfg.seq_len, cfg.split, cfg.seed)?;
    let height = tree.tree_height();
    let sched = cfg.schedule(height)?;
    let weights = height_weights(height, cfg.level_weights)?;
    let mcfg = cfg.model(tree.node_count(), tree.branching());
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let ckpt = cfg.out.join("model.ckpt");
    let log_path = cfg.out.join("metrics.log");

    let (mut model, mut opt, start) = if resume && ckpt.exists() {
        let (m, step) = checkpoint::load::<T>(&ckpt)?;
        ensure!(
            m.config() == &mcfg,
            "checkpoint {} was trained with {:?}, the config asks for {:?}",
            ckpt.display(),
            m.config(),
            mcfg
        );
        let o = checkpoint::load_opt::<T>(&ckpt, m.layout(), cfg.optimizer())?;
        ensure!(
            o.steps == step,
            "optimizer state is at step {}, model at {step}",
            o.steps
        );
        (m, o, step)
    } else {
        let m = Denoiser::<T>::init(mcfg, cfg.seed)?;
        let o = AdamW::new(cfg.optimizer(), m.layout());
        (m, o, 0)
    };
    ensure!(
        start <= cfg.steps,
        "checkpoint is at step {start}, past steps={}",
        cfg.steps
    );

    let eval_rows = cfg.eval_rows.min(data.val_rows());
    let eval_set = &data.val[..eval_rows * cfg.seq_len];
    let mut log: File = if start > 0 {
        let mut f = OpenOptions::new().append(true).open(&log_path)?;
        writeln!(f, "# resume step={start}")?;
        f
    } else {
        let mut f = File::create(&log_path)?;
        f.write_all(header(cfg, &tree, &data, mcfg.param_count(), &weights, eval_rows).as_bytes())?;
        f
    };
    if echo {
        println!(
            "training H={height} K={} params={} train_chunks={} val_chunks={} from step {start}",
            tree.branching(),
            mcfg.param_count(),
            data.train_rows(),
            data.val_rows()
        );
    }

    let lrs = cfg.lr_schedule();
    let mut lines = Vec::new();
    let mut j_sum = 0.0;
    let mut j_count = 0usize;
    for step in start..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(if cfg.overfit { 1 } else { step as u64 + 1 });
        let mut tokens = Vec::with_capacity(cfg.batch * cfg.seq_len);
        for _ in 0..cfg.batch {
            tokens.extend_from_slice(data.train_row(rng.random_range(0..data.train_rows())));
        }
        let batch = corrupt(
            &tree,
            &sched,
            &tokens,
            cfg.seq_len,
            TimeSampling::Stratified,
            &mut rng,
        )?;
        let (loss, grads) = match model.loss_and_grad(&batch, &tree, &sched, &cfg.level_weights) {
            Err(ModelError::NonFinite(msg)) => bail!(
                "non-finite loss at step {step} ({msg}); the last good checkpoint is {}",
                ckpt.display()
            ),
            other => other?,
        };
        if let Some(i) = grads.iter().position(|g| !g.as_f64().is_finite()) {
            bail!(
                "non-finite gradient for parameter {i} at step {step}; the last good checkpoint is {}",
                ckpt.display()
            );
        }
        let lr = lrs.at(step);
        let grad_norm = opt.step(model.params_mut(), &grads, lr);
        j_sum += loss.objective;
        j_count += 1;

        let done = step + 1;
        if done % cfg.eval_interval == 0 || done == cfg.steps {
            let r = evaluate(
                &model,
                &tree,
                &sched,
                eval_set,
                cfg.seq_len,
                cfg.eval_samples,
                tok.pad(),
                cfg.level_weights,
                cfg.seed,
            )?;
            let line = MetricLine {
                step: done,
                train_j: j_sum / j_count as f64,
                val_nats: r.nats_per_token,
                val_ppl: r.perplexity(),
                val_weighted: r.weighted_nats,
                per_level: r.per_level,
                lr,
                grad_norm,
            };
            writeln!(log, "{}", line.render())?;
            log.flush()?;
            if echo {
                println!(
                    "{}  ({:.0}s)",
                    line.render(),
                    started.elapsed().as_secs_f64()
                );
            }
            lines.push(line);
            j_sum = 0.0;
            j_count = 0;
        }
        if done % cfg.ckpt_interval == 0 || done == cfg.steps {
            checkpoint::save_with_opt(&ckpt, &model, &opt, done)?;
        }
    }
    Ok(TrainSummary {
        out: cfg.out.clone(),
        height,
        branching: tree.branching(),
        level_weights: weights,
        params: mcfg.param_count(),
        train_chunks: data.train_rows(),
        val_chunks: data.val_rows(),
        start_step: start,
        lines,
        elapsed: started.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_lines_round_trip() {
        let m = MetricLine {
            step: 300,
            train_j: 1.25,
            val_nats: 3.0000000000000004,
            val_ppl: 3f64.exp(),
            val_weighted: 2.5,
            per_level: vec![1.0, 0.5, 1.5],
            lr: 3e-4,
            grad_norm: 0.75,
        };
        let back = MetricLine::parse(&m.render()).unwrap();
        assert_eq!(back, m);
        assert!(MetricLine::parse("train_J=1").is_err());
        assert!(MetricLine::parse("step=1 lvl:1=2").is_err());
    }
}
