//! `tdlm ablate`: branching-factor, level-weight and step-allocation grids.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use tdlm_core::LevelWeightConfig;

use crate::build_tree::{self, BuildTreeArgs};
use crate::config::RunConfig;
use crate::sample::{self, SampleArgs};
use crate::train;

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory receiving one subdirectory per run.
    #[arg(long)]
    pub out: PathBuf,
    /// Base run configuration (`key=value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Branching factors to build a tree for and train on; repeatable.
    #[arg(long = "branching")]
    pub branching: Vec<usize>,
    /// Level-weight schedules (`none`, `linear:<γ>`, `exp:<γ>`) to train with
    /// on `--tree`; repeatable.
    #[arg(long = "level-weights")]
    pub level_weights: Vec<String>,
    /// Step allocations (`a,b,...` or `balanced`) to sample `--ckpt` with; repeatable.
    #[arg(long = "alloc")]
    pub alloc: Vec<String>,
    #[arg(long)]
    pub tree: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Total reverse steps for the allocation grid.
    #[arg(long, default_value_t = 512)]
    pub sample_steps: usize,
    #[arg(long)]
    pub len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub grid: &'static str,
    pub value: String,
    pub height: usize,
    /// Final validation nats per token (training grids only).
    pub val_nats: Option<f64>,
    pub artifact: PathBuf,
}

pub fn render(rows: &[AblationRow]) -> String {
    let mut s = String::from("grid value height val_nats val_ppl artifact\n");
    for r in rows {
        let (nats, ppl) = match r.val_nats {
            Some(v) => (format!("{v:.6}"), format!("{:.4}", v.exp())),
            None => ("-".into(), "-".into()),
        };
        s.push_str(&format!(
            "{} {} {} {nats} {ppl} {}\n",
            r.grid,
            r.value,
            r.height,
            r.artifact.display()
        ));
    }
    s
}

fn label(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

fn base_config(args: &AblateArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &args.config {
        cfg.apply_file(p)?;
    }
    for kv in &args.set {
        cfg.assign(kv)?;
    }
    cfg.corpus = args.corpus.clone();
    Ok(cfg)
}

/// Runs every requested grid; returns no rows when all grids are empty.
pub fn run(args: &AblateArgs, echo: bool) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    if args.branching.is_empty() && args.level_weights.is_empty() && args.alloc.is_empty() {
        return Ok(rows);
    }
    let base = base_config(args)?;
    for &k in &args.branching {
        let dir = args.out.join(format!("branching-{k}"));
        let tree = dir.join("tree.txt");
        let mut build = BuildTreeArgs::new(args.corpus.clone(), tree.clone(), k);
        build.seed = args.seed;
        build_tree::run(&build).with_context(|| format!("building the K={k} tree"))?;
        let cfg = RunConfig {
            tree,
            out: dir.clone(),
            ..base.clone()
        };
        let s = train::train(&cfg, false, echo).with_context(|| format!("training with K={k}"))?;
        rows.push(AblationRow {
            grid: "branching",
            value: k.to_string(),
            height: s.height,
            val_nats: s.lines.last().map(|l| l.val_nats),
            artifact: dir.join("metrics.log"),
        });
    }
    if !args.level_weights.is_empty() {
        let tree = args
            .tree
            .clone()
            .context("the level-weight grid needs --tree")?;
        for spec in &args.level_weights {
            let lw = LevelWeightConfig::parse(spec)?;
            let dir = args.out.join(format!("levelweight-{}", label(spec)));
            let cfg = RunConfig {
                tree: tree.clone(),
                out: dir.clone(),
                level_weights: lw,
                ..base.clone()
            };
            let s = train::train(&cfg, false, echo)
                .with_context(|| format!("training with level weights {spec}"))?;
            rows.push(AblationRow {
                grid: "levelweight",
                value: lw.to_string(),
                height: s.height,
                val_nats: s.lines.last().map(|l| l.val_nats),
                artifact: dir.join("metrics.log"),
            });
        }
    }
    if !args.alloc.is_empty() {
        let tree = args
            .tree
            .clone()
            .context("the allocation grid needs --tree")?;
        let ckpt = args
            .ckpt
            .clone()
            .context("the allocation grid needs --ckpt")?;
        std::fs::create_dir_all(&args.out)?;
        for spec in &args.alloc {
            let trace = args.out.join(format!("alloc-{}.trace", label(spec)));
            let sargs = SampleArgs {
                ckpt: ckpt.clone(),
                tree: tree.clone(),
                len: args.len,
                steps: args.sample_steps,
                alloc: spec.clone(),
                temp: 1.0,
                seed: args.seed,
                rows: 1,
                trace_out: Some(trace.clone()),
            };
            let s =
                sample::run(&sargs).with_context(|| format!("sampling with allocation {spec}"))?;
            let counts: Vec<String> = s.allocation.iter().map(usize::to_string).collect();
            rows.push(AblationRow {
                grid: "alloc",
                value: counts.join(","),
                height: s.allocation.len(),
                val_nats: None,
                artifact: trace,
            });
        }
    }
    Ok(rows)
}
