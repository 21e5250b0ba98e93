//! `tdlm build-tree`: PPMI embeddings → balanced k-means tree → validate → save.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use tdlm_core::{build_tree, ppmi_embeddings, BuildConfig, TokenEmbeddings, TokenTree};

use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TokenizerKind {
    Bytes,
    Words,
    Ids,
}

#[derive(Debug, Clone, Args)]
pub struct BuildTreeArgs {
    /// Training text the embeddings are computed from.
    #[arg(long, required_unless_present = "complete")]
    pub corpus: Option<PathBuf>,
    /// Tree file to write; the tokenizer goes to `<out>.tok`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub branching: usize,
    #[arg(long, default_value_t = 0.8)]
    pub ratio_min: f64,
    #[arg(long, default_value_t = 1.2)]
    pub ratio_max: f64,
    /// Embedding width (capped at the vocabulary size).
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// PPMI context window on each side.
    #[arg(long, default_value_t = 2)]
    pub window: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = TokenizerKind::Bytes)]
    pub tokenizer: TokenizerKind,
    /// Vocabulary size for the words and ids tokenizers.
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Use these embeddings (`TDLM-EMB v1` format) instead of PPMI.
    #[arg(long)]
    pub emb_file: Option<PathBuf>,
    /// Also write the embeddings that were used.
    #[arg(long)]
    pub emb_out: Option<PathBuf>,
    /// Write the complete K-ary tree of height H over ids instead, as `K:H`.
    #[arg(long, value_name = "K:H", conflicts_with_all = ["corpus", "emb_file"])]
    pub complete: Option<String>,
}

impl BuildTreeArgs {
    pub fn new(corpus: PathBuf, out: PathBuf, branching: usize) -> Self {
        Self {
            corpus: Some(corpus),
            out,
            branching,
            ratio_min: 0.8,
            ratio_max: 1.2,
            dim: 16,
            window: 2,
            seed: 0,
            tokenizer: TokenizerKind::Bytes,
            vocab: None,
            emb_file: None,
            emb_out: None,
            complete: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildSummary {
    pub height: usize,
    pub nodes: usize,
    pub leaves: usize,
    /// Node counts by number of children.
    pub histogram: Vec<usize>,
}

impl BuildSummary {
    pub fn render(&self) -> String {
        let hist: Vec<String> = self
            .histogram
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, n)| format!("{c}:{n}"))
            .collect();
        format!(
            "height {}\nnodes {}\nleaves {}\nbranching_histogram {}\n",
            self.height,
            self.nodes,
            self.leaves,
            hist.join(" ")
        )
    }
}

fn parse_complete(spec: &str) -> Result<(usize, usize)> {
    let (k, h) = spec
        .split_once(':')
        .with_context(|| format!("--complete expects K:H, got {spec:?}"))?;
    Ok((
        k.trim().parse().context("bad K")?,
        h.trim().parse().context("bad H")?,
    ))
}

pub fn run(args: &BuildTreeArgs) -> Result<BuildSummary> {
    let (tree, tok) = if let Some(spec) = &args.complete {
        let (k, h) = parse_complete(spec)?;
        let tree = TokenTree::complete(k, h)?;
        let vocab = tree.vocab_size();
        (tree, Tokenizer::Ids { vocab })
    } else {
        let corpus = args.corpus.as_ref().context("--corpus is required")?;
        let bytes =
            fs::read(corpus).with_context(|| format!("reading corpus {}", corpus.display()))?;
        let tok = match args.tokenizer {
            TokenizerKind::Bytes => Tokenizer::Bytes,
            TokenizerKind::Words => {
                let vocab = args.vocab.context("--tokenizer words needs --vocab")?;
                Tokenizer::words_from_text(&String::from_utf8_lossy(&bytes), vocab)?
            }
            TokenizerKind::Ids => Tokenizer::Ids {
                vocab: args.vocab.context("--tokenizer ids needs --vocab")?,
            },
        };
        let ids = tok.encode(&bytes)?;
        ensure!(!ids.is_empty(), "corpus {} is empty", corpus.display());
        let vocab = tok.vocab_size();
        let emb = match &args.emb_file {
            Some(p) => {
                let e = TokenEmbeddings::load(p)
                    .with_context(|| format!("loading embeddings {}", p.display()))?;
                ensure!(
                    e.vocab_size() == vocab,
                    "embedding file has {} rows, the tokenizer has {vocab} ids",
                    e.vocab_size()
                );
                e
            }
            None => ppmi_embeddings(&ids, vocab, args.dim.min(vocab), args.window, args.seed)?,
        };
        if let Some(p) = &args.emb_out {
            emb.save(p)
                .with_context(|| format!("writing {}", p.display()))?;
        }
        let cfg = BuildConfig::new(args.branching, args.ratio_min, args.ratio_max, args.seed);
        (build_tree(&emb, &cfg)?, tok)
    };
    let violations = tree.validate();
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        bail!("built tree is invalid:\n{}", list.join("\n"));
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    tree.save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    tok.save(&Tokenizer::sidecar_path(&args.out))?;
    Ok(BuildSummary {
        height: tree.tree_height(),
        nodes: tree.node_count(),
        leaves: tree.vocab_size(),
        histogram: tree.branching_histogram(),
    })
}
