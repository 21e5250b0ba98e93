use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdlm_cli::build_tree::{self, BuildTreeArgs, TokenizerKind};
use tdlm_cli::config::{Precision, RunConfig};
use tdlm_cli::corpus::synthetic_text;
use tdlm_cli::eval::{self, EvalArgs};
use tdlm_cli::sample::{self, SampleArgs};
use tdlm_cli::tokenizer::Tokenizer;
use tdlm_cli::train::{self, read_metrics};
use tdlm_core::TokenTree;

fn corpus(dir: &Path, bytes: usize) -> PathBuf {
    let p = dir.join("corpus.txt");
    fs::write(&p, synthetic_text(bytes, 3)).unwrap();
    p
}

fn byte_tree(dir: &Path, corpus: &Path, k: usize) -> (PathBuf, TokenTree) {
    let out = dir.join(format!("tree-{k}.txt"));
    let s = build_tree::run(&BuildTreeArgs::new(corpus.to_path_buf(), out.clone(), k)).unwrap();
    let tree = TokenTree::load(&out).unwrap();
    assert!(tree.validate().is_empty());
    assert_eq!(s.height, tree.tree_height());
    assert_eq!(s.leaves, 257);
    (out, tree)
}

fn small_config(corpus: &Path, tree: &Path, out: &Path) -> RunConfig {
    RunConfig {
        corpus: corpus.to_path_buf(),
        tree: tree.to_path_buf(),
        out: out.to_path_buf(),
        seq_len: 32,
        batch: 4,
        steps: 40,
        warmup: 4,
        lr: 1e-3,
        d: 16,
        layers: 1,
        heads: 2,
        eval_interval: 10,
        eval_rows: 8,
        eval_samples: 2,
        ckpt_interval: 20,
        ..RunConfig::default()
    }
}

#[test]
fn byte_trees_have_expected_heights() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 64 << 10);
    let (_, t16) = byte_tree(dir.path(), &c, 16);
    assert!(
        t16.tree_height() >= 2 && t16.tree_height() <= 3,
        "K=16 height {}",
        t16.tree_height()
    );
    let (_, t512) = byte_tree(dir.path(), &c, 512);
    assert_eq!(t512.tree_height(), 1);
    let (p2, t2) = byte_tree(dir.path(), &c, 2);
    assert!(
        (9..=12).contains(&t2.tree_height()),
        "K=2 height {}",
        t2.tree_height()
    );
    assert!(matches!(
        Tokenizer::for_tree(&p2, &t2).unwrap(),
        Tokenizer::Bytes
    ));
}

#[test]
fn words_tokenizer_sidecar_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 32 << 10);
    let out = dir.path().join("words.txt");
    let args = BuildTreeArgs {
        tokenizer: TokenizerKind::Words,
        vocab: Some(200),
        ..BuildTreeArgs::new(c.clone(), out.clone(), 8)
    };
    let s = build_tree::run(&args).unwrap();
    let tree = TokenTree::load(&out).unwrap();
    let tok = Tokenizer::for_tree(&out, &tree).unwrap();
    assert_eq!(tok.vocab_size(), tree.vocab_size());
    assert_eq!(s.leaves, tree.vocab_size());
    let text = fs::read_to_string(&c).unwrap();
    let ids = tok.encode(text.as_bytes()).unwrap();
    assert!(ids.iter().all(|&i| (i as usize) < tok.vocab_size()));
    // re-encoding the decoded text is stable
    let again = tok.encode(&tok.decode(&ids)).unwrap();
    assert_eq!(again, ids);
}

#[test]
fn uniform_eval_on_complete_tree_is_h_log_k() {
    let dir = tempfile::tempdir().unwrap();
    let tree = dir.path().join("c24.txt");
    let args = BuildTreeArgs {
        complete: Some("2:4".into()),
        corpus: None,
        ..BuildTreeArgs::new(PathBuf::new(), tree.clone(), 2)
    };
    assert_eq!(build_tree::run(&args).unwrap().height, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ids: Vec<String> = (0..64_000)
        .map(|_| rng.random_range(0..16u32).to_string())
        .collect();
    let c = dir.path().join("ids.txt");
    fs::write(&c, ids.join(" ")).unwrap();
    let r = eval::run(&EvalArgs {
        samples: 16,
        ..EvalArgs::uniform(tree, c, 16)
    })
    .unwrap();
    let want = 4.0 * 2f64.ln();
    assert!(
        (r.nats_per_token - want).abs() <= 3.0 * r.std_err,
        "{} vs {want}",
        r.nats_per_token
    );
    assert!((r.nats_per_token - 2.7726).abs() <= 0.02);
    assert!(eval::render(&r).contains("total_nats"));
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_log() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 48 << 10);
    let (tree, _) = byte_tree(dir.path(), &c, 16);
    // constant learning rate so the schedule does not depend on `steps`
    let base = RunConfig {
        precision: Precision::F64,
        warmup: 0,
        lr_final_ratio: 1.0,
        ..small_config(&c, &tree, &dir.path().join("full"))
    };
    let full = train::train(&base, false, false).unwrap();
    assert_eq!(full.lines.len(), 4);

    let part = RunConfig {
        out: dir.path().join("part"),
        ..base.clone()
    };
    let first = train::train(
        &RunConfig {
            steps: 20,
            ..part.clone()
        },
        false,
        false,
    )
    .unwrap();
    assert_eq!(first.lines[..], full.lines[..2]);
    let rest = train::train(&part, true, false).unwrap();
    assert_eq!(rest.start_step, 20);
    assert_eq!(rest.lines[..], full.lines[2..], "resumed lines differ");

    let logged = read_metrics(&dir.path().join("part/metrics.log")).unwrap();
    assert_eq!(logged, full.lines);

    // a different architecture cannot resume this checkpoint
    let wider = RunConfig { d: 32, ..part };
    assert!(train::train(&wider, true, false).is_err());
}

#[test]
fn overfit_mode_memorizes_one_batch() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 32 << 10);
    let (tree, _) = byte_tree(dir.path(), &c, 16);
    let cfg = RunConfig {
        overfit: true,
        steps: 150,
        lr: 3e-3,
        d: 32,
        layers: 2,
        eval_interval: 50,
        ckpt_interval: 150,
        ..small_config(&c, &tree, &dir.path().join("run"))
    };
    let s = train::train(&cfg, false, false).unwrap();
    let first = s.lines.first().unwrap().train_j;
    let last = s.lines.last().unwrap().train_j;
    assert!(last < 0.2 * first, "train J {first} -> {last}");
}

#[test]
fn sampling_writes_a_consistent_trace() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 32 << 10);
    let (tree_path, tree) = byte_tree(dir.path(), &c, 16);
    let run = dir.path().join("run");
    train::train(&small_config(&c, &tree_path, &run), false, false).unwrap();
    let trace = dir.path().join("trace.txt");
    let s = sample::run(&SampleArgs {
        ckpt: run.join("model.ckpt"),
        tree: tree_path.clone(),
        len: Some(24),
        steps: 30,
        alloc: "balanced".into(),
        temp: 1.0,
        seed: 1,
        rows: 2,
        trace_out: Some(trace.clone()),
    })
    .unwrap();
    assert_eq!(s.allocation.iter().sum::<usize>(), 30);
    assert_eq!(s.allocation.len(), tree.tree_height());
    assert_eq!(s.generation.tokens.len(), 48);
    assert_eq!(s.texts.len(), 2);
    let lines: Vec<String> = fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines.len(), s.generation.trace.len());
    let last = lines.last().unwrap();
    assert!(
        last.ends_with(&format!(
            "height_histogram 48{}",
            ",0".repeat(tree.tree_height())
        )),
        "{last}"
    );

    // the checkpoint does not fit a tree with another branching factor
    let (k2, _) = byte_tree(dir.path(), &c, 2);
    let err = eval::run(&EvalArgs {
        ckpt: Some(run.join("model.ckpt")),
        uniform: false,
        ..EvalArgs::uniform(k2, c, 32)
    });
    assert!(err.is_err());
}

fn tdlm(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tdlm"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn verify_command_reports_checks() {
    let out = tdlm(&["verify", "--suite", "params"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(
        text.lines()
            .any(|l| l.starts_with("CHECK params_tree_head_exact")),
        "{text}"
    );
    assert!(!text.contains("FAIL"));
    assert!(!tdlm(&["verify", "--suite", "nope"]).status.success());
}

#[test]
fn empty_ablation_grid_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablate");
    let o = tdlm(&[
        "ablate",
        "--corpus",
        "missing.txt",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(String::from_utf8(o.stdout)
        .unwrap()
        .contains("nothing to run"));
    assert!(!out.exists());
}

#[test]
fn gen_corpus_and_build_tree_from_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.txt");
    let t = dir.path().join("t.txt");
    assert!(tdlm(&[
        "gen-corpus",
        "--out",
        c.to_str().unwrap(),
        "--bytes",
        "20000"
    ])
    .status
    .success());
    assert!(fs::metadata(&c).unwrap().len() >= 20000);
    let o = tdlm(&[
        "build-tree",
        "--corpus",
        c.to_str().unwrap(),
        "--out",
        t.to_str().unwrap(),
        "--branching",
        "16",
    ]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("leaves 257"), "{text}");
    assert!(Tokenizer::sidecar_path(&t).exists());
    let o = tdlm(&["train", "--set", "nonsense=1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8(o.stderr).unwrap().starts_with("error:"));
}
