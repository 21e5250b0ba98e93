use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdlm_core::loss::{
    corrupt, corrupt_at, elbo_estimate, joint_loss, joint_target_mask, tdlm_loss, ElboOptions,
    NeighborhoodConfig, TimeSampling,
};
use tdlm_core::predictor::{PathOracle, UniformPredictor};
use tdlm_core::{LevelWeightConfig, NoiseSchedule, TokenTree};

#[test]
fn uniform_elbo_equals_height_times_log_branching() {
    let tree = TokenTree::complete(2, 4).unwrap();
    let sched = NoiseSchedule::uniform(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seq_len = 16;
    let rows = 1000;
    let seqs: Vec<u32> = (0..rows * seq_len)
        .map(|_| rng.random_range(0..16))
        .collect();
    let opts = ElboOptions {
        samples_per_seq: 63,
        batch_rows: 512,
        ..ElboOptions::default()
    };
    let r = elbo_estimate(
        &UniformPredictor { branching: 2 },
        &tree,
        &sched,
        &seqs,
        seq_len,
        &opts,
        &mut rng,
    )
    .unwrap();
    assert!(r.draws * seq_len >= 1_000_000);
    let want = 4.0 * 2f64.ln();
    assert!(
        (r.nats_per_token - want).abs() <= 3.0 * r.std_err,
        "{} vs {want} (se {})",
        r.nats_per_token,
        r.std_err
    );
    assert!((r.nats_per_token - 2.77259).abs() <= 0.01);
    let by_level: f64 = r.per_level.iter().sum();
    assert!((by_level - r.nats_per_token).abs() < 1e-9);
}

#[test]
fn oracle_elbo_is_zero_and_pad_is_excluded() {
    let tree = TokenTree::complete(3, 2).unwrap();
    let sched = NoiseSchedule::uniform(2).unwrap();
    let target = vec![0u32, 4, 8, 2];
    let oracle = PathOracle::new(&tree, target.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let opts = ElboOptions {
        samples_per_seq: 50,
        ..ElboOptions::default()
    };
    let r = elbo_estimate(&oracle, &tree, &sched, &target, 4, &opts, &mut rng).unwrap();
    assert!(r.nats_per_token.abs() < 1e-9);

    let padded = ElboOptions {
        pad: Some(8),
        ..opts
    };
    let r = elbo_estimate(
        &UniformPredictor { branching: 3 },
        &tree,
        &sched,
        &target,
        4,
        &padded,
        &mut rng,
    )
    .unwrap();
    assert_eq!(r.tokens, 3);
}

#[test]
fn e_is_invariant_to_clip_cap() {
    let tree = TokenTree::complete(4, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tokens: Vec<u32> = (0..8 * 12).map(|_| rng.random_range(0..64)).collect();
    let s10 = NoiseSchedule::uniform(3).unwrap();
    let s2 = NoiseSchedule::uniform(3)
        .unwrap()
        .with_clip_cap(2.0)
        .unwrap();
    let batch = corrupt(&tree, &s10, &tokens, 12, TimeSampling::Stratified, &mut rng).unwrap();
    let logits: Vec<f64> = (0..tokens.len() * 4)
        .map(|_| rng.random::<f64>() * 4.0 - 2.0)
        .collect();
    let lw = LevelWeightConfig::exponential(0.5);
    let a = tdlm_loss(&logits, &batch, &tree, &s10, &lw).unwrap();
    let b = tdlm_loss(&logits, &batch, &tree, &s2, &lw).unwrap();
    assert_eq!(a.e, b.e);
    assert!(a.ce.iter().all(|&c| c >= 0.0));
    for i in 0..a.j.len() {
        assert!(b.j[i] <= a.j[i] + 1e-15);
        if !a.valid[i] {
            assert_eq!((a.j[i], a.e[i]), (0.0, 0.0));
        }
    }
}

#[test]
fn factorized_joint_logits_reproduce_marginal_losses() {
    let tree = TokenTree::complete(3, 3).unwrap();
    let sched = NoiseSchedule::uniform(3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (rows, seq_len, len, k) = (6, 12, 3, 3);
    let tokens: Vec<u32> = (0..rows * seq_len)
        .map(|_| rng.random_range(0..27))
        .collect();
    let times: Vec<f64> = (0..rows).map(|_| rng.random_range(0.02..0.98)).collect();
    let batch = corrupt_at(&tree, &sched, &tokens, seq_len, &times, &mut rng).unwrap();
    let logits: Vec<f64> = (0..tokens.len() * k)
        .map(|_| rng.random::<f64>() * 6.0 - 3.0)
        .collect();
    let lw = LevelWeightConfig::none();
    let marg = tdlm_loss(&logits, &batch, &tree, &sched, &lw).unwrap();

    // joint logit of a composite = sum of per-position logits; resolved
    // positions are masked to their own label so their term cancels
    let cfg = NeighborhoodConfig::new(len);
    let width = k.pow(len as u32);
    let nb = seq_len / len;
    let mut joint = vec![0.0; rows * nb * width];
    for b in 0..rows {
        for n in 0..nb {
            for c in 0..width {
                let mut v = 0.0;
                for l in 0..len {
                    let slot = (c / k.pow((len - 1 - l) as u32)) % k;
                    let pos = b * seq_len + n * len + l;
                    if tree.height_of(batch.z[pos]) == batch.h[b] + 1 {
                        v += logits[pos * k + slot];
                    }
                }
                joint[(b * nb + n) * width + c] = v;
            }
        }
    }
    let (jm, _) = joint_loss(&joint, &batch, &tree, &sched, &lw, &cfg, false).unwrap();
    for b in 0..rows {
        for n in 0..nb {
            let start = b * seq_len + n * len;
            let sum: f64 = marg.ce[start..start + len].iter().sum();
            assert!(
                (jm.ce[b * nb + n] - sum).abs() <= 1e-10,
                "row {b} block {n}"
            );
            let esum: f64 = marg.e[start..start + len].iter().sum();
            assert!((jm.e_per_token()[b * nb + n] - esum / len as f64).abs() <= 1e-10);
        }
    }

    // L = 1 reduces to the per-position loss
    let (single, _) = joint_loss(
        &logits,
        &batch,
        &tree,
        &sched,
        &lw,
        &NeighborhoodConfig::new(1),
        false,
    )
    .unwrap();
    for i in 0..marg.ce.len() {
        assert!((single.ce[i] - marg.ce[i]).abs() <= 1e-12);
    }
}

#[test]
fn joint_mask_sizes() {
    let tree = TokenTree::complete(2, 16).unwrap();
    let z = vec![tree.root(); 1];
    assert_eq!(joint_target_mask(&tree, &z, 15).unwrap().len(), 2);
    let small = TokenTree::complete(2, 1).unwrap();
    let root = small.root();
    let z16 = vec![root; 16];
    let mask = joint_target_mask(&small, &z16, 0).unwrap();
    assert_eq!(mask.len(), 65_536);
    assert!(mask.iter().all(|&m| m));
    let mixed = [root, small.children(root)[1]];
    let m = joint_target_mask(&small, &mixed, 0).unwrap();
    assert_eq!(m.iter().filter(|&&v| v).count(), 2);
    assert!(joint_target_mask(&small, &[root; 21], 0).is_err());
}

#[test]
fn weighted_figure_matches_elbo_without_clipping_or_level_weights() {
    let tree = TokenTree::complete(3, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let seqs: Vec<u32> = (0..40 * 8).map(|_| rng.random_range(0..27)).collect();
    let uniform = UniformPredictor { branching: 3 };
    let opts = ElboOptions {
        samples_per_seq: 20,
        ..ElboOptions::default()
    };
    // the raw weight never exceeds 1/denom_floor = 1e4
    let loose = NoiseSchedule::uniform(3)
        .unwrap()
        .with_clip_cap(1e5)
        .unwrap();
    let r = elbo_estimate(
        &uniform,
        &tree,
        &loose,
        &seqs,
        8,
        &opts,
        &mut ChaCha8Rng::seed_from_u64(3),
    )
    .unwrap();
    assert!((r.weighted_nats - r.nats_per_token).abs() < 1e-12);

    let tight = NoiseSchedule::uniform(3)
        .unwrap()
        .with_clip_cap(2.0)
        .unwrap();
    let weighted = ElboOptions {
        level_weights: LevelWeightConfig::linear(0.5),
        ..opts
    };
    let c = elbo_estimate(
        &uniform,
        &tree,
        &tight,
        &seqs,
        8,
        &weighted,
        &mut ChaCha8Rng::seed_from_u64(3),
    )
    .unwrap();
    // same draws, so the ELBO is unchanged while the objective moves
    assert_eq!(c.nats_per_token, r.nats_per_token);
    assert!(c.weighted_nats < c.nats_per_token);
}
