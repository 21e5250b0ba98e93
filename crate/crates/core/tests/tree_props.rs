use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdlm_core::{build_tree, BuildConfig, TokenEmbeddings, TokenTree};

fn random_embeddings(vocab: usize, dim: usize, seed: u64) -> TokenEmbeddings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // a few duplicated rows keep the coincident-point paths exercised
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(vocab);
    for i in 0..vocab {
        if i > 0 && rng.random::<f64>() < 0.05 {
            let j = rng.random_range(0..i);
            rows.push(rows[j].clone());
        } else {
            rows.push((0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect());
        }
    }
    TokenEmbeddings::from_rows(rows).unwrap()
}

fn leaf_counts(tree: &TokenTree) -> Vec<usize> {
    let mut count = vec![0usize; tree.node_count()];
    for &leaf in tree.level(0) {
        let mut n = leaf;
        loop {
            count[n] += 1;
            match tree.parent(n) {
                Some(p) => n = p,
                None => break,
            }
        }
    }
    count
}

/// Checks every split against the size rule, independently of the builder.
fn split_violations(tree: &TokenTree, cfg: &BuildConfig) -> Vec<String> {
    let count = leaf_counts(tree);
    let k = tree.branching();
    let mut bad = Vec::new();
    for n in 0..tree.node_count() {
        let kids = tree.children(n);
        if kids.is_empty() {
            continue;
        }
        let total = count[n];
        if total < k {
            if kids.len() != total || kids.iter().any(|&c| count[c] != 1) {
                bad.push(format!(
                    "node {n}: {total} tokens not split into singletons"
                ));
            }
        } else if kids.len() == 1 {
            bad.push(format!("node {n}: {total} tokens under a single child"));
        } else {
            let lo = ((cfg.ratio_min * total as f64 / k as f64).floor() as usize).max(1);
            let hi = (cfg.ratio_max * total as f64 / k as f64).ceil() as usize;
            for &c in kids {
                if count[c] < lo || count[c] > hi {
                    bad.push(format!(
                        "node {n}: child size {} outside [{lo}, {hi}]",
                        count[c]
                    ));
                }
            }
        }
    }
    bad
}

#[test]
fn two_hundred_random_builds_are_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let vocab = if case % 10 == 0 {
            rng.random_range(1000..=2000)
        } else {
            rng.random_range(1..=400)
        };
        let k = rng.random_range(2..=64);
        let dim = rng.random_range(1..=6);
        let emb = random_embeddings(vocab, dim, case);
        let cfg = BuildConfig::new(k, 0.8, 1.2, case);
        let tree = build_tree(&emb, &cfg).unwrap();
        assert!(
            tree.validate().is_empty(),
            "case {case}: {:?}",
            tree.validate()
        );
        assert_eq!(tree.vocab_size(), vocab);
        assert!(tree.level(0).iter().all(|&l| tree.height_of(l) == 0));
        let bad = split_violations(&tree, &cfg);
        assert!(bad.is_empty(), "case {case} (V={vocab}, K={k}): {bad:?}");
    }
}

#[test]
fn build_is_deterministic_under_seed() {
    let emb = random_embeddings(300, 4, 7);
    let cfg = BuildConfig::new(5, 0.8, 1.2, 11);
    let a = build_tree(&emb, &cfg).unwrap();
    let b = build_tree(&emb, &cfg).unwrap();
    assert_eq!(a.to_raw(), b.to_raw());
}

fn arb_tree() -> impl Strategy<Value = TokenTree> {
    (1usize..120, 2usize..9, 1usize..4, any::<u64>()).prop_map(|(v, k, d, seed)| {
        build_tree(
            &random_embeddings(v, d, seed),
            &BuildConfig::new(k, 0.8, 1.2, seed),
        )
        .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ancestor_composes(tree in arb_tree()) {
        let height = tree.tree_height();
        for x in 0..tree.vocab_size() as u32 {
            let leaf = tree.leaf_of(x);
            for lo in 0..=height {
                let a = tree.ancestor(leaf, lo).unwrap();
                for hi in lo..=height {
                    prop_assert_eq!(tree.ancestor(a, hi).unwrap(), tree.ancestor(leaf, hi).unwrap());
                }
            }
            prop_assert_eq!(tree.ancestor(leaf, height).unwrap(), tree.root());
        }
    }

    #[test]
    fn offspring_and_ancestor_agree(tree in arb_tree()) {
        let height = tree.tree_height();
        for n in 0..tree.node_count() {
            let hn = tree.height_of(n);
            if hn < height {
                let p = tree.parent(n).unwrap();
                prop_assert!(tree.offspring(p, hn).unwrap().contains(&n));
                // own height means siblings including itself
                prop_assert_eq!(tree.offspring(n, hn).unwrap(), tree.offspring(p, hn).unwrap());
            }
            for h in 0..hn {
                let off = tree.offspring(n, h).unwrap();
                for &m in tree.level(h) {
                    let inside = tree.ancestor(m, hn).unwrap() == n;
                    prop_assert_eq!(off.contains(&m), inside);
                }
            }
        }
    }

    #[test]
    fn level_map_chain_sends_leaves_to_root(tree in arb_tree()) {
        let height = tree.tree_height();
        for &leaf in tree.level(0) {
            let mut mass = vec![0.0; tree.level(0).len()];
            mass[tree.level_index(leaf)] = 1.0;
            for h in 0..height {
                let map = tree.level_map(h).unwrap();
                mass = map.apply(&mass);
            }
            prop_assert_eq!(mass, vec![1.0]);
        }
        for h in 0..height {
            let map = tree.level_map(h).unwrap().to_dense();
            for c in 0..tree.level(h).len() {
                prop_assert_eq!(map.iter().map(|r| r[c] as usize).sum::<usize>(), 1);
            }
        }
    }

    #[test]
    fn child_index_round_trips(tree in arb_tree()) {
        for x in 0..tree.vocab_size() as u32 {
            for h in 1..=tree.tree_height() {
                let j = tree.child_index(x, h).unwrap();
                let u = tree.token_ancestor(x, h);
                prop_assert_eq!(tree.children(u)[j], tree.token_ancestor(x, h - 1));
                prop_assert!(tree.child_mask(u).unwrap()[j]);
            }
        }
    }

    #[test]
    fn file_round_trip(tree in arb_tree()) {
        let mut buf = Vec::new();
        tree.write_to(&mut buf).unwrap();
        let back = TokenTree::read_from(&buf[..]).unwrap();
        prop_assert_eq!(back.to_raw(), tree.to_raw());
    }
}
