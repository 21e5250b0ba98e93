//! Fixed-K vocabulary tree construction by recursive size-balanced k-means.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embed::TokenEmbeddings;
use crate::error::{Error, Result};
use crate::tree::{RawNode, RawTree, TokenId, TokenTree};

/// Rounds of capacity-constrained Lloyd iteration per split.
pub const KMEANS_ROUNDS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildConfig {
    pub branching: usize,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub seed: u64,
}

impl BuildConfig {
    pub fn new(branching: usize, ratio_min: f64, ratio_max: f64, seed: u64) -> Self {
        Self {
            branching,
            ratio_min,
            ratio_max,
            seed,
        }
    }

    fn check(&self) -> Result<()> {
        if self.branching < 2 {
            return Err(Error::InvalidConfig(format!(
                "branching factor must be >= 2, got {}",
                self.branching
            )));
        }
        if !(self.ratio_min.is_finite() && self.ratio_max.is_finite()) {
            return Err(Error::InvalidConfig("cluster ratios must be finite".into()));
        }
        if self.ratio_min > self.ratio_max {
            return Err(Error::InvalidConfig(format!(
                "ratio_min {} exceeds ratio_max {}",
                self.ratio_min, self.ratio_max
            )));
        }
        if !(self.ratio_min > 0.0 && self.ratio_min <= 1.0 && self.ratio_max >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "cluster ratios must satisfy 0 < min <= 1 <= max, got {}/{}",
                self.ratio_min, self.ratio_max
            )));
        }
        Ok(())
    }

    /// Inclusive child-size bounds `(min, max)` for a split of `n >= K` tokens.
    pub fn size_bounds(&self, n: usize) -> (usize, usize) {
        let mean = n as f64 / self.branching as f64;
        let lo = ((self.ratio_min * mean).floor() as usize).max(1);
        let hi = (self.ratio_max * mean).ceil() as usize;
        (lo, hi.max(lo))
    }
}

/// Builds a uniform-depth K-ary tree over the rows of `emb`.
///
/// Sets of at least K tokens are split into K clusters by balanced k-means;
/// smaller sets split into singletons. Leaves shallower than the deepest leaf
/// hang below a chain of single-child nodes so every token sits at height 0.
/// Node ids are assigned in breadth-first order with children in label order.
pub fn build_tree(emb: &TokenEmbeddings, cfg: &BuildConfig) -> Result<TokenTree> {
    cfg.check()?;
    let vocab = emb.vocab_size();
    if vocab == 0 {
        return Err(Error::InvalidInput("empty vocabulary".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // cluster hierarchy with children already in label order
    let mut members: Vec<Vec<TokenId>> = vec![(0..vocab as TokenId).collect()];
    let mut kids: Vec<Vec<usize>> = vec![Vec::new()];
    let mut depth: Vec<usize> = vec![0];
    let mut queue = VecDeque::from([0usize]);
    while let Some(c) = queue.pop_front() {
        let set = members[c].clone();
        if set.len() == 1 {
            continue;
        }
        let groups = if set.len() < cfg.branching {
            set.iter().map(|&t| vec![t]).collect()
        } else {
            let (lo, hi) = cfg.size_bounds(set.len());
            balanced_kmeans(emb, &set, cfg.branching, lo, hi, &mut rng)
        };
        for g in order_clusters(emb, groups) {
            let id = members.len();
            members.push(g);
            kids.push(Vec::new());
            depth.push(depth[c] + 1);
            kids[c].push(id);
            queue.push_back(id);
        }
    }

    let max_depth = *depth.iter().max().unwrap();
    let mut nodes = Vec::with_capacity(members.len());
    // (cluster id or None for padding link, depth, parent, label, token for chain)
    type Pending = (Option<usize>, usize, Option<usize>, Option<usize>, TokenId);
    let mut bfs: VecDeque<Pending> = VecDeque::from([(Some(0), 0, None, None, 0)]);
    while let Some((cluster, d, parent, label, chain_token)) = bfs.pop_front() {
        let id = nodes.len();
        let height = max_depth - d;
        let token = match cluster {
            Some(c) if kids[c].is_empty() => members[c][0],
            Some(_) => 0,
            None => chain_token,
        };
        let is_leafward = cluster.is_none_or(|c| kids[c].is_empty());
        nodes.push(RawNode {
            parent,
            label,
            height,
            token: (is_leafward && height == 0).then_some(token),
        });
        match cluster {
            Some(c) if !kids[c].is_empty() => {
                for (j, &k) in kids[c].iter().enumerate() {
                    bfs.push_back((Some(k), d + 1, Some(id), Some(j), 0));
                }
            }
            _ if height > 0 => bfs.push_back((None, d + 1, Some(id), Some(0), token)),
            _ => {}
        }
    }
    TokenTree::from_raw(RawTree {
        branching: cfg.branching,
        vocab_size: vocab,
        nodes,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroid(emb: &TokenEmbeddings, set: &[TokenId]) -> Vec<f64> {
    let mut c = vec![0.0; emb.dim()];
    for &t in set {
        for (ci, x) in c.iter_mut().zip(emb.row(t as usize)) {
            *ci += x;
        }
    }
    let n = set.len().max(1) as f64;
    c.iter_mut().for_each(|x| *x /= n);
    c
}

/// Labels clusters by ascending centroid norm, ties by smallest member id.
fn order_clusters(emb: &TokenEmbeddings, mut groups: Vec<Vec<TokenId>>) -> Vec<Vec<TokenId>> {
    for g in &mut groups {
        g.sort_unstable();
    }
    let mut keyed: Vec<(f64, TokenId, Vec<TokenId>)> = groups
        .into_iter()
        .map(|g| {
            let c = centroid(emb, &g);
            (c.iter().map(|x| x * x).sum::<f64>(), g[0], g)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, _, g)| g).collect()
}

/// k-means++ seeding. Coincident points fall back to the lowest unused member.
fn seed_centroids(
    emb: &TokenEmbeddings,
    set: &[TokenId],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let first = rng.random_range(0..set.len());
    let mut chosen = vec![first];
    let mut best: Vec<f64> = set
        .iter()
        .map(|&t| sq_dist(emb.row(t as usize), emb.row(set[first] as usize)))
        .collect();
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in best.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.unwrap()
        } else {
            (0..set.len()).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(pick);
        let row = emb.row(set[pick] as usize);
        for (b, &t) in best.iter_mut().zip(set) {
            *b = b.min(sq_dist(emb.row(t as usize), row));
        }
    }
    chosen
        .iter()
        .map(|&i| emb.row(set[i] as usize).to_vec())
        .collect()
}

/// Capacity-constrained Lloyd iterations: each round assigns points greedily in
/// order of decreasing margin (second-best minus best distance) to their
/// nearest cluster with spare capacity, then tops up clusters below `lo` by
/// taking the nearest point from clusters holding more than `lo`.
fn balanced_kmeans(
    emb: &TokenEmbeddings,
    set: &[TokenId],
    k: usize,
    lo: usize,
    hi: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<TokenId>> {
    let n = set.len();
    debug_assert!(k * lo <= n && k * hi >= n);
    let mut cents = seed_centroids(emb, set, k, rng);
    let mut assign = vec![usize::MAX; n];
    for _round in 0..KMEANS_ROUNDS {
        let dist: Vec<Vec<f64>> = set
            .iter()
            .map(|&t| {
                cents
                    .iter()
                    .map(|c| sq_dist(emb.row(t as usize), c))
                    .collect()
            })
            .collect();
        let prefs: Vec<Vec<usize>> = dist
            .iter()
            .map(|d| {
                let mut o: Vec<usize> = (0..k).collect();
                o.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
                o
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        let margin = |i: usize| dist[i][prefs[i][1]] - dist[i][prefs[i][0]];
        order.sort_by(|&a, &b| margin(b).total_cmp(&margin(a)).then(set[a].cmp(&set[b])));

        let mut next = vec![usize::MAX; n];
        let mut sizes = vec![0usize; k];
        for &i in &order {
            let c = *prefs[i].iter().find(|&&c| sizes[c] < hi).unwrap();
            next[i] = c;
            sizes[c] += 1;
        }
        while let Some(c) = (0..k).find(|&c| sizes[c] < lo) {
            let steal = (0..n)
                .filter(|&i| sizes[next[i]] > lo)
                .min_by(|&a, &b| dist[a][c].total_cmp(&dist[b][c]).then(set[a].cmp(&set[b])))
                .expect("a cluster above the minimum always exists");
            sizes[next[steal]] -= 1;
            next[steal] = c;
            sizes[c] += 1;
        }

        let converged = next == assign;
        assign = next;
        for (c, cent) in cents.iter_mut().enumerate() {
            let group: Vec<TokenId> = (0..n).filter(|&i| assign[i] == c).map(|i| set[i]).collect();
            *cent = centroid(emb, &group);
        }
        if converged {
            break;
        }
    }
    (0..k)
        .map(|c| (0..n).filter(|&i| assign[i] == c).map(|i| set[i]).collect())
        .collect()
}
