//! Closed-form forward and reverse kernels of the level-wise absorbing chain.
//!
//! Inside level `h` a node at height `h` either stays (probability
//! `α_t/α_s`) or jumps to its parent; parents are absorbing until the next
//! level begins. Matrices are sparse since every column touches at most the
//! node itself and one ancestor per crossed level.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tree::{NodeId, TokenId, TokenTree};

/// Row-major sparse square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            rows: vec![Vec::new(); n],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            rows: (0..n).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Adds `v` to entry `(r, c)`.
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        let row = &mut self.rows[r];
        match row.binary_search_by_key(&c, |e| e.0) {
            Ok(i) => row[i].1 += v,
            Err(i) => row.insert(i, (c, v)),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let row = &self.rows[r];
        row.binary_search_by_key(&c, |e| e.0)
            .map_or(0.0, |i| row[i].1)
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.rows[r]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|e| e.1).sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n];
        for row in &self.rows {
            for &(c, v) in row {
                s[c] += v;
            }
        }
        s
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                t.rows[c].push((r, v));
            }
        }
        t
    }

    /// `self · other`.
    pub fn matmul(&self, other: &SparseMatrix) -> Self {
        let mut out = Self::zeros(self.n);
        for (r, row) in self.rows.iter().enumerate() {
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            for &(k, a) in row {
                for &(c, b) in &other.rows[k] {
                    *acc.entry(c).or_default() += a * b;
                }
            }
            out.rows[r] = acc.into_iter().collect();
        }
        out
    }

    /// `self · v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(c, a)| a * v[c]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                d[r][c] = v;
            }
        }
        d
    }

    pub fn max_abs_diff(&self, other: &SparseMatrix) -> f64 {
        let mut m: f64 = 0.0;
        for r in 0..self.n {
            for &(c, v) in &self.rows[r] {
                m = m.max((v - other.get(r, c)).abs());
            }
            for &(c, v) in &other.rows[r] {
                m = m.max((v - self.get(r, c)).abs());
            }
        }
        m
    }
}

/// Probability mass over a handful of nodes, in a fixed order.
pub type NodeDist = Vec<(NodeId, f64)>;

/// Two-point forward marginal `q_t(· | x)`: `(ancestor(x,h), α)` then
/// `(ancestor(x,h+1), 1−α)` with `h = level_of(t)`.
pub fn forward_marginal(
    tree: &TokenTree,
    sched: &NoiseSchedule,
    token: TokenId,
    t: f64,
) -> [(NodeId, f64); 2] {
    let a = sched.alpha(t);
    [
        (tree.token_ancestor(token, a.level), a.alpha),
        (tree.token_ancestor(token, a.level + 1), 1.0 - a.alpha),
    ]
}

/// Draws one noisy state per token at time `t`, one uniform per position.
pub fn forward_sample<R: Rng + ?Sized>(
    tree: &TokenTree,
    sched: &NoiseSchedule,
    tokens: &[TokenId],
    t: f64,
    rng: &mut R,
) -> Vec<NodeId> {
    let a = sched.alpha(t);
    tokens
        .iter()
        .map(|&x| {
            let u: f64 = rng.random();
            let h = if u < a.alpha { a.level } else { a.level + 1 };
            tree.token_ancestor(x, h)
        })
        .collect()
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Rate matrix `Q_t` with `Q(n, n) = α′/α` and `Q(n, parent(n)) = −α′/α` for
/// every node of the active level; rows of absorbed nodes are zero.
pub fn generator(tree: &TokenTree, sched: &NoiseSchedule, t: f64) -> Result<SparseMatrix> {
    check_time(t)?;
    let a = sched.alpha(t);
    if a.alpha < sched.denom_floor() {
        return Err(Error::Singular {
            t,
            msg: format!(
                "alpha = {} is below the floor {}; use the cumulative kernel across the threshold",
                a.alpha,
                sched.denom_floor()
            ),
        });
    }
    let rate = a.dalpha / a.alpha;
    let mut q = SparseMatrix::zeros(tree.node_count());
    for &n in tree.level(a.level) {
        let p = tree.parent(n).expect("active level is below the root");
        q.add(n, n, rate);
        q.add(n, p, -rate);
    }
    Ok(q)
}

/// Time segments `(h, a, b)` of `[s, t]` split at level thresholds, in
/// increasing time order. Empty segments are skipped.
pub fn level_segments(sched: &NoiseSchedule, s: f64, t: f64) -> Vec<(usize, f64, f64)> {
    let th = sched.thresholds();
    (0..sched.height())
        .filter_map(|h| {
            let a = s.max(th[h]);
            let b = t.min(th[h + 1]);
            (a < b).then_some((h, a, b))
        })
        .collect()
}

/// Column-stochastic `P_{t|s}` with entry `(to, from)`.
pub fn cumulative(tree: &TokenTree, sched: &NoiseSchedule, s: f64, t: f64) -> Result<SparseMatrix> {
    check_time(s)?;
    check_time(t)?;
    if s > t {
        return Err(Error::Domain(format!(
            "cumulative kernel needs s <= t, got s={s}, t={t}"
        )));
    }
    let segs = level_segments(sched, s, t);
    let mut p = SparseMatrix::zeros(tree.node_count());
    for from in 0..tree.node_count() {
        // mass lives on one ancestor chain, at most one node per height
        let mut mass: Vec<(NodeId, f64)> = vec![(from, 1.0)];
        for &(h, a, b) in &segs {
            let stay = sched.alpha_in_level(h, b) / sched.alpha_in_level(h, a);
            let mut next = Vec::with_capacity(mass.len() + 1);
            for &(n, m) in &mass {
                if tree.height_of(n) == h {
                    let parent = tree.parent(n).unwrap();
                    if stay > 0.0 {
                        next.push((n, m * stay));
                    }
                    if stay < 1.0 {
                        next.push((parent, m * (1.0 - stay)));
                    }
                } else {
                    next.push((n, m));
                }
            }
            let mut merged: BTreeMap<NodeId, f64> = BTreeMap::new();
            for (n, m) in next {
                *merged.entry(n).or_default() += m;
            }
            mass = merged.into_iter().collect();
        }
        for (to, m) in mass {
            p.add(to, from, m);
        }
    }
    Ok(p)
}

/// Reverse kernel `p(z_s | z_t)` inside one level.
///
/// For an absorbed `z_t` (height `h+1`), child `c` receives
/// `p_c (α_s − α_t) / max(1 − α_t, floor)` and staying receives
/// `(1 − α_s) / max(1 − α_t, floor)`, renormalized. A state at height `h`
/// cannot move backward and returns a point mass. The returned distribution
/// lists `z_t` first, then children in label order.
pub fn reverse_posterior(
    tree: &TokenTree,
    sched: &NoiseSchedule,
    z_t: NodeId,
    s: f64,
    t: f64,
    child_probs: &[f64],
) -> Result<NodeDist> {
    check_time(s)?;
    check_time(t)?;
    if s > t {
        return Err(Error::Domain(format!(
            "reverse kernel needs s <= t, got s={s}, t={t}"
        )));
    }
    if s == t {
        return Ok(vec![(z_t, 1.0)]);
    }
    let h = sched.level_of(s);
    let th = sched.thresholds();
    if t > th[h + 1] {
        return Err(Error::Domain(format!(
            "s={s} and t={t} straddle the threshold {}; compose per-level kernels instead",
            th[h + 1]
        )));
    }
    reverse_in_level(tree, sched, h, z_t, s, t, child_probs)
}

/// Reverse kernel for an explicitly chosen level `h` with `t_h ≤ s ≤ t ≤ t_{h+1}`.
pub fn reverse_in_level(
    tree: &TokenTree,
    sched: &NoiseSchedule,
    h: usize,
    z_t: NodeId,
    s: f64,
    t: f64,
    child_probs: &[f64],
) -> Result<NodeDist> {
    let height = tree.height_of(z_t);
    if height == h || s == t {
        return Ok(vec![(z_t, 1.0)]);
    }
    if height != h + 1 {
        return Err(Error::Contract(format!(
            "node {z_t} at height {height} cannot be a state of level {h}"
        )));
    }
    let kids = tree.children(z_t);
    if child_probs.len() != tree.branching() {
        return Err(Error::Contract(format!(
            "child_probs has {} entries, branching is {}",
            child_probs.len(),
            tree.branching()
        )));
    }
    if let Some(j) = (kids.len()..child_probs.len()).find(|&j| child_probs[j] != 0.0) {
        return Err(Error::Contract(format!(
            "child_probs puts mass {} on missing slot {j} of node {z_t}",
            child_probs[j]
        )));
    }
    let a_s = sched.alpha_in_level(h, s);
    let a_t = sched.alpha_in_level(h, t);
    let denom = (1.0 - a_t).max(sched.denom_floor());
    let mut out = Vec::with_capacity(kids.len() + 1);
    out.push((z_t, (1.0 - a_s) / denom));
    for (j, &c) in kids.iter().enumerate() {
        out.push((c, child_probs[j] * (a_s - a_t) / denom));
    }
    let total: f64 = out.iter().map(|e| e.1).sum();
    if total > 0.0 {
        out.iter_mut().for_each(|e| e.1 /= total);
    }
    Ok(out)
}

/// Pushes a distribution over states at time `t` back to time `s`, splitting
/// `[s, t]` at level thresholds and applying the in-level reverse kernel on
/// each piece from the latest to the earliest. `child_probs(node, time)` must
/// return K probabilities for an absorbed node.
pub fn reverse_propagate(
    tree: &TokenTree,
    sched: &NoiseSchedule,
    dist: &[(NodeId, f64)],
    s: f64,
    t: f64,
    mut child_probs: impl FnMut(NodeId, f64) -> Vec<f64>,
) -> Result<NodeDist> {
    if s > t {
        return Err(Error::Domain(format!(
            "reverse propagation needs s <= t, got s={s}, t={t}"
        )));
    }
    let mut cur: BTreeMap<NodeId, f64> = BTreeMap::new();
    for &(n, m) in dist {
        *cur.entry(n).or_default() += m;
    }
    for (h, a, b) in level_segments(sched, s, t).into_iter().rev() {
        let mut next: BTreeMap<NodeId, f64> = BTreeMap::new();
        for (&z, &m) in &cur {
            if m == 0.0 {
                continue;
            }
            let probs = if tree.height_of(z) == h + 1 {
                child_probs(z, b)
            } else {
                vec![0.0; tree.branching()]
            };
            for (n, p) in reverse_in_level(tree, sched, h, z, a, b, &probs)? {
                *next.entry(n).or_default() += m * p;
            }
        }
        cur = next;
    }
    Ok(cur.into_iter().collect())
}

/// One-hot child distribution pointing along `token`'s path below `node`.
pub fn true_child_probs(tree: &TokenTree, token: TokenId, node: NodeId) -> Vec<f64> {
    let mut p = vec![0.0; tree.branching()];
    let h = tree.height_of(node);
    if h >= 1 && tree.token_ancestor(token, h) == node {
        p[tree.child_index(token, h).expect("h >= 1")] = 1.0;
    }
    p
}

/// Max deviation between `Σ_{z_t} q_t(z_t|x) p(z_s|z_t)` and `q_s(z_s|x)`
/// when the reverse kernel is fed the ground-truth child of `x`.
pub fn reverse_consistency_check(
    tree: &TokenTree,
    sched: &NoiseSchedule,
    token: TokenId,
    s: f64,
    t: f64,
) -> Result<f64> {
    let q_t = forward_marginal(tree, sched, token, t);
    let back = reverse_propagate(tree, sched, &q_t, s, t, |n, _| {
        true_child_probs(tree, token, n)
    })?;
    let mut target: BTreeMap<NodeId, f64> = BTreeMap::new();
    for (n, m) in forward_marginal(tree, sched, token, s) {
        *target.entry(n).or_default() += m;
    }
    let mut dev: f64 = 0.0;
    for &(n, m) in &back {
        dev = dev.max((m - target.get(&n).copied().unwrap_or(0.0)).abs());
    }
    let got: BTreeMap<NodeId, f64> = back.into_iter().collect();
    for (n, m) in target {
        dev = dev.max((m - got.get(&n).copied().unwrap_or(0.0)).abs());
    }
    Ok(dev)
}
