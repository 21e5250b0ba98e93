//! Coarse-to-fine generation: every position starts at the root and is
//! refined one level at a time by the in-level reverse kernel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::reverse_in_level;
use crate::predictor::ChildPredictor;
use crate::schedule::NoiseSchedule;
use crate::tree::{NodeId, TokenId, TokenTree};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AllocationPolicy {
    /// Equal split, remainder to the lowest levels.
    Balanced,
    /// Explicit counts ordered from the top level `H−1` down to level 0.
    Custom(Vec<usize>),
}

impl std::str::FromStr for AllocationPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "balanced" {
            return Ok(Self::Balanced);
        }
        s.split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Self::Custom)
            .map_err(|_| {
                Error::InvalidConfig(format!(
                    "allocation {s:?} is neither 'balanced' nor a,b,..."
                ))
            })
    }
}

/// Per-level step counts, ordered from level `H−1` down to level 0.
pub fn allocate_steps(
    total: usize,
    height: usize,
    policy: &AllocationPolicy,
) -> Result<Vec<usize>> {
    if height == 0 {
        return Err(Error::InvalidConfig(
            "tree of height 0 has no levels to sample".into(),
        ));
    }
    if total < height {
        return Err(Error::InvalidConfig(format!(
            "{total} steps cannot cover {height} levels"
        )));
    }
    match policy {
        AllocationPolicy::Balanced => {
            let base = total / height;
            let rem = total % height;
            // the last `rem` entries are the lowest levels
            Ok((0..height)
                .map(|i| base + usize::from(i >= height - rem))
                .collect())
        }
        AllocationPolicy::Custom(counts) => {
            if counts.len() != height {
                return Err(Error::InvalidConfig(format!(
                    "allocation has {} entries for {height} levels",
                    counts.len()
                )));
            }
            if counts.contains(&0) {
                return Err(Error::InvalidConfig(
                    "every level needs at least one step".into(),
                ));
            }
            let sum: usize = counts.iter().sum();
            if sum != total {
                return Err(Error::InvalidConfig(format!(
                    "allocation sums to {sum}, expected {total}"
                )));
            }
            Ok(counts.clone())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    /// Steps per level, from level `H−1` down to 0.
    pub allocation: Vec<usize>,
    pub seq_len: usize,
    pub rows: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl GenerationConfig {
    pub fn total_steps(&self) -> usize {
        self.allocation.iter().sum()
    }
}

/// State of the whole batch after one reverse step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    pub t: f64,
    /// Position counts per height `0..=H`, summed over rows.
    pub height_histogram: Vec<usize>,
    /// `(flat position, new node)` for every position that moved this step.
    pub resolutions: Vec<(usize, NodeId)>,
}

impl TraceStep {
    /// `step <k> t <t> height_histogram <c0>,...,<cH>`
    pub fn render(&self) -> String {
        let hist: Vec<String> = self.height_histogram.iter().map(usize::to_string).collect();
        format!(
            "step {} t {:.6} height_histogram {}",
            self.step,
            self.t,
            hist.join(",")
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// `rows × seq_len` tokens.
    pub tokens: Vec<TokenId>,
    /// Record per step, starting with the all-root state at `t = 1`.
    pub trace: Vec<TraceStep>,
}

fn histogram(tree: &TokenTree, z: &[NodeId]) -> Vec<usize> {
    let mut hist = vec![0; tree.tree_height() + 1];
    for &n in z {
        hist[tree.height_of(n)] += 1;
    }
    hist
}

/// Tempered softmax over the existing children of `node`, padded to K.
fn child_distribution(
    tree: &TokenTree,
    node: NodeId,
    logits: &[f64],
    temperature: f64,
) -> Vec<f64> {
    let slots = tree.children(node).len();
    let scaled: Vec<f64> = logits[..slots].iter().map(|l| l / temperature).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (pj, &l) in p.iter_mut().zip(&scaled) {
        *pj = (l - m).exp();
        total += *pj;
    }
    p[..slots].iter_mut().for_each(|v| *v /= total);
    p
}

fn argmax_child(tree: &TokenTree, node: NodeId, logits: &[f64]) -> NodeId {
    let kids = tree.children(node);
    let best = (0..kids.len())
        .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
        .expect("internal node");
    kids[best]
}

/// Generates `cfg.rows` sequences, recording the per-step trace.
pub fn generate(
    model: &dyn ChildPredictor,
    tree: &TokenTree,
    sched: &NoiseSchedule,
    cfg: &GenerationConfig,
) -> Result<Generation> {
    let height = tree.tree_height();
    if model.branching() != tree.branching() {
        return Err(Error::InvalidInput(format!(
            "model head width {} differs from branching {}",
            model.branching(),
            tree.branching()
        )));
    }
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {}",
            cfg.temperature
        )));
    }
    if cfg.seq_len == 0 || cfg.rows == 0 {
        return Err(Error::InvalidConfig("nothing to generate".into()));
    }
    allocate_steps(
        cfg.total_steps(),
        height,
        &AllocationPolicy::Custom(cfg.allocation.clone()),
    )?;

    let k = tree.branching();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = vec![tree.root(); cfg.rows * cfg.seq_len];
    let mut trace = vec![TraceStep {
        step: 0,
        t: 1.0,
        height_histogram: histogram(tree, &z),
        resolutions: Vec::new(),
    }];
    let th = sched.thresholds();
    for (i, &steps) in cfg.allocation.iter().enumerate() {
        let h = height - 1 - i;
        let (lo, hi) = (th[h], th[h + 1]);
        let grid = |j: usize| {
            if j == steps {
                lo
            } else {
                hi - (hi - lo) * j as f64 / steps as f64
            }
        };
        for j in 0..steps {
            let (t, s) = (grid(j), grid(j + 1));
            let logits = model.child_logits(&z, cfg.seq_len, &vec![t; cfg.rows])?;
            if let Some(bad) = logits.iter().position(|v| !v.is_finite()) {
                let pos = bad / k;
                return Err(Error::NonFinite(format!(
                    "logit slot {} at row {} position {} (state {}, t={t})",
                    bad % k,
                    pos / cfg.seq_len,
                    pos % cfg.seq_len,
                    z[pos]
                )));
            }
            let mut moved = Vec::new();
            for (p, zp) in z.iter_mut().enumerate() {
                if tree.height_of(*zp) != h + 1 {
                    continue;
                }
                let row = &logits[p * k..(p + 1) * k];
                let probs = child_distribution(tree, *zp, row, cfg.temperature);
                let post = reverse_in_level(tree, sched, h, *zp, s, t, &probs)?;
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = post.last().expect("non-empty").0;
                for &(n, m) in &post {
                    acc += m;
                    if u < acc {
                        pick = n;
                        break;
                    }
                }
                if j + 1 == steps && tree.height_of(pick) == h + 1 {
                    pick = argmax_child(tree, *zp, row);
                }
                if pick != *zp {
                    *zp = pick;
                    moved.push((p, pick));
                }
            }
            trace.push(TraceStep {
                step: trace.len(),
                t: s,
                height_histogram: histogram(tree, &z),
                resolutions: moved,
            });
        }
    }
    let tokens = z
        .iter()
        .map(|&n| tree.token_of(n).expect("all positions resolved to leaves"))
        .collect();
    Ok(Generation { tokens, trace })
}
