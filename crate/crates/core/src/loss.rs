//! Child-prediction training loss, ELBO maps and their Monte-Carlo estimate.
//!
//! A position contributes only while its state is the absorbed parent
//! `ancestor(x, h+1)` of its token; the loss is then the cross-entropy of the
//! true child label under a softmax restricted to existing child slots,
//! weighted by `1/(1 − α_t)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::forward_sample;
use crate::predictor::ChildPredictor;
use crate::schedule::{height_weights, LevelWeightConfig, NoiseSchedule};
use crate::tree::{NodeId, TokenId, TokenTree};

/// How per-row diffusion times are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeSampling {
    /// Independent `U(0,1)` per row.
    #[default]
    Iid,
    /// One shared uniform offset, row `b` gets `(b + u)/B`.
    Stratified,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedBatch {
    pub rows: usize,
    pub seq_len: usize,
    pub tokens: Vec<TokenId>,
    pub z: Vec<NodeId>,
    pub t: Vec<f64>,
    pub h: Vec<usize>,
}

impl CorruptedBatch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn check_tokens(tree: &TokenTree, tokens: &[TokenId], seq_len: usize) -> Result<usize> {
    if seq_len == 0 || !tokens.len().is_multiple_of(seq_len) {
        return Err(Error::InvalidInput(format!(
            "{} tokens do not form rows of length {seq_len}",
            tokens.len()
        )));
    }
    if let Some(&x) = tokens.iter().find(|&&x| x as usize >= tree.vocab_size()) {
        return Err(Error::InvalidInput(format!(
            "token {x} outside vocabulary of size {}",
            tree.vocab_size()
        )));
    }
    Ok(tokens.len() / seq_len)
}

/// Corrupts each row at its own time drawn per `sampling`.
pub fn corrupt<R: Rng + ?Sized>(
    tree: &TokenTree,
    sched: &NoiseSchedule,
    tokens: &[TokenId],
    seq_len: usize,
    sampling: TimeSampling,
    rng: &mut R,
) -> Result<CorruptedBatch> {
    let rows = check_tokens(tree, tokens, seq_len)?;
    let times: Vec<f64> = match sampling {
        TimeSampling::Iid => (0..rows).map(|_| rng.random::<f64>()).collect(),
        TimeSampling::Stratified => {
            let u: f64 = rng.random();
            (0..rows).map(|b| (b as f64 + u) / rows as f64).collect()
        }
    };
    corrupt_at(tree, sched, tokens, seq_len, &times, rng)
}

/// Corrupts row `b` at the given time `times[b]`.
pub fn corrupt_at<R: Rng + ?Sized>(
    tree: &TokenTree,
    sched: &NoiseSchedule,
    tokens: &[TokenId],
    seq_len: usize,
    times: &[f64],
    rng: &mut R,
) -> Result<CorruptedBatch> {
    let rows = check_tokens(tree, tokens, seq_len)?;
    if times.len() != rows {
        return Err(Error::InvalidInput(format!(
            "{} times for {rows} rows",
            times.len()
        )));
    }
    if let Some(t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    let mut z = Vec::with_capacity(tokens.len());
    for (row, &t) in tokens.chunks(seq_len).zip(times) {
        z.extend(forward_sample(tree, sched, row, t, rng));
    }
    Ok(CorruptedBatch {
        rows,
        seq_len,
        tokens: tokens.to_vec(),
        z,
        t: times.to_vec(),
        h: times.iter().map(|&t| sched.level_of(t)).collect(),
    })
}

/// Per-position outputs of the training loss, all `rows × seq_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMaps {
    pub rows: usize,
    pub seq_len: usize,
    /// Masked cross-entropy of the true child (0 where invalid).
    pub ce: Vec<f64>,
    /// Weighted training loss `ce · w_clipped · height_weight[h]`.
    pub j: Vec<f64>,
    /// Unclipped ELBO contribution `ce · w_raw`.
    pub e: Vec<f64>,
    pub valid: Vec<bool>,
}

impl LossMaps {
    /// `mean(J)` over all positions, the quantity training minimizes.
    pub fn objective(&self) -> f64 {
        self.j.iter().sum::<f64>() / self.j.len().max(1) as f64
    }
}

/// Log-sum-exp, tolerant of `-inf` entries.
fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

struct PositionTarget {
    valid: bool,
    /// number of existing child slots of the absorbing parent
    slots: usize,
    label: usize,
}

fn position_target(tree: &TokenTree, x: TokenId, z: NodeId, h: usize) -> Result<PositionTarget> {
    let lower = tree.token_ancestor(x, h);
    let upper = tree.token_ancestor(x, h + 1);
    if z != lower && z != upper {
        return Err(Error::Contract(format!(
            "state {z} is neither ancestor of token {x} at height {h} nor {}",
            h + 1
        )));
    }
    let valid = tree.height_of(z) != 0 && z == upper;
    Ok(PositionTarget {
        valid,
        slots: tree.children(upper).len(),
        label: tree.child_label(lower).expect("non-root"),
    })
}

fn check_batch(
    logits_len: usize,
    expected: usize,
    batch: &CorruptedBatch,
    sched: &NoiseSchedule,
) -> Result<()> {
    let n = batch.rows * batch.seq_len;
    if batch.tokens.len() != n
        || batch.z.len() != n
        || batch.t.len() != batch.rows
        || batch.h.len() != batch.rows
    {
        return Err(Error::InvalidInput(
            "corrupted batch fields have inconsistent sizes".into(),
        ));
    }
    if logits_len != expected {
        return Err(Error::InvalidInput(format!(
            "logits have {logits_len} entries, expected {expected}"
        )));
    }
    for (b, (&t, &h)) in batch.t.iter().zip(&batch.h).enumerate() {
        if sched.level_of(t) != h {
            return Err(Error::Contract(format!(
                "row {b}: level {h} does not match time {t} (level {})",
                sched.level_of(t)
            )));
        }
    }
    Ok(())
}

/// Loss maps for `logits` (`rows × seq_len × K`).
pub fn tdlm_loss(
    logits: &[f64],
    batch: &CorruptedBatch,
    tree: &TokenTree,
    sched: &NoiseSchedule,
    level_weights: &LevelWeightConfig,
) -> Result<LossMaps> {
    loss_impl(logits, batch, tree, sched, level_weights, false).map(|(m, _)| m)
}

/// Loss maps together with `∂ mean(J) / ∂ logits`. Slots of missing
/// children get exactly zero gradient.
pub fn tdlm_loss_grad(
    logits: &[f64],
    batch: &CorruptedBatch,
    tree: &TokenTree,
    sched: &NoiseSchedule,
    level_weights: &LevelWeightConfig,
) -> Result<(LossMaps, Vec<f64>)> {
    loss_impl(logits, batch, tree, sched, level_weights, true)
        .map(|(m, g)| (m, g.expect("gradient requested")))
}

fn loss_impl(
    logits: &[f64],
    batch: &CorruptedBatch,
    tree: &TokenTree,
    sched: &NoiseSchedule,
    level_weights: &LevelWeightConfig,
    want_grad: bool,
) -> Result<(LossMaps, Option<Vec<f64>>)> {
    let k = tree.branching();
    check_batch(logits.len(), batch.tokens.len() * k, batch, sched)?;
    let hw = height_weights(tree.tree_height(), *level_weights)?;
    let n = batch.rows * batch.seq_len;
    let mut maps = LossMaps {
        rows: batch.rows,
        seq_len: batch.seq_len,
        ce: vec![0.0; n],
        j: vec![0.0; n],
        e: vec![0.0; n],
        valid: vec![false; n],
    };
    let mut grad = want_grad.then(|| vec![0.0; logits.len()]);
    for b in 0..batch.rows {
        let h = batch.h[b];
        let w = sched.time_weight(batch.t[b]);
        let jscale = w.clipped * hw[h];
        for i in b * batch.seq_len..(b + 1) * batch.seq_len {
            let tgt = position_target(tree, batch.tokens[i], batch.z[i], h)?;
            if !tgt.valid {
                continue;
            }
            let row = &logits[i * k..i * k + tgt.slots];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("logits at position {i}")));
            }
            let lse = logsumexp(row);
            let ce = (lse - row[tgt.label]).max(0.0);
            maps.valid[i] = true;
            maps.ce[i] = ce;
            maps.e[i] = ce * w.raw;
            maps.j[i] = ce * jscale;
            if let Some(g) = grad.as_mut() {
                let scale = jscale / n as f64;
                let gr = &mut g[i * k..i * k + tgt.slots];
                for (gj, &l) in gr.iter_mut().zip(row) {
                    *gj = (l - lse).exp() * scale;
                }
                gr[tgt.label] -= scale;
            }
        }
    }
    Ok((maps, grad))
}

#[derive(Debug, Clone, Copy)]
pub struct ElboOptions {
    /// Independent `(t, z)` draws per evaluation sequence.
    pub samples_per_seq: usize,
    /// Rows per predictor call.
    pub batch_rows: usize,
    /// Token excluded from the ELBO (still present as model input).
    pub pad: Option<TokenId>,
    pub sampling: TimeSampling,
    /// Level weights for the training-objective figure reported next to the
    /// ELBO; the ELBO itself is never weighted.
    pub level_weights: LevelWeightConfig,
}

impl Default for ElboOptions {
    fn default() -> Self {
        Self {
            samples_per_seq: 1,
            batch_rows: 32,
            pad: None,
            sampling: TimeSampling::Iid,
            level_weights: LevelWeightConfig::none(),
        }
    }
}

/// Negative ELBO in nats per (non-pad) token with its level decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboReport {
    pub nats_per_token: f64,
    /// Contribution of each level; sums to `nats_per_token`.
    pub per_level: Vec<f64>,
    /// Standard error of `nats_per_token` across draws.
    pub std_err: f64,
    /// The training objective (clipped time weight and level weights) on the
    /// same draws and with the same scaling, in nats per token.
    pub weighted_nats: f64,
    pub tokens: usize,
    pub draws: usize,
}

impl ElboReport {
    pub fn perplexity(&self) -> f64 {
        self.nats_per_token.exp()
    }

    /// Machine-readable report: one `level <h> elbo_nats <v>` line per level,
    /// then `total_nats` and `ppl`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (h, v) in self.per_level.iter().enumerate() {
            s.push_str(&format!("level {h} elbo_nats {v:.6}\n"));
        }
        s.push_str(&format!("total_nats {:.6}\n", self.nats_per_token));
        s.push_str(&format!("weighted_nats {:.6}\n", self.weighted_nats));
        s.push_str(&format!("ppl {:.6}\n", self.perplexity()));
        s
    }
}

/// Monte-Carlo estimate of `Σ_h` of the per-level negative ELBOs.
///
/// Each draw takes `t ∼ U(0,1)`, corrupts the sequence and sums `E / Δ_h`
/// over its valid positions; dividing by the level length turns a draw from
/// the whole unit interval into an unbiased estimate of the sum of level
/// integrals rather than their length-weighted average.
pub fn elbo_estimate<R: Rng + ?Sized>(
    model: &dyn ChildPredictor,
    tree: &TokenTree,
    sched: &NoiseSchedule,
    seqs: &[TokenId],
    seq_len: usize,
    opts: &ElboOptions,
    rng: &mut R,
) -> Result<ElboReport> {
    let rows = check_tokens(tree, seqs, seq_len)?;
    if rows == 0 || opts.samples_per_seq == 0 {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    if model.branching() != tree.branching() {
        return Err(Error::InvalidInput(format!(
            "model head width {} differs from branching {}",
            model.branching(),
            tree.branching()
        )));
    }
    let hcount = tree.tree_height();
    let mut per_level = vec![0.0; hcount];
    let mut weighted = 0.0;
    // (nats, counted tokens) per draw
    let mut draws: Vec<(f64, f64)> = Vec::with_capacity(rows * opts.samples_per_seq);
    let order: Vec<usize> = (0..opts.samples_per_seq).flat_map(|_| 0..rows).collect();
    let chunk = opts.batch_rows.max(1);
    let total_draws = order.len();
    let offset: f64 = rng.random();
    for (ci, rows_idx) in order.chunks(chunk).enumerate() {
        let mut toks = Vec::with_capacity(rows_idx.len() * seq_len);
        for &r in rows_idx {
            toks.extend_from_slice(&seqs[r * seq_len..(r + 1) * seq_len]);
        }
        let times: Vec<f64> = match opts.sampling {
            TimeSampling::Iid => (0..rows_idx.len()).map(|_| rng.random()).collect(),
            TimeSampling::Stratified => (0..rows_idx.len())
                .map(|j| ((ci * chunk + j) as f64 + offset) / total_draws as f64)
                .collect(),
        };
        let batch = corrupt_at(tree, sched, &toks, seq_len, &times, rng)?;
        let logits = model.child_logits(&batch.z, seq_len, &batch.t)?;
        let maps = tdlm_loss(&logits, &batch, tree, sched, &opts.level_weights)?;
        for b in 0..batch.rows {
            let h = batch.h[b];
            let scale = 1.0 / sched.level_length(h);
            let mut nats = 0.0;
            let mut count = 0.0;
            for i in b * seq_len..(b + 1) * seq_len {
                if Some(batch.tokens[i]) == opts.pad {
                    continue;
                }
                count += 1.0;
                nats += maps.e[i] * scale;
                weighted += maps.j[i] * scale;
            }
            per_level[h] += nats;
            draws.push((nats, count));
        }
    }
    let tokens: f64 = draws.iter().map(|d| d.1).sum();
    if tokens == 0.0 {
        return Err(Error::InvalidInput(
            "evaluation set contains only padding".into(),
        ));
    }
    let total: f64 = draws.iter().map(|d| d.0).sum();
    let ratio = total / tokens;
    let m = draws.len() as f64;
    let mean_count = tokens / m;
    let var = draws
        .iter()
        .map(|&(n, c)| (n - ratio * c).powi(2))
        .sum::<f64>()
        / (m - 1.0).max(1.0);
    Ok(ElboReport {
        nats_per_token: ratio,
        per_level: per_level.iter().map(|v| v / tokens).collect(),
        std_err: var.sqrt() / (mean_count * m.sqrt()),
        weighted_nats: weighted / tokens,
        tokens: (tokens as usize) / opts.samples_per_seq,
        draws: draws.len(),
    })
}

/// Composite 5-point Gauss–Legendre rule on `[a, b]` with `panels` panels.
/// Interior nodes only, so integrands with removable endpoint singularities
/// are safe.
pub fn gauss_legendre(a: f64, b: f64, panels: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    const X: [f64; 5] = [
        -0.906_179_845_938_664,
        -0.538_469_310_105_683,
        0.0,
        0.538_469_310_105_683,
        0.906_179_845_938_664,
    ];
    const W: [f64; 5] = [
        0.236_926_885_056_189_1,
        0.478_628_670_499_366_5,
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
    ];
    let width = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * width;
        let mut s = 0.0;
        for (x, w) in X.iter().zip(W) {
            s += w * f(mid + 0.5 * width * x);
        }
        total += 0.5 * width * s;
    }
    total
}

/// Closed-form negative ELBO of level `h` for token `x` under a predictor
/// given as child probabilities `p(parent, t)`:
/// `∫ (1−α_t) · (−α′/(1−α_t)) · (−log p_t(x^h)) dt` over the level.
/// The weight is left unfloored here; the floor only guards sampled times.
pub fn closed_form_level_elbo(
    child_probs: &dyn Fn(NodeId, f64) -> Vec<f64>,
    tree: &TokenTree,
    sched: &NoiseSchedule,
    x: TokenId,
    h: usize,
    panels: usize,
) -> Result<f64> {
    if h >= tree.tree_height() {
        return Err(Error::Domain(format!(
            "level {h} outside 0..{}",
            tree.tree_height()
        )));
    }
    let th = sched.thresholds();
    let parent = tree.token_ancestor(x, h + 1);
    let label = tree.child_index(x, h + 1)?;
    Ok(gauss_legendre(th[h], th[h + 1], panels, |t| {
        let alpha = sched.alpha_in_level(h, t);
        let w = -sched.dalpha_in_level(h, t) / (1.0 - alpha);
        let p = child_probs(parent, t)[label];
        (1.0 - alpha) * w * -p.ln()
    }))
}

/// Neighborhood partition for joint child prediction: `seq_len / len`
/// consecutive blocks of `len` positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborhoodConfig {
    pub len: usize,
}

/// Largest `L · log2 K` for which the joint target space is materialized.
pub const JOINT_BITS_LIMIT: f64 = 20.0;

impl NeighborhoodConfig {
    pub fn new(len: usize) -> Self {
        Self { len }
    }

    /// Size `K^L` of the joint target space, after the tractability guard.
    pub fn joint_width(&self, branching: usize) -> Result<usize> {
        if self.len == 0 {
            return Err(Error::InvalidConfig(
                "neighborhood length must be >= 1".into(),
            ));
        }
        let bits = self.len as f64 * (branching as f64).log2();
        if bits > JOINT_BITS_LIMIT + 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "joint target space {branching}^{} exceeds 2^{JOINT_BITS_LIMIT}",
                self.len
            )));
        }
        Ok(branching.pow(self.len as u32))
    }

    pub fn count(&self, seq_len: usize) -> Result<usize> {
        if self.len == 0 || !seq_len.is_multiple_of(self.len) {
            return Err(Error::InvalidConfig(format!(
                "sequence length {seq_len} is not a multiple of neighborhood length {}",
                self.len
            )));
        }
        Ok(seq_len / self.len)
    }
}

fn feasible_slots(tree: &TokenTree, z: NodeId, h: usize) -> Result<Vec<usize>> {
    let height = tree.height_of(z);
    if height == h && h < tree.tree_height() {
        Ok(vec![tree.child_label(z).expect("non-root")])
    } else if height == h + 1 {
        Ok((0..tree.children(z).len()).collect())
    } else {
        Err(Error::Contract(format!(
            "node {z} at height {height} is not a state of level {h}"
        )))
    }
}

/// Mask over the `K^L` joint targets of a neighborhood: composite index
/// `Σ_ℓ c_ℓ K^{L−1−ℓ}` is feasible iff every `c_ℓ` is in the position's
/// feasible set (own label if resolved, existing child slots if absorbed).
pub fn joint_target_mask(tree: &TokenTree, z: &[NodeId], h: usize) -> Result<Vec<bool>> {
    let k = tree.branching();
    let width = NeighborhoodConfig::new(z.len()).joint_width(k)?;
    let mut mask = vec![true; width];
    for (l, &node) in z.iter().enumerate() {
        let allowed = feasible_slots(tree, node, h)?;
        let stride = k.pow((z.len() - 1 - l) as u32);
        let mut ok = vec![false; k];
        for a in allowed {
            ok[a] = true;
        }
        for (c, m) in mask.iter_mut().enumerate() {
            if !ok[(c / stride) % k] {
                *m = false;
            }
        }
    }
    Ok(mask)
}

/// Composite index of the true joint child labels of a neighborhood.
pub fn joint_target_index(tree: &TokenTree, tokens: &[TokenId], h: usize) -> usize {
    let k = tree.branching();
    tokens.iter().fold(0, |acc, &x| {
        acc * k
            + tree
                .child_label(tree.token_ancestor(x, h))
                .expect("non-root")
    })
}

/// Per-neighborhood outputs of the joint loss, all `rows × neighborhoods`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLossMaps {
    pub rows: usize,
    pub neighborhoods: usize,
    pub len: usize,
    pub ce: Vec<f64>,
    pub j: Vec<f64>,
    pub e: Vec<f64>,
    /// True when any position of the neighborhood is still absorbed.
    pub valid: Vec<bool>,
}

impl JointLossMaps {
    /// Training objective: per-token average of `J`.
    pub fn objective(&self) -> f64 {
        self.j.iter().sum::<f64>() / (self.j.len().max(1) * self.len) as f64
    }

    /// Unclipped ELBO contributions averaged over the neighborhood's tokens.
    pub fn e_per_token(&self) -> Vec<f64> {
        self.e.iter().map(|v| v / self.len as f64).collect()
    }
}

/// Joint-neighborhood loss over `rows × N × K^L` logits, and optionally its
/// gradient with respect to those logits for the per-token objective.
pub fn joint_loss(
    joint_logits: &[f64],
    batch: &CorruptedBatch,
    tree: &TokenTree,
    sched: &NoiseSchedule,
    level_weights: &LevelWeightConfig,
    cfg: &NeighborhoodConfig,
    want_grad: bool,
) -> Result<(JointLossMaps, Option<Vec<f64>>)> {
    let width = cfg.joint_width(tree.branching())?;
    let nb = cfg.count(batch.seq_len)?;
    check_batch(joint_logits.len(), batch.rows * nb * width, batch, sched)?;
    let hw = height_weights(tree.tree_height(), *level_weights)?;
    let total = batch.rows * nb;
    let mut maps = JointLossMaps {
        rows: batch.rows,
        neighborhoods: nb,
        len: cfg.len,
        ce: vec![0.0; total],
        j: vec![0.0; total],
        e: vec![0.0; total],
        valid: vec![false; total],
    };
    let mut grad = want_grad.then(|| vec![0.0; joint_logits.len()]);
    for b in 0..batch.rows {
        let h = batch.h[b];
        let w = sched.time_weight(batch.t[b]);
        let jscale = w.clipped * hw[h];
        for n in 0..nb {
            let idx = b * nb + n;
            let pos = b * batch.seq_len + n * cfg.len;
            let z = &batch.z[pos..pos + cfg.len];
            let toks = &batch.tokens[pos..pos + cfg.len];
            for (&x, &zz) in toks.iter().zip(z) {
                position_target(tree, x, zz, h)?;
            }
            if !z.iter().any(|&zz| tree.height_of(zz) == h + 1) {
                continue;
            }
            let mask = joint_target_mask(tree, z, h)?;
            let target = joint_target_index(tree, toks, h);
            let row = &joint_logits[idx * width..(idx + 1) * width];
            let masked: Vec<f64> = row
                .iter()
                .zip(&mask)
                .map(|(&v, &m)| if m { v } else { f64::NEG_INFINITY })
                .collect();
            if masked.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(Error::NonFinite(format!(
                    "joint logits of neighborhood {idx}"
                )));
            }
            let lse = logsumexp(&masked);
            let ce = (lse - masked[target]).max(0.0);
            maps.valid[idx] = true;
            maps.ce[idx] = ce;
            maps.e[idx] = ce * w.raw;
            maps.j[idx] = ce * jscale;
            if let Some(g) = grad.as_mut() {
                let scale = jscale / (total * cfg.len) as f64;
                let gr = &mut g[idx * width..(idx + 1) * width];
                for ((gj, &l), &m) in gr.iter_mut().zip(&masked).zip(&mask) {
                    if m {
                        *gj = (l - lse).exp() * scale;
                    }
                }
                gr[target] -= scale;
            }
        }
    }
    Ok((maps, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::UniformPredictor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn uniform_ce_over_four_children() {
        let tree = TokenTree::complete(4, 1).unwrap();
        let sched = NoiseSchedule::uniform(1).unwrap();
        // t = 1 absorbs everything; w_raw = 1 there
        let batch = corrupt_at(&tree, &sched, &[2], 1, &[1.0], &mut rng()).unwrap();
        assert_eq!(batch.z[0], tree.root());
        let m = tdlm_loss(&[0.0; 4], &batch, &tree, &sched, &LevelWeightConfig::none()).unwrap();
        assert!((m.ce[0] - 4f64.ln()).abs() < 1e-12);
        assert!((m.j[0] - 4f64.ln()).abs() < 1e-12);
        assert!((m.e[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unabsorbed_position_is_inactive() {
        let tree = TokenTree::complete(2, 2).unwrap();
        let sched = NoiseSchedule::uniform(2).unwrap();
        let batch = corrupt_at(&tree, &sched, &[1, 2, 3], 3, &[0.0], &mut rng()).unwrap();
        let m = tdlm_loss(&[0.3; 6], &batch, &tree, &sched, &LevelWeightConfig::none()).unwrap();
        assert!(m.valid.iter().all(|v| !v));
        assert!(m.j.iter().chain(&m.e).all(|&v| v == 0.0));
    }

    #[test]
    fn level_mismatch_is_contract_error() {
        let tree = TokenTree::complete(2, 2).unwrap();
        let sched = NoiseSchedule::uniform(2).unwrap();
        let mut batch = corrupt_at(&tree, &sched, &[1], 1, &[0.2], &mut rng()).unwrap();
        batch.h[0] = 1;
        assert!(matches!(
            tdlm_loss(&[0.0; 2], &batch, &tree, &sched, &LevelWeightConfig::none()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gradient_matches_softmax_and_kills_missing_slots() {
        let tree = TokenTree::complete(2, 1).unwrap();
        let sched = NoiseSchedule::uniform(1).unwrap();
        let batch = corrupt_at(&tree, &sched, &[1], 1, &[1.0], &mut rng()).unwrap();
        let (m, g) = tdlm_loss_grad(
            &[0.5, -0.5],
            &batch,
            &tree,
            &sched,
            &LevelWeightConfig::none(),
        )
        .unwrap();
        let p1 = 1.0 / (1.0 + 1f64.exp());
        assert!((m.ce[0] + p1.ln()).abs() < 1e-12);
        assert!((g[0] - (1.0 - p1)).abs() < 1e-12);
        assert!((g[1] - (p1 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn uniform_elbo_small_tree() {
        let tree = TokenTree::complete(2, 2).unwrap();
        let sched = NoiseSchedule::uniform(2).unwrap();
        let seqs: Vec<TokenId> = (0..64).map(|i| i % 4).collect();
        let opts = ElboOptions {
            samples_per_seq: 2000,
            batch_rows: 64,
            sampling: TimeSampling::Stratified,
            ..ElboOptions::default()
        };
        let r = elbo_estimate(
            &UniformPredictor { branching: 2 },
            &tree,
            &sched,
            &seqs,
            8,
            &opts,
            &mut rng(),
        )
        .unwrap();
        let want = 2.0 * 2f64.ln();
        assert!(
            (r.nats_per_token - want).abs() < 4.0 * r.std_err + 1e-3,
            "{r:?}"
        );
        let sum: f64 = r.per_level.iter().sum();
        assert!((sum - r.nats_per_token).abs() < 1e-12);
    }

    #[test]
    fn gauss_legendre_is_exact_on_polynomials() {
        let v = gauss_legendre(0.0, 2.0, 3, |x| x.powi(9) - 3.0 * x * x);
        assert!((v - (1024.0 / 10.0 - 8.0)).abs() < 1e-10);
    }

    #[test]
    fn joint_mask_examples() {
        let tree = TokenTree::complete(2, 2).unwrap();
        let parent_a = tree.token_ancestor(0, 1);
        let parent_b = tree.token_ancestor(2, 1);
        assert_eq!(
            joint_target_mask(&tree, &[parent_a, parent_b], 0).unwrap(),
            vec![true; 4]
        );
        let leaf = tree.leaf_of(3);
        let m = joint_target_mask(&tree, &[parent_a, leaf], 0).unwrap();
        assert_eq!(m.iter().filter(|&&v| v).count(), 2);
        assert_eq!(m, vec![false, true, false, true]);
        assert!(NeighborhoodConfig::new(21).joint_width(2).is_err());
        assert_eq!(NeighborhoodConfig::new(16).joint_width(2).unwrap(), 65_536);
    }
}
