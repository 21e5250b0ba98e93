//! Brute-force verifiers for the closed-form kernels and ELBO.
//!
//! Each verifier rebuilds what it checks from the tree structure and the
//! schedule functions alone: rate matrices are assembled here, marginals come
//! from simulation or ODE integration, and the ELBO from direct enumeration of
//! the generic CTMC bound.

use std::f64::consts::E;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::build::{build_tree, BuildConfig};
use crate::embed::TokenEmbeddings;
use crate::error::{Error, Result};
use crate::kernels::{
    cumulative, forward_marginal, reverse_consistency_check, reverse_in_level, reverse_posterior,
};
use crate::loss::{closed_form_level_elbo, gauss_legendre};
use crate::schedule::NoiseSchedule;
use crate::tree::{NodeId, RawTree, TokenId, TokenTree};

/// One measured quantity against a hard-coded threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when `measured <= threshold`.
    pub fn at_most(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            threshold,
            pass: measured <= threshold,
        }
    }

    /// `CHECK <name> <measured> <threshold> <PASS|FAIL>`
    pub fn render(&self) -> String {
        format!(
            "CHECK {} {:.6e} {:.6e} {}",
            self.name,
            self.measured,
            self.threshold,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn extend(&mut self, other: Report) {
        self.checks.extend(other.checks);
    }

    pub fn render(&self) -> String {
        self.checks.iter().map(|c| c.render() + "\n").collect()
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Child-probability function `p(parent, t)` over K slots.
pub type ChildProbs<'a> = dyn Fn(NodeId, f64) -> Vec<f64> + 'a;

/// Predictor with per-slot logits `a + b·t`, softmaxed over existing children.
#[derive(Debug, Clone)]
pub struct RandomPlugin {
    branching: usize,
    slots: Vec<usize>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl RandomPlugin {
    pub fn new(tree: &TokenTree, rng: &mut impl Rng) -> Self {
        let k = tree.branching();
        let n = tree.node_count();
        Self {
            branching: k,
            slots: (0..n).map(|u| tree.children(u).len()).collect(),
            a: (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect(),
            b: (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect(),
        }
    }

    pub fn probs(&self, node: NodeId, t: f64) -> Vec<f64> {
        let k = self.branching;
        let slots = self.slots[node];
        let mut p = vec![0.0; k];
        let logits: Vec<f64> = (0..slots)
            .map(|j| self.a[node * k + j] + self.b[node * k + j] * t)
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..slots {
            p[j] = (logits[j] - m).exp() / z;
        }
        p
    }

    /// Largest `|∂p/∂t|` bound: `max |b| · 2` covers every softmax slot.
    pub fn slope_bound(&self) -> f64 {
        2.0 * self.b.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// The six-token tree built from 1-D points {0,1,2,10,11,12} with K = 2.
pub fn six_token_tree() -> TokenTree {
    let emb = TokenEmbeddings::from_rows(
        [0.0, 1.0, 2.0, 10.0, 11.0, 12.0]
            .iter()
            .map(|&x| vec![x])
            .collect(),
    )
    .expect("finite");
    build_tree(&emb, &BuildConfig::new(2, 0.8, 1.2, 0)).expect("valid config")
}

/// An irregular 16-leaf tree (K = 3, with padding chains) under 40 nodes.
pub fn sixteen_leaf_tree() -> TokenTree {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let rows = (0..16)
        .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let emb = TokenEmbeddings::from_rows(rows).expect("finite");
    build_tree(&emb, &BuildConfig::new(3, 0.8, 1.2, 5)).expect("valid config")
}

fn schedule_for(tree: &TokenTree) -> Result<NoiseSchedule> {
    NoiseSchedule::uniform(tree.tree_height())
}

/// Random `(s, t)` with `t_h ≤ s ≤ t ≤ t_{h+1} − margin·Δ` in a random level.
fn in_level_pair(sched: &NoiseSchedule, rng: &mut impl Rng, margin: f64) -> (usize, f64, f64) {
    let h = rng.random_range(0..sched.height());
    let th = sched.thresholds();
    let hi = th[h + 1] - margin * sched.level_length(h);
    let a = rng.random_range(th[h]..hi);
    let b = rng.random_range(th[h]..hi);
    (h, a.min(b), a.max(b))
}

// ---------------------------------------------------------------- Kolmogorov

/// `dst = Q_tᵀ · p` for the in-level rate matrix rebuilt from the tree.
fn apply_generator_transpose(
    tree: &TokenTree,
    sched: &NoiseSchedule,
    h: usize,
    t: f64,
    p: &[f64],
    dst: &mut [f64],
) {
    let n = tree.node_count();
    dst.iter_mut().for_each(|v| *v = 0.0);
    let rate = sched.dalpha_in_level(h, t) / sched.alpha_in_level(h, t);
    for &k in tree.level(h) {
        let parent = tree.parent(k).expect("below root");
        for j in 0..n {
            let pk = p[k * n + j];
            if pk != 0.0 {
                dst[k * n + j] += rate * pk;
                dst[parent * n + j] -= rate * pk;
            }
        }
    }
}

/// RK4 for `dP/dτ = g′(τ) Q_{g(τ)}ᵀ P` from τ=0 to 1 with `steps` steps,
/// where `g` maps `[0,1]` onto `[s,t]`.
fn rk4_transition(
    tree: &TokenTree,
    sched: &NoiseSchedule,
    h: usize,
    steps: usize,
    g: &dyn Fn(f64) -> (f64, f64),
) -> Vec<f64> {
    let n = tree.node_count();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        p[i * n + i] = 1.0;
    }
    let dt = 1.0 / steps as f64;
    let mut k1 = vec![0.0; n * n];
    let mut k2 = vec![0.0; n * n];
    let mut k3 = vec![0.0; n * n];
    let mut k4 = vec![0.0; n * n];
    let mut tmp = vec![0.0; n * n];
    let deriv = |tau: f64, y: &[f64], out: &mut [f64]| {
        let (t, dg) = g(tau);
        apply_generator_transpose(tree, sched, h, t, y, out);
        out.iter_mut().for_each(|v| *v *= dg);
    };
    for step in 0..steps {
        let tau = step as f64 * dt;
        deriv(tau, &p, &mut k1);
        for i in 0..n * n {
            tmp[i] = p[i] + 0.5 * dt * k1[i];
        }
        deriv(tau + 0.5 * dt, &tmp, &mut k2);
        for i in 0..n * n {
            tmp[i] = p[i] + 0.5 * dt * k2[i];
        }
        deriv(tau + 0.5 * dt, &tmp, &mut k3);
        for i in 0..n * n {
            tmp[i] = p[i] + dt * k3[i];
        }
        deriv(tau + dt, &tmp, &mut k4);
        for i in 0..n * n {
            p[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    p
}

fn dense_error(tree: &TokenTree, p: &[f64], closed: &crate::kernels::SparseMatrix) -> f64 {
    let n = tree.node_count();
    let mut err: f64 = 0.0;
    for r in 0..n {
        for c in 0..n {
            err = err.max((p[r * n + c] - closed.get(r, c)).abs());
        }
    }
    err
}

/// RK4 step in physical time used by the equivalence check.
pub const RK4_STEP: f64 = 1e-4;

/// Closed-form `P_{t|s}` against RK4 integration of the forward equation.
pub fn verify_cumulative_vs_ode(
    tree: &TokenTree,
    sched: &NoiseSchedule,
    trials: usize,
    seed: u64,
) -> Result<Report> {
    if tree.node_count() > 40 {
        return Err(Error::InvalidInput(format!(
            "ODE oracle is limited to 40 nodes, tree has {}",
            tree.node_count()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (h, s, t) = in_level_pair(sched, &mut rng, 0.02);
        let steps = (((t - s) / RK4_STEP).ceil() as usize).max(1);
        let p = rk4_transition(tree, sched, h, steps, &|tau| (s + (t - s) * tau, t - s));
        worst = worst.max(dense_error(tree, &p, &cumulative(tree, sched, s, t)?));
    }
    let mut report = Report::default();
    report
        .checks
        .push(Check::at_most("kolmogorov_rk4_max_error", worst, 1e-6));

    let th = sched.thresholds();
    let same = rk4_transition(tree, sched, 0, 10, &|_| (0.3 * th[1], 0.0));
    report.checks.push(Check::at_most(
        "kolmogorov_s_eq_t_error",
        dense_error(
            tree,
            &same,
            &cumulative(tree, sched, 0.3 * th[1], 0.3 * th[1])?,
        ),
        0.0,
    ));

    // Linear α makes the exact solution linear in t, which RK4 integrates
    // without truncation error. Reparametrize time by
    // t = s + (t−s)·(e^τ − 1)/(e − 1) so the solution is transcendental in τ
    // and the 4th order shows.
    let (s, t) = (
        th[0] + 0.05 * sched.level_length(0),
        th[0] + 0.8 * sched.level_length(0),
    );
    let closed = cumulative(tree, sched, s, t)?;
    let g = |tau: f64| {
        (
            s + (t - s) * tau.exp_m1() / (E - 1.0),
            (t - s) * tau.exp() / (E - 1.0),
        )
    };
    let e1 = dense_error(tree, &rk4_transition(tree, sched, 0, 16, &g), &closed);
    let e2 = dense_error(tree, &rk4_transition(tree, sched, 0, 32, &g), &closed);
    let order = (e1 / e2).log2();
    report.checks.push(Check::at_most(
        "kolmogorov_rk4_order_deviation",
        (order - 4.0).abs(),
        0.5,
    ));
    Ok(report)
}

/// Chapman–Kolmogorov composition and the marginal-column identity.
pub fn verify_chapman_kolmogorov(
    tree: &TokenTree,
    sched: &NoiseSchedule,
    trials: usize,
    seed: u64,
) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ck: f64 = 0.0;
    let mut col: f64 = 0.0;
    for _ in 0..trials {
        let mut v = [
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
        ];
        v.sort_by(f64::total_cmp);
        let [s, u, t] = v;
        let direct = cumulative(tree, sched, s, t)?;
        let composed = cumulative(tree, sched, u, t)?.matmul(&cumulative(tree, sched, s, u)?);
        ck = ck.max(direct.max_abs_diff(&composed));

        let p0t = cumulative(tree, sched, 0.0, t)?;
        let x = rng.random_range(0..tree.vocab_size()) as TokenId;
        let leaf = tree.leaf_of(x);
        let marg = forward_marginal(tree, sched, x, t);
        let mut expect = vec![0.0; tree.node_count()];
        for (n, m) in marg {
            expect[n] += m;
        }
        for (n, e) in expect.iter().enumerate() {
            col = col.max((p0t.get(n, leaf) - e).abs());
        }
    }
    Ok(Report {
        checks: vec![
            Check::at_most("chapman_kolmogorov_max_error", ck, 1e-12),
            Check::at_most("marginal_column_max_error", col, 1e-12),
        ],
    })
}

// ------------------------------------------------------------- Monte Carlo

/// Time in level `h` where `−log α` reaches `hazard`, by bisection.
fn jump_time(sched: &NoiseSchedule, h: usize, hazard: f64) -> f64 {
    let th = sched.thresholds();
    let target = (-hazard).exp();
    let (mut lo, mut hi) = (th[h], th[h + 1]);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sched.alpha_in_level(h, mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Frequencies of simulated forward paths against the two-point marginals.
/// Returns the largest absolute z-score over probe times.
pub fn verify_marginals_mc(
    tree: &TokenTree,
    sched: &NoiseSchedule,
    trajectories: usize,
    probes: &[f64],
    seed: u64,
) -> Result<Report> {
    let height = sched.height();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // count of trajectories found at the upper node of the probe's level
    let mut upper = vec![0usize; probes.len()];
    let mut off_path = 0usize;
    for _ in 0..trajectories {
        let x = rng.random_range(0..tree.vocab_size()) as TokenId;
        // jump times out of each height, via exponential clocks on −log α
        let jumps: Vec<f64> = (0..height)
            .map(|h| {
                let e: f64 = -(1.0 - rng.random::<f64>()).ln();
                jump_time(sched, h, e)
            })
            .collect();
        for (pi, &t) in probes.iter().enumerate() {
            let mut node = tree.leaf_of(x);
            for (h, &tau) in jumps.iter().enumerate() {
                if tau <= t {
                    node = tree.parent(node).unwrap_or(node);
                } else {
                    let _ = h;
                    break;
                }
            }
            let h = sched.level_of(t);
            if node == tree.token_ancestor(x, h + 1) {
                upper[pi] += 1;
            } else if node != tree.token_ancestor(x, h) {
                off_path += 1;
            }
        }
    }
    let mut worst: f64 = 0.0;
    let mut degenerate: f64 = 0.0;
    for (pi, &t) in probes.iter().enumerate() {
        let p = 1.0 - sched.alpha(t).alpha;
        let f = upper[pi] as f64 / trajectories as f64;
        if p == 0.0 || p == 1.0 {
            degenerate = degenerate.max((f - p).abs());
        } else {
            let sigma = (p * (1.0 - p) / trajectories as f64).sqrt();
            worst = worst.max((f - p).abs() / sigma);
        }
    }
    Ok(Report {
        checks: vec![
            Check::at_most("mc_marginal_max_zscore", worst, 4.0),
            Check::at_most("mc_degenerate_probe_error", degenerate, 0.0),
            Check::at_most("mc_states_off_level", off_path as f64, 0.0),
        ],
    })
}

// -------------------------------------------------------------- reverse

/// The literal Bayes quotient `q_{t|s}(z_t|z_s) q_s(z_s|x_θ) / q_t(z_t|x_θ)`
/// over every state of heights `h` and `h+1`.
fn bayes_quotient(
    tree: &TokenTree,
    sched: &NoiseSchedule,
    h: usize,
    z_t: NodeId,
    s: f64,
    t: f64,
    probs: &[f64],
) -> Vec<(NodeId, f64)> {
    let a_s = sched.alpha_in_level(h, s);
    let a_t = sched.alpha_in_level(h, t);
    let u = if tree.height_of(z_t) == h + 1 {
        z_t
    } else {
        tree.parent(z_t).unwrap()
    };
    // q_r(z | x_θ) = Σ_c p_c (α_r [z = c] + (1 − α_r) [z = u])
    let q = |alpha: f64, z: NodeId| -> f64 {
        tree.children(u)
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                probs[j] * (alpha * f64::from(z == c) + (1.0 - alpha) * f64::from(z == u))
            })
            .sum()
    };
    // forward kernel from z_s at time s to z_t at time t
    let fwd = |from: NodeId, to: NodeId| -> f64 {
        if tree.height_of(from) == h {
            let stay = a_t / a_s;
            stay * f64::from(to == from) + (1.0 - stay) * f64::from(Some(to) == tree.parent(from))
        } else {
            f64::from(to == from)
        }
    };
    let denom = q(a_t, z_t);
    tree.level(h)
        .iter()
        .chain(tree.level(h + 1))
        .map(|&zs| (zs, fwd(zs, z_t) * q(a_s, zs) / denom))
        .collect()
}

fn random_probs(tree: &TokenTree, node: NodeId, rng: &mut impl Rng) -> Vec<f64> {
    let mut p = vec![0.0; tree.branching()];
    let kids = tree.children(node).len();
    for v in p.iter_mut().take(kids) {
        *v = -(1.0 - rng.random::<f64>()).ln();
    }
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

/// Reverse kernel against the enumerated Bayes quotient, plus round-trip
/// consistency of the composed reverse kernels across thresholds.
pub fn verify_reverse_bayes(
    tree: &TokenTree,
    sched: &NoiseSchedule,
    cases: usize,
    seed: u64,
) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bayes: f64 = 0.0;
    for _ in 0..cases {
        // floor inactive: keep 1 − α_t ≥ 1e-2
        let (h, s, t) = loop {
            let (h, s, t) = in_level_pair(sched, &mut rng, 0.0);
            if s < t && 1.0 - sched.alpha_in_level(h, t) >= 1e-2 {
                break (h, s, t);
            }
        };
        let upper = tree.level(h + 1);
        let z_t = upper[rng.random_range(0..upper.len())];
        let probs = random_probs(tree, z_t, &mut rng);
        let post = reverse_posterior(tree, sched, z_t, s, t, &probs)?;
        let lit = bayes_quotient(tree, sched, h, z_t, s, t, &probs);
        for (n, v) in lit {
            let got = post.iter().find(|e| e.0 == n).map_or(0.0, |e| e.1);
            bayes = bayes.max((got - v).abs());
        }
    }

    let mut in_level: f64 = 0.0;
    let mut crossing: f64 = 0.0;
    let th = sched.thresholds();
    for _ in 0..cases {
        let x = rng.random_range(0..tree.vocab_size()) as TokenId;
        let (_, s, t) = in_level_pair(sched, &mut rng, 0.0);
        in_level = in_level.max(reverse_consistency_check(tree, sched, x, s, t)?);
        if sched.height() >= 3 {
            let h = rng.random_range(0..sched.height() - 2);
            let s = rng.random_range(th[h]..th[h + 1]);
            let t = rng.random_range(th[h + 2]..th[h + 3]);
            crossing = crossing.max(reverse_consistency_check(tree, sched, x, s, t)?);
        }
    }
    Ok(Report {
        checks: vec![
            Check::at_most("reverse_bayes_max_error", bayes, 1e-12),
            Check::at_most("reverse_consistency_in_level", in_level, 1e-12),
            Check::at_most("reverse_consistency_two_thresholds", crossing, 1e-12),
        ],
    })
}

// ------------------------------------------------------------------ ELBO

/// Negative in-level ELBO from the generic CTMC bound, and the part of it
/// that does not depend on the predictor (zero in expectation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenericElbo {
    pub nats: f64,
    pub remainder: f64,
}

/// Generic continuous-time bound for level `h` of token `x`, evaluated by
/// enumerating `z_t` over heights `h, h+1`, `z_s` over the same states, and
/// composite Gauss–Legendre quadrature in `t` with `panels` panels.
pub fn generic_elbo_oracle(
    child_probs: &ChildProbs<'_>,
    tree: &TokenTree,
    sched: &NoiseSchedule,
    x: TokenId,
    h: usize,
    panels: usize,
) -> Result<GenericElbo> {
    if panels < 10 {
        return Err(Error::InvalidConfig(format!(
            "quadrature needs >= 10 panels, got {panels}"
        )));
    }
    if h >= sched.height() {
        return Err(Error::Domain(format!(
            "level {h} outside 0..{}",
            sched.height()
        )));
    }
    let th = sched.thresholds();
    let x_lo = tree.token_ancestor(x, h);
    let states: Vec<NodeId> = tree
        .level(h)
        .iter()
        .chain(tree.level(h + 1))
        .copied()
        .collect();
    // Q_t(a, b): rate from a to b
    let rate = |t: f64, a: NodeId, b: NodeId| -> f64 {
        if tree.height_of(a) != h {
            return 0.0;
        }
        let r = sched.dalpha_in_level(h, t) / sched.alpha_in_level(h, t);
        if a == b {
            r
        } else if Some(b) == tree.parent(a) {
            -r
        } else {
            0.0
        }
    };
    // q_t(z | n) for a height-h node n
    let q_node = |alpha: f64, z: NodeId, n: NodeId| -> f64 {
        alpha * f64::from(z == n) + (1.0 - alpha) * f64::from(Some(z) == tree.parent(n))
    };
    // (full bracket, θ-independent second term), both weighted by q_t(z_t|x^h)
    let bracket = |t: f64| -> (f64, f64) {
        let alpha = sched.alpha_in_level(h, t);
        let mut total = 0.0;
        let mut rem = 0.0;
        for &zt in &states {
            let w = q_node(alpha, zt, x_lo);
            if w == 0.0 {
                continue;
            }
            let u = if tree.height_of(zt) == h + 1 {
                zt
            } else {
                tree.parent(zt).unwrap()
            };
            let probs = child_probs(u, t);
            let q_theta = |z: NodeId| -> f64 {
                tree.children(u)
                    .iter()
                    .enumerate()
                    .map(|(j, &c)| probs[j] * q_node(alpha, z, c))
                    .sum()
            };
            let qt_theta = q_theta(zt);
            let mut first = 0.0;
            for &zs in &states {
                if zs == zt {
                    continue;
                }
                let r = rate(t, zs, zt);
                let qs = q_node(alpha, zs, x_lo);
                if r == 0.0 || qs == 0.0 {
                    continue;
                }
                first += r * (qs / w) * ((q_theta(zs) * w) / (qt_theta * qs)).ln();
            }
            let second: f64 = -states
                .iter()
                .map(|&z| rate(t, z, zt) * q_theta(z) / qt_theta)
                .sum::<f64>();
            total += w * (first + second);
            rem += w * second;
        }
        (total, rem)
    };
    let full = gauss_legendre(th[h], th[h + 1], panels, |t| bracket(t).0);
    let remainder = gauss_legendre(th[h], th[h + 1], panels, |t| bracket(t).1);
    Ok(GenericElbo {
        nats: -full,
        remainder,
    })
}

/// Panels per level for the ELBO quadrature.
pub const ELBO_PANELS: usize = 1000;

/// Closed-form level ELBO against the enumerated generic bound for every
/// token, level and random predictor; also checks the relabeling symmetry.
pub fn verify_elbo_closed_form(
    tree: &TokenTree,
    sched: &NoiseSchedule,
    predictors: usize,
    seed: u64,
) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut diff: f64 = 0.0;
    let mut remainder: f64 = 0.0;
    let mut convergence: f64 = 0.0;
    for trial in 0..predictors {
        let plugin = RandomPlugin::new(tree, &mut rng);
        let probs = |u: NodeId, t: f64| plugin.probs(u, t);
        for x in 0..tree.vocab_size() as TokenId {
            for h in 0..sched.height() {
                let generic = generic_elbo_oracle(&probs, tree, sched, x, h, ELBO_PANELS)?;
                let closed = closed_form_level_elbo(&probs, tree, sched, x, h, ELBO_PANELS)?;
                diff = diff.max((generic.nats - closed).abs());
                remainder = remainder.max(generic.remainder.abs());
                if trial == 0 && x == 0 {
                    let coarse = generic_elbo_oracle(&probs, tree, sched, x, h, ELBO_PANELS / 2)?;
                    convergence = convergence.max((coarse.nats - generic.nats).abs());
                }
            }
        }
    }

    // ground-truth predictor: both sides vanish
    let mut truth: f64 = 0.0;
    for x in 0..tree.vocab_size() as TokenId {
        let probs = |u: NodeId, _t: f64| crate::kernels::true_child_probs(tree, x, u);
        for h in 0..sched.height() {
            let generic = generic_elbo_oracle(&probs, tree, sched, x, h, 50)?;
            let closed = closed_form_level_elbo(&probs, tree, sched, x, h, 50)?;
            truth = truth.max(generic.nats.abs()).max(closed.abs());
        }
    }

    let relabel = relabel_invariance(tree, sched, &mut rng)?;
    Ok(Report {
        checks: vec![
            Check::at_most("elbo_closed_form_vs_enumeration", diff, 1e-6),
            Check::at_most("elbo_theta_independent_remainder", remainder, 1e-8),
            Check::at_most("elbo_quadrature_convergence", convergence, 1e-8),
            Check::at_most("elbo_ground_truth_predictor", truth, 1e-12),
            Check::at_most("elbo_relabel_invariance", relabel, 1e-10),
        ],
    })
}

/// Reverses the child labels under every internal node, permutes the
/// predictor's slots the same way, and compares total ELBOs.
fn relabel_invariance(tree: &TokenTree, sched: &NoiseSchedule, rng: &mut impl Rng) -> Result<f64> {
    let plugin = RandomPlugin::new(tree, rng);
    let mut raw: RawTree = tree.to_raw();
    for node in raw.nodes.iter_mut() {
        if let (Some(p), Some(l)) = (node.parent, node.label) {
            node.label = Some(tree.children(p).len() - 1 - l);
        }
    }
    let flipped = TokenTree::from_raw(raw)?;
    let probs = |u: NodeId, t: f64| plugin.probs(u, t);
    let flipped_probs = |u: NodeId, t: f64| {
        let p = plugin.probs(u, t);
        let c = tree.children(u).len();
        let mut q = vec![0.0; p.len()];
        for j in 0..c {
            q[c - 1 - j] = p[j];
        }
        q
    };
    let mut a = 0.0;
    let mut b = 0.0;
    for x in 0..tree.vocab_size() as TokenId {
        for h in 0..sched.height() {
            a += closed_form_level_elbo(&probs, tree, sched, x, h, 200)?;
            b += closed_form_level_elbo(&flipped_probs, &flipped, sched, x, h, 200)?;
        }
    }
    Ok((a - b).abs())
}

// ------------------------------------------------------- backward rates

/// Terminal child distribution of the reverse chain started at `u` at the
/// top of level `h`, propagated exactly through the reverse kernel on a grid
/// of `steps` steps with predictions taken at each step's upper time.
fn reverse_grid_distribution(
    tree: &TokenTree,
    sched: &NoiseSchedule,
    plugin: &RandomPlugin,
    h: usize,
    u: NodeId,
    steps: usize,
) -> Result<Vec<f64>> {
    let th = sched.thresholds();
    let kids = tree.children(u);
    let mut stay = 1.0;
    let mut out = vec![0.0; kids.len()];
    for j in 0..steps {
        let t = th[h + 1] - sched.level_length(h) * j as f64 / steps as f64;
        let s = if j + 1 == steps {
            th[h]
        } else {
            th[h + 1] - sched.level_length(h) * (j + 1) as f64 / steps as f64
        };
        let post = reverse_in_level(tree, sched, h, u, s, t, &plugin.probs(u, t))?;
        for &(n, m) in &post {
            if n == u {
                continue;
            }
            let idx = kids.iter().position(|&c| c == n).expect("child");
            out[idx] += stay * m;
        }
        stay *= post[0].1;
    }
    Ok(out)
}

/// Euler simulation of the backward rate matrix against exact propagation
/// through the reverse kernel.
pub fn verify_backward_rate(
    tree: &TokenTree,
    sched: &NoiseSchedule,
    trajectories: usize,
    dt: f64,
    seed: u64,
) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plugin = RandomPlugin::new(tree, &mut rng);
    // the lowest level node with the most children
    let h = 0;
    let u = *tree
        .level(h + 1)
        .iter()
        .max_by_key(|&&n| (tree.children(n).len(), std::cmp::Reverse(n)))
        .expect("non-empty level");
    let kids = tree.children(u).to_vec();
    let th = sched.thresholds();
    let delta = sched.level_length(h);
    let steps = (delta / dt).round() as usize;
    let dt = delta / steps as f64;

    // Euler simulation of the backward rates rebuilt from Q_t and q_t(·|x_θ):
    // Q̂(u → c) = Q_t(c, u) q_t(c|x_θ) / q_t(u|x_θ), evaluated at each step's
    // upper time
    let simulate =
        |probs: &dyn Fn(f64) -> Vec<f64>, n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
            let mut counts = vec![0usize; kids.len() + 1];
            for _ in 0..n {
                let mut landed = kids.len();
                for j in 0..steps {
                    let t = th[h + 1] - dt * j as f64;
                    let alpha = sched.alpha_in_level(h, t);
                    let q_forward = -sched.dalpha_in_level(h, t) / alpha;
                    let p = probs(t);
                    let q_u: f64 = p.iter().map(|pc| pc * (1.0 - alpha)).sum();
                    let u01: f64 = rng.random();
                    let mut acc = 0.0;
                    for (c, pc) in p.iter().enumerate().take(kids.len()) {
                        acc += q_forward * pc * alpha / q_u * dt;
                        if u01 < acc {
                            landed = c;
                            break;
                        }
                    }
                    if landed < kids.len() {
                        break;
                    }
                }
                counts[landed] += 1;
            }
            counts
        };
    let counts = simulate(&|t| plugin.probs(u, t), trajectories, &mut rng);

    let reference = reverse_grid_distribution(tree, sched, &plugin, h, u, 200_000)?;
    let at = |n: usize| reverse_grid_distribution(tree, sched, &plugin, h, u, n);
    let coarse = at(steps)?;
    let half = at(2 * steps)?;
    let bias = |d: &[f64]| {
        d.iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    let bias_dt = bias(&coarse);
    let bias_half = bias(&half);
    // a jump inside a step of width dt sees predictions at most dt stale
    let bias_bound = plugin.slope_bound() * dt;

    let mut worst: f64 = 0.0;
    for (c, &p) in reference.iter().enumerate() {
        let f = counts[c] as f64 / trajectories as f64;
        let sigma = (p * (1.0 - p) / trajectories as f64).sqrt().max(1e-12);
        // excess beyond the first-order discretization bias, in σ units
        worst = worst.max(((f - p).abs() - bias_bound).max(0.0) / sigma);
    }

    // one-hot predictor: every trajectory ends on the predicted child
    let target = kids.len() - 1;
    let one_hot = |_: f64| {
        let mut p = vec![0.0; tree.branching()];
        p[target] = 1.0;
        p
    };
    let hits = simulate(&one_hot, 1000, &mut rng);

    Ok(Report {
        checks: vec![
            Check::at_most("backward_rate_excess_zscore", worst, 4.0),
            Check::at_most("backward_rate_unresolved", counts[kids.len()] as f64, 0.0),
            Check::at_most("backward_rate_bias", bias_dt, bias_bound),
            Check::at_most(
                "backward_rate_bias_halving",
                (bias_dt / bias_half.max(1e-300) - 2.0).abs(),
                0.5,
            ),
            Check::at_most(
                "backward_rate_one_hot_miss",
                (1000 - hits[target]) as f64,
                0.0,
            ),
        ],
    })
}

// ------------------------------------------------------- accounting

/// Head parameters and 2-byte logits footprint of a flat-vocabulary head
/// versus a K-wide child head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadAccounting {
    pub flat_params: u64,
    pub tree_params: u64,
    pub flat_logits_gib: f64,
    pub tree_logits_gib: f64,
}

pub fn head_accounting(
    d: u64,
    vocab: u64,
    branching: u64,
    batch: u64,
    seq_len: u64,
) -> HeadAccounting {
    const GIB: f64 = (1u64 << 30) as f64;
    HeadAccounting {
        flat_params: d * vocab,
        tree_params: d * branching,
        flat_logits_gib: (batch * seq_len * vocab * 2) as f64 / GIB,
        tree_logits_gib: (batch * seq_len * branching * 2) as f64 / GIB,
    }
}

pub fn verify_param_accounting() -> Report {
    let a = head_accounting(768, 50_000, 512, 512, 512);
    let same = head_accounting(768, 50_000, 50_000, 512, 512);
    Report {
        checks: vec![
            Check::at_most(
                "params_flat_head_vs_38.4M",
                (a.flat_params as f64 - 38.4e6).abs(),
                0.0,
            ),
            Check::at_most(
                "params_tree_head_vs_0.393M",
                (a.tree_params as f64 - 0.393e6).abs(),
                0.05e6,
            ),
            Check::at_most(
                "params_tree_head_exact",
                (a.tree_params as f64 - 393_216.0).abs(),
                0.0,
            ),
            Check::at_most(
                "logits_flat_gib_vs_24.4",
                (a.flat_logits_gib - 24.4).abs(),
                0.05,
            ),
            Check::at_most(
                "logits_tree_gib_vs_0.25",
                (a.tree_logits_gib - 0.25).abs(),
                0.0,
            ),
            Check::at_most(
                "params_reduction_vs_100x",
                (a.flat_params as f64 / a.tree_params as f64 - 100.0).abs(),
                5.0,
            ),
            Check::at_most(
                "params_k_eq_v_ratio",
                (same.flat_params as f64 / same.tree_params as f64 - 1.0).abs(),
                0.0,
            ),
        ],
    }
}

// ------------------------------------------------------------ suites

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Kolmogorov,
    MonteCarlo,
    Reverse,
    Elbo,
    Backward,
    Params,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "kolmogorov" => Self::Kolmogorov,
            "mc" => Self::MonteCarlo,
            "reverse" => Self::Reverse,
            "elbo" => Self::Elbo,
            "backward" => Self::Backward,
            "params" => Self::Params,
            "all" => Self::All,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown verification suite {other:?}"
                )))
            }
        })
    }
}

/// Runs a suite on the built-in fixture trees.
pub fn run_suite(suite: Suite, seed: u64) -> Result<Report> {
    let six = six_token_tree();
    let sixteen = sixteen_leaf_tree();
    let s6 = schedule_for(&six)?;
    let s16 = schedule_for(&sixteen)?;
    let mut report = Report::default();
    let want = |s: Suite| suite == s || suite == Suite::All;
    if want(Suite::Kolmogorov) {
        report.extend(verify_cumulative_vs_ode(&sixteen, &s16, 50, seed)?);
        report.extend(verify_chapman_kolmogorov(&sixteen, &s16, 100, seed + 1)?);
    }
    if want(Suite::MonteCarlo) {
        let th = s16.thresholds();
        let probes = [0.1, 0.3, 0.5, 0.7, 0.95, th[1]];
        report.extend(verify_marginals_mc(
            &sixteen,
            &s16,
            100_000,
            &probes,
            seed + 2,
        )?);
    }
    if want(Suite::Reverse) {
        report.extend(verify_reverse_bayes(&sixteen, &s16, 100, seed + 3)?);
    }
    if want(Suite::Elbo) {
        report.extend(verify_elbo_closed_form(&sixteen, &s16, 20, seed + 4)?);
    }
    if want(Suite::Backward) {
        report.extend(verify_backward_rate(&six, &s6, 100_000, 1e-3, seed + 5)?);
    }
    if want(Suite::Params) {
        report.extend(verify_param_accounting());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_trees_have_expected_shape() {
        let six = six_token_tree();
        assert_eq!(six.tree_height(), 3);
        assert!(six.validate().is_empty());
        let sixteen = sixteen_leaf_tree();
        assert_eq!(sixteen.vocab_size(), 16);
        assert!(sixteen.node_count() <= 40, "{}", sixteen.node_count());
        assert!(sixteen.tree_height() >= 3);
    }

    #[test]
    fn check_rendering() {
        let c = Check::at_most("x", 0.5, 1.0);
        assert_eq!(c.render(), "CHECK x 5.000000e-1 1.000000e0 PASS");
    }

    #[test]
    fn generic_oracle_rejects_coarse_quadrature() {
        let tree = six_token_tree();
        let s = schedule_for(&tree).unwrap();
        let p = |_: NodeId, _: f64| vec![0.5, 0.5];
        assert!(generic_elbo_oracle(&p, &tree, &s, 0, 0, 9).is_err());
    }

    #[test]
    fn accounting_numbers() {
        let a = head_accounting(768, 50_000, 512, 512, 512);
        assert_eq!(a.flat_params, 38_400_000);
        assert_eq!(a.tree_params, 393_216);
        assert!((a.flat_logits_gib - 24.414).abs() < 1e-3);
        assert_eq!(a.tree_logits_gib, 0.25);
        assert!(verify_param_accounting().passed());
    }
}
