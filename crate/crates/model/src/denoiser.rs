//! Bidirectional transformer over node-state sequences with additive time
//! conditioning, emitting K child logits per position and optionally joint
//! logits per neighborhood. Backward is written by hand.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use tdlm_core::loss::{
    joint_loss, tdlm_loss_grad, CorruptedBatch, JointLossMaps, LossMaps, NeighborhoodConfig,
};
use tdlm_core::predictor::ChildPredictor;
use tdlm_core::{LevelWeightConfig, NodeId, NoiseSchedule, TokenTree};

use crate::config::DenoiserConfig;
use crate::error::{ModelError, Result};
use crate::params::Layout;
use crate::real::{gelu, gelu_grad, gemm, Real, View};

const ROPE_BASE: f64 = 10_000.0;

/// Rotary position encoding: rotates each (even, odd) pair of every query
/// and key head slice in `qkv` (`n × 3d`, rows in sequence order) by
/// `sign · pos · ROPE_BASE^(−2i/dh)`. The rotation is orthogonal, so
/// `sign = −1` maps gradients back to the unrotated projections.
fn rotate_qk<T: Real>(qkv: &mut [T], seq: usize, d: usize, dh: usize, sign: f64) {
    let half = dh / 2;
    let table: Vec<(T, T)> = (0..seq)
        .flat_map(|p| {
            (0..half).map(move |i| {
                let a = p as f64 * ROPE_BASE.powf(-2.0 * i as f64 / dh as f64);
                (T::of(a.cos()), T::of(sign * a.sin()))
            })
        })
        .collect();
    for (row, tok) in qkv.chunks_exact_mut(3 * d).enumerate() {
        let tab = &table[(row % seq) * half..][..half];
        for head in tok[..2 * d].chunks_exact_mut(dh) {
            for (pair, &(c, s)) in head.chunks_exact_mut(2).zip(tab) {
                let (x, y) = (pair[0], pair[1]);
                pair[0] = x * c - y * s;
                pair[1] = x * s + y * c;
            }
        }
    }
}

/// Child logits, joint logits and the backward cache of one shard.
type ShardOutput<T> = (Vec<T>, Option<Vec<T>>, Cache<T>);

const NORM_EPS: f64 = 1e-6;
/// Highest time frequency of the sinusoidal embedding.
const TIME_FREQ_MAX: f64 = 1000.0;
/// Batches are cut into at most this many row shards, independent of the
/// thread count, so results do not depend on parallelism.
pub const MAX_SHARDS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Output<T> {
    /// `rows × seq_len × K`.
    pub logits: Vec<T>,
    /// `rows × (seq_len / L) × K^L` when the joint head is enabled.
    pub joint: Option<Vec<T>>,
}

/// Training objective and the per-position maps it was computed from.
#[derive(Debug, Clone)]
pub struct StepLoss {
    /// `mean(J)` plus the per-token joint objective when present.
    pub objective: f64,
    pub child: LossMaps,
    pub joint: Option<JointLossMaps>,
}

#[derive(Debug, Clone)]
pub struct Denoiser<T: Real> {
    cfg: DenoiserConfig,
    layout: Layout,
    params: Vec<T>,
}

struct LayerCache<T> {
    a: Vec<T>,
    rstd1: Vec<T>,
    u: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    h2: Vec<T>,
    rstd2: Vec<T>,
    u2: Vec<T>,
    m1: Vec<T>,
    g: Vec<T>,
}

struct Cache<T> {
    rows: usize,
    seq: usize,
    nodes: Vec<NodeId>,
    te: Vec<T>,
    z1: Vec<T>,
    g1: Vec<T>,
    layers: Vec<LayerCache<T>>,
    x_last: Vec<T>,
    rstd_f: Vec<T>,
    f: Vec<T>,
}

fn rmsnorm<T: Real>(x: &[T], gain: &[T], d: usize, y: &mut [T], rstd: &mut [T]) {
    let inv_d = T::of(1.0 / d as f64);
    for ((xr, yr), r) in x
        .chunks_exact(d)
        .zip(y.chunks_exact_mut(d))
        .zip(rstd.iter_mut())
    {
        let ms = xr.iter().map(|&v| v * v).sum::<T>() * inv_d;
        *r = T::one() / (ms + T::of(NORM_EPS)).sqrt();
        for ((yv, &xv), &gv) in yr.iter_mut().zip(xr).zip(gain) {
            *yv = xv * *r * gv;
        }
    }
}

/// Accumulates input and gain gradients of `rmsnorm`.
fn rmsnorm_back<T: Real>(
    x: &[T],
    gain: &[T],
    rstd: &[T],
    dy: &[T],
    d: usize,
    dx: &mut [T],
    dgain: &mut [T],
) {
    let inv_d = T::of(1.0 / d as f64);
    for (((xr, dyr), dxr), &r) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(rstd)
    {
        let mut dot = T::zero();
        for ((&xv, &dv), (&gv, dg)) in xr.iter().zip(dyr).zip(gain.iter().zip(dgain.iter_mut())) {
            dot += dv * gv * xv;
            *dg += dv * xv * r;
        }
        let coef = dot * r * r * r * inv_d;
        for ((dxv, &xv), (&dv, &gv)) in dxr.iter_mut().zip(xr).zip(dyr.iter().zip(gain)) {
            *dxv += dv * gv * r - xv * coef;
        }
    }
}

fn add_bias<T: Real>(y: &mut [T], b: &[T]) {
    for row in y.chunks_exact_mut(b.len()) {
        row.iter_mut().zip(b).for_each(|(v, &bv)| *v += bv);
    }
}

fn col_sums_into<T: Real>(dy: &[T], width: usize, out: &mut [T]) {
    for row in dy.chunks_exact(width) {
        out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
    }
}

/// `y (n×out) = x (n×in) · W (in×out)`.
fn linear<T: Real>(x: &[T], w: &[T], n: usize, din: usize, dout: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n * dout];
    gemm(
        n,
        din,
        dout,
        T::one(),
        x,
        View::rows(0, din),
        w,
        View::rows(0, dout),
        T::zero(),
        &mut y,
        View::rows(0, dout),
    );
    y
}

/// Accumulates `dW += xᵀ·dy` and returns `dx = dy·Wᵀ`.
#[allow(clippy::too_many_arguments)]
fn linear_back<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    din: usize,
    dout: usize,
    dw: &mut [T],
    want_dx: bool,
) -> Vec<T> {
    gemm(
        din,
        n,
        dout,
        T::one(),
        x,
        View::t(0, din),
        dy,
        View::rows(0, dout),
        T::one(),
        dw,
        View::rows(0, dout),
    );
    if !want_dx {
        return Vec::new();
    }
    let mut dx = vec![T::zero(); n * din];
    gemm(
        n,
        dout,
        din,
        T::one(),
        dy,
        View::rows(0, dout),
        w,
        View::t(0, dout),
        T::zero(),
        &mut dx,
        View::rows(0, din),
    );
    dx
}

fn time_features<T: Real>(times: &[f64], d: usize) -> Vec<T> {
    let half = d / 2;
    let mut out = vec![T::zero(); times.len() * d];
    for (row, &t) in out.chunks_exact_mut(d).zip(times) {
        for i in 0..half {
            let w = TIME_FREQ_MAX.powf(i as f64 / half as f64);
            row[i] = T::of((t * w).sin());
            row[half + i] = T::of((t * w).cos());
        }
    }
    out
}

impl<T: Real> Denoiser<T> {
    /// Seeded initialization. Embedding tables are `N(0, 1)` (positions
    /// `N(0, 0.25)`); projections are `N(0, 1/fan_in)`, with the attention
    /// output and second feed-forward matrix further divided by `2·layers`
    /// in variance; both heads start at `N(0, 0.01/d)` so initial
    /// predictions are close to uniform. Norm gains are 1, biases 0.
    pub fn init(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth_scale = 1.0 / (2.0 * cfg.layers as f64);
        for t in &layout.tensors {
            let leaf = t.name.rsplit('.').next().unwrap_or(&t.name);
            let fan_in = t.shape[0] as f64;
            let var = match leaf {
                "node_emb" => 1.0,
                "pos_emb" => 0.25,
                "wo" | "w2" if t.name.starts_with("blocks") => depth_scale / fan_in,
                "head" | "joint_head" => 0.01 / cfg.d as f64,
                _ if t.shape.len() == 2 => 1.0 / fan_in,
                "attn_norm" | "mlp_norm" | "final_norm" => {
                    params[t.range()].iter_mut().for_each(|p| *p = T::one());
                    continue;
                }
                _ => continue,
            };
            let normal = Normal::new(0.0, var.sqrt()).expect("positive variance");
            for p in &mut params[t.range()] {
                *p = T::of(normal.sample(&mut rng));
            }
        }
        Ok(Self {
            cfg,
            layout,
            params,
        })
    }

    pub fn from_params(cfg: DenoiserConfig, params: Vec<T>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(ModelError::Input(format!(
                "{} parameters for a layout of {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self {
            cfg,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.get(name).map(|t| &self.params[t.range()])
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        Denoiser {
            cfg: self.cfg,
            layout: self.layout.clone(),
            params: self.params.iter().map(|&p| U::of(p.as_f64())).collect(),
        }
    }

    fn check_input(&self, nodes: &[NodeId], seq_len: usize, times: &[f64]) -> Result<()> {
        if seq_len == 0 || seq_len > self.cfg.seq_len {
            return Err(ModelError::Input(format!(
                "sequence length {seq_len} outside 1..={}",
                self.cfg.seq_len
            )));
        }
        if nodes.len() != seq_len * times.len() {
            return Err(ModelError::Input(format!(
                "{} node states for {} rows of length {seq_len}",
                nodes.len(),
                times.len()
            )));
        }
        if let Some(&n) = nodes.iter().find(|&&n| n >= self.cfg.node_vocab) {
            return Err(ModelError::Input(format!(
                "node id {n} outside the embedding table of {}",
                self.cfg.node_vocab
            )));
        }
        if let Some(l) = self.cfg.joint {
            if !seq_len.is_multiple_of(l) {
                return Err(ModelError::Input(format!(
                    "sequence length {seq_len} is not a multiple of the neighborhood length {l}"
                )));
            }
        }
        Ok(())
    }

    fn shards(&self, rows: usize) -> Vec<std::ops::Range<usize>> {
        let per = rows.div_ceil(MAX_SHARDS).max(1);
        (0..rows)
            .step_by(per)
            .map(|s| s..(s + per).min(rows))
            .collect()
    }

    /// Logits for `times.len()` rows of `seq_len` node states.
    pub fn forward(&self, nodes: &[NodeId], seq_len: usize, times: &[f64]) -> Result<Output<T>> {
        self.check_input(nodes, seq_len, times)?;
        let parts: Vec<(Vec<T>, Option<Vec<T>>)> = self
            .shards(times.len())
            .into_par_iter()
            .map(|r| {
                let (logits, joint, _) = self.forward_shard(
                    &nodes[r.start * seq_len..r.end * seq_len],
                    seq_len,
                    &times[r.clone()],
                    false,
                );
                (logits, joint)
            })
            .collect();
        let mut out = Output {
            logits: Vec::with_capacity(nodes.len() * self.cfg.branching),
            joint: self.cfg.joint.map(|_| Vec::new()),
        };
        for (l, j) in parts {
            out.logits.extend(l);
            if let (Some(all), Some(j)) = (out.joint.as_mut(), j) {
                all.extend(j);
            }
        }
        Ok(out)
    }

    fn forward_shard(
        &self,
        nodes: &[NodeId],
        seq: usize,
        times: &[f64],
        keep: bool,
    ) -> (Vec<T>, Option<Vec<T>>, Option<Cache<T>>) {
        let p = &self.params;
        let ix = &self.layout.idx;
        let d = self.cfg.d;
        let rows = times.len();
        let n = rows * seq;
        let hid = self.cfg.hidden();

        let te = time_features::<T>(times, d);
        let mut z1 = linear(&te, &p[ix.t_w1..ix.t_w1 + d * d], rows, d, d);
        add_bias(&mut z1, &p[ix.t_b1..ix.t_b1 + d]);
        let g1: Vec<T> = z1.iter().map(|&v| gelu(v)).collect();
        let mut c = linear(&g1, &p[ix.t_w2..ix.t_w2 + d * d], rows, d, d);
        add_bias(&mut c, &p[ix.t_b2..ix.t_b2 + d]);

        let mut x = vec![T::zero(); n * d];
        for (i, row) in x.chunks_exact_mut(d).enumerate() {
            let e = &p[ix.node_emb + nodes[i] * d..][..d];
            let pe = &p[ix.pos_emb + (i % seq) * d..][..d];
            for ((v, &a), &b) in row.iter_mut().zip(e).zip(pe) {
                *v = a + b;
            }
        }

        let mut caches = Vec::new();
        for blk in &ix.blocks {
            let mut a = x;
            for (r, rowc) in c.chunks_exact(d).enumerate() {
                for tok in a[r * seq * d..(r + 1) * seq * d].chunks_exact_mut(d) {
                    tok.iter_mut().zip(rowc).for_each(|(v, &cv)| *v += cv);
                }
            }
            let mut u = vec![T::zero(); n * d];
            let mut rstd1 = vec![T::zero(); n];
            rmsnorm(
                &a,
                &p[blk.attn_norm..blk.attn_norm + d],
                d,
                &mut u,
                &mut rstd1,
            );
            let mut qkv = linear(&u, &p[blk.wqkv..blk.wqkv + 3 * d * d], n, d, 3 * d);
            rotate_qk(&mut qkv, seq, d, self.cfg.head_dim(), 1.0);
            let (attn, probs) = self.attention(&qkv, rows, seq);
            let o = linear(&attn, &p[blk.wo..blk.wo + d * d], n, d, d);
            let h2: Vec<T> = a.iter().zip(&o).map(|(&av, &ov)| av + ov).collect();
            let mut u2 = vec![T::zero(); n * d];
            let mut rstd2 = vec![T::zero(); n];
            rmsnorm(
                &h2,
                &p[blk.mlp_norm..blk.mlp_norm + d],
                d,
                &mut u2,
                &mut rstd2,
            );
            let mut m1 = linear(&u2, &p[blk.w1..blk.w1 + d * hid], n, d, hid);
            add_bias(&mut m1, &p[blk.b1..blk.b1 + hid]);
            let g: Vec<T> = m1.iter().map(|&v| gelu(v)).collect();
            let mut m2 = linear(&g, &p[blk.w2..blk.w2 + hid * d], n, hid, d);
            add_bias(&mut m2, &p[blk.b2..blk.b2 + d]);
            x = h2.iter().zip(&m2).map(|(&hv, &mv)| hv + mv).collect();
            if keep {
                caches.push(LayerCache {
                    a,
                    rstd1,
                    u,
                    qkv,
                    probs,
                    attn,
                    h2,
                    rstd2,
                    u2,
                    m1,
                    g,
                });
            }
        }

        let mut f = vec![T::zero(); n * d];
        let mut rstd_f = vec![T::zero(); n];
        rmsnorm(
            &x,
            &p[ix.final_norm..ix.final_norm + d],
            d,
            &mut f,
            &mut rstd_f,
        );
        let k = self.cfg.branching;
        let logits = linear(&f, &p[ix.head..ix.head + d * k], n, d, k);
        let joint = self.cfg.joint.map(|l| {
            let w = k.pow(l as u32);
            let off = ix.joint_head.expect("joint head");
            // rows of L consecutive features are contiguous in `f`
            linear(&f, &p[off..off + l * d * w], n / l, l * d, w)
        });
        let cache = keep.then(|| Cache {
            rows,
            seq,
            nodes: nodes.to_vec(),
            te,
            z1,
            g1,
            layers: caches,
            x_last: x,
            rstd_f,
            f,
        });
        (logits, joint, cache)
    }

    /// Multi-head bidirectional attention; returns the head outputs
    /// (`n × d`) and the attention probabilities (`rows × heads × S × S`).
    fn attention(&self, qkv: &[T], rows: usize, seq: usize) -> (Vec<T>, Vec<T>) {
        let d = self.cfg.d;
        let heads = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut out = vec![T::zero(); rows * seq * d];
        let mut probs = vec![T::zero(); rows * heads * seq * seq];
        for r in 0..rows {
            for h in 0..heads {
                let base = r * seq * 3 * d;
                let pv = (r * heads + h) * seq * seq;
                let sc = &mut probs[pv..pv + seq * seq];
                gemm(
                    seq,
                    dh,
                    seq,
                    scale,
                    qkv,
                    View::rows(base + h * dh, 3 * d),
                    qkv,
                    View::t(base + d + h * dh, 3 * d),
                    T::zero(),
                    sc,
                    View::rows(0, seq),
                );
                for row in sc.chunks_exact_mut(seq) {
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        sum += *v;
                    }
                    let inv = T::one() / sum;
                    row.iter_mut().for_each(|v| *v *= inv);
                }
                gemm(
                    seq,
                    seq,
                    dh,
                    T::one(),
                    &probs[pv..pv + seq * seq],
                    View::rows(0, seq),
                    qkv,
                    View::rows(base + 2 * d + h * dh, 3 * d),
                    T::zero(),
                    &mut out,
                    View::rows(r * seq * d + h * dh, d),
                );
            }
        }
        (out, probs)
    }

    /// Gradient of `dqkv` from the gradient of the head outputs.
    fn attention_back(
        &self,
        qkv: &[T],
        probs: &[T],
        dattn: &[T],
        rows: usize,
        seq: usize,
    ) -> Vec<T> {
        let d = self.cfg.d;
        let heads = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut dqkv = vec![T::zero(); rows * seq * 3 * d];
        let mut dp = vec![T::zero(); seq * seq];
        for r in 0..rows {
            for h in 0..heads {
                let base = r * seq * 3 * d;
                let pv = (r * heads + h) * seq * seq;
                let pr = &probs[pv..pv + seq * seq];
                let dov = View::rows(r * seq * d + h * dh, d);
                // dP = dO · Vᵀ
                gemm(
                    seq,
                    dh,
                    seq,
                    T::one(),
                    dattn,
                    dov,
                    qkv,
                    View::t(base + 2 * d + h * dh, 3 * d),
                    T::zero(),
                    &mut dp,
                    View::rows(0, seq),
                );
                // dV = Pᵀ · dO
                gemm(
                    seq,
                    seq,
                    dh,
                    T::one(),
                    pr,
                    View::t(0, seq),
                    dattn,
                    dov,
                    T::zero(),
                    &mut dqkv,
                    View::rows(base + 2 * d + h * dh, 3 * d),
                );
                // softmax backward in place: dS = P ∘ (dP − rowsum(dP ∘ P))
                for (dr, prow) in dp.chunks_exact_mut(seq).zip(pr.chunks_exact(seq)) {
                    let dot: T = dr.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    dr.iter_mut()
                        .zip(prow)
                        .for_each(|(v, &pv)| *v = pv * (*v - dot));
                }
                gemm(
                    seq,
                    seq,
                    dh,
                    scale,
                    &dp,
                    View::rows(0, seq),
                    qkv,
                    View::rows(base + d + h * dh, 3 * d),
                    T::zero(),
                    &mut dqkv,
                    View::rows(base + h * dh, 3 * d),
                );
                gemm(
                    seq,
                    seq,
                    dh,
                    scale,
                    &dp,
                    View::t(0, seq),
                    qkv,
                    View::rows(base + h * dh, 3 * d),
                    T::zero(),
                    &mut dqkv,
                    View::rows(base + d + h * dh, 3 * d),
                );
            }
        }
        dqkv
    }

    /// Parameter gradient for one shard given the gradients of its outputs.
    fn backward_shard(&self, cache: &Cache<T>, dlogits: &[T], djoint: Option<&[T]>) -> Vec<T> {
        let p = &self.params;
        let ix = &self.layout.idx;
        let d = self.cfg.d;
        let k = self.cfg.branching;
        let hid = self.cfg.hidden();
        let (rows, seq) = (cache.rows, cache.seq);
        let n = rows * seq;
        let mut gr = vec![T::zero(); self.layout.total];

        let mut df = linear_back(
            &cache.f,
            &p[ix.head..ix.head + d * k],
            dlogits,
            n,
            d,
            k,
            &mut gr[ix.head..ix.head + d * k],
            true,
        );
        if let (Some(l), Some(dj)) = (self.cfg.joint, djoint) {
            let w = k.pow(l as u32);
            let off = ix.joint_head.expect("joint head");
            let dfj = linear_back(
                &cache.f,
                &p[off..off + l * d * w],
                dj,
                n / l,
                l * d,
                w,
                &mut gr[off..off + l * d * w],
                true,
            );
            df.iter_mut().zip(&dfj).for_each(|(a, &b)| *a += b);
        }
        let mut dx = vec![T::zero(); n * d];
        rmsnorm_back(
            &cache.x_last,
            &p[ix.final_norm..ix.final_norm + d],
            &cache.rstd_f,
            &df,
            d,
            &mut dx,
            &mut gr[ix.final_norm..ix.final_norm + d],
        );

        let mut dc = vec![T::zero(); rows * d];
        for (blk, lc) in ix.blocks.iter().zip(&cache.layers).rev() {
            // x_out = h2 + m2
            col_sums_into(&dx, d, &mut gr[blk.b2..blk.b2 + d]);
            let dgact = linear_back(
                &lc.g,
                &p[blk.w2..blk.w2 + hid * d],
                &dx,
                n,
                hid,
                d,
                &mut gr[blk.w2..blk.w2 + hid * d],
                true,
            );
            let dm1: Vec<T> = dgact
                .iter()
                .zip(&lc.m1)
                .map(|(&g, &m)| g * gelu_grad(m))
                .collect();
            col_sums_into(&dm1, hid, &mut gr[blk.b1..blk.b1 + hid]);
            let du2 = linear_back(
                &lc.u2,
                &p[blk.w1..blk.w1 + d * hid],
                &dm1,
                n,
                d,
                hid,
                &mut gr[blk.w1..blk.w1 + d * hid],
                true,
            );
            let mut dh2 = dx;
            rmsnorm_back(
                &lc.h2,
                &p[blk.mlp_norm..blk.mlp_norm + d],
                &lc.rstd2,
                &du2,
                d,
                &mut dh2,
                &mut gr[blk.mlp_norm..blk.mlp_norm + d],
            );
            // h2 = a + attn · Wo
            let dattn = linear_back(
                &lc.attn,
                &p[blk.wo..blk.wo + d * d],
                &dh2,
                n,
                d,
                d,
                &mut gr[blk.wo..blk.wo + d * d],
                true,
            );
            let mut dqkv = self.attention_back(&lc.qkv, &lc.probs, &dattn, rows, seq);
            rotate_qk(&mut dqkv, seq, d, self.cfg.head_dim(), -1.0);
            let du = linear_back(
                &lc.u,
                &p[blk.wqkv..blk.wqkv + 3 * d * d],
                &dqkv,
                n,
                d,
                3 * d,
                &mut gr[blk.wqkv..blk.wqkv + 3 * d * d],
                true,
            );
            let mut da = dh2;
            rmsnorm_back(
                &lc.a,
                &p[blk.attn_norm..blk.attn_norm + d],
                &lc.rstd1,
                &du,
                d,
                &mut da,
                &mut gr[blk.attn_norm..blk.attn_norm + d],
            );
            for r in 0..rows {
                let dcr = &mut dc[r * d..(r + 1) * d];
                for tok in da[r * seq * d..(r + 1) * seq * d].chunks_exact(d) {
                    dcr.iter_mut().zip(tok).for_each(|(a, &b)| *a += b);
                }
            }
            dx = da;
        }

        for (i, row) in dx.chunks_exact(d).enumerate() {
            let e = ix.node_emb + cache.nodes[i] * d;
            gr[e..e + d].iter_mut().zip(row).for_each(|(a, &b)| *a += b);
            let pe = ix.pos_emb + (i % seq) * d;
            gr[pe..pe + d]
                .iter_mut()
                .zip(row)
                .for_each(|(a, &b)| *a += b);
        }

        col_sums_into(&dc, d, &mut gr[ix.t_b2..ix.t_b2 + d]);
        let dg1 = linear_back(
            &cache.g1,
            &p[ix.t_w2..ix.t_w2 + d * d],
            &dc,
            rows,
            d,
            d,
            &mut gr[ix.t_w2..ix.t_w2 + d * d],
            true,
        );
        let dz1: Vec<T> = dg1
            .iter()
            .zip(&cache.z1)
            .map(|(&g, &z)| g * gelu_grad(z))
            .collect();
        col_sums_into(&dz1, d, &mut gr[ix.t_b1..ix.t_b1 + d]);
        linear_back(
            &cache.te,
            &p[ix.t_w1..ix.t_w1 + d * d],
            &dz1,
            rows,
            d,
            d,
            &mut gr[ix.t_w1..ix.t_w1 + d * d],
            false,
        );
        gr
    }

    /// Training objective on a corrupted batch and its exact gradient.
    /// The joint term is added when the joint head is enabled.
    pub fn loss_and_grad(
        &self,
        batch: &CorruptedBatch,
        tree: &TokenTree,
        sched: &NoiseSchedule,
        level_weights: &LevelWeightConfig,
    ) -> Result<(StepLoss, Vec<T>)> {
        if tree.branching() != self.cfg.branching {
            return Err(ModelError::Input(format!(
                "tree branching {} differs from head width {}",
                tree.branching(),
                self.cfg.branching
            )));
        }
        let seq = batch.seq_len;
        self.check_input(&batch.z, seq, &batch.t)?;
        let shards = self.shards(batch.rows);
        let fwd: Vec<ShardOutput<T>> = shards
            .par_iter()
            .map(|r| {
                let (l, j, c) = self.forward_shard(
                    &batch.z[r.start * seq..r.end * seq],
                    seq,
                    &batch.t[r.clone()],
                    true,
                );
                (l, j, c.expect("cache kept"))
            })
            .collect();
        let logits: Vec<f64> = fwd
            .iter()
            .flat_map(|s| s.0.iter().map(|v| v.as_f64()))
            .collect();
        let (child, dl) = tdlm_loss_grad(&logits, batch, tree, sched, level_weights)?;
        let mut objective = child.objective();
        let (joint, dj) = match self.cfg.joint {
            Some(l) => {
                let jl: Vec<f64> = fwd
                    .iter()
                    .flat_map(|s| {
                        s.1.as_ref()
                            .expect("joint logits")
                            .iter()
                            .map(|v| v.as_f64())
                    })
                    .collect();
                let (maps, g) = joint_loss(
                    &jl,
                    batch,
                    tree,
                    sched,
                    level_weights,
                    &NeighborhoodConfig::new(l),
                    true,
                )?;
                objective += maps.objective();
                (Some(maps), g)
            }
            None => (None, None),
        };
        if !objective.is_finite() {
            return Err(ModelError::NonFinite(format!(
                "training objective {objective}"
            )));
        }
        let k = self.cfg.branching;
        let jw = self.cfg.joint_width();
        let grads: Vec<Vec<T>> = shards
            .par_iter()
            .zip(fwd.par_iter())
            .map(|(r, (_, _, cache))| {
                let dls: Vec<T> = dl[r.start * seq * k..r.end * seq * k]
                    .iter()
                    .map(|&v| T::of(v))
                    .collect();
                let djs: Option<Vec<T>> = dj.as_ref().map(|g| {
                    let per_row = seq / self.cfg.joint.expect("joint") * jw.expect("joint");
                    g[r.start * per_row..r.end * per_row]
                        .iter()
                        .map(|&v| T::of(v))
                        .collect()
                });
                self.backward_shard(cache, &dls, djs.as_deref())
            })
            .collect();
        let mut total = vec![T::zero(); self.layout.total];
        for g in grads {
            total.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
        }
        Ok((
            StepLoss {
                objective,
                child,
                joint,
            },
            total,
        ))
    }
}

impl<T: Real> ChildPredictor for Denoiser<T> {
    fn branching(&self) -> usize {
        self.cfg.branching
    }

    fn child_logits(
        &self,
        nodes: &[NodeId],
        seq_len: usize,
        times: &[f64],
    ) -> tdlm_core::Result<Vec<f64>> {
        let out = self
            .forward(nodes, seq_len, times)
            .map_err(|e| tdlm_core::Error::InvalidInput(e.to_string()))?;
        Ok(out.logits.iter().map(|v| v.as_f64()).collect())
    }
}
