//! Token embeddings used to cluster the vocabulary.
//!
//! Embeddings come either from an external matrix file or from the training
//! corpus itself: positive PMI co-occurrence statistics factorized to rank `d`
//! by subspace iteration.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tree::TokenId;

/// `V × d` row-major matrix of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    vocab: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TokenEmbeddings {
    pub fn new(vocab: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != vocab * dim {
            return Err(Error::InvalidInput(format!(
                "embedding data has {} values, expected {vocab} x {dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "embedding row {} column {}",
                i / dim.max(1),
                i % dim.max(1)
            )));
        }
        Ok(Self { vocab, dim, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let vocab = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidInput(
                "embedding rows have unequal widths".into(),
            ));
        }
        Self::new(vocab, dim, rows.concat())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, token: usize) -> &[f64] {
        &self.data[token * self.dim..(token + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(w, "TDLM-EMB v1 V={} D={}", self.vocab, self.dim)?;
        for i in 0..self.vocab {
            let line: Vec<String> = self.row(i).iter().map(|x| format!("{x:e}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut lines = BufReader::new(fs::File::open(path)?).lines();
        let header = lines.next().transpose()?.ok_or(Error::Parse {
            line: 1,
            msg: "empty embedding file".into(),
        })?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let field = |s: Option<&&str>, key: &str| -> Result<usize> {
            s.and_then(|s| s.strip_prefix(key))
                .and_then(|x| x.parse().ok())
                .ok_or_else(|| Error::Parse {
                    line: 1,
                    msg: format!("malformed header {header:?}"),
                })
        };
        if parts.len() != 4 || parts[0] != "TDLM-EMB" || parts[1] != "v1" {
            return Err(Error::Parse {
                line: 1,
                msg: format!("malformed header {header:?}"),
            });
        }
        let vocab = field(parts.get(2), "V=")?;
        let dim = field(parts.get(3), "D=")?;
        let mut data = Vec::with_capacity(vocab * dim);
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 2,
                    msg: format!("{e}"),
                })?;
            if vals.len() != dim {
                return Err(Error::Parse {
                    line: i + 2,
                    msg: format!("expected {dim} values, found {}", vals.len()),
                });
            }
            data.extend(vals);
            rows += 1;
        }
        if rows != vocab {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header declares V={vocab} but file has {rows} rows"),
            });
        }
        Self::new(vocab, dim, data)
    }
}

/// Dense symmetric PPMI matrix over a token stream with a `±window` context.
pub fn ppmi_matrix(corpus: &[TokenId], vocab: usize, window: usize) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    if let Some(&t) = corpus.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::InvalidInput(format!(
            "token {t} outside vocabulary {vocab}"
        )));
    }
    let mut counts = vec![0.0f64; vocab * vocab];
    for (i, &a) in corpus.iter().enumerate() {
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(corpus.len() - 1);
        for (j, &b) in corpus.iter().enumerate().take(hi + 1).skip(lo) {
            if j != i {
                counts[a as usize * vocab + b as usize] += 1.0;
            }
        }
    }
    let row_sums: Vec<f64> = counts.chunks(vocab).map(|r| r.iter().sum()).collect();
    let total: f64 = row_sums.iter().sum();
    let mut ppmi = vec![0.0; vocab * vocab];
    if total == 0.0 {
        return Ok(ppmi);
    }
    for i in 0..vocab {
        for j in 0..vocab {
            let c = counts[i * vocab + j];
            if c > 0.0 {
                let pmi = (c * total / (row_sums[i] * row_sums[j])).ln();
                ppmi[i * vocab + j] = pmi.max(0.0);
            }
        }
    }
    Ok(ppmi)
}

const SUBSPACE_ITERS: usize = 500;
const SUBSPACE_TOL: f64 = 1e-13;

/// Rank-`dim` embeddings `U · diag(√σ)` of the PPMI matrix, with σ the top
/// singular values. Tokens absent from the corpus get all-zero rows. Column
/// signs are fixed so each column's largest-magnitude entry is positive.
pub fn ppmi_embeddings(
    corpus: &[TokenId],
    vocab: usize,
    dim: usize,
    window: usize,
    seed: u64,
) -> Result<TokenEmbeddings> {
    if dim == 0 || dim > vocab {
        return Err(Error::InvalidConfig(format!(
            "embedding width {dim} must lie in 1..={vocab}"
        )));
    }
    if window == 0 {
        return Err(Error::InvalidConfig("context window must be >= 1".into()));
    }
    let m = ppmi_matrix(corpus, vocab, window)?;
    let (vectors, values) = top_singular_subspace(&m, vocab, dim, seed);
    let mut data = vec![0.0; vocab * dim];
    for c in 0..dim {
        let scale = values[c].abs().sqrt();
        for r in 0..vocab {
            data[r * dim + c] = vectors[r * dim + c] * scale;
        }
    }
    TokenEmbeddings::new(vocab, dim, data)
}

fn symmetric_matmul(m: &[f64], n: usize, x: &[f64], k: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * k];
    for i in 0..n {
        let row = &m[i * n..(i + 1) * n];
        let out = &mut y[i * k..(i + 1) * k];
        for (j, &mij) in row.iter().enumerate() {
            if mij != 0.0 {
                let xr = &x[j * k..(j + 1) * k];
                for c in 0..k {
                    out[c] += mij * xr[c];
                }
            }
        }
    }
    y
}

/// Modified Gram-Schmidt on the columns of an `n × k` row-major matrix.
fn orthonormalize(x: &mut [f64], n: usize, k: usize) {
    for c in 0..k {
        for p in 0..c {
            let dot: f64 = (0..n).map(|r| x[r * k + c] * x[r * k + p]).sum();
            for r in 0..n {
                x[r * k + c] -= dot * x[r * k + p];
            }
        }
        let norm = (0..n).map(|r| x[r * k + c].powi(2)).sum::<f64>().sqrt();
        if norm > 1e-300 {
            for r in 0..n {
                x[r * k + c] /= norm;
            }
        } else {
            for r in 0..n {
                x[r * k + c] = 0.0;
            }
        }
    }
}

fn top_singular_subspace(m: &[f64], n: usize, k: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..n * k).map(|_| rng.random::<f64>() - 0.5).collect();
    orthonormalize(&mut x, n, k);

    // iterate with M² so eigenvalues of either sign converge by magnitude
    for _ in 0..SUBSPACE_ITERS {
        let y = symmetric_matmul(m, n, &symmetric_matmul(m, n, &x, k), k);
        let mut y = y;
        orthonormalize(&mut y, n, k);
        // sine of the angle between successive subspaces, ‖Y − X XᵀY‖
        let change: f64 = {
            let mut xty = vec![0.0; k * k];
            for a in 0..k {
                for b in 0..k {
                    xty[a * k + b] = (0..n).map(|r| x[r * k + a] * y[r * k + b]).sum();
                }
            }
            let mut s = 0.0;
            for r in 0..n {
                for b in 0..k {
                    let proj: f64 = (0..k).map(|a| x[r * k + a] * xty[a * k + b]).sum();
                    s += (y[r * k + b] - proj).powi(2);
                }
            }
            s.sqrt()
        };
        x = y;
        if change < SUBSPACE_TOL {
            break;
        }
    }

    // Rayleigh-Ritz on the converged subspace
    let mx = symmetric_matmul(m, n, &x, k);
    let mut t = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            t[a * k + b] = (0..n).map(|r| x[r * k + a] * mx[r * k + b]).sum();
        }
    }
    let (evals, evecs) = jacobi_eigen(&mut t, k);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| evals[b].abs().total_cmp(&evals[a].abs()).then(a.cmp(&b)));

    let mut vecs = vec![0.0; n * k];
    let mut vals = vec![0.0; k];
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = evals[src];
        for r in 0..n {
            vecs[r * k + dst] = (0..k).map(|j| x[r * k + j] * evecs[j * k + src]).sum();
        }
        let pivot = (0..n)
            .max_by(|&a, &b| {
                vecs[a * k + dst]
                    .abs()
                    .total_cmp(&vecs[b * k + dst].abs())
                    .then(b.cmp(&a))
            })
            .unwrap();
        if vecs[pivot * k + dst] < 0.0 {
            for r in 0..n {
                vecs[r * k + dst] = -vecs[r * k + dst];
            }
        }
    }
    (vecs, vals)
}

/// Cyclic Jacobi eigensolver for a small symmetric matrix. Returns eigenvalues
/// and eigenvectors as columns of a row-major `k × k` matrix.
fn jacobi_eigen(a: &mut [f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; k * k];
    for i in 0..k {
        v[i * k + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..k)
            .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * k + j].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..k {
            for q in p + 1..k {
                let apq = a[p * k + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * k + q] - a[p * k + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..k {
                    let arp = a[r * k + p];
                    let arq = a[r * k + q];
                    a[r * k + p] = c * arp - s * arq;
                    a[r * k + q] = s * arp + c * arq;
                }
                for r in 0..k {
                    let apr = a[p * k + r];
                    let aqr = a[q * k + r];
                    a[p * k + r] = c * apr - s * aqr;
                    a[q * k + r] = s * apr + c * aqr;
                }
                for r in 0..k {
                    let vrp = v[r * k + p];
                    let vrq = v[r * k + q];
                    v[r * k + p] = c * vrp - s * vrq;
                    v[r * k + q] = s * vrp + c * vrq;
                }
            }
        }
    }
    ((0..k).map(|i| a[i * k + i]).collect(), v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn alternating_corpus_distinct_rows() {
        let corpus: Vec<TokenId> = (0..200).map(|i| (i % 2) as TokenId).collect();
        let e = ppmi_embeddings(&corpus, 2, 2, 1, 7).unwrap();
        assert_ne!(e.row(0), e.row(1));
        assert!((cosine(e.row(0), e.row(0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_contexts_identical_rows() {
        // tokens 1 and 2 both appear only between 0 and 3
        let mut corpus = Vec::new();
        for i in 0..50 {
            corpus.extend_from_slice(&[0, if i % 2 == 0 { 1 } else { 2 }, 3, 4]);
        }
        let e = ppmi_embeddings(&corpus, 6, 3, 1, 3).unwrap();
        assert_eq!(e.row(1), e.row(2));
        // token 5 never appears
        assert!(e.row(5).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        let mut a = vec![2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, -3.0];
        let (mut vals, _) = jacobi_eigen(&mut a, 3);
        vals.sort_by(f64::total_cmp);
        for (g, w) in vals.iter().zip([-3.0, 1.0, 3.0]) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_file_round_trip() {
        let e = TokenEmbeddings::from_rows(vec![vec![0.1, -2.5e-7], vec![3.0, 1.0 / 3.0]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.emb");
        e.save(&p).unwrap();
        assert_eq!(TokenEmbeddings::load(&p).unwrap(), e);
    }

    #[test]
    fn rejects_bad_width() {
        assert!(ppmi_embeddings(&[0, 1], 2, 3, 1, 0).is_err());
        assert!(ppmi_embeddings(&[], 2, 1, 1, 0).is_err());
    }
}
