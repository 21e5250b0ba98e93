//! Fixed-length chunking with a held-out tail, and a synthetic text source.

use anyhow::{ensure, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdlm_core::TokenId;

/// Training and validation chunks, each `seq_len` ids, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub seq_len: usize,
    pub train: Vec<TokenId>,
    pub val: Vec<TokenId>,
}

impl Split {
    pub fn train_rows(&self) -> usize {
        self.train.len() / self.seq_len
    }

    pub fn val_rows(&self) -> usize {
        self.val.len() / self.seq_len
    }

    pub fn train_row(&self, i: usize) -> &[TokenId] {
        &self.train[i * self.seq_len..(i + 1) * self.seq_len]
    }
}

/// Cuts `tokens` into chunks of `seq_len`. The tail is padded with `pad`, or
/// dropped when there is no pad id.
pub fn chunk(tokens: &[TokenId], seq_len: usize, pad: Option<TokenId>) -> Vec<TokenId> {
    let mut out = tokens.to_vec();
    let rem = out.len() % seq_len;
    if rem != 0 {
        match pad {
            Some(p) => out.resize(out.len() + seq_len - rem, p),
            None => out.truncate(out.len() - rem),
        }
    }
    out
}

/// The last `split` fraction of chunks (at least one) is validation, so no
/// validation chunk overlaps the text of a training chunk. Training chunks
/// are shuffled by `seed`.
pub fn ingest(
    tokens: &[TokenId],
    seq_len: usize,
    split: f64,
    seed: u64,
    pad: Option<TokenId>,
) -> Result<Split> {
    ensure!(seq_len > 0, "sequence length must be positive");
    ensure!(
        split > 0.0 && split < 1.0,
        "validation split must lie in (0, 1), got {split}"
    );
    let all = chunk(tokens, seq_len, pad);
    let n = all.len() / seq_len;
    ensure!(
        n >= 2,
        "corpus yields {n} chunk(s) of length {seq_len}; need at least 2"
    );
    let n_val = ((split * n as f64).round() as usize).clamp(1, n - 1);
    let n_train = n - n_val;
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = order
        .iter()
        .flat_map(|&i| all[i * seq_len..(i + 1) * seq_len].iter().copied())
        .collect();
    Ok(Split {
        seq_len,
        train,
        val: all[n_train * seq_len..].to_vec(),
    })
}

const DETERMINERS: &[&str] = &["the", "a", "every", "this", "that", "one", "some", "no"];
const ADJECTIVES: &[&str] = &[
    "small", "old", "quiet", "green", "bright", "heavy", "early", "distant", "narrow", "warm",
    "careful", "strange", "empty", "simple", "broken", "silver",
];
const NOUNS: &[&str] = &[
    "river", "house", "garden", "window", "teacher", "engine", "village", "letter", "market",
    "bridge", "forest", "student", "machine", "harbor", "station", "kitchen", "painter",
    "mountain", "library", "farmer", "island", "question", "morning", "signal",
];
const VERBS: &[&str] = &[
    "watches",
    "finds",
    "carries",
    "builds",
    "follows",
    "opens",
    "remembers",
    "paints",
    "crosses",
    "answers",
    "repairs",
    "visits",
    "describes",
    "moves",
    "holds",
    "counts",
];
const PREPOSITIONS: &[&str] = &[
    "near", "under", "behind", "across", "beside", "inside", "over", "toward",
];
const ADVERBS: &[&str] = &[
    "slowly",
    "again",
    "today",
    "quietly",
    "often",
    "at last",
    "once more",
    "together",
];
const CONJUNCTIONS: &[&str] = &["and", "but", "while", "because", "so"];

/// Zipf-like pick: index `i` has weight `1/(i+1)`.
fn pick<'a, R: Rng>(words: &[&'a str], rng: &mut R) -> &'a str {
    let total: f64 = (1..=words.len()).map(|i| 1.0 / i as f64).sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in words.iter().enumerate() {
        u -= 1.0 / (i + 1) as f64;
        if u <= 0.0 {
            return w;
        }
    }
    words[words.len() - 1]
}

fn noun_phrase<R: Rng>(rng: &mut R, out: &mut Vec<&'static str>) {
    out.push(pick(DETERMINERS, rng));
    if rng.random_bool(0.4) {
        out.push(pick(ADJECTIVES, rng));
    }
    out.push(pick(NOUNS, rng));
}

fn clause<R: Rng>(rng: &mut R, out: &mut Vec<&'static str>) {
    noun_phrase(rng, out);
    out.push(pick(VERBS, rng));
    noun_phrase(rng, out);
    if rng.random_bool(0.35) {
        out.push(pick(PREPOSITIONS, rng));
        noun_phrase(rng, out);
    }
    if rng.random_bool(0.2) {
        out.push(pick(ADVERBS, rng));
    }
}

/// English-like text from a small probabilistic grammar, at least `bytes`
/// long. Deterministic in `seed`.
pub fn synthetic_text(bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::with_capacity(bytes + 256);
    let mut words = Vec::new();
    let mut in_paragraph = 0;
    while text.len() < bytes {
        words.clear();
        clause(&mut rng, &mut words);
        if rng.random_bool(0.3) {
            words.push(pick(CONJUNCTIONS, &mut rng));
            clause(&mut rng, &mut words);
        }
        let sentence = words.join(" ");
        let mut chars = sentence.chars();
        if let Some(first) = chars.next() {
            text.extend(first.to_uppercase());
            text.push_str(chars.as_str());
        }
        text.push_str(if rng.random_bool(0.1) { "?" } else { "." });
        in_paragraph += 1;
        if in_paragraph >= 3 && rng.random_bool(0.3) {
            text.push('\n');
            in_paragraph = 0;
        } else {
            text.push(' ');
        }
    }
    text
}
