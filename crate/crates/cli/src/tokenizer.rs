//! Token id mappings.
//!
//! A tree file carries no tokenizer, so `build-tree` writes a sidecar
//! `<tree>.tok` next to it. Without a sidecar a 257-leaf tree is read as the
//! byte tokenizer.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use tdlm_core::{TokenId, TokenTree};

pub const BYTE_PAD: TokenId = 256;
pub const BYTE_VOCAB: usize = 257;

const UNK: &str = "<unk>";

#[derive(Debug, Clone, PartialEq)]
pub enum Tokenizer {
    /// Bytes map to ids 0..=255; id 256 is padding.
    Bytes,
    /// The most frequent whitespace-separated words, then `<unk>`, then pad.
    Words {
        words: Vec<String>,
        index: HashMap<String, TokenId>,
    },
    /// The corpus is whitespace-separated decimal ids below `vocab`. There is
    /// no pad id, so incomplete tail chunks are dropped.
    Ids { vocab: usize },
}

impl Tokenizer {
    /// Word vocabulary of `vocab` ids in total (including `<unk>` and pad).
    /// Ties in frequency go to the lexicographically smaller word.
    pub fn words_from_text(text: &str, vocab: usize) -> Result<Self> {
        ensure!(
            vocab >= 3,
            "word vocabulary needs at least 3 ids, got {vocab}"
        );
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for w in text.split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> =
            counts.into_iter().filter(|(w, _)| *w != UNK).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let words = ranked
            .into_iter()
            .take(vocab - 2)
            .map(|(w, _)| w.to_string())
            .collect();
        Ok(Self::from_words(words))
    }

    fn from_words(mut words: Vec<String>) -> Self {
        words.push(UNK.to_string());
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        Self::Words { words, index }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Self::Bytes => BYTE_VOCAB,
            Self::Words { words, .. } => words.len() + 1,
            Self::Ids { vocab } => *vocab,
        }
    }

    pub fn pad(&self) -> Option<TokenId> {
        match self {
            Self::Bytes => Some(BYTE_PAD),
            Self::Words { words, .. } => Some(words.len() as TokenId),
            Self::Ids { .. } => None,
        }
    }

    pub fn encode(&self, data: &[u8]) -> Result<Vec<TokenId>> {
        match self {
            Self::Bytes => Ok(data.iter().map(|&b| b as TokenId).collect()),
            Self::Words { words, index } => {
                let unk = (words.len() - 1) as TokenId;
                let text = String::from_utf8_lossy(data);
                Ok(text
                    .split_whitespace()
                    .map(|w| index.get(w).copied().unwrap_or(unk))
                    .collect())
            }
            Self::Ids { vocab } => {
                let text = std::str::from_utf8(data).context("id corpus is not UTF-8")?;
                text.split_whitespace()
                    .map(|s| {
                        let id: TokenId =
                            s.parse().with_context(|| format!("bad token id {s:?}"))?;
                        ensure!(
                            (id as usize) < *vocab,
                            "token id {id} outside vocabulary of {vocab}"
                        );
                        Ok(id)
                    })
                    .collect()
            }
        }
    }

    /// Inverse of [`encode`](Self::encode) with padding removed. Words are
    /// joined by single spaces and ids are written in decimal.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<u8> {
        let pad = self.pad();
        let kept = ids.iter().copied().filter(|&i| Some(i) != pad);
        match self {
            Self::Bytes => kept.filter(|&i| i < 256).map(|i| i as u8).collect(),
            Self::Words { words, .. } => kept
                .filter_map(|i| words.get(i as usize).map(String::as_str))
                .collect::<Vec<_>>()
                .join(" ")
                .into_bytes(),
            Self::Ids { .. } => kept
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(" ")
                .into_bytes(),
        }
    }

    pub fn sidecar_path(tree_path: &Path) -> PathBuf {
        let mut s = tree_path.as_os_str().to_owned();
        s.push(".tok");
        PathBuf::from(s)
    }

    /// `TDLM-TOK v1 kind=<bytes|words|ids> V=<n>`, then one word per line for
    /// the words kind (without `<unk>`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        match self {
            Self::Bytes => out.push_str(&format!("TDLM-TOK v1 kind=bytes V={BYTE_VOCAB}\n")),
            Self::Words { words, .. } => {
                out.push_str(&format!("TDLM-TOK v1 kind=words V={}\n", self.vocab_size()));
                for w in &words[..words.len() - 1] {
                    out.push_str(w);
                    out.push('\n');
                }
            }
            Self::Ids { vocab } => out.push_str(&format!("TDLM-TOK v1 kind=ids V={vocab}\n")),
        }
        fs::write(path, out).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let fields: Vec<&str> = header.split_whitespace().collect();
        let bad = || format!("{}: bad tokenizer header {header:?}", path.display());
        if fields.len() != 4 || fields[0] != "TDLM-TOK" || fields[1] != "v1" {
            bail!(bad());
        }
        let vocab: usize = fields[3]
            .strip_prefix("V=")
            .and_then(|v| v.parse().ok())
            .with_context(bad)?;
        let tok = match fields[2] {
            "kind=bytes" => Self::Bytes,
            "kind=ids" => Self::Ids { vocab },
            "kind=words" => Self::from_words(lines.map(str::to_string).collect()),
            _ => bail!(bad()),
        };
        ensure!(
            tok.vocab_size() == vocab,
            "{}: header says V={vocab} but the file defines {} ids",
            path.display(),
            tok.vocab_size()
        );
        Ok(tok)
    }

    /// The tokenizer belonging to a tree file, checked against its leaves.
    pub fn for_tree(tree_path: &Path, tree: &TokenTree) -> Result<Self> {
        let side = Self::sidecar_path(tree_path);
        let tok = if side.exists() {
            Self::load(&side)?
        } else {
            Self::Bytes
        };
        ensure!(
            tok.vocab_size() == tree.vocab_size(),
            "tree {} has {} leaves but its tokenizer has {} ids{}",
            tree_path.display(),
            tree.vocab_size(),
            tok.vocab_size(),
            if side.exists() {
                ""
            } else {
                " (no .tok sidecar, assumed bytes)"
            }
        );
        Ok(tok)
    }
}
