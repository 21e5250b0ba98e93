//! Uniform-depth K-ary token tree.
//!
//! Leaves sit at height 0 and carry exactly one vocabulary token each; the
//! single root sits at height `H`. Every internal node has between one and `K`
//! children, and the position of a child in its parent's list is its label.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type NodeId = usize;
pub type TokenId = u32;

/// One node of an unvalidated tree, as read from disk or assembled by hand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawNode {
    pub parent: Option<NodeId>,
    pub label: Option<usize>,
    pub height: usize,
    pub token: Option<TokenId>,
}

/// A tree whose invariants have not been checked yet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTree {
    pub branching: usize,
    pub vocab_size: usize,
    pub nodes: Vec<RawNode>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub node: Option<NodeId>,
    pub message: String,
}

impl Violation {
    fn at(node: NodeId, message: impl Into<String>) -> Self {
        Self {
            node: Some(node),
            message: message.into(),
        }
    }

    fn global(message: impl Into<String>) -> Self {
        Self {
            node: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(n) => write!(f, "node {n}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl RawTree {
    /// Check every structural invariant. An empty list means the tree is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.nodes.len();
        if n == 0 {
            out.push(Violation::global("tree has no nodes"));
            return out;
        }
        if self.branching == 0 {
            out.push(Violation::global("branching factor must be positive"));
        }

        let mut children: Vec<Vec<(usize, NodeId)>> = vec![Vec::new(); n];
        let mut roots = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            match node.parent {
                None => {
                    roots.push(id);
                    if node.label.is_some() {
                        out.push(Violation::at(id, "root must not carry a child label"));
                    }
                }
                Some(p) if p >= n => {
                    out.push(Violation::at(id, format!("dangling parent reference {p}")));
                }
                Some(p) if p == id => {
                    out.push(Violation::at(id, "node is its own parent"));
                }
                Some(p) => {
                    if self.nodes[p].height != node.height + 1 {
                        out.push(Violation::at(
                            id,
                            format!(
                                "height {} but parent {p} has height {}",
                                node.height, self.nodes[p].height
                            ),
                        ));
                    }
                    match node.label {
                        Some(l) => children[p].push((l, id)),
                        None => out.push(Violation::at(id, "non-root node has no child label")),
                    }
                }
            }
        }

        let max_height = self.nodes.iter().map(|x| x.height).max().unwrap_or(0);
        match roots.as_slice() {
            [r] => {
                if self.nodes[*r].height != max_height {
                    out.push(Violation::at(
                        *r,
                        format!(
                            "root height {} differs from tree height {max_height}",
                            self.nodes[*r].height
                        ),
                    ));
                }
            }
            [] => out.push(Violation::global("tree has no root")),
            many => out.push(Violation::global(format!(
                "tree has {} roots ({:?})",
                many.len(),
                &many[..many.len().min(4)]
            ))),
        }

        for (id, kids) in children.iter_mut().enumerate() {
            if kids.len() > self.branching {
                out.push(Violation::at(
                    id,
                    format!(
                        "{} children exceed branching factor {}",
                        kids.len(),
                        self.branching
                    ),
                ));
            }
            kids.sort_unstable();
            if kids.iter().enumerate().any(|(i, &(l, _))| i != l) {
                out.push(Violation::at(
                    id,
                    "child labels are not exactly 0..children-1",
                ));
            }
        }

        let mut seen = vec![false; self.vocab_size];
        let mut leaves = 0usize;
        for (id, node) in self.nodes.iter().enumerate() {
            let is_leaf = children[id].is_empty();
            if is_leaf {
                leaves += 1;
                if node.height != 0 {
                    out.push(Violation::at(
                        id,
                        format!("leaf at height {} (depth-short leaf)", node.height),
                    ));
                }
                match node.token {
                    None => out.push(Violation::at(id, "leaf carries no token")),
                    Some(tok) if tok as usize >= self.vocab_size => out.push(Violation::at(
                        id,
                        format!("token {tok} outside vocabulary of size {}", self.vocab_size),
                    )),
                    Some(tok) => {
                        if seen[tok as usize] {
                            out.push(Violation::at(
                                id,
                                format!("token {tok} mapped to two leaves"),
                            ));
                        }
                        seen[tok as usize] = true;
                    }
                }
            } else if node.token.is_some() {
                out.push(Violation::at(id, "internal node carries a token"));
            }
        }
        let missing = seen.iter().filter(|s| !**s).count();
        if missing > 0 && leaves >= self.vocab_size {
            out.push(Violation::global(format!(
                "{missing} token(s) have no leaf"
            )));
        } else if leaves < self.vocab_size {
            out.push(Violation::global(format!(
                "{leaves} leaves for a vocabulary of {}",
                self.vocab_size
            )));
        }
        out
    }
}

/// Immutable, validated token tree with precomputed ancestor tables.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTree {
    branching: usize,
    tree_height: usize,
    parent: Vec<Option<NodeId>>,
    label: Vec<Option<usize>>,
    children: Vec<Vec<NodeId>>,
    height: Vec<usize>,
    token_of_node: Vec<Option<TokenId>>,
    leaf_of_token: Vec<NodeId>,
    levels: Vec<Vec<NodeId>>,
    level_pos: Vec<usize>,
    // node * (H + 1) + h -> ancestor at height h (only meaningful for h >= height(node))
    ancestors: Vec<NodeId>,
}

impl TokenTree {
    pub fn from_raw(raw: RawTree) -> Result<Self> {
        let violations = raw.validate();
        if !violations.is_empty() {
            return Err(Error::InvalidTree(violations));
        }
        let n = raw.nodes.len();
        let tree_height = raw.nodes.iter().map(|x| x.height).max().unwrap_or(0);
        let mut children: Vec<Vec<(usize, NodeId)>> = vec![Vec::new(); n];
        for (id, node) in raw.nodes.iter().enumerate() {
            if let (Some(p), Some(l)) = (node.parent, node.label) {
                children[p].push((l, id));
            }
        }
        let children: Vec<Vec<NodeId>> = children
            .into_iter()
            .map(|mut c| {
                c.sort_unstable();
                c.into_iter().map(|(_, id)| id).collect()
            })
            .collect();

        let mut levels = vec![Vec::new(); tree_height + 1];
        let mut level_pos = vec![0; n];
        for (id, node) in raw.nodes.iter().enumerate() {
            level_pos[id] = levels[node.height].len();
            levels[node.height].push(id);
        }

        let mut leaf_of_token = vec![0; raw.vocab_size];
        for (id, node) in raw.nodes.iter().enumerate() {
            if let Some(tok) = node.token {
                leaf_of_token[tok as usize] = id;
            }
        }

        let stride = tree_height + 1;
        let mut ancestors = vec![usize::MAX; n * stride];
        for id in 0..n {
            let mut cur = id;
            loop {
                let h = raw.nodes[cur].height;
                ancestors[id * stride + h] = cur;
                match raw.nodes[cur].parent {
                    Some(p) => cur = p,
                    None => break,
                }
            }
        }

        Ok(Self {
            branching: raw.branching,
            tree_height,
            parent: raw.nodes.iter().map(|x| x.parent).collect(),
            label: raw.nodes.iter().map(|x| x.label).collect(),
            children,
            height: raw.nodes.iter().map(|x| x.height).collect(),
            token_of_node: raw.nodes.iter().map(|x| x.token).collect(),
            leaf_of_token,
            levels,
            level_pos,
            ancestors,
        })
    }

    /// A complete K-ary tree of the given height; tokens are numbered in leaf order.
    pub fn complete(branching: usize, height: usize) -> Result<Self> {
        if branching < 1 {
            return Err(Error::InvalidConfig("branching factor must be >= 1".into()));
        }
        let vocab = branching
            .checked_pow(height as u32)
            .filter(|v| *v <= 1 << 24)
            .ok_or_else(|| Error::InvalidConfig("complete tree too large".into()))?;
        let mut nodes = vec![RawNode {
            parent: None,
            label: None,
            height,
            token: None,
        }];
        let mut frontier = vec![0usize];
        for h in (0..height).rev() {
            let mut next = Vec::with_capacity(frontier.len() * branching);
            for &p in &frontier {
                for l in 0..branching {
                    next.push(nodes.len());
                    nodes.push(RawNode {
                        parent: Some(p),
                        label: Some(l),
                        height: h,
                        token: None,
                    });
                }
            }
            frontier = next;
        }
        for (tok, &leaf) in frontier.iter().enumerate() {
            nodes[leaf].token = Some(tok as TokenId);
        }
        Self::from_raw(RawTree {
            branching,
            vocab_size: vocab,
            nodes,
        })
    }

    pub fn to_raw(&self) -> RawTree {
        RawTree {
            branching: self.branching,
            vocab_size: self.leaf_of_token.len(),
            nodes: (0..self.node_count())
                .map(|id| RawNode {
                    parent: self.parent[id],
                    label: self.label[id],
                    height: self.height[id],
                    token: self.token_of_node[id],
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Vec<Violation> {
        self.to_raw().validate()
    }

    pub fn node_count(&self) -> usize {
        self.parent.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.leaf_of_token.len()
    }

    /// `K`: the maximum number of children of any node, and the head width.
    pub fn branching(&self) -> usize {
        self.branching
    }

    /// `H`: height of the root.
    pub fn tree_height(&self) -> usize {
        self.tree_height
    }

    pub fn root(&self) -> NodeId {
        self.levels[self.tree_height][0]
    }

    pub fn height_of(&self, node: NodeId) -> usize {
        self.height[node]
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        self.parent[node]
    }

    pub fn children(&self, node: NodeId) -> &[NodeId] {
        &self.children[node]
    }

    pub fn child_label(&self, node: NodeId) -> Option<usize> {
        self.label[node]
    }

    pub fn token_of(&self, node: NodeId) -> Option<TokenId> {
        self.token_of_node[node]
    }

    pub fn leaf_of(&self, token: TokenId) -> NodeId {
        self.leaf_of_token[token as usize]
    }

    /// Nodes of height `h`, in ascending id order.
    pub fn level(&self, h: usize) -> &[NodeId] {
        &self.levels[h]
    }

    /// Dense index of `node` inside its own level.
    pub fn level_index(&self, node: NodeId) -> usize {
        self.level_pos[node]
    }

    /// Ancestor of `node` at height `h`; the identity when `h == height(node)`.
    pub fn ancestor(&self, node: NodeId, h: usize) -> Result<NodeId> {
        if node >= self.node_count() {
            return Err(Error::Domain(format!("node {node} out of range")));
        }
        if h < self.height[node] || h > self.tree_height {
            return Err(Error::Domain(format!(
                "no ancestor at height {h} for node {node} of height {} (H = {})",
                self.height[node], self.tree_height
            )));
        }
        Ok(self.ancestors[node * (self.tree_height + 1) + h])
    }

    /// Ancestor of a token's leaf at height `h`. Panics if `h > H`.
    #[inline]
    pub fn token_ancestor(&self, token: TokenId, h: usize) -> NodeId {
        assert!(h <= self.tree_height, "height {h} above root");
        self.ancestors[self.leaf_of_token[token as usize] * (self.tree_height + 1) + h]
    }

    /// `Γ↓`: height-`h` descendants of `node`, or, when `h == height(node)`, the
    /// node together with its siblings (the root maps to itself).
    pub fn offspring(&self, node: NodeId, h: usize) -> Result<Vec<NodeId>> {
        if node >= self.node_count() {
            return Err(Error::Domain(format!("node {node} out of range")));
        }
        let nh = self.height[node];
        if h > nh {
            return Err(Error::Domain(format!(
                "offspring height {h} above node height {nh}"
            )));
        }
        if h == nh {
            return Ok(match self.parent[node] {
                Some(p) => self.children[p].clone(),
                None => vec![node],
            });
        }
        let mut frontier = vec![node];
        for _ in h..nh {
            frontier = frontier
                .iter()
                .flat_map(|&m| self.children[m].iter().copied())
                .collect();
        }
        Ok(frontier)
    }

    /// Label `j` such that `children(ancestor(token, h))[j] == ancestor(token, h - 1)`.
    pub fn child_index(&self, token: TokenId, h: usize) -> Result<usize> {
        if token as usize >= self.vocab_size() {
            return Err(Error::Domain(format!("token {token} out of range")));
        }
        if h == 0 || h > self.tree_height {
            return Err(Error::Domain(format!(
                "child label requested at height {h}, valid range is 1..={}",
                self.tree_height
            )));
        }
        let below = self.token_ancestor(token, h - 1);
        Ok(self.label[below].expect("non-root node has a label"))
    }

    /// Which of the K child slots of `node` exist.
    pub fn child_mask(&self, node: NodeId) -> Result<Vec<bool>> {
        if node >= self.node_count() {
            return Err(Error::Domain(format!("node {node} out of range")));
        }
        if self.height[node] == 0 {
            return Err(Error::Domain(format!("node {node} is a leaf")));
        }
        let c = self.children[node].len();
        Ok((0..self.branching).map(|j| j < c).collect())
    }

    /// `Γ↑^(h,h+1)`: the 0/1 map taking height-`h` mass to height-`h+1` mass.
    pub fn level_map(&self, h: usize) -> Result<LevelMap> {
        if h >= self.tree_height {
            return Err(Error::Domain(format!(
                "level map from height {h} needs h < H = {}",
                self.tree_height
            )));
        }
        let parent_row = self.levels[h]
            .iter()
            .map(|&n| self.level_pos[self.parent[n].expect("non-root")])
            .collect();
        Ok(LevelMap {
            rows: self.levels[h + 1].len(),
            parent_row,
        })
    }

    /// Per-node child counts, indexed by count (0..=K).
    pub fn branching_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.branching + 1];
        for c in &self.children {
            hist[c.len()] += 1;
        }
        hist
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(
            w,
            "TDLM-TREE v1 K={} H={} N={} V={}",
            self.branching,
            self.tree_height,
            self.node_count(),
            self.vocab_size()
        )?;
        for id in 0..self.node_count() {
            let fmt_opt = |v: Option<usize>| v.map_or("-1".to_string(), |x| x.to_string());
            writeln!(
                w,
                "{id} {} {} {} {}",
                fmt_opt(self.parent[id]),
                fmt_opt(self.label[id]),
                self.height[id],
                fmt_opt(self.token_of_node[id].map(|t| t as usize)),
            )?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(fs::File::open(path)?))
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().transpose()?.ok_or(Error::Parse {
            line: 1,
            msg: "empty file".into(),
        })?;
        let (k, h, n, v) = parse_header(&header)?;

        let mut nodes = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            nodes.push(parse_node_line(&line, line_no, nodes.len())?);
        }
        if nodes.len() != n {
            return Err(Error::Parse {
                line: 1,
                msg: format!(
                    "header declares N={n} but file has {} node lines",
                    nodes.len()
                ),
            });
        }
        let raw = RawTree {
            branching: k,
            vocab_size: v,
            nodes,
        };
        if let Some(first) = raw.validate().into_iter().next() {
            return Err(Error::Parse {
                line: first.node.map_or(1, |id| id + 2),
                msg: first.message,
            });
        }
        let tree = Self::from_raw(raw)?;
        if tree.tree_height != h {
            return Err(Error::Parse {
                line: 1,
                msg: format!(
                    "header declares H={h} but tree height is {}",
                    tree.tree_height
                ),
            });
        }
        Ok(tree)
    }
}

fn parse_header(header: &str) -> Result<(usize, usize, usize, usize)> {
    let bad = |msg: String| Error::Parse { line: 1, msg };
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 6 || parts[0] != "TDLM-TREE" || parts[1] != "v1" {
        return Err(bad(format!("malformed header {header:?}")));
    }
    let field = |s: &str, key: &str| -> Result<usize> {
        s.strip_prefix(key)
            .and_then(|x| x.strip_prefix('='))
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| bad(format!("expected {key}=<int>, found {s:?}")))
    };
    Ok((
        field(parts[2], "K")?,
        field(parts[3], "H")?,
        field(parts[4], "N")?,
        field(parts[5], "V")?,
    ))
}

fn parse_node_line(line: &str, line_no: usize, expected_id: usize) -> Result<RawNode> {
    let bad = |msg: String| Error::Parse { line: line_no, msg };
    let fields: Vec<i64> = line
        .split_whitespace()
        .map(|s| s.parse::<i64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| bad(format!("{e} in {line:?}")))?;
    if fields.len() != 5 {
        return Err(bad(format!("expected 5 fields, found {}", fields.len())));
    }
    if fields[0] != expected_id as i64 {
        return Err(bad(format!(
            "node id {} out of order, expected {expected_id}",
            fields[0]
        )));
    }
    let opt = |x: i64, what: &str| -> Result<Option<usize>> {
        match x {
            -1 => Ok(None),
            x if x >= 0 => Ok(Some(x as usize)),
            x => Err(bad(format!("invalid {what} {x}"))),
        }
    };
    if fields[3] < 0 {
        return Err(bad(format!("negative height {}", fields[3])));
    }
    Ok(RawNode {
        parent: opt(fields[1], "parent")?,
        label: opt(fields[2], "child label")?,
        height: fields[3] as usize,
        token: opt(fields[4], "token")?.map(|t| t as TokenId),
    })
}

/// Column `j` (a height-h node) maps to row `parent_row[j]` (its height-(h+1) parent).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelMap {
    pub rows: usize,
    pub parent_row: Vec<usize>,
}

impl LevelMap {
    pub fn cols(&self) -> usize {
        self.parent_row.len()
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        u8::from(self.parent_row[col] == row)
    }

    pub fn apply(&self, mass: &[f64]) -> Vec<f64> {
        assert_eq!(mass.len(), self.cols());
        let mut out = vec![0.0; self.rows];
        for (j, &m) in mass.iter().enumerate() {
            out[self.parent_row[j]] += m;
        }
        out
    }

    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        (0..self.rows)
            .map(|r| (0..self.cols()).map(|c| self.get(r, c)).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn six_token_raw() -> RawTree {
        // root -> {a, b}; a -> {p, l2}; p -> {l0, l1}; b -> {q, l5}; q -> {l3, l4}
        // l2 and l5 get padding parents so every leaf sits at height 0.
        let spec: &[(i64, i64, usize, i64)] = &[
            (-1, -1, 3, -1), // 0 root
            (0, 0, 2, -1),   // 1 a
            (0, 1, 2, -1),   // 2 b
            (1, 0, 1, -1),   // 3 p
            (1, 1, 1, -1),   // 4 pad over l2
            (2, 0, 1, -1),   // 5 q
            (2, 1, 1, -1),   // 6 pad over l5
            (3, 0, 0, 0),
            (3, 1, 0, 1),
            (4, 0, 0, 2),
            (5, 0, 0, 3),
            (5, 1, 0, 4),
            (6, 0, 0, 5),
        ];
        RawTree {
            branching: 2,
            vocab_size: 6,
            nodes: spec
                .iter()
                .map(|&(p, l, h, t)| RawNode {
                    parent: (p >= 0).then_some(p as usize),
                    label: (l >= 0).then_some(l as usize),
                    height: h,
                    token: (t >= 0).then_some(t as TokenId),
                })
                .collect(),
        }
    }

    #[test]
    fn hand_built_tree_is_valid() {
        let raw = six_token_raw();
        assert!(raw.validate().is_empty());
        let t = TokenTree::from_raw(raw).unwrap();
        assert_eq!(t.tree_height(), 3);
        assert_eq!(t.root(), 0);
        assert_eq!(t.level(0).len(), 6);
    }

    #[test]
    fn ancestor_identity_and_root() {
        let t = TokenTree::from_raw(six_token_raw()).unwrap();
        for tok in 0..6 {
            let leaf = t.leaf_of(tok);
            assert_eq!(t.ancestor(leaf, 0).unwrap(), leaf);
            assert_eq!(t.ancestor(leaf, 3).unwrap(), t.root());
        }
        assert_eq!(t.ancestor(t.leaf_of(3), 2).unwrap(), 2);
        assert!(t.ancestor(1, 1).is_err());
        assert!(t.ancestor(7, 4).is_err());
    }

    #[test]
    fn offspring_cases() {
        let t = TokenTree::from_raw(six_token_raw()).unwrap();
        assert_eq!(t.offspring(0, 3).unwrap(), vec![0]);
        // sibling set of a leaf, itself included
        assert_eq!(t.offspring(7, 0).unwrap(), vec![7, 8]);
        assert_eq!(t.offspring(12, 0).unwrap(), vec![12]);
        let leaves: Vec<_> = t
            .offspring(2, 0)
            .unwrap()
            .into_iter()
            .map(|n| t.token_of(n).unwrap())
            .collect();
        assert_eq!(leaves, vec![3, 4, 5]);
        assert!(t.offspring(7, 1).is_err());
    }

    #[test]
    fn child_index_and_mask() {
        let t = TokenTree::from_raw(six_token_raw()).unwrap();
        // padding link always has label 0
        assert_eq!(t.child_index(2, 1).unwrap(), 0);
        assert_eq!(t.child_index(4, 1).unwrap(), 1);
        assert!(t.child_index(0, 0).is_err());
        for tok in 0..6 {
            for h in 1..=3 {
                let j = t.child_index(tok, h).unwrap();
                let up = t.token_ancestor(tok, h);
                assert_eq!(t.children(up)[j], t.token_ancestor(tok, h - 1));
            }
        }
        assert_eq!(t.child_mask(0).unwrap(), vec![true, true]);
        assert_eq!(t.child_mask(4).unwrap(), vec![true, false]);
        assert!(t.child_mask(7).is_err());
    }

    #[test]
    fn level_map_top_and_chain() {
        let t = TokenTree::from_raw(six_token_raw()).unwrap();
        let top = t.level_map(2).unwrap();
        assert_eq!(top.to_dense(), vec![vec![1, 1]]);
        assert!(t.level_map(3).is_err());
        for tok in 0..6 {
            let mut mass = vec![0.0; t.level(0).len()];
            mass[t.level_index(t.leaf_of(tok))] = 1.0;
            for h in 0..3 {
                mass = t.level_map(h).unwrap().apply(&mass);
            }
            assert_eq!(mass, vec![1.0]);
        }
    }

    #[test]
    fn single_token_tree() {
        let raw = RawTree {
            branching: 4,
            vocab_size: 1,
            nodes: vec![RawNode {
                parent: None,
                label: None,
                height: 0,
                token: Some(0),
            }],
        };
        let t = TokenTree::from_raw(raw).unwrap();
        assert_eq!(t.tree_height(), 0);
        assert_eq!(t.root(), t.leaf_of(0));
    }

    #[test]
    fn depth_short_leaf_is_one_violation() {
        // Drop leaf 12 and let its padding parent 6 carry the token directly.
        let mut raw = six_token_raw();
        raw.nodes.pop();
        raw.nodes[6].token = Some(5);
        let v = raw.validate();
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].message.contains("depth-short"));
    }

    #[test]
    fn too_many_children_is_one_violation() {
        let mut nodes = vec![RawNode {
            parent: None,
            label: None,
            height: 1,
            token: None,
        }];
        for l in 0..3 {
            nodes.push(RawNode {
                parent: Some(0),
                label: Some(l),
                height: 0,
                token: Some(l as TokenId),
            });
        }
        let raw = RawTree {
            branching: 2,
            vocab_size: 3,
            nodes,
        };
        let v = raw.validate();
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].message.contains("exceed"));
    }

    #[test]
    fn duplicate_token_rejected() {
        let mut raw = six_token_raw();
        raw.nodes[8].token = Some(0);
        let v = raw.validate();
        assert!(v.iter().any(|x| x.message.contains("two leaves")));
    }

    #[test]
    fn complete_tree_shape() {
        let t = TokenTree::complete(2, 4).unwrap();
        assert_eq!(t.vocab_size(), 16);
        assert_eq!(t.node_count(), 31);
        assert!(t.validate().is_empty());
    }
}
