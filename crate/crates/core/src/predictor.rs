//! The interface between diffusion machinery and a child-prediction network.

use crate::error::{Error, Result};
use crate::tree::{NodeId, TokenId, TokenTree};

/// Logit value used by reference predictors for slots they rule out.
pub const CERTAIN_MARGIN: f64 = 1e4;

/// Emits K child logits per position for a batch of node-state sequences.
pub trait ChildPredictor {
    fn branching(&self) -> usize;

    /// `nodes` holds `times.len()` rows of `seq_len` states; the result is
    /// row-major `rows × seq_len × K`.
    fn child_logits(&self, nodes: &[NodeId], seq_len: usize, times: &[f64]) -> Result<Vec<f64>>;
}

pub(crate) fn check_shape(nodes: &[NodeId], seq_len: usize, times: &[f64]) -> Result<()> {
    if nodes.len() != seq_len * times.len() {
        return Err(Error::InvalidInput(format!(
            "{} node states for {} rows of length {seq_len}",
            nodes.len(),
            times.len()
        )));
    }
    Ok(())
}

/// All-zero logits: the uniform distribution over existing children.
#[derive(Debug, Clone, Copy)]
pub struct UniformPredictor {
    pub branching: usize,
}

impl ChildPredictor for UniformPredictor {
    fn branching(&self) -> usize {
        self.branching
    }

    fn child_logits(&self, nodes: &[NodeId], seq_len: usize, times: &[f64]) -> Result<Vec<f64>> {
        check_shape(nodes, seq_len, times)?;
        Ok(vec![0.0; nodes.len() * self.branching])
    }
}

/// Predicts the child on the path to a fixed target sequence with certainty.
/// Every batch row is scored against the same target; states off the target
/// path get uniform logits.
#[derive(Debug, Clone)]
pub struct PathOracle<'a> {
    tree: &'a TokenTree,
    target: Vec<TokenId>,
}

impl<'a> PathOracle<'a> {
    pub fn new(tree: &'a TokenTree, target: Vec<TokenId>) -> Self {
        Self { tree, target }
    }
}

impl ChildPredictor for PathOracle<'_> {
    fn branching(&self) -> usize {
        self.tree.branching()
    }

    fn child_logits(&self, nodes: &[NodeId], seq_len: usize, times: &[f64]) -> Result<Vec<f64>> {
        check_shape(nodes, seq_len, times)?;
        if seq_len != self.target.len() {
            return Err(Error::InvalidInput(format!(
                "oracle target has length {}, rows have {seq_len}",
                self.target.len()
            )));
        }
        let k = self.tree.branching();
        let mut out = vec![0.0; nodes.len() * k];
        for (i, &z) in nodes.iter().enumerate() {
            let x = self.target[i % seq_len];
            let h = self.tree.height_of(z);
            if h >= 1 && self.tree.token_ancestor(x, h) == z {
                let y = self.tree.child_index(x, h)?;
                let row = &mut out[i * k..(i + 1) * k];
                row.iter_mut().for_each(|v| *v = -CERTAIN_MARGIN);
                row[y] = 0.0;
            }
        }
        Ok(out)
    }
}
