use crate::error::{ModelError, Result};

/// Feed-forward hidden width as a multiple of the model width.
pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Maximum sequence length (rows of the position table).
    pub seq_len: usize,
    /// Rows of the node embedding table, one per tree node.
    pub node_vocab: usize,
    /// Child head width K.
    pub branching: usize,
    /// Neighborhood length of the optional joint head.
    pub joint: Option<usize>,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.d == 0 || self.layers == 0 || self.heads == 0 || self.seq_len == 0 {
            return bad(format!(
                "d, layers, heads and seq_len must be positive: {self:?}"
            ));
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad(format!(
                "width {} is not divisible by {} heads",
                self.d, self.heads
            ));
        }
        if !self.d.is_multiple_of(2) {
            return bad(format!(
                "width {} must be even for the sinusoidal time embedding",
                self.d
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!(
                "head width {} must be even for rotary position encoding",
                self.head_dim()
            ));
        }
        if self.node_vocab == 0 || self.branching == 0 {
            return bad("node table and head width must be non-empty".into());
        }
        if let Some(l) = self.joint {
            tdlm_core::loss::NeighborhoodConfig::new(l)
                .joint_width(self.branching)
                .map_err(|e| ModelError::Config(e.to_string()))?;
            if !self.seq_len.is_multiple_of(l) {
                return bad(format!(
                    "sequence length {} is not a multiple of neighborhood {l}",
                    self.seq_len
                ));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn hidden(&self) -> usize {
        MLP_RATIO * self.d
    }

    /// `K^L` when the joint head is enabled.
    pub fn joint_width(&self) -> Option<usize> {
        self.joint.map(|l| self.branching.pow(l as u32))
    }

    /// Closed-form parameter count, matching the tensor layout.
    pub fn param_count(&self) -> usize {
        let d = self.d;
        let embed = self.node_vocab * d + self.seq_len * d;
        let time = 2 * d * d + 2 * d;
        let block = 2 * d + 3 * d * d + d * d + 2 * d * self.hidden() + self.hidden() + d;
        let joint = self
            .joint
            .map_or(0, |l| l * d * self.branching.pow(l as u32));
        embed + time + self.layers * block + d + d * self.branching + joint
    }

    /// Parameters of the child head alone, `d · K`.
    pub fn head_params(&self) -> usize {
        self.d * self.branching
    }
}
