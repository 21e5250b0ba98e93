//! Flat parameter storage with a named tensor layout shared by parameters,
//! gradients and optimizer moments.

use crate::config::DenoiserConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockIdx {
    pub attn_norm: usize,
    pub wqkv: usize,
    pub wo: usize,
    pub mlp_norm: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Offsets of every tensor in the flat buffer.
#[derive(Debug, Clone)]
pub(crate) struct Idx {
    pub node_emb: usize,
    pub pos_emb: usize,
    pub t_w1: usize,
    pub t_b1: usize,
    pub t_w2: usize,
    pub t_b2: usize,
    pub blocks: Vec<BlockIdx>,
    pub final_norm: usize,
    pub head: usize,
    pub joint_head: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
    pub(crate) idx: Idx,
}

impl Layout {
    pub fn new(cfg: &DenoiserConfig) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorInfo {
                name,
                shape,
                offset,
            });
            offset
        };
        let d = cfg.d;
        let node_emb = add("node_emb".into(), vec![cfg.node_vocab, d]);
        let pos_emb = add("pos_emb".into(), vec![cfg.seq_len, d]);
        let t_w1 = add("time.w1".into(), vec![d, d]);
        let t_b1 = add("time.b1".into(), vec![d]);
        let t_w2 = add("time.w2".into(), vec![d, d]);
        let t_b2 = add("time.b2".into(), vec![d]);
        let blocks = (0..cfg.layers)
            .map(|l| BlockIdx {
                attn_norm: add(format!("blocks.{l}.attn_norm"), vec![d]),
                wqkv: add(format!("blocks.{l}.wqkv"), vec![d, 3 * d]),
                wo: add(format!("blocks.{l}.wo"), vec![d, d]),
                mlp_norm: add(format!("blocks.{l}.mlp_norm"), vec![d]),
                w1: add(format!("blocks.{l}.w1"), vec![d, cfg.hidden()]),
                b1: add(format!("blocks.{l}.b1"), vec![cfg.hidden()]),
                w2: add(format!("blocks.{l}.w2"), vec![cfg.hidden(), d]),
                b2: add(format!("blocks.{l}.b2"), vec![d]),
            })
            .collect();
        let final_norm = add("final_norm".into(), vec![d]);
        let head = add("head".into(), vec![d, cfg.branching]);
        let joint_head = cfg.joint.map(|l| {
            add(
                "joint_head".into(),
                vec![l * d, cfg.branching.pow(l as u32)],
            )
        });
        Self {
            tensors,
            total,
            idx: Idx {
                node_emb,
                pos_emb,
                t_w1,
                t_b1,
                t_w2,
                t_b2,
                blocks,
                final_norm,
                head,
                joint_head,
            },
        }
    }

    pub fn get(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }
}
