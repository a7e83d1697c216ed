//! Offsets of every named tensor inside the flat parameter buffer.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the flat buffer.
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
pub struct LinearIdx {
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Debug, Clone)]
pub struct NormIdx {
    pub g: Range<usize>,
    pub b: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct BlockIdx {
    pub ln1: NormIdx,
    pub qkv: LinearIdx,
    pub proj: LinearIdx,
    pub ln2: NormIdx,
    pub fc: LinearIdx,
    pub out: LinearIdx,
}

#[derive(Debug, Clone)]
pub struct HeadIdx {
    pub hidden: LinearIdx,
    pub out: LinearIdx,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub input: LinearIdx,
    pub pos: Range<usize>,
    pub blocks: Vec<BlockIdx>,
    pub final_norm: NormIdx,
    pub event_head: HeadIdx,
    pub arrival_head: HeadIdx,
    pub stop_head: HeadIdx,
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
}

struct Builder {
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl Builder {
    fn tensor(&mut self, name: String, shape: Vec<usize>) -> Range<usize> {
        let info = TensorInfo {
            name,
            shape,
            offset: self.total,
        };
        self.total += info.len();
        let r = info.range();
        self.tensors.push(info);
        r
    }

    fn linear(&mut self, name: &str, n_in: usize, n_out: usize) -> LinearIdx {
        LinearIdx {
            w: self.tensor(format!("{name}.weight"), vec![n_in, n_out]),
            b: self.tensor(format!("{name}.bias"), vec![n_out]),
            n_in,
            n_out,
        }
    }

    fn norm(&mut self, name: &str, n: usize) -> NormIdx {
        NormIdx {
            g: self.tensor(format!("{name}.gain"), vec![n]),
            b: self.tensor(format!("{name}.bias"), vec![n]),
        }
    }

    fn head(&mut self, name: &str, d: usize, hidden: usize, out: usize) -> HeadIdx {
        HeadIdx {
            hidden: self.linear(&format!("{name}.hidden"), d, hidden),
            out: self.linear(&format!("{name}.out"), hidden, out),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
        };
        let input = b.linear("input", cfg.d_token, d);
        let pos = b.tensor("pos_embedding".into(), vec![cfg.max_context, d]);
        let blocks = (0..cfg.n_blocks)
            .map(|i| BlockIdx {
                ln1: b.norm(&format!("block{i}.ln1"), d),
                qkv: b.linear(&format!("block{i}.attn.qkv"), d, 3 * d),
                proj: b.linear(&format!("block{i}.attn.proj"), d, d),
                ln2: b.norm(&format!("block{i}.ln2"), d),
                fc: b.linear(&format!("block{i}.mlp.fc"), d, cfg.mlp_hidden),
                out: b.linear(&format!("block{i}.mlp.out"), cfg.mlp_hidden, d),
            })
            .collect();
        let final_norm = b.norm("final_norm", d);
        let event_head = b.head("head.event", d, cfg.head_hidden, cfg.vocab_size());
        let arrival_head = b.head("head.arrival", d, cfg.head_hidden, cfg.arrival_outputs());
        let stop_head = b.head("head.stop", d, cfg.head_hidden, 2);
        Layout {
            input,
            pos,
            blocks,
            final_norm,
            event_head,
            arrival_head,
            stop_head,
            total: b.total,
            tensors: b.tensors,
        }
    }

    pub fn heads(&self) -> [&HeadIdx; 3] {
        [&self.event_head, &self.arrival_head, &self.stop_head]
    }
}
