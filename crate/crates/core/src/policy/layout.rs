//! Placement of every tensor inside the flat parameter vector.
//!
//! Order: token embedding, positional embedding, the transformer blocks from
//! bottom to top, final layer norm, output projection. Because the order is
//! bottom-to-top, each [`ParamGroup`](super::ParamGroup) is one contiguous
//! range.

use std::ops::Range;

use super::PolicyConfig;

/// A dense tensor stored row-major at `offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockLayout>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub w_unembed: Tensor,
    pub b_unembed: Tensor,
    pub total: usize,
    /// Blocks below this index belong to the encoder group.
    pub split_block: usize,
}

struct Cursor(usize);

impl Cursor {
    fn take(&mut self, rows: usize, cols: usize) -> Tensor {
        let t = Tensor {
            offset: self.0,
            rows,
            cols,
        };
        self.0 += rows * cols;
        t
    }
}

impl ParamLayout {
    pub fn new(config: &PolicyConfig) -> Self {
        let d = config.d_model;
        let f = config.ffn_dim();
        let v = config.vocab_size;
        let mut c = Cursor(0);
        let tok_emb = c.take(v, d);
        let pos_emb = c.take(config.context_window, d);
        let blocks = (0..config.n_layers)
            .map(|_| BlockLayout {
                ln1_gain: c.take(1, d),
                ln1_bias: c.take(1, d),
                w_qkv: c.take(d, 3 * d),
                b_qkv: c.take(1, 3 * d),
                w_proj: c.take(d, d),
                b_proj: c.take(1, d),
                ln2_gain: c.take(1, d),
                ln2_bias: c.take(1, d),
                w_fc: c.take(d, f),
                b_fc: c.take(1, f),
                w_out: c.take(f, d),
                b_out: c.take(1, d),
            })
            .collect();
        let lnf_gain = c.take(1, d);
        let lnf_bias = c.take(1, d);
        let w_unembed = c.take(d, v);
        let b_unembed = c.take(1, v);
        Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain,
            lnf_bias,
            w_unembed,
            b_unembed,
            total: c.0,
            split_block: config.n_layers / 2,
        }
    }

    /// Parameters of the embeddings and the lower half of the blocks.
    pub fn encoder_range(&self) -> Range<usize> {
        0..self.head_start()
    }

    /// Parameters of the upper half of the blocks and the output projection.
    pub fn head_range(&self) -> Range<usize> {
        self.head_start()..self.total
    }

    fn head_start(&self) -> usize {
        self.blocks
            .get(self.split_block)
            .map(|b| b.ln1_gain.offset)
            .unwrap_or(self.lnf_gain.offset)
    }
}
