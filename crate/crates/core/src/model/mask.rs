use crate::dataset::{Modality, MultimodalSequence};
use crate::nn::DenseArray;

/// Additive bias for forbidden attention pairs; `exp` of it underflows to
/// exactly zero after max-subtraction.
pub const MASKED_BIAS: f64 = -1e9;

/// Boolean `L×L` allow-matrix; row `i` lists the keys token `i` may read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.len + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.len..(i + 1) * self.len]
    }

    /// `[L, L]` additive bias: 0 where allowed, [`MASKED_BIAS`] elsewhere.
    pub fn to_bias(&self) -> DenseArray {
        DenseArray::from_fn(&[self.len, self.len], |k| if self.allow[k] { 0.0 } else { MASKED_BIAS })
    }
}

/// `allow(i, j)` iff `j` sits in an earlier segment, or in the same segment
/// and either the segment is an image block or `j ≤ i` (causal text).
pub fn build_attention_mask(seq: &MultimodalSequence) -> AttentionMask {
    let len = seq.len();
    let mut allow = vec![false; len * len];
    for (i, ti) in seq.tokens.iter().enumerate() {
        for (j, tj) in seq.tokens.iter().enumerate() {
            allow[i * len + j] =
                tj.segment < ti.segment || (tj.segment == ti.segment && (ti.modality != Modality::Text || j <= i));
        }
    }
    AttentionMask { len, allow }
}
