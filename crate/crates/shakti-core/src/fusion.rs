//! Multimodal fusion: projecting encoder features into the decoder's
//! embedding space and splicing visual tokens into a token sequence.
//!
//! Layout of a fused sequence: `[BOS] [visual tokens] [text tokens]`.
//! Supervision applies only to text positions at or beyond `prompt_len`;
//! the BOS, the visual span and the prompt are never loss targets.

use crate::error::{Result, TensorError};
use crate::params::{Fwd, Param};
use crate::tensor::ops::concat;
use crate::tensor::{Element, Tensor};

/// Map encoder features `[n, enc_dim]` to decoder space `[n, dec_dim]`
/// through a two-layer MLP with a SiLU in between.
pub fn project_visual<E: Element>(
    features: &Tensor<E>,
    p1: &Param<E>,
    p2: &Param<E>,
    fwd: &Fwd<'_, E>,
) -> Result<Tensor<E>> {
    features.matmul(&fwd.bind(p1)?)?.silu()?.matmul(&fwd.bind(p2)?)
}

/// A decoder-ready sequence of embeddings with aligned supervision targets.
pub struct FusedSequence<E: Element> {
    /// `[len, dec_dim]` input embeddings.
    pub embeddings: Tensor<E>,
    /// Positions `[start, end)` holding visual tokens (empty when text-only).
    pub visual_range: (usize, usize),
    /// Token id occupying each position (0 for visual positions).
    pub target_ids: Vec<usize>,
    /// True exactly at supervised positions.
    pub loss_mask: Vec<bool>,
    /// Number of leading text tokens treated as prompt.
    pub prompt_len: usize,
}

impl<E: Element> FusedSequence<E> {
    pub fn len(&self) -> usize {
        self.target_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_ids.is_empty()
    }

    pub fn supervised_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Build the decoder input sequence `[BOS] [visual] [text]`.
///
/// `visual` holds already-projected visual tokens; `prompt_len` counts the
/// leading `text_ids` excluded from supervision. Text may be empty (e.g.
/// at the start of generation); supervision then covers nothing.
pub fn fuse_sequence<E: Element>(
    visual: Option<&Tensor<E>>,
    text_ids: &[usize],
    prompt_len: usize,
    tok_embed: &Tensor<E>,
    bos_id: usize,
) -> Result<FusedSequence<E>> {
    if tok_embed.rank() != 2 {
        return Err(TensorError::Invalid {
            op: "fuse_sequence",
            msg: format!("embedding table must be [vocab, dim], got {:?}", tok_embed.shape()),
        }
        .into());
    }
    let d = tok_embed.shape()[1];
    if prompt_len > text_ids.len() {
        return Err(TensorError::Invalid {
            op: "fuse_sequence",
            msg: format!(
                "prompt_len {prompt_len} exceeds text length {}",
                text_ids.len()
            ),
        }
        .into());
    }
    let n_visual = match visual {
        Some(v) => {
            if v.rank() != 2 || v.shape()[1] != d {
                return Err(TensorError::ShapeMismatch {
                    op: "fuse_sequence",
                    lhs: v.shape().to_vec(),
                    rhs: vec![0, d],
                }
                .into());
            }
            v.shape()[0]
        }
        None => 0,
    };

    let bos_row = tok_embed.gather_rows(&[bos_id])?;
    let text_rows = if text_ids.is_empty() {
        None
    } else {
        Some(tok_embed.gather_rows(text_ids)?)
    };
    let mut parts: Vec<&Tensor<E>> = vec![&bos_row];
    if let Some(v) = visual {
        parts.push(v);
    }
    if let Some(t) = &text_rows {
        parts.push(t);
    }
    let embeddings = concat(&parts, 0)?;

    let total = 1 + n_visual + text_ids.len();
    let mut target_ids = Vec::with_capacity(total);
    let mut loss_mask = Vec::with_capacity(total);
    target_ids.push(bos_id);
    loss_mask.push(false);
    for _ in 0..n_visual {
        target_ids.push(0);
        loss_mask.push(false);
    }
    for (i, &id) in text_ids.iter().enumerate() {
        target_ids.push(id);
        loss_mask.push(i >= prompt_len);
    }
    Ok(FusedSequence {
        embeddings,
        visual_range: (1, 1 + n_visual),
        target_ids,
        loss_mask,
        prompt_len,
    })
}
