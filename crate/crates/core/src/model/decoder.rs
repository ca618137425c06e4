//! Look-ahead decoder and gate head. From one backbone hidden state the
//! decoder predicts the next several tokens without running the backbone
//! forward. Its input row 0 is a projection of the hidden state; rows
//! 1..=j are embeddings of already-committed continuation tokens. Output
//! state j carries a distribution for continuation token j+1 and a gate
//! logit scoring how much that prediction can be trusted.

use super::{ln, transformer_block, ModelIds};
use crate::config::ModelConfig;
use crate::num::{Graph, NodeId, RowSrc, Scalar};

pub struct DecoderOut {
    /// Normalized decoder states, one row per input position.
    pub states: NodeId,
    /// Token logits per state, tied to the vocabulary table passed in.
    pub logits: NodeId,
    /// One gate logit per state, shape [rows, 1].
    pub gate_logits: NodeId,
}

/// Teacher-forced forward. `h_row` is the backbone hidden state at the
/// anchor position, shape [1, d_model]; `fed_tokens` are the continuation
/// tokens fed back as inputs (the model's own picks during rollout, ground
/// truth during training). Row count is `1 + fed_tokens.len()`.
pub fn decoder_forward<S: Scalar>(
    g: &mut Graph<S>,
    ids: &ModelIds,
    cfg: &ModelConfig,
    h_row: NodeId,
    fed_tokens: &[usize],
    emb_node: NodeId,
) -> DecoderOut {
    let r = 1 + fed_tokens.len();
    assert!(
        r <= cfg.c_max_capacity,
        "decoder window of {r} rows exceeds capacity {}",
        cfg.c_max_capacity
    );
    let pw = g.param(ids.dec.proj_w);
    let pb = g.param(ids.dec.proj_b);
    let seed = g.linear(h_row, pw, pb);
    let x = if fed_tokens.is_empty() {
        seed
    } else {
        let rows: Vec<RowSrc> = fed_tokens.iter().map(|&t| RowSrc::Tok(t)).collect();
        let tok = g.compose_rows(emb_node, &rows);
        g.concat_rows(&[seed, tok])
    };
    let pos = g.param(ids.dec.pos);
    let pos = g.slice_rows(pos, 0, r);
    let x = g.add(x, pos);
    let x = transformer_block(g, x, &ids.dec.blk, cfg.n_heads);
    let states = ln(g, x, &ids.dec.lnf);
    let logits = g.matmul_nt(states, emb_node);
    let gw = g.param(ids.gate_w);
    let gb = g.param(ids.gate_b);
    let gate_logits = g.linear(states, gw, gb);
    DecoderOut { states, logits, gate_logits }
}
