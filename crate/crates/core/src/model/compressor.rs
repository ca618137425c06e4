//! Span compressor: folds a run of 1..=c_max tokens into a single latent
//! row. A learned query cross-attends over the span's token embeddings (plus
//! span-local positions) twice, then a linear head emits the latent. The
//! caller decides whether the embedding table node is a parameter (training
//! the whole stack) or a constant (latent-only or frozen phases).

use super::{ffn, ln, multi_head_attention, ModelIds};
use crate::config::ModelConfig;
use crate::num::{Graph, NodeId, RowSrc, Scalar};

pub fn compress_span<S: Scalar>(
    g: &mut Graph<S>,
    ids: &ModelIds,
    cfg: &ModelConfig,
    tokens: &[usize],
    emb_node: NodeId,
) -> NodeId {
    let n = tokens.len();
    assert!(n >= 1, "cannot compress an empty span");
    assert!(n <= cfg.c_max, "span of {n} tokens exceeds c_max {}", cfg.c_max);
    let rows: Vec<RowSrc> = tokens.iter().map(|&t| RowSrc::Tok(t)).collect();
    let tok = g.compose_rows(emb_node, &rows);
    let pos = g.param(ids.comp.pos);
    let pos = g.slice_rows(pos, 0, n);
    let ctx = g.add(tok, pos);
    let mut q = g.param(ids.comp.query);
    for layer in &ids.comp.layers {
        let qn = ln(g, q, &layer.lnq);
        let cn = ln(g, ctx, &layer.lnc);
        let a = multi_head_attention(g, qn, cn, &layer.attn, cfg.n_heads, false);
        q = g.add(q, a);
        let f = ln(g, q, &layer.ln2);
        let f = ffn(g, f, &layer.ffn);
        q = g.add(q, f);
    }
    let qf = ln(g, q, &ids.comp.lnf);
    let ow = g.param(ids.comp.out_w);
    let ob = g.param(ids.comp.out_b);
    g.linear(qf, ow, ob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::num::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelConfig, ParamStore<f32>, ModelIds) {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 12,
            c_max: 3,
            c_max_capacity: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let ids = init_model(&mut store, &cfg, 13, &mut rng);
        (cfg, store, ids)
    }

    #[test]
    fn latent_is_one_row_and_depends_on_every_span_token() {
        let (cfg, store, ids) = setup();
        let z = |tokens: &[usize]| {
            let mut g = Graph::new(&store);
            let emb = g.param(ids.emb);
            let z = compress_span(&mut g, &ids, &cfg, tokens, emb);
            assert_eq!(g.value(z).shape(), (1, 8));
            g.value(z).data().to_vec()
        };
        let base = z(&[3, 7, 9]);
        assert_ne!(base, z(&[4, 7, 9]));
        assert_ne!(base, z(&[3, 8, 9]));
        assert_ne!(base, z(&[3, 7, 10]));
        assert_eq!(base, z(&[3, 7, 9]));
    }

    #[test]
    fn span_order_matters() {
        let (cfg, store, ids) = setup();
        let z = |tokens: &[usize]| {
            let mut g = Graph::new(&store);
            let emb = g.param(ids.emb);
            let z = compress_span(&mut g, &ids, &cfg, tokens, emb);
            g.value(z).data().to_vec()
        };
        assert_ne!(z(&[3, 7]), z(&[7, 3]));
    }

    #[test]
    #[should_panic(expected = "empty span")]
    fn empty_span_panics() {
        let (cfg, store, ids) = setup();
        let mut g = Graph::new(&store);
        let emb = g.param(ids.emb);
        compress_span(&mut g, &ids, &cfg, &[], emb);
    }

    #[test]
    #[should_panic(expected = "exceeds c_max")]
    fn overlong_span_panics() {
        let (cfg, store, ids) = setup();
        let mut g = Graph::new(&store);
        let emb = g.param(ids.emb);
        compress_span(&mut g, &ids, &cfg, &[1, 2, 3, 4], emb);
    }
}
