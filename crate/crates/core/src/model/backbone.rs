//! Backbone forward pass on the autodiff graph. Inputs are given per
//! position as either a token id or an arbitrary embedding-row node, which is
//! how latent vectors enter the sequence: the latent replaces the embedding
//! at its position outright, only the positional encoding is still added.

use super::{ln, transformer_block, ModelIds};
use crate::config::ModelConfig;
use crate::num::{Graph, NodeId, RowSrc, Scalar};

pub struct BackboneOut {
    /// Final normalized hidden states, one row per input position.
    pub hidden: NodeId,
    /// Next-token logits per position, tied to the embedding table.
    pub logits: NodeId,
}

pub fn backbone_forward<S: Scalar>(
    g: &mut Graph<S>,
    ids: &ModelIds,
    cfg: &ModelConfig,
    rows: &[RowSrc],
) -> BackboneOut {
    let t = rows.len();
    assert!(t >= 1, "backbone needs at least one input position");
    assert!(t <= cfg.max_seq_len, "sequence length {t} exceeds max_seq_len {}", cfg.max_seq_len);
    let emb = g.param(ids.emb);
    let tok = g.compose_rows(emb, rows);
    let pos = g.param(ids.pos);
    let pos = g.slice_rows(pos, 0, t);
    let mut x = g.add(tok, pos);
    for blk in &ids.blocks {
        x = transformer_block(g, x, blk, cfg.n_heads);
    }
    let hidden = ln(g, x, &ids.lnf);
    let logits = g.matmul_nt(hidden, emb);
    BackboneOut { hidden, logits }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::num::{ParamStore, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelConfig, ParamStore<f32>, ModelIds) {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 12,
            c_max: 3,
            c_max_capacity: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let ids = init_model(&mut store, &cfg, 13, &mut rng);
        (cfg, store, ids)
    }

    fn toks(ids: &[usize]) -> Vec<RowSrc> {
        ids.iter().map(|&t| RowSrc::Tok(t)).collect()
    }

    #[test]
    fn output_shapes() {
        let (cfg, store, ids) = setup();
        let mut g = Graph::new(&store);
        let out = backbone_forward(&mut g, &ids, &cfg, &toks(&[0, 5, 7, 2]));
        assert_eq!(g.value(out.hidden).shape(), (4, 8));
        assert_eq!(g.value(out.logits).shape(), (4, 13));
        g.value(out.logits).assert_finite("logits");
    }

    #[test]
    fn changing_a_later_token_leaves_earlier_logits_alone() {
        let (cfg, store, ids) = setup();
        let mut ga = Graph::new(&store);
        let a = backbone_forward(&mut ga, &ids, &cfg, &toks(&[0, 5, 7, 2]));
        let mut gb = Graph::new(&store);
        let b = backbone_forward(&mut gb, &ids, &cfg, &toks(&[0, 5, 7, 9]));
        let la = ga.value(a.logits);
        let lb = gb.value(b.logits);
        for t in 0..3 {
            assert_eq!(la.row(t), lb.row(t), "position {t} saw the future");
        }
        assert_ne!(la.row(3), lb.row(3));
    }

    #[test]
    fn latent_row_changes_logits_from_its_position_on() {
        let (cfg, store, ids) = setup();
        let mut ga = Graph::new(&store);
        let za = ga.constant(Tensor::from_vec(1, 8, vec![0.3; 8]));
        let a = backbone_forward(
            &mut ga,
            &ids,
            &cfg,
            &[RowSrc::Tok(0), RowSrc::Node(za), RowSrc::Tok(7), RowSrc::Tok(2)],
        );
        let mut gb = Graph::new(&store);
        let zb = gb.constant(Tensor::from_vec(1, 8, vec![-0.4; 8]));
        let b = backbone_forward(
            &mut gb,
            &ids,
            &cfg,
            &[RowSrc::Tok(0), RowSrc::Node(zb), RowSrc::Tok(7), RowSrc::Tok(2)],
        );
        let la = ga.value(a.logits);
        let lb = gb.value(b.logits);
        assert_eq!(la.row(0), lb.row(0));
        for t in 1..4 {
            assert_ne!(la.row(t), lb.row(t), "latent at 1 should reach position {t}");
        }
    }

    #[test]
    #[should_panic(expected = "exceeds max_seq_len")]
    fn overlong_input_panics() {
        let (cfg, store, ids) = setup();
        let mut g = Graph::new(&store);
        backbone_forward(&mut g, &ids, &cfg, &toks(&[1; 13]));
    }
}
