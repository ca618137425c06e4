//! Model definition: a small decoder-only transformer backbone, a span
//! compressor that folds a short token run into one latent vector, a
//! look-ahead decoder that predicts the next few tokens from a single hidden
//! state, and a scalar gate head over decoder states.
//!
//! All parameters live in one [`ParamStore`] under dotted names. The name
//! prefixes (`backbone.`, `compressor.`, `decoder.`, `gate.`) are the unit of
//! stage-wise freezing, so nothing else may reuse them.

pub mod backbone;
pub mod compressor;
pub mod decoder;
pub mod fast;
pub mod vocab;

use crate::config::ModelConfig;
use crate::num::{Graph, NodeId, ParamId, ParamStore, Scalar, Tensor};
use rand::Rng;

/// The compressor depth is fixed; it is not a tuning knob.
pub const N_COMPRESSOR_LAYERS: usize = 2;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct LnIds {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub ln1: LnIds,
    pub attn: AttnIds,
    pub ln2: LnIds,
    pub ffn: FfnIds,
}

/// Cross-attention block: the query stream updates, the context does not.
#[derive(Debug, Clone, Copy)]
pub struct CompBlockIds {
    pub lnq: LnIds,
    pub lnc: LnIds,
    pub attn: AttnIds,
    pub ln2: LnIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone)]
pub struct CompressorIds {
    pub query: ParamId,
    pub pos: ParamId,
    pub layers: Vec<CompBlockIds>,
    pub lnf: LnIds,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct DecoderIds {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub pos: ParamId,
    pub blk: BlockIds,
    pub lnf: LnIds,
}

#[derive(Debug, Clone)]
pub struct ModelIds {
    pub emb: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub lnf: LnIds,
    pub comp: CompressorIds,
    pub dec: DecoderIds,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
}

impl ModelIds {
    /// Look every parameter up by name. Panics if the store was not built by
    /// [`init_model`] with a matching config.
    pub fn resolve<S: Scalar>(store: &ParamStore<S>, cfg: &ModelConfig) -> ModelIds {
        let ln = |p: &str| LnIds { g: store.id(&format!("{p}.g")), b: store.id(&format!("{p}.b")) };
        let attn = |p: &str| AttnIds {
            wq: store.id(&format!("{p}.wq")),
            wk: store.id(&format!("{p}.wk")),
            wv: store.id(&format!("{p}.wv")),
            wo: store.id(&format!("{p}.wo")),
        };
        let ffn = |p: &str| FfnIds {
            w1: store.id(&format!("{p}.w1")),
            b1: store.id(&format!("{p}.b1")),
            w2: store.id(&format!("{p}.w2")),
            b2: store.id(&format!("{p}.b2")),
        };
        let block = |p: &str| BlockIds {
            ln1: ln(&format!("{p}.ln1")),
            attn: attn(&format!("{p}.attn")),
            ln2: ln(&format!("{p}.ln2")),
            ffn: ffn(&format!("{p}.ffn")),
        };
        ModelIds {
            emb: store.id("backbone.emb"),
            pos: store.id("backbone.pos"),
            blocks: (0..cfg.n_layers).map(|i| block(&format!("backbone.l{i}"))).collect(),
            lnf: ln("backbone.lnf"),
            comp: CompressorIds {
                query: store.id("compressor.query"),
                pos: store.id("compressor.pos"),
                layers: (0..N_COMPRESSOR_LAYERS)
                    .map(|i| {
                        let p = format!("compressor.l{i}");
                        CompBlockIds {
                            lnq: ln(&format!("{p}.lnq")),
                            lnc: ln(&format!("{p}.lnc")),
                            attn: attn(&format!("{p}.attn")),
                            ln2: ln(&format!("{p}.ln2")),
                            ffn: ffn(&format!("{p}.ffn")),
                        }
                    })
                    .collect(),
                lnf: ln("compressor.lnf"),
                out_w: store.id("compressor.out.w"),
                out_b: store.id("compressor.out.b"),
            },
            dec: DecoderIds {
                proj_w: store.id("decoder.proj.w"),
                proj_b: store.id("decoder.proj.b"),
                pos: store.id("decoder.pos"),
                blk: block("decoder.blk"),
                lnf: ln("decoder.lnf"),
            },
            gate_w: store.id("gate.w"),
            gate_b: store.id("gate.b"),
        }
    }
}

/// Register all model parameters and return their handles. Registration
/// order is fixed by this function body and becomes the checkpoint order.
pub fn init_model<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    cfg: &ModelConfig,
    vocab_len: usize,
    rng: &mut R,
) -> ModelIds {
    let d = cfg.d_model;

    fn reg_ln<S: Scalar>(store: &mut ParamStore<S>, p: &str, d: usize) {
        store.register(&format!("{p}.g"), Tensor::from_vec(1, d, vec![S::one(); d]));
        store.register(&format!("{p}.b"), Tensor::zeros(1, d));
    }
    fn reg_attn<S: Scalar, R: Rng>(store: &mut ParamStore<S>, p: &str, d: usize, rng: &mut R) {
        for w in ["wq", "wk", "wv", "wo"] {
            store.register(&format!("{p}.{w}"), Tensor::randn(d, d, INIT_STD, rng));
        }
    }
    fn reg_ffn<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        p: &str,
        d: usize,
        d_ff: usize,
        rng: &mut R,
    ) {
        store.register(&format!("{p}.w1"), Tensor::randn(d, d_ff, INIT_STD, rng));
        store.register(&format!("{p}.b1"), Tensor::zeros(1, d_ff));
        store.register(&format!("{p}.w2"), Tensor::randn(d_ff, d, INIT_STD, rng));
        store.register(&format!("{p}.b2"), Tensor::zeros(1, d));
    }
    fn reg_block<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        p: &str,
        d: usize,
        d_ff: usize,
        rng: &mut R,
    ) {
        reg_ln(store, &format!("{p}.ln1"), d);
        reg_attn(store, &format!("{p}.attn"), d, rng);
        reg_ln(store, &format!("{p}.ln2"), d);
        reg_ffn(store, &format!("{p}.ffn"), d, d_ff, rng);
    }

    store.register("backbone.emb", Tensor::randn(vocab_len, d, INIT_STD, rng));
    store.register("backbone.pos", Tensor::randn(cfg.max_seq_len, d, INIT_STD, rng));
    for i in 0..cfg.n_layers {
        reg_block(store, &format!("backbone.l{i}"), d, cfg.d_ff, rng);
    }
    reg_ln(store, "backbone.lnf", d);

    store.register("compressor.query", Tensor::randn(1, d, INIT_STD, rng));
    store.register("compressor.pos", Tensor::randn(cfg.c_max_capacity, d, INIT_STD, rng));
    for i in 0..N_COMPRESSOR_LAYERS {
        let p = format!("compressor.l{i}");
        reg_ln(store, &format!("{p}.lnq"), d);
        reg_ln(store, &format!("{p}.lnc"), d);
        reg_attn(store, &format!("{p}.attn"), d, rng);
        reg_ln(store, &format!("{p}.ln2"), d);
        reg_ffn(store, &format!("{p}.ffn"), d, cfg.d_ff, rng);
    }
    reg_ln(store, "compressor.lnf", d);
    store.register("compressor.out.w", Tensor::randn(d, d, INIT_STD, rng));
    store.register("compressor.out.b", Tensor::zeros(1, d));

    store.register("decoder.proj.w", Tensor::randn(d, d, INIT_STD, rng));
    store.register("decoder.proj.b", Tensor::zeros(1, d));
    store.register("decoder.pos", Tensor::randn(cfg.c_max_capacity, d, INIT_STD, rng));
    reg_block(store, "decoder.blk", d, cfg.d_ff, rng);
    reg_ln(store, "decoder.lnf", d);

    store.register("gate.w", Tensor::randn(d, 1, INIT_STD, rng));
    store.register("gate.b", Tensor::zeros(1, 1));

    ModelIds::resolve(store, cfg)
}

pub(crate) fn ln<S: Scalar>(g: &mut Graph<S>, x: NodeId, ids: &LnIds) -> NodeId {
    let gain = g.param(ids.g);
    let bias = g.param(ids.b);
    g.layer_norm(x, gain, bias)
}

/// Multi-head scaled dot-product attention. `x_q` supplies queries, `x_kv`
/// keys and values; pass the same node for self-attention.
pub(crate) fn multi_head_attention<S: Scalar>(
    g: &mut Graph<S>,
    x_q: NodeId,
    x_kv: NodeId,
    ids: &AttnIds,
    n_heads: usize,
    causal: bool,
) -> NodeId {
    let wq = g.param(ids.wq);
    let wk = g.param(ids.wk);
    let wv = g.param(ids.wv);
    let q = g.matmul(x_q, wq);
    let k = g.matmul(x_kv, wk);
    let v = g.matmul(x_kv, wv);
    let d = g.value(q).cols();
    assert!(d % n_heads == 0, "width {d} not divisible by {n_heads} heads");
    let dh = d / n_heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let s = g.matmul_nt(qh, kh);
        let mut s = g.scale(s, scale);
        if causal {
            s = g.causal_mask(s);
        }
        let p = g.row_softmax(s);
        heads.push(g.matmul(p, vh));
    }
    let o = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
    let wo = g.param(ids.wo);
    g.matmul(o, wo)
}

pub(crate) fn ffn<S: Scalar>(g: &mut Graph<S>, x: NodeId, ids: &FfnIds) -> NodeId {
    let w1 = g.param(ids.w1);
    let b1 = g.param(ids.b1);
    let h = g.linear(x, w1, b1);
    let h = g.gelu(h);
    let w2 = g.param(ids.w2);
    let b2 = g.param(ids.b2);
    g.linear(h, w2, b2)
}

/// Pre-norm residual block with causal self-attention.
pub(crate) fn transformer_block<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    ids: &BlockIds,
    n_heads: usize,
) -> NodeId {
    let a = ln(g, x, &ids.ln1);
    let a = multi_head_attention(g, a, a, &ids.attn, n_heads, true);
    let x = g.add(x, a);
    let f = ln(g, x, &ids.ln2);
    let f = ffn(g, f, &ids.ffn);
    g.add(x, f)
}
