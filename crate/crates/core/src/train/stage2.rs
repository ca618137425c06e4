//! Reliability training for the feature decoder and gate.
//!
//! The backbone and compressor are frozen here: their outputs enter every
//! graph as constants, so a gradient reaching them is a hard bug. The decoder
//! learns to mirror the backbone's own next-token distributions over short
//! look-ahead windows from a single hidden state, and the gate learns to flag
//! the window positions where that mirror agrees with the backbone. A second
//! pass re-labels gate targets by actually compressing rolled-out spans and
//! checking whether the backbone still predicts the right continuation, then
//! fine-tunes the gate alone on those outcome labels.

use crate::config::{ModelConfig, Stage2Config};
use crate::data::{splitmix64, TokenizedProblem};
use crate::model::decoder::decoder_forward;
use crate::model::fast::{argmax, dot_chain, BackboneRun, FastInput, FastModel};
use crate::model::vocab::Vocabulary;
use crate::model::ModelIds;
use crate::num::graph::softmax_row;
use crate::num::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use crate::report::{roc_auc, MetricRow};
use crate::train::{
    assert_no_grads_under, derived_rng, prefix_bytes, TAG_REFINE, TAG_STAGE2, TAG_VERIFY,
};
use rand::seq::SliceRandom;
use thiserror::Error;

const SUM_TOL: f64 = 1e-4;
const WEIGHT_MIN: f64 = 0.1;
const WEIGHT_MAX: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum GateLabelError {
    #[error("decoder and reference distribution counts differ: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("distribution pair {index} has mismatched widths: {dec} vs {reference}")]
    WidthMismatch { index: usize, dec: usize, reference: usize },
    #[error("{which} distribution {index} sums to {sum:.6}, not 1")]
    BadSum { which: &'static str, index: usize, sum: f64 },
}

/// Agreement labels for gate supervision plus inverse-frequency weights
/// balancing the two classes within the batch.
#[derive(Debug, Clone)]
pub struct GateLabelSet {
    pub labels: Vec<bool>,
    pub weights: Vec<f32>,
}

/// Token ids of the k largest probabilities; equal probabilities rank the
/// lower token id first.
fn top_k_ids(p: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k.min(p.len()));
    idx
}

fn check_sum(p: &[f32], which: &'static str, index: usize) -> Result<(), GateLabelError> {
    let sum: f64 = p.iter().map(|&v| v as f64).sum();
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(GateLabelError::BadSum { which, index, sum });
    }
    Ok(())
}

/// Mutual top-3 agreement: the decoder's top pick must appear in the
/// reference's top three and the reference's top pick in the decoder's top
/// three. Both distributions must sum to 1.
pub fn compute_gate_labels(
    p_dec: &[Vec<f32>],
    p_ref: &[Vec<f32>],
) -> Result<GateLabelSet, GateLabelError> {
    if p_dec.len() != p_ref.len() {
        return Err(GateLabelError::CountMismatch(p_dec.len(), p_ref.len()));
    }
    let mut labels = Vec::with_capacity(p_dec.len());
    for (i, (d, r)) in p_dec.iter().zip(p_ref).enumerate() {
        if d.len() != r.len() {
            return Err(GateLabelError::WidthMismatch {
                index: i,
                dec: d.len(),
                reference: r.len(),
            });
        }
        check_sum(d, "decoder", i)?;
        check_sum(r, "reference", i)?;
        let d_top = top_k_ids(d, 3);
        let r_top = top_k_ids(r, 3);
        labels.push(r_top.contains(&d_top[0]) && d_top.contains(&r_top[0]));
    }
    Ok(GateLabelSet { weights: class_weights(&labels), labels })
}

/// Per-element weight n / (2 * n_class), clamped; a batch with one class
/// leaves the absent class's weight unused.
fn class_weights(labels: &[bool]) -> Vec<f32> {
    let n = labels.len() as f64;
    let n_pos = labels.iter().filter(|&&b| b).count() as f64;
    let n_neg = n - n_pos;
    let w = |n_c: f64| {
        if n_c == 0.0 {
            1.0
        } else {
            (n / (2.0 * n_c)).clamp(WEIGHT_MIN, WEIGHT_MAX)
        }
    };
    let (w_pos, w_neg) = (w(n_pos) as f32, w(n_neg) as f32);
    labels.iter().map(|&b| if b { w_pos } else { w_neg }).collect()
}

/// One look-ahead window: the frozen hidden state at the anchor, the
/// teacher-forced continuation tokens, and the backbone's own distributions
/// over each window position.
pub(crate) struct AnchorPlan {
    pub h: Tensor<f32>,
    pub fed: Vec<usize>,
    pub p_ref: Tensor<f32>,
    pub k: usize,
}

/// Window of `min(c_max, end_think - t - 1)` positions starting at anchor
/// `t`; position j is scored against the backbone's distribution at row
/// `t + j`, so the window never reads past the end of the think region.
pub(crate) fn plan_anchor(
    run: &BackboneRun,
    full: &[usize],
    t: usize,
    end_think: usize,
    c_max: usize,
) -> AnchorPlan {
    assert!(t + 2 <= end_think, "anchor {t} leaves no window before {end_think}");
    let k = c_max.min(end_think - t - 1);
    let d = run.hiddens.cols();
    let v = run.logits.cols();
    let h = Tensor::from_vec(1, d, run.hiddens.row(t).to_vec());
    let fed = full[t + 1..t + k].to_vec();
    let mut p = Vec::with_capacity(k * v);
    for j in 0..k {
        let mut row = run.logits.row(t + j).to_vec();
        softmax_row(&mut row);
        p.extend_from_slice(&row);
    }
    AnchorPlan { h, fed, p_ref: Tensor::from_vec(k, v, p), k }
}

#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub vocab_loss: f64,
    pub gate_loss: f64,
}

/// Train decoder and gate against the frozen backbone. Returns the last
/// epoch's mean per-window losses.
pub fn run_stage2(
    store: &mut ParamStore<f32>,
    ids: &ModelIds,
    cfg: &ModelConfig,
    data: &[TokenizedProblem],
    s2: &Stage2Config,
    seed: u64,
    metrics: &mut Vec<MetricRow>,
) -> Stage2Outcome {
    assert!(!data.is_empty(), "stage 2 needs a non-empty corpus");
    let frozen = ["backbone.", "compressor."];
    let fast = FastModel::new(ids.clone(), cfg.clone());
    let mut adam = Adam::new(store, AdamConfig { lr: s2.lr, ..AdamConfig::default() });
    let mut step = 0u64;
    let mut outcome = Stage2Outcome { vocab_loss: f64::NAN, gate_loss: f64::NAN };
    for epoch in 0..s2.epochs {
        let mut rng = derived_rng(seed, TAG_STAGE2, epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        if s2.max_records > 0 {
            order.truncate(s2.max_records);
        }
        let mut epoch_vocab = 0.0f64;
        let mut epoch_gate = 0.0f64;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(s2.batch_size) {
            // Window plans for the whole batch come from frozen forward
            // passes, so they are plain tensors, not graph nodes.
            let mut plans = Vec::new();
            for &i in chunk {
                let rec = &data[i];
                let full = rec.full_sequence();
                let (think, end_think) = rec.think_bounds();
                let mut anchors: Vec<usize> = (think..end_think.saturating_sub(1)).collect();
                if anchors.is_empty() {
                    continue;
                }
                anchors.shuffle(&mut rng);
                anchors.truncate(s2.positions_per_record);
                let inputs: Vec<FastInput> = full.iter().map(|&t| FastInput::Tok(t)).collect();
                let run = fast.backbone_run(store, &inputs);
                for &t in &anchors {
                    plans.push(plan_anchor(&run, &full, t, end_think, cfg.c_max));
                }
            }
            if plans.is_empty() {
                continue;
            }
            let k_total: usize = plans.iter().map(|p| p.k).sum();
            let n_anchors = plans.len();
            let mut g = Graph::new(store);
            let emb = g.constant(store.value(ids.emb).clone());
            let mut vocab_terms = Vec::with_capacity(n_anchors);
            let mut gate_nodes = Vec::with_capacity(n_anchors);
            let mut dec_rows: Vec<Vec<f32>> = Vec::with_capacity(k_total);
            let mut ref_rows: Vec<Vec<f32>> = Vec::with_capacity(k_total);
            for plan in &plans {
                let h = g.constant(plan.h.clone());
                let out = decoder_forward(&mut g, ids, cfg, h, &plan.fed, emb);
                let sce = g.soft_cross_entropy_rows(out.logits, plan.p_ref.clone());
                // The per-window distribution loss sums over positions, so
                // the row mean is scaled back up by the window length.
                vocab_terms.push((sce, plan.k as f32 / n_anchors as f32));
                gate_nodes.push((out.gate_logits, plan.k));
                let logits = g.value(out.logits);
                for j in 0..plan.k {
                    let mut row = logits.row(j).to_vec();
                    softmax_row(&mut row);
                    dec_rows.push(row);
                    ref_rows.push(plan.p_ref.row(j).to_vec());
                }
            }
            let label_set =
                compute_gate_labels(&dec_rows, &ref_rows).expect("softmax rows must be valid");
            let mut gate_terms = Vec::with_capacity(n_anchors);
            let mut off = 0;
            for (node, k) in gate_nodes {
                let targets: Vec<f32> =
                    label_set.labels[off..off + k].iter().map(|&b| b as u8 as f32).collect();
                let weights = &label_set.weights[off..off + k];
                let bce = g.bce_with_logits(node, &targets, weights);
                gate_terms.push((bce, k as f32 / k_total as f32));
                off += k;
            }
            let l_vocab = g.sum_scalars(&vocab_terms);
            let l_gate = g.sum_scalars(&gate_terms);
            let l_total = g.sum_scalars(&[(l_vocab, 1.0), (l_gate, s2.lambda_gate as f32)]);
            let vocab_val = g.value(l_vocab).item() as f64;
            let gate_val = g.value(l_gate).item() as f64;
            g.backward(l_total);
            let grads = g.take_param_grads();
            drop(g);
            assert_no_grads_under(store, &grads, &frozen);
            adam.step(store, &grads, &frozen).expect("optimizer step failed");
            step += 1;
            epoch_vocab += vocab_val;
            epoch_gate += gate_val;
            epoch_batches += 1;
            if step % 100 == 0 {
                let mut row = MetricRow::new("stage2", step);
                row.epoch = Some(epoch as u64);
                row.loss = Some(vocab_val + s2.lambda_gate * gate_val);
                row.loss_vocab = Some(vocab_val);
                row.loss_gate = Some(gate_val);
                metrics.push(row);
            }
        }
        assert!(epoch_batches > 0, "stage 2 epoch saw no usable windows");
        outcome.vocab_loss = epoch_vocab / epoch_batches as f64;
        outcome.gate_loss = epoch_gate / epoch_batches as f64;
        let mut row = MetricRow::new("stage2", step);
        row.epoch = Some(epoch as u64);
        row.loss = Some(outcome.vocab_loss + s2.lambda_gate * outcome.gate_loss);
        row.loss_vocab = Some(outcome.vocab_loss);
        row.loss_gate = Some(outcome.gate_loss);
        metrics.push(row);
    }
    outcome
}

/// Where a verification label came from: the record, the anchor row, and how
/// many rolled-out tokens the compressed span covered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyMeta {
    pub rec_id: u64,
    pub anchor: usize,
    pub span_len: usize,
}

/// Outcome labels for the gate: each decoder state paired with whether
/// compressing its span kept the backbone's next prediction correct.
pub struct VerifyLabels {
    pub states: Vec<Vec<f32>>,
    pub labels: Vec<bool>,
    pub meta: Vec<VerifyMeta>,
}

impl VerifyLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Replay the latent path the model would take at sampled anchors and record
/// whether each span length survives compression: seed the decoder with the
/// backbone's greedy pick, roll out, compress each prefix of the rollout,
/// inject it after the anchor, and compare the backbone's next greedy token
/// against the ground-truth continuation.
pub fn collect_verification_labels(
    store: &ParamStore<f32>,
    fast: &FastModel,
    vocab: &Vocabulary,
    data: &[TokenizedProblem],
    anchors_per_record: usize,
    seed: u64,
) -> VerifyLabels {
    let c_max = fast.cfg.c_max;
    let mut out = VerifyLabels { states: Vec::new(), labels: Vec::new(), meta: Vec::new() };
    for rec in data {
        let full = rec.full_sequence();
        let (think, end_think) = rec.think_bounds();
        if think + 2 > end_think {
            continue;
        }
        let mut anchors: Vec<usize> = (think..end_think - 1).collect();
        anchors.shuffle(&mut derived_rng(seed, TAG_VERIFY, rec.id));
        anchors.truncate(anchors_per_record);
        anchors.sort_unstable();
        // One rolling pass up to the last anchor, snapshotting the cache at
        // each so the latent injection can fork from the real prefix.
        let mut cache = fast.backbone_cache();
        let mut marks = Vec::with_capacity(anchors.len());
        let mut next = 0;
        for (p, &tok) in full.iter().enumerate().take(anchors[anchors.len() - 1] + 1) {
            let step = fast.backbone_step(store, &mut cache, FastInput::Tok(tok));
            if next < anchors.len() && anchors[next] == p {
                marks.push((p, cache.clone(), step.hidden, argmax(&step.logits)));
                next += 1;
            }
        }
        for (t, snapshot, h, x0) in marks {
            if vocab.is_reserved(x0) {
                continue;
            }
            let n_max = c_max.min(end_think - t - 1);
            let roll = fast.decoder_rollout(store, &h, Some(x0), n_max);
            for n in 1..=n_max {
                if vocab.is_reserved(roll.tokens[n - 1]) {
                    break;
                }
                let z = fast.compress(store, &roll.tokens[..n]);
                let mut fork = snapshot.clone();
                let post = fast.backbone_step(store, &mut fork, FastInput::Row(&z));
                out.states.push(roll.states[n - 1].clone());
                out.labels.push(argmax(&post.logits) == full[t + n + 1]);
                out.meta.push(VerifyMeta { rec_id: rec.id, anchor: t, span_len: n });
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct RefineReport {
    pub auc_before: Option<f64>,
    pub auc_after: Option<f64>,
    /// 0 means the starting gate was kept.
    pub chosen_epoch: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub positive_fraction: f64,
}

fn gate_scores(store: &ParamStore<f32>, ids: &ModelIds, labels: &VerifyLabels, idx: &[usize]) -> Vec<(f64, bool)> {
    let w = store.value(ids.gate_w);
    let b = store.value(ids.gate_b).item();
    idx.iter()
        .map(|&i| ((dot_chain(&labels.states[i], w.data()) + b) as f64, labels.labels[i]))
        .collect()
}

/// Fine-tune the gate alone on verification outcomes. Held-out records pick
/// the epoch to keep, with the untouched starting gate always a candidate,
/// so the kept gate never scores below the starting one on that split.
pub fn verification_refine(
    store: &mut ParamStore<f32>,
    ids: &ModelIds,
    labels: &VerifyLabels,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> RefineReport {
    assert!(!labels.is_empty(), "refinement needs verification labels");
    let frozen = ["backbone.", "compressor.", "decoder."];
    let frozen_before: Vec<Vec<u8>> =
        frozen.iter().map(|p| prefix_bytes(store, p)).collect();
    let (mut train_idx, mut val_idx) = (Vec::new(), Vec::new());
    for (i, m) in labels.meta.iter().enumerate() {
        if splitmix64(m.rec_id) % 10 == 9 {
            val_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    let auc_before = roc_auc(&gate_scores(store, ids, labels, &val_idx));
    let mut best = (
        auc_before,
        store.value(ids.gate_w).clone(),
        store.value(ids.gate_b).clone(),
        0usize,
    );
    let mut adam = Adam::new(store, AdamConfig { lr, ..AdamConfig::default() });
    let d = store.value(ids.gate_w).rows();
    for epoch in 1..=epochs {
        train_idx.shuffle(&mut derived_rng(seed, TAG_REFINE, epoch as u64));
        for chunk in train_idx.chunks(256) {
            let mut flat = Vec::with_capacity(chunk.len() * d);
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                flat.extend_from_slice(&labels.states[i]);
                targets.push(labels.labels[i] as u8 as f32);
            }
            let weights = vec![1.0f32; chunk.len()];
            let mut g = Graph::new(store);
            let x = g.constant(Tensor::from_vec(chunk.len(), d, flat));
            let w = g.param(ids.gate_w);
            let b = g.param(ids.gate_b);
            let logits = g.linear(x, w, b);
            let loss = g.bce_with_logits(logits, &targets, &weights);
            g.backward(loss);
            let grads = g.take_param_grads();
            drop(g);
            assert_no_grads_under(store, &grads, &frozen);
            adam.step(store, &grads, &frozen).expect("optimizer step failed");
        }
        let auc = roc_auc(&gate_scores(store, ids, labels, &val_idx));
        if auc > best.0 {
            best = (auc, store.value(ids.gate_w).clone(), store.value(ids.gate_b).clone(), epoch);
        }
    }
    store.get_mut(ids.gate_w).value = best.1;
    store.get_mut(ids.gate_b).value = best.2;
    for (prefix, before) in frozen.iter().zip(&frozen_before) {
        assert_eq!(
            &prefix_bytes(store, prefix),
            before,
            "refinement touched frozen parameter group {prefix}"
        );
    }
    let auc_after = roc_auc(&gate_scores(store, ids, labels, &val_idx));
    RefineReport {
        auc_before,
        auc_after,
        chosen_epoch: best.3,
        n_train: train_idx.len(),
        n_val: val_idx.len(),
        positive_fraction: labels.labels.iter().filter(|&&b| b).count() as f64
            / labels.len() as f64,
    }
}
