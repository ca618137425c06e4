//! Staged training drivers keyed off one `RunConfig`, shared by the command
//! line and the integration suite so both train through identical code.
//!
//! Stage order: explicit-chain fit, latent fitting (frozen backbone then
//! joint), decoding-head and gate supervision plus verification refit, then
//! trajectory tuning. Each driver mutates the store in place; checkpoint IO
//! stays at the edges.

use crate::config::RunConfig;
use crate::data::TokenizedProblem;
use crate::hybrid::SpanStrategy;
use crate::model::fast::FastModel;
use crate::model::vocab::Vocabulary;
use crate::model::{init_model, ModelIds};
use crate::num::{load_checkpoint, save_checkpoint, CheckpointError, ParamStore};
use crate::report::MetricRow;
use crate::train::grpo::{run_stage3, Stage3Outcome};
use crate::train::stage1::{run_sft, SftOptions, SpanSchedule};
use crate::train::stage2::{
    collect_verification_labels, run_stage2, verification_refine, RefineReport, Stage2Outcome,
};
use crate::train::{derived_rng, TAG_STAGE0, TAG_STAGE1A, TAG_STAGE1B, TAG_VERIFY};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

const LOG_EVERY: usize = 200;

/// Fresh parameters keyed on the run seed.
pub fn init_from_config(cfg: &RunConfig, vocab: &Vocabulary) -> (ParamStore<f32>, ModelIds) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids = init_model(&mut store, &cfg.model, vocab.len(), &mut rng);
    (store, ids)
}

/// The four supervised phases share one options constructor so a run driven
/// epoch by epoch (for checkpointing) trains exactly like a one-shot call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SftPhase {
    /// Explicit-chain fit.
    Stage0,
    /// Empty-think-region fit; its held-out accuracy anchors the per-token
    /// lift metric, so it trains as a separate model.
    Baseline,
    /// Latent fitting with the backbone held fixed, so only the compressor
    /// learns to mimic the rows the backbone expects.
    Stage1Frozen,
    /// Joint continuation of the latent fit with everything unfrozen.
    Stage1Joint,
}

impl SftPhase {
    pub fn stage_name(self) -> &'static str {
        match self {
            SftPhase::Stage0 => "stage0",
            SftPhase::Baseline => "baseline",
            SftPhase::Stage1Frozen => "stage1a",
            SftPhase::Stage1Joint => "stage1b",
        }
    }
}

pub fn sft_options(phase: SftPhase, cfg: &RunConfig) -> SftOptions {
    let (rng_tag, epochs, batch_size, lr) = match phase {
        SftPhase::Stage0 | SftPhase::Baseline => {
            (TAG_STAGE0, cfg.stage0.epochs, cfg.stage0.batch_size, cfg.stage0.lr)
        }
        SftPhase::Stage1Frozen => {
            (TAG_STAGE1A, cfg.stage1.epochs_frozen, cfg.stage1.batch_size, cfg.stage1.lr)
        }
        SftPhase::Stage1Joint => {
            (TAG_STAGE1B, cfg.stage1.epochs_joint, cfg.stage1.batch_size, cfg.stage1.lr)
        }
    };
    SftOptions {
        stage_name: phase.stage_name(),
        rng_tag,
        epochs,
        batch_size,
        lr,
        frozen_prefixes: match phase {
            SftPhase::Stage1Frozen => vec!["backbone.".to_string()],
            _ => Vec::new(),
        },
        spans: match phase {
            SftPhase::Stage1Frozen | SftPhase::Stage1Joint => Some(schedule_from(cfg)),
            _ => None,
        },
        no_cot: phase == SftPhase::Baseline,
        seed: cfg.seed,
        log_every: LOG_EVERY,
        epoch_offset: 0,
    }
}

fn schedule_from(cfg: &RunConfig) -> SpanSchedule {
    SpanSchedule {
        strategy: cfg
            .stage1
            .strategy
            .parse::<SpanStrategy>()
            .expect("strategy was checked by RunConfig::validate"),
        start: cfg.stage1.schedule_start,
        end: cfg.stage1.schedule_end,
        ramp_epochs: cfg.stage1.schedule_ramp_epochs,
    }
}

/// Explicit-chain supervised fit. Returns the last-epoch mean loss.
pub fn train_stage0(
    store: &mut ParamStore<f32>,
    ids: &ModelIds,
    cfg: &RunConfig,
    vocab: &Vocabulary,
    data: &[TokenizedProblem],
    metrics: &mut Vec<MetricRow>,
) -> f64 {
    let opt = sft_options(SftPhase::Stage0, cfg);
    run_sft(store, ids, &cfg.model, vocab, data, &opt, metrics)
}

pub fn train_no_cot_baseline(
    store: &mut ParamStore<f32>,
    ids: &ModelIds,
    cfg: &RunConfig,
    vocab: &Vocabulary,
    data: &[TokenizedProblem],
    metrics: &mut Vec<MetricRow>,
) -> f64 {
    let opt = sft_options(SftPhase::Baseline, cfg);
    run_sft(store, ids, &cfg.model, vocab, data, &opt, metrics)
}

pub fn train_stage1_frozen(
    store: &mut ParamStore<f32>,
    ids: &ModelIds,
    cfg: &RunConfig,
    vocab: &Vocabulary,
    data: &[TokenizedProblem],
    metrics: &mut Vec<MetricRow>,
) -> f64 {
    let opt = sft_options(SftPhase::Stage1Frozen, cfg);
    run_sft(store, ids, &cfg.model, vocab, data, &opt, metrics)
}

pub fn train_stage1_joint(
    store: &mut ParamStore<f32>,
    ids: &ModelIds,
    cfg: &RunConfig,
    vocab: &Vocabulary,
    data: &[TokenizedProblem],
    metrics: &mut Vec<MetricRow>,
) -> f64 {
    let opt = sft_options(SftPhase::Stage1Joint, cfg);
    run_sft(store, ids, &cfg.model, vocab, data, &opt, metrics)
}

#[derive(Debug, Clone)]
pub struct Stage2Artifacts {
    pub outcome: Stage2Outcome,
    pub refine: RefineReport,
    pub n_labels: usize,
}

/// Decoding-head and gate supervision, then gate refit against roll-out
/// verification labels collected from a record subset.
pub fn train_stage2(
    store: &mut ParamStore<f32>,
    ids: &ModelIds,
    cfg: &RunConfig,
    vocab: &Vocabulary,
    data: &[TokenizedProblem],
    metrics: &mut Vec<MetricRow>,
) -> Stage2Artifacts {
    let outcome = run_stage2(store, ids, &cfg.model, data, &cfg.stage2, cfg.seed, metrics);
    let fast = FastModel::new(ids.clone(), cfg.model.clone());
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut derived_rng(cfg.seed, TAG_VERIFY, 1 << 40));
    order.truncate(cfg.stage2.verify_subset.min(data.len()).max(1));
    let subset: Vec<TokenizedProblem> = order.into_iter().map(|i| data[i].clone()).collect();
    let labels = collect_verification_labels(store, &fast, vocab, &subset, 2, cfg.seed);
    let refine = verification_refine(
        store,
        ids,
        &labels,
        cfg.stage2.refine_epochs,
        cfg.stage2.refine_lr,
        cfg.seed,
    );
    Stage2Artifacts { outcome, refine, n_labels: labels.len() }
}

/// Trajectory tuning over sampled roll-outs.
pub fn train_stage3(
    store: &mut ParamStore<f32>,
    ids: &ModelIds,
    cfg: &RunConfig,
    vocab: &Vocabulary,
    data: &[TokenizedProblem],
    metrics: &mut Vec<MetricRow>,
) -> Stage3Outcome {
    run_stage3(store, ids, &cfg.model, vocab, data, &cfg.stage3, cfg.seed, metrics)
}

/// Persist the store together with the config that produced it.
pub fn save_stage(
    path: &Path,
    store: &ParamStore<f32>,
    cfg: &RunConfig,
) -> Result<(), CheckpointError> {
    save_checkpoint(path, store, &cfg.to_json())
}

#[derive(Debug, thiserror::Error)]
pub enum LoadStageError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint config does not parse: {0}")]
    Config(#[from] serde_json::Error),
}

/// Reload a stage checkpoint and rebuild the id table from its own config.
pub fn load_stage(path: &Path) -> Result<(ParamStore<f32>, ModelIds, RunConfig), LoadStageError> {
    let (store, cfg_json) = load_checkpoint(path)?;
    let cfg: RunConfig = serde_json::from_value(cfg_json)?;
    let ids = ModelIds::resolve(&store, &cfg.model);
    Ok((store, ids, cfg))
}
