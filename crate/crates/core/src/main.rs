//! Operator surface: data generation, staged training with per-epoch
//! checkpoints, evaluation, sweeps, ablations, and plot emission.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
//! 4 data error. Anything unexpected exits 1.

use clap::{Args, Parser, Subcommand};
use latentspan::config::{config_hash, ConfigError, ModelConfig, RunConfig};
use latentspan::data::{generate_corpus, load_tokenized, DataError, Split, TokenizedProblem};
use latentspan::hybrid::{select_spans_skipnum, SpanStrategy};
use latentspan::infer::{
    default_gamma_grid, evaluate, teacher_forced_eval, threshold_sweep, timing_benchmark,
    write_frontier_csv, write_traces, DecodeMode, EvalMetrics,
};
use latentspan::model::fast::FastModel;
use latentspan::model::vocab::Vocabulary;
use latentspan::model::ModelIds;
use latentspan::num::ParamStore;
use latentspan::report::{svg_histogram, svg_line_plot, write_metrics_csv, MetricRow};
use latentspan::train::pipeline::{
    init_from_config, load_stage, save_stage, sft_options, train_stage2, train_stage3, SftPhase,
};
use latentspan::train::stage1::{run_sft_with, spans_for_record, SpanSchedule};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "latentspan", version, about = "Selective latent-thinking trainer and evaluator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; holds data/, ckpt/, metrics/, and report files.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus (train/val/test JSONL plus vocab).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Replace existing dataset files.
        #[arg(long)]
        overwrite: bool,
    },
    /// Run one training stage; later stages require the previous checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// 0 = explicit and no-chain baselines, 1 = latent fitting,
        /// 2 = decoding head and gate, 3 = trajectory tuning.
        #[arg(long)]
        stage: u8,
        /// Continue stage 0 or 1 from its latest per-epoch checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Greedy evaluation in explicit and selective modes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Override the config gate threshold.
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Accuracy-length frontier over the gate threshold grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Accepted-span-length histogram at the configured threshold.
    Hist {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Per-problem wall-clock comparison of the two decode modes.
    Timing {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate one checkpoint across span caps 3..=7.
    AblateCmax {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Teacher-forced hybrid scoring under a fixed compression heuristic.
    HeuristicEval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// "random" or "skipnum".
        #[arg(long)]
        strategy: String,
        /// Coverage fraction for the random strategy (skipnum ignores it).
        #[arg(long, default_value_t = 0.7)]
        fraction: f64,
    },
}

enum CliError {
    Config(String),
    MissingPrereq(String),
    Data(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingPrereq(_) => 3,
            CliError::Data(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m)
            | CliError::MissingPrereq(m)
            | CliError::Data(m)
            | CliError::Other(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

/// One command per output directory at a time.
struct Lock(PathBuf);

impl Lock {
    fn acquire(out: &Path) -> Result<Lock, CliError> {
        fs::create_dir_all(out)?;
        let path = out.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Lock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Other(
                format!("{} exists: another command is using this directory", path.display()),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenData { common, overwrite } => {
            let (cfg, _lock) = prepare(&common)?;
            cmd_gen_data(&cfg, &common.out, overwrite)
        }
        Cmd::Train { common, stage, resume } => {
            let (cfg, _lock) = prepare(&common)?;
            cmd_train(&cfg, &common.out, stage, resume)
        }
        Cmd::Eval { common, checkpoint, gamma } => {
            let (mut cfg, _lock) = prepare(&common)?;
            if let Some(g) = gamma {
                cfg.eval.gamma = g;
            }
            cmd_eval(&cfg, &common.out, checkpoint.as_deref())
        }
        Cmd::Sweep { common, checkpoint } => {
            let (cfg, _lock) = prepare(&common)?;
            cmd_sweep(&cfg, &common.out, checkpoint.as_deref())
        }
        Cmd::Hist { common, checkpoint } => {
            let (cfg, _lock) = prepare(&common)?;
            cmd_hist(&cfg, &common.out, checkpoint.as_deref())
        }
        Cmd::Timing { common, checkpoint } => {
            let (cfg, _lock) = prepare(&common)?;
            cmd_timing(&cfg, &common.out, checkpoint.as_deref())
        }
        Cmd::AblateCmax { common, checkpoint } => {
            let (cfg, _lock) = prepare(&common)?;
            cmd_ablate_cmax(&cfg, &common.out, checkpoint.as_deref())
        }
        Cmd::HeuristicEval { common, checkpoint, strategy, fraction } => {
            let (cfg, _lock) = prepare(&common)?;
            cmd_heuristic_eval(&cfg, &common.out, checkpoint.as_deref(), &strategy, fraction)
        }
    }
}

fn prepare(common: &Common) -> Result<(RunConfig, Lock), CliError> {
    let mut cfg = RunConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let lock = Lock::acquire(&common.out)?;
    Ok((cfg, lock))
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path, overwrite: bool) -> Result<(), CliError> {
    let dir = out.join("data");
    if !overwrite {
        for name in ["train.jsonl", "val.jsonl", "test.jsonl", "vocab.json"] {
            let p = dir.join(name);
            if p.exists() {
                return Err(CliError::Data(format!(
                    "{} already exists; pass --overwrite to replace the corpus",
                    p.display()
                )));
            }
        }
    }
    let summary = generate_corpus(&cfg.data, cfg.seed, &dir)?;
    let meta = serde_json::json!({
        "config": config_hash(cfg),
        "seed": cfg.seed,
        "train": summary.train,
        "val": summary.val,
        "test": summary.test,
        "vocab_len": summary.vocab_len,
    });
    fs::write(dir.join("summary.json"), format!("{meta:#}\n"))?;
    println!(
        "wrote {} train / {} val / {} test records ({} vocabulary tokens) to {}",
        summary.train,
        summary.val,
        summary.test,
        summary.vocab_len,
        dir.display()
    );
    Ok(())
}

fn load_split(out: &Path, split: Split) -> Result<Vec<TokenizedProblem>, CliError> {
    let dir = out.join("data");
    let path = dir.join(split.file_name());
    if !path.exists() {
        return Err(CliError::MissingPrereq(format!(
            "{} is missing; run gen-data first",
            path.display()
        )));
    }
    Ok(load_tokenized(&dir, split, &Vocabulary::arithmetic())?)
}

fn ckpt_dir(out: &Path) -> PathBuf {
    out.join("ckpt")
}

fn stage_ckpt(out: &Path, name: &str) -> PathBuf {
    ckpt_dir(out).join(format!("{name}.ckpt"))
}

/// Load a stage checkpoint, insisting its model geometry matches the current
/// config so resolved ids stay valid.
fn load_compatible(path: &Path, model: &ModelConfig) -> Result<(ParamStore<f32>, ModelIds), CliError> {
    let (store, ids, ckpt_cfg) = load_stage(path)
        .map_err(|e| CliError::Other(format!("cannot load {}: {e}", path.display())))?;
    if ckpt_cfg.model != *model {
        return Err(CliError::Config(format!(
            "{} was trained with a different model section; evaluation ids would not line up",
            path.display()
        )));
    }
    Ok((store, ids))
}

fn require_stage(out: &Path, name: &str, needed_by: &str) -> Result<PathBuf, CliError> {
    let p = stage_ckpt(out, name);
    if !p.exists() {
        return Err(CliError::MissingPrereq(format!(
            "{needed_by} requires the {name} checkpoint ({}); train that stage first",
            p.display()
        )));
    }
    Ok(p)
}

/// Highest-epoch per-epoch checkpoint `prefix-e<N>.ckpt` under ckpt/, if any.
fn latest_epoch_ckpt(out: &Path, prefix: &str) -> Option<(usize, PathBuf)> {
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(ckpt_dir(out)).ok()? {
        let path = entry.ok()?.path();
        let name = path.file_name()?.to_str()?;
        let epoch = name
            .strip_prefix(prefix)
            .and_then(|s| s.strip_prefix("-e"))
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<usize>().ok());
        if let Some(e) = epoch {
            if best.as_ref().map_or(true, |(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    best
}

/// One supervised phase, saving after every epoch. Resuming restarts the
/// optimizer moments but keeps the span ramp and data order on schedule.
fn run_phase_checkpointed(
    store: &mut ParamStore<f32>,
    ids: &ModelIds,
    cfg: &RunConfig,
    vocab: &Vocabulary,
    data: &[TokenizedProblem],
    phase: SftPhase,
    start_epoch: usize,
    out: &Path,
    metrics: &mut Vec<MetricRow>,
) -> Result<(), CliError> {
    let mut opt = sft_options(phase, cfg);
    let total = opt.epochs;
    if start_epoch >= total {
        return Ok(());
    }
    opt.epoch_offset = start_epoch;
    opt.epochs = total - start_epoch;
    let name = phase.stage_name();
    if !opt.frozen_prefixes.is_empty() {
        println!("{name}: freezing {:?}", opt.frozen_prefixes);
    }
    let mut save_err = None;
    let loss = run_sft_with(store, ids, &cfg.model, vocab, data, &opt, metrics, |e, l, s| {
        let path = ckpt_dir(out).join(format!("{name}-e{e}.ckpt"));
        if let Err(err) = save_stage(&path, s, cfg) {
            save_err.get_or_insert(err.to_string());
        }
        println!("{name} epoch {e}: mean loss {l:.4}");
    });
    if let Some(e) = save_err {
        return Err(CliError::Other(format!("checkpoint write failed: {e}")));
    }
    println!("{name} done ({total} epochs): last mean loss {loss:.4}");
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path, stage: u8, resume: bool) -> Result<(), CliError> {
    if stage > 3 {
        return Err(CliError::Config(format!("stage {stage} is not one of 0, 1, 2, 3")));
    }
    if resume && stage > 1 {
        return Err(CliError::Config(
            "resume is supported for stages 0 and 1; later stages rerun from the previous stage checkpoint".to_string(),
        ));
    }
    let vocab = Vocabulary::arithmetic();
    let data = load_split(out, Split::Train)?;
    fs::create_dir_all(ckpt_dir(out))?;
    fs::create_dir_all(out.join("metrics"))?;
    let mut metrics = Vec::new();

    match stage {
        0 => {
            // Two models: the explicit-chain fit and the no-chain baseline.
            let explicit_done = stage_ckpt(out, "stage0").exists();
            if !(resume && explicit_done) {
                let (mut store, ids, start) = resume_point(cfg, &vocab, out, "stage0", resume)?;
                run_phase_checkpointed(
                    &mut store, &ids, cfg, &vocab, &data, SftPhase::Stage0, start, out,
                    &mut metrics,
                )?;
                save_stage(&stage_ckpt(out, "stage0"), &store, cfg)
                    .map_err(|e| CliError::Other(e.to_string()))?;
            }
            let (mut store, ids, start) = resume_point(cfg, &vocab, out, "baseline", resume)?;
            run_phase_checkpointed(
                &mut store, &ids, cfg, &vocab, &data, SftPhase::Baseline, start, out, &mut metrics,
            )?;
            save_stage(&stage_ckpt(out, "baseline"), &store, cfg)
                .map_err(|e| CliError::Other(e.to_string()))?;
        }
        1 => {
            let prev = require_stage(out, "stage0", "stage 1")?;
            // Prefer the deepest partial progress: a joint-phase epoch file,
            // then a frozen-phase one, then the stage-0 checkpoint.
            let (mut store, ids, frozen_start, joint_start) = if resume {
                if let Some((e, p)) = latest_epoch_ckpt(out, "stage1b") {
                    let (s, i) = load_compatible(&p, &cfg.model)?;
                    (s, i, usize::MAX, e + 1)
                } else if let Some((e, p)) = latest_epoch_ckpt(out, "stage1a") {
                    let (s, i) = load_compatible(&p, &cfg.model)?;
                    (s, i, e + 1, 0)
                } else {
                    let (s, i) = load_compatible(&prev, &cfg.model)?;
                    (s, i, 0, 0)
                }
            } else {
                let (s, i) = load_compatible(&prev, &cfg.model)?;
                (s, i, 0, 0)
            };
            if frozen_start != usize::MAX {
                run_phase_checkpointed(
                    &mut store, &ids, cfg, &vocab, &data, SftPhase::Stage1Frozen, frozen_start,
                    out, &mut metrics,
                )?;
            }
            run_phase_checkpointed(
                &mut store, &ids, cfg, &vocab, &data, SftPhase::Stage1Joint, joint_start, out,
                &mut metrics,
            )?;
            save_stage(&stage_ckpt(out, "stage1"), &store, cfg)
                .map_err(|e| CliError::Other(e.to_string()))?;
        }
        2 => {
            let prev = require_stage(out, "stage1", "stage 2")?;
            let (mut store, ids) = load_compatible(&prev, &cfg.model)?;
            let art = train_stage2(&mut store, &ids, cfg, &vocab, &data, &mut metrics);
            save_stage(&stage_ckpt(out, "stage2"), &store, cfg)
                .map_err(|e| CliError::Other(e.to_string()))?;
            let fmt_auc = |a: Option<f64>| a.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".to_string());
            println!(
                "stage2 done: vocab loss {:.4}, gate loss {:.4}; {} verification labels, gate AUC {} -> {} (kept epoch {})",
                art.outcome.vocab_loss,
                art.outcome.gate_loss,
                art.n_labels,
                fmt_auc(art.refine.auc_before),
                fmt_auc(art.refine.auc_after),
                art.refine.chosen_epoch,
            );
        }
        _ => {
            let prev = require_stage(out, "stage2", "stage 3")?;
            let (mut store, ids) = load_compatible(&prev, &cfg.model)?;
            let outcome = train_stage3(&mut store, &ids, cfg, &vocab, &data, &mut metrics);
            save_stage(&stage_ckpt(out, "stage3"), &store, cfg)
                .map_err(|e| CliError::Other(e.to_string()))?;
            println!(
                "stage3 done after {} steps: mean reward {:.4} -> {:.4}",
                outcome.steps_run, outcome.initial_reward, outcome.final_reward
            );
            println!("accepted-length counts before: {:?}", outcome.hist_before);
            println!("accepted-length counts after:  {:?}", outcome.hist_after);
        }
    }

    // A resume that finds nothing left to do should not clobber the log.
    if !metrics.is_empty() {
        let csv = out.join("metrics").join(format!("train-stage{stage}.csv"));
        write_metrics_csv(&csv, &metrics, &config_hash(cfg))?;
        println!("metrics -> {}", csv.display());
    }
    Ok(())
}

/// Where to start a supervised phase: fresh params at epoch 0, or the latest
/// per-epoch checkpoint when resuming.
fn resume_point(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    out: &Path,
    prefix: &str,
    resume: bool,
) -> Result<(ParamStore<f32>, ModelIds, usize), CliError> {
    if resume {
        if let Some((e, p)) = latest_epoch_ckpt(out, prefix) {
            let (store, ids) = load_compatible(&p, &cfg.model)?;
            println!("{prefix}: resuming after epoch {e} from {}", p.display());
            return Ok((store, ids, e + 1));
        }
    }
    let (store, ids) = init_from_config(cfg, vocab);
    Ok((store, ids, 0))
}

/// The deepest trained checkpoint, for eval commands without an explicit one.
fn default_checkpoint(out: &Path) -> Result<PathBuf, CliError> {
    for name in ["stage3", "stage2", "stage1", "stage0"] {
        let p = stage_ckpt(out, name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(CliError::MissingPrereq(format!(
        "no checkpoint under {}; train a stage first or pass --checkpoint",
        ckpt_dir(out).display()
    )))
}

fn load_eval_model(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
) -> Result<(ParamStore<f32>, FastModel), CliError> {
    let path = match checkpoint {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::MissingPrereq(format!("{} does not exist", p.display())));
            }
            p.to_path_buf()
        }
        None => default_checkpoint(out)?,
    };
    println!("checkpoint: {}", path.display());
    let (store, ids) = load_compatible(&path, &cfg.model)?;
    Ok((store, FastModel::new(ids, cfg.model.clone())))
}

/// Held-out accuracy of the no-chain baseline, if that model was trained.
fn baseline_accuracy(
    cfg: &RunConfig,
    out: &Path,
    vocab: &Vocabulary,
    data: &[TokenizedProblem],
) -> Result<Option<f64>, CliError> {
    let p = stage_ckpt(out, "baseline");
    if !p.exists() {
        return Ok(None);
    }
    let (store, ids) = load_compatible(&p, &cfg.model)?;
    let fast = FastModel::new(ids, cfg.model.clone());
    let (m, _) = evaluate(
        &fast,
        &store,
        vocab,
        data,
        DecodeMode::Explicit,
        cfg.eval.max_new_tokens,
        None,
    );
    Ok(Some(m.pass1))
}

fn print_eval(tag: &str, m: &EvalMetrics) {
    let delta = m
        .delta_acc_per_l
        .map(|d| format!("{d:.5}"))
        .unwrap_or_else(|| "n/a".to_string());
    println!(
        "{tag}: pass@1 {:.4}, mean explicit {:.2}, mean latent {:.2}, lift/token {delta} (n={})",
        m.pass1, m.mean_explicit, m.mean_latent, m.n
    );
}

fn cmd_eval(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let vocab = Vocabulary::arithmetic();
    let data = load_split(out, Split::Test)?;
    let (store, fast) = load_eval_model(cfg, out, checkpoint)?;
    let baseline = baseline_accuracy(cfg, out, &vocab, &data)?;
    if baseline.is_none() {
        println!("note: no baseline checkpoint, lift/token will be n/a");
    }
    let hash = config_hash(cfg);
    let dir = out.join("eval");
    fs::create_dir_all(&dir)?;

    let (explicit, explicit_traces) = evaluate(
        &fast,
        &store,
        &vocab,
        &data,
        DecodeMode::Explicit,
        cfg.eval.max_new_tokens,
        baseline,
    );
    let (selective, selective_traces) = evaluate(
        &fast,
        &store,
        &vocab,
        &data,
        DecodeMode::Selective { gamma: cfg.eval.gamma },
        cfg.eval.max_new_tokens,
        baseline,
    );
    print_eval("explicit ", &explicit);
    print_eval(&format!("selective (gamma {})", cfg.eval.gamma), &selective);

    write_traces(&dir.join("traces-explicit.jsonl"), &hash, &explicit_traces)?;
    write_traces(&dir.join("traces-selective.jsonl"), &hash, &selective_traces)?;
    let report = serde_json::json!({
        "config": hash,
        "baseline_pass1": baseline,
        "explicit": explicit,
        "selective": selective,
    });
    fs::write(dir.join("metrics.json"), format!("{report:#}\n"))?;
    println!("eval artifacts -> {}", dir.display());
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let vocab = Vocabulary::arithmetic();
    let data = load_split(out, Split::Test)?;
    let (store, fast) = load_eval_model(cfg, out, checkpoint)?;
    let baseline = baseline_accuracy(cfg, out, &vocab, &data)?;
    let hash = config_hash(cfg);
    let dir = out.join("sweep");
    fs::create_dir_all(&dir)?;

    let grid = default_gamma_grid();
    let points =
        threshold_sweep(&fast, &store, &vocab, &data, &grid, cfg.eval.max_new_tokens, baseline);
    for p in &points {
        println!(
            "gamma {:+.2}: pass@1 {:.4}, mean explicit {:.2}, mean latent {:.2}",
            p.gamma, p.pass1, p.mean_explicit, p.mean_latent
        );
    }
    write_frontier_csv(&dir.join("frontier.csv"), &hash, &points, fast.cfg.c_max)?;
    let frontier: Vec<(f64, f64)> = points.iter().map(|p| (p.mean_explicit, p.pass1)).collect();
    svg_line_plot(
        &dir.join("frontier.svg"),
        &format!("accuracy vs explicit think tokens [{hash}]"),
        "mean explicit think tokens",
        "pass@1",
        &[("threshold sweep", frontier)],
    )?;
    println!("sweep artifacts -> {}", dir.display());
    Ok(())
}

fn cmd_hist(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let vocab = Vocabulary::arithmetic();
    let data = load_split(out, Split::Test)?;
    let (store, fast) = load_eval_model(cfg, out, checkpoint)?;
    let hash = config_hash(cfg);
    let dir = out.join("hist");
    fs::create_dir_all(&dir)?;

    let (m, _) = evaluate(
        &fast,
        &store,
        &vocab,
        &data,
        DecodeMode::Selective { gamma: cfg.eval.gamma },
        cfg.eval.max_new_tokens,
        None,
    );
    let total: u64 = m.hist.iter().sum();
    let mut csv = format!("# config {hash}\nbucket,count\n");
    let mut bins = Vec::new();
    for (c, &n) in m.hist.iter().enumerate().skip(1) {
        println!("accepted length {c}: {n}");
        csv.push_str(&format!("{c},{n}\n"));
        bins.push((c.to_string(), n as f64));
    }
    println!("total latent steps: {total}");
    fs::write(dir.join("hist.csv"), csv)?;
    svg_histogram(
        &dir.join("hist.svg"),
        &format!("accepted span lengths at gamma {} [{hash}]", cfg.eval.gamma),
        &bins,
    )?;
    println!("histogram artifacts -> {}", dir.display());
    Ok(())
}

fn cmd_timing(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let vocab = Vocabulary::arithmetic();
    let mut data = load_split(out, Split::Test)?;
    data.truncate(200);
    let (store, fast) = load_eval_model(cfg, out, checkpoint)?;
    let hash = config_hash(cfg);
    let dir = out.join("timing");
    fs::create_dir_all(&dir)?;

    let rows = timing_benchmark(
        &fast,
        &store,
        &vocab,
        &data,
        &[DecodeMode::Explicit, DecodeMode::Selective { gamma: cfg.eval.gamma }],
        cfg.eval.max_new_tokens,
    );
    let mut csv = format!("# config {hash}\nmode,mean_ms,median_ms,n,warning\n");
    for r in &rows {
        println!(
            "{}: mean {:.2} ms, median {:.2} ms over {} problems{}",
            r.mode,
            r.mean_ms,
            r.median_ms,
            r.n,
            r.warning.as_deref().map(|w| format!(" ({w})")).unwrap_or_default()
        );
        csv.push_str(&format!(
            "{},{:.4},{:.4},{},{}\n",
            r.mode,
            r.mean_ms,
            r.median_ms,
            r.n,
            r.warning.as_deref().unwrap_or("")
        ));
    }
    fs::write(dir.join("timing.csv"), csv)?;
    println!("timing artifacts -> {}", dir.display());
    Ok(())
}

fn cmd_ablate_cmax(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let grid = [3usize, 4, 5, 6, 7];
    if grid.iter().any(|&k| k > cfg.model.c_max_capacity) {
        return Err(CliError::Config(format!(
            "the span-cap grid needs c_max_capacity >= 7, config has {}",
            cfg.model.c_max_capacity
        )));
    }
    let vocab = Vocabulary::arithmetic();
    let data = load_split(out, Split::Test)?;
    let (store, fast) = load_eval_model(cfg, out, checkpoint)?;
    let hash = config_hash(cfg);
    let dir = out.join("ablate");
    fs::create_dir_all(&dir)?;

    let mut csv = format!("# config {hash}\ncmax,pass1,mean_L\n");
    for k in grid {
        let capped =
            FastModel::new(fast.ids.clone(), ModelConfig { c_max: k, ..cfg.model.clone() });
        let (m, _) = evaluate(
            &capped,
            &store,
            &vocab,
            &data,
            DecodeMode::Selective { gamma: cfg.eval.gamma },
            cfg.eval.max_new_tokens,
            None,
        );
        println!("cmax {k}: pass@1 {:.4}, mean explicit {:.2}", m.pass1, m.mean_explicit);
        csv.push_str(&format!("{k},{:.6},{:.4}\n", m.pass1, m.mean_explicit));
    }
    fs::write(dir.join("cmax.csv"), csv)?;
    println!("ablation artifacts -> {}", dir.display());
    Ok(())
}

fn cmd_heuristic_eval(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    strategy: &str,
    fraction: f64,
) -> Result<(), CliError> {
    let strategy: SpanStrategy = strategy.parse().map_err(CliError::Config)?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CliError::Config(format!("fraction {fraction} must lie in [0, 1]")));
    }
    let vocab = Vocabulary::arithmetic();
    let data = load_split(out, Split::Test)?;
    let (store, fast) = load_eval_model(cfg, out, checkpoint)?;
    let hash = config_hash(cfg);
    let dir = out.join("heuristic");
    fs::create_dir_all(&dir)?;

    let sched = SpanSchedule { strategy, start: fraction, end: fraction, ramp_epochs: 0 };
    let seed = cfg.seed;
    let model_cfg = cfg.model.clone();
    let report = teacher_forced_eval(&fast, &store, &data, |rec, tokens| match strategy {
        SpanStrategy::Skipnum => {
            let (think, end_think) = rec.think_bounds();
            select_spans_skipnum(&tokens[think + 1..end_think], think + 1, model_cfg.c_max, |t| {
                vocab.is_numeric(t)
            })
        }
        SpanStrategy::Random => {
            spans_for_record(rec, tokens, &sched, 0, &model_cfg, &vocab, seed)
        }
    });
    let retained = 1.0 - report.coverage;
    println!(
        "{strategy:?}: answer accuracy {:.4}, retained chain ratio {:.3}, post-latent accuracy {}, {} latent rows over {} records",
        report.answer_acc,
        retained,
        report
            .post_latent_acc
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "n/a".to_string()),
        report.n_latent,
        report.n
    );
    let json = serde_json::json!({
        "config": hash,
        "strategy": format!("{strategy:?}").to_lowercase(),
        "fraction": fraction,
        "answer_acc": report.answer_acc,
        "retained_ratio": retained,
        "post_latent_acc": report.post_latent_acc,
        "n_latent": report.n_latent,
        "coverage": report.coverage,
        "n": report.n,
    });
    fs::write(dir.join("report.json"), format!("{json:#}\n"))?;
    println!("heuristic artifacts -> {}", dir.display());
    Ok(())
}

