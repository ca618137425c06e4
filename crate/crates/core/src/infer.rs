//! Selective greedy decoding and the evaluation passes built on it.
//!
//! In the think region every greedy backbone pick seeds a decoder look-ahead
//! whose gate logits admit the longest confident prefix; an admitted span is
//! compressed into one latent row, anything else falls back to emitting the
//! pick explicitly. `</think>` hands the session to plain greedy decoding,
//! where the decoder and compressor are never touched. Control-token picks
//! are never compressible.

use crate::data::{check_answer, TokenizedProblem};
use crate::hybrid::{build_hybrid, HybridElem, Span};
use crate::model::fast::{argmax, BackboneCache, FastInput, FastModel, StepOut};
use crate::model::vocab::{Vocabulary, END_THINK, EOS, THINK};
use crate::num::ParamStore;
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    /// Plain greedy decoding; the decoder is never consulted.
    Explicit,
    /// Gated look-ahead compression with the given threshold bias.
    Selective { gamma: f64 },
}

impl DecodeMode {
    pub fn name(&self) -> String {
        match self {
            DecodeMode::Explicit => "explicit".to_string(),
            DecodeMode::Selective { gamma } => format!("selective(gamma={gamma})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TraceEvent {
    Tok { id: usize },
    Lat { c: usize, tokens: Vec<usize> },
}

#[derive(Debug, Clone, Serialize)]
pub struct ProblemTrace {
    pub id: u64,
    pub events: Vec<TraceEvent>,
    pub answer: String,
    pub correct: bool,
    pub t_llm: usize,
    pub latent_steps: usize,
    /// Backbone steps taken after the prompt.
    pub forward_steps: usize,
    pub truncated: bool,
}

/// Longest admitted span length under the gate rule: scan states in order,
/// stop at the first control token or non-confident gate. 0 means fall back
/// to emitting the seed explicitly.
pub fn accept_span(gate_logits: &[f32], tokens: &[usize], gamma: f64, vocab: &Vocabulary) -> usize {
    assert_eq!(gate_logits.len(), tokens.len());
    let mut c = 0;
    for (j, &tok) in tokens.iter().enumerate() {
        if vocab.is_reserved(tok) || gate_logits[j] as f64 <= gamma {
            break;
        }
        c = j + 1;
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepDecision {
    Explicit(usize),
    Compress { tokens: Vec<usize>, z: Vec<f32> },
}

enum SessionMode {
    /// Before `<think>`: greedy, no compression.
    Lead,
    Think,
    Answer,
}

/// Single-owner greedy decoding state for one problem.
pub struct DecodeSession<'m> {
    fast: &'m FastModel,
    store: &'m ParamStore<f32>,
    vocab: &'m Vocabulary,
    cache: BackboneCache,
    last: StepOut,
    mode: SessionMode,
    decode: DecodeMode,
    max_rows: usize,
    rows: usize,
    steps: usize,
    events: Vec<TraceEvent>,
    answer_toks: Vec<usize>,
    t_llm: usize,
    latent_steps: usize,
    done: bool,
    truncated: bool,
}

impl<'m> DecodeSession<'m> {
    pub fn new(
        fast: &'m FastModel,
        store: &'m ParamStore<f32>,
        vocab: &'m Vocabulary,
        prompt: &[usize],
        decode: DecodeMode,
        max_new_tokens: usize,
    ) -> Self {
        assert!(!prompt.is_empty(), "decoding needs a prompt");
        let mut cache = fast.backbone_cache();
        let mut last = None;
        for &t in prompt {
            last = Some(fast.backbone_step(store, &mut cache, FastInput::Tok(t)));
        }
        DecodeSession {
            fast,
            store,
            vocab,
            cache,
            last: last.unwrap(),
            mode: SessionMode::Lead,
            decode,
            max_rows: max_new_tokens,
            rows: 0,
            steps: 0,
            events: Vec::new(),
            answer_toks: Vec::new(),
            t_llm: 0,
            latent_steps: 0,
            done: false,
            truncated: false,
        }
    }

    /// Greedy pick plus, in think mode, the gated look-ahead; they coincide
    /// on the seed token, so the fallback re-uses the pick.
    pub fn decide_step(&self) -> StepDecision {
        let x0 = argmax(&self.last.logits);
        let gamma = match (&self.mode, self.decode) {
            (SessionMode::Think, DecodeMode::Selective { gamma }) => gamma,
            _ => return StepDecision::Explicit(x0),
        };
        if self.vocab.is_reserved(x0) {
            return StepDecision::Explicit(x0);
        }
        let roll =
            self.fast.decoder_rollout(self.store, &self.last.hidden, Some(x0), self.fast.cfg.c_max);
        let c = accept_span(&roll.gate_logits, &roll.tokens, gamma, self.vocab);
        if c == 0 {
            return StepDecision::Explicit(x0);
        }
        let tokens = roll.tokens[..c].to_vec();
        let z = self.fast.compress(self.store, &tokens);
        StepDecision::Compress { tokens, z }
    }

    pub fn apply_decision(&mut self, decision: StepDecision) {
        assert!(!self.done, "session already finished");
        if self.rows >= self.max_rows || self.cache.len() >= self.fast.cfg.max_seq_len {
            self.done = true;
            self.truncated = true;
            return;
        }
        self.rows += 1;
        match decision {
            StepDecision::Explicit(tok) => {
                self.events.push(TraceEvent::Tok { id: tok });
                match self.mode {
                    SessionMode::Lead if tok == THINK => self.mode = SessionMode::Think,
                    SessionMode::Think if tok == END_THINK => self.mode = SessionMode::Answer,
                    SessionMode::Think if !self.vocab.is_reserved(tok) => self.t_llm += 1,
                    SessionMode::Answer if !self.vocab.is_reserved(tok) => {
                        self.answer_toks.push(tok)
                    }
                    _ => {}
                }
                if tok == EOS {
                    self.done = true;
                    return;
                }
                self.steps += 1;
                self.last = self.fast.backbone_step(self.store, &mut self.cache, FastInput::Tok(tok));
            }
            StepDecision::Compress { tokens, z } => {
                assert!(
                    matches!(self.mode, SessionMode::Think),
                    "compression outside the think region"
                );
                assert!(
                    !tokens.is_empty() && tokens.len() <= self.fast.cfg.c_max,
                    "span of {} tokens breaks the c_max bound",
                    tokens.len()
                );
                self.latent_steps += 1;
                self.steps += 1;
                self.events.push(TraceEvent::Lat { c: tokens.len(), tokens });
                self.last =
                    self.fast.backbone_step(self.store, &mut self.cache, FastInput::Row(&z));
            }
        }
    }

    pub fn finish(mut self, rec: &TokenizedProblem) -> ProblemTrace {
        while !self.done {
            let decision = self.decide_step();
            self.apply_decision(decision);
        }
        let correct =
            !self.truncated && check_answer(&self.answer_toks, rec.answer_value, self.vocab);
        ProblemTrace {
            id: rec.id,
            events: self.events,
            answer: self.vocab.detokenize(&self.answer_toks),
            correct,
            t_llm: self.t_llm,
            latent_steps: self.latent_steps,
            forward_steps: self.steps,
            truncated: self.truncated,
        }
    }
}

pub fn decode_problem(
    fast: &FastModel,
    store: &ParamStore<f32>,
    vocab: &Vocabulary,
    rec: &TokenizedProblem,
    mode: DecodeMode,
    max_new_tokens: usize,
) -> ProblemTrace {
    DecodeSession::new(fast, store, vocab, &rec.prompt(), mode, max_new_tokens).finish(rec)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalMetrics {
    pub mode: String,
    pub c_max: usize,
    pub pass1: f64,
    /// Mean explicit think tokens per problem.
    pub mean_explicit: f64,
    pub mean_latent: f64,
    /// Accuracy lift over a no-chain baseline per explicit token; absent
    /// without a baseline or when no explicit tokens were produced.
    pub delta_acc_per_l: Option<f64>,
    /// Admitted span lengths, buckets 1..=c_max; index 0 stays empty.
    pub hist: Vec<u64>,
    pub n: usize,
}

/// Greedy evaluation over a split: a pure function of checkpoint, problems,
/// mode, and c_max. Problems decode in parallel; aggregation is sequential
/// in problem order.
pub fn evaluate(
    fast: &FastModel,
    store: &ParamStore<f32>,
    vocab: &Vocabulary,
    data: &[TokenizedProblem],
    mode: DecodeMode,
    max_new_tokens: usize,
    baseline_acc: Option<f64>,
) -> (EvalMetrics, Vec<ProblemTrace>) {
    assert!(!data.is_empty(), "evaluation needs problems");
    let traces: Vec<ProblemTrace> = data
        .par_iter()
        .map(|rec| decode_problem(fast, store, vocab, rec, mode, max_new_tokens))
        .collect();
    let n = traces.len();
    let mut hist = vec![0u64; fast.cfg.c_max + 1];
    let mut correct = 0usize;
    let (mut explicit, mut latent) = (0usize, 0usize);
    for t in &traces {
        correct += t.correct as usize;
        explicit += t.t_llm;
        latent += t.latent_steps;
        for ev in &t.events {
            if let TraceEvent::Lat { c, .. } = ev {
                hist[*c] += 1;
            }
        }
    }
    let pass1 = correct as f64 / n as f64;
    let mean_explicit = explicit as f64 / n as f64;
    let delta_acc_per_l = baseline_acc.and_then(|b| {
        (mean_explicit > 0.0).then(|| (pass1 - b) / mean_explicit)
    });
    let metrics = EvalMetrics {
        mode: mode.name(),
        c_max: fast.cfg.c_max,
        pass1,
        mean_explicit,
        mean_latent: latent as f64 / n as f64,
        delta_acc_per_l,
        hist,
        n,
    };
    (metrics, traces)
}

#[derive(Debug, Clone, Serialize)]
pub struct FrontierPoint {
    pub gamma: f64,
    pub pass1: f64,
    pub mean_explicit: f64,
    pub mean_latent: f64,
    pub delta_acc_per_l: Option<f64>,
    pub n: usize,
}

pub fn default_gamma_grid() -> Vec<f64> {
    (-4..=4).map(|i| i as f64 * 0.25).collect()
}

pub fn threshold_sweep(
    fast: &FastModel,
    store: &ParamStore<f32>,
    vocab: &Vocabulary,
    data: &[TokenizedProblem],
    gammas: &[f64],
    max_new_tokens: usize,
    baseline_acc: Option<f64>,
) -> Vec<FrontierPoint> {
    assert!(!gammas.is_empty(), "sweep needs a threshold grid");
    gammas
        .iter()
        .map(|&gamma| {
            let (m, _) = evaluate(
                fast,
                store,
                vocab,
                data,
                DecodeMode::Selective { gamma },
                max_new_tokens,
                baseline_acc,
            );
            FrontierPoint {
                gamma,
                pass1: m.pass1,
                mean_explicit: m.mean_explicit,
                mean_latent: m.mean_latent,
                delta_acc_per_l: m.delta_acc_per_l,
                n: m.n,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingRow {
    pub mode: String,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub n: usize,
    pub warning: Option<String>,
}

/// Wall-clock per problem, one mode at a time, single-threaded on purpose so
/// the two modes see the same conditions.
pub fn timing_benchmark(
    fast: &FastModel,
    store: &ParamStore<f32>,
    vocab: &Vocabulary,
    data: &[TokenizedProblem],
    modes: &[DecodeMode],
    max_new_tokens: usize,
) -> Vec<TimingRow> {
    modes
        .iter()
        .map(|&mode| {
            let mut ms: Vec<f64> = data
                .iter()
                .map(|rec| {
                    let t0 = Instant::now();
                    decode_problem(fast, store, vocab, rec, mode, max_new_tokens);
                    t0.elapsed().as_secs_f64() * 1e3
                })
                .collect();
            ms.sort_by(f64::total_cmp);
            let n = ms.len();
            TimingRow {
                mode: mode.name(),
                mean_ms: ms.iter().sum::<f64>() / n as f64,
                median_ms: if n % 2 == 1 {
                    ms[n / 2]
                } else {
                    0.5 * (ms[n / 2 - 1] + ms[n / 2])
                },
                n,
                warning: (n < 30).then(|| format!("sample of {n} problems is below 30")),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TeacherForcedReport {
    /// Fraction of records whose answer token is the top pick given the
    /// (possibly hybrid) context up to `</think>`.
    pub answer_acc: f64,
    /// Fraction of latent positions whose next original token is the top
    /// pick; absent when no spans were placed.
    pub post_latent_acc: Option<f64>,
    pub n_latent: usize,
    /// Mean fraction of think tokens covered by spans.
    pub coverage: f64,
    pub n: usize,
}

/// Teacher-forced scoring of hybrid contexts: spans come from the caller,
/// everything else is the ground-truth sequence. Measures whether latents
/// preserve the information the next positions and the answer need.
pub fn teacher_forced_eval<F>(
    fast: &FastModel,
    store: &ParamStore<f32>,
    data: &[TokenizedProblem],
    spans_for: F,
) -> TeacherForcedReport
where
    F: Fn(&TokenizedProblem, &[usize]) -> Vec<Span> + Sync,
{
    assert!(!data.is_empty(), "teacher-forced scoring needs records");
    let per: Vec<(bool, usize, usize, f64)> = data
        .par_iter()
        .map(|rec| {
            let tokens = rec.full_sequence();
            let (think, end_think) = rec.think_bounds();
            let spans = spans_for(rec, &tokens);
            let hybrid = build_hybrid(&tokens, &spans).expect("span set rejected");
            let covered: usize = spans.iter().map(|s| s.len).sum();
            let coverage = covered as f64 / (end_think - think - 1) as f64;
            // Latent rows need owned storage that outlives the borrow in
            // FastInput::Row, so compress first and reference second.
            let zs: Vec<Vec<f32>> = hybrid
                .elems
                .iter()
                .filter_map(|e| match e {
                    HybridElem::Latent { span } => {
                        Some(fast.compress(store, &tokens[span.start..span.end()]))
                    }
                    _ => None,
                })
                .collect();
            let mut zi = 0;
            let inputs: Vec<FastInput> = hybrid
                .elems
                .iter()
                .map(|e| match e {
                    HybridElem::Explicit { tok, .. } => FastInput::Tok(*tok),
                    HybridElem::Latent { .. } => {
                        zi += 1;
                        FastInput::Row(&zs[zi - 1])
                    }
                })
                .collect();
            let run = fast.backbone_run(store, &inputs);
            let mut latent_hits = 0usize;
            let mut latent_total = 0usize;
            let mut answer_hit = false;
            for (r, elem) in hybrid.elems.iter().enumerate() {
                match elem {
                    HybridElem::Explicit { orig_pos, .. } if *orig_pos == end_think => {
                        answer_hit = argmax(run.logits.row(r)) == tokens[end_think + 1];
                    }
                    HybridElem::Latent { .. } => {
                        let want = hybrid.targets[r].expect("latent rows always have targets");
                        latent_total += 1;
                        latent_hits += (argmax(run.logits.row(r)) == want) as usize;
                    }
                    _ => {}
                }
            }
            (answer_hit, latent_hits, latent_total, coverage)
        })
        .collect();
    let n = per.len();
    let answers = per.iter().filter(|p| p.0).count();
    let hits: usize = per.iter().map(|p| p.1).sum();
    let total: usize = per.iter().map(|p| p.2).sum();
    TeacherForcedReport {
        answer_acc: answers as f64 / n as f64,
        post_latent_acc: (total > 0).then(|| hits as f64 / total as f64),
        n_latent: total,
        coverage: per.iter().map(|p| p.3).sum::<f64>() / n as f64,
        n,
    }
}

/// Trace JSONL: a meta line naming the producing config, then one trace per
/// line.
pub fn write_traces(
    path: &Path,
    config_hash: &str,
    traces: &[ProblemTrace],
) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", serde_json::json!({ "config": config_hash }))?;
    for t in traces {
        serde_json::to_writer(&mut f, t)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_frontier_csv(
    path: &Path,
    config_hash: &str,
    points: &[FrontierPoint],
    c_max: usize,
) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# config {config_hash}")?;
    writeln!(f, "gamma,c_max,pass1,mean_L,mean_latent,delta_acc_per_L,n")?;
    for p in points {
        let delta = p.delta_acc_per_l.map(|d| format!("{d:.6}")).unwrap_or_default();
        writeln!(
            f,
            "{},{},{:.6},{:.4},{:.4},{},{}",
            p.gamma, c_max, p.pass1, p.mean_explicit, p.mean_latent, delta, p.n
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_problem, DatasetRecord};
    use crate::hybrid::select_spans_skipnum;
    use crate::model::backbone::backbone_forward;
    use crate::model::{init_model, ModelIds};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_setup(seed: u64) -> (ParamStore<f32>, ModelIds, crate::config::ModelConfig, Vocabulary)
    {
        let vocab = Vocabulary::arithmetic();
        let cfg = crate::config::ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 96,
            c_max: 3,
            c_max_capacity: 4,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = init_model(&mut store, &cfg, vocab.len(), &mut rng);
        (store, ids, cfg, vocab)
    }

    fn tiny_corpus(n: usize, seed: u64, vocab: &Vocabulary) -> Vec<TokenizedProblem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|id| {
                let n_ops = rng.gen_range(2..=3);
                let p = generate_problem(&mut rng, n_ops, 2, 9);
                DatasetRecord::from_problem(id as u64, &p).tokenized(vocab).unwrap()
            })
            .collect()
    }

    type Warmed = (
        ParamStore<f32>,
        ModelIds,
        crate::config::ModelConfig,
        Vocabulary,
        Vec<TokenizedProblem>,
    );

    /// A raw random model never greedily emits `<think>`, so sessions would
    /// sit in the lead region forever and every think-path assertion would
    /// hold vacuously. A short format-teaching fit fixes that; the decoder
    /// and gate stay untrained, which is fine for mechanics tests.
    fn warmed() -> &'static Warmed {
        static CELL: std::sync::OnceLock<Warmed> = std::sync::OnceLock::new();
        CELL.get_or_init(|| {
            let (mut store, ids, cfg, vocab) = tiny_setup(36);
            let data = tiny_corpus(12, 37, &vocab);
            let sft = crate::train::stage1::SftOptions {
                stage_name: "warmup",
                rng_tag: crate::train::TAG_STAGE0,
                epochs: 200,
                batch_size: 4,
                lr: 3e-3,
                frozen_prefixes: Vec::new(),
                spans: None,
                no_cot: false,
                seed: 5,
                log_every: 1000,
                epoch_offset: 0,
            };
            crate::train::stage1::run_sft(&mut store, &ids, &cfg, &vocab, &data, &sft, &mut Vec::new());
            (store, ids, cfg, vocab, data)
        })
    }

    #[test]
    fn acceptance_rule_takes_the_longest_confident_prefix() {
        let vocab = Vocabulary::arithmetic();
        let toks = vec![10, 11, 12, 13, 14];
        let conf = [2.1f32, 0.7, -0.3, 1.5, 0.2];
        assert_eq!(accept_span(&conf, &toks, 0.0, &vocab), 2);
        assert_eq!(accept_span(&[-1.0, 2.0, 2.0, 2.0, 2.0], &toks, 0.0, &vocab), 0);
        assert_eq!(accept_span(&[1.0; 5], &toks, 0.0, &vocab), 5);
        // Control tokens stop the span regardless of confidence.
        let with_ctl = vec![10, 11, END_THINK, 13, 14];
        assert_eq!(accept_span(&[1.0; 5], &with_ctl, 0.0, &vocab), 2);
        let ctl_first = vec![EOS, 11, 12, 13, 14];
        assert_eq!(accept_span(&[1.0; 5], &ctl_first, 0.0, &vocab), 0);
        // The threshold is strict.
        assert_eq!(accept_span(&[0.0, 0.0], &toks[..2].to_vec(), 0.0, &vocab), 0);
    }

    #[test]
    fn explicit_mode_never_touches_the_decoder() {
        let (store, ids, cfg, vocab) = tiny_setup(30);
        let fast = FastModel::new(ids, cfg);
        let rec = &tiny_corpus(1, 31, &vocab)[0];
        let trace = decode_problem(&fast, &store, &vocab, rec, DecodeMode::Explicit, 40);
        assert_eq!(trace.latent_steps, 0);
        assert!(trace.events.iter().all(|e| matches!(e, TraceEvent::Tok { .. })));
    }

    #[test]
    fn extreme_thresholds_bound_the_behavior() {
        let (store, ids, cfg, vocab, data) = warmed();
        let fast = FastModel::new(ids.clone(), cfg.clone());
        let mut entered_think = 0usize;
        for rec in &data[..4] {
            // A gate that can never fire decodes exactly like explicit mode.
            let never = decode_problem(
                &fast,
                store,
                vocab,
                rec,
                DecodeMode::Selective { gamma: f64::INFINITY },
                40,
            );
            let plain = decode_problem(&fast, store, vocab, rec, DecodeMode::Explicit, 40);
            assert_eq!(never.events, plain.events);
            assert_eq!(never.t_llm, plain.t_llm);
            entered_think += (plain.t_llm > 0) as usize;
            // A gate that always fires compresses every think-region pick.
            let always = decode_problem(
                &fast,
                store,
                vocab,
                rec,
                DecodeMode::Selective { gamma: f64::NEG_INFINITY },
                40,
            );
            assert_eq!(always.t_llm, 0, "think tokens escaped an always-open gate");
        }
        assert!(entered_think > 0, "no problem reached the think region");
    }

    #[test]
    fn latent_steps_never_follow_the_think_exit() {
        let (store, ids, cfg, vocab, data) = warmed();
        let fast = FastModel::new(ids.clone(), cfg.clone());
        let mut exits = 0usize;
        let mut latents = 0usize;
        for gamma in [1.5, 0.5, 0.0, -0.5] {
            for (i, rec) in data.iter().enumerate() {
                let trace =
                    decode_problem(&fast, store, vocab, rec, DecodeMode::Selective { gamma }, 40);
                latents += trace.latent_steps;
                let exit = trace
                    .events
                    .iter()
                    .position(|e| matches!(e, TraceEvent::Tok { id } if *id == END_THINK));
                if let Some(at) = exit {
                    exits += 1;
                    assert!(
                        trace.events[at..].iter().all(|e| matches!(e, TraceEvent::Tok { .. })),
                        "latent event after the think exit in trace {i} at gamma {gamma}"
                    );
                }
            }
        }
        assert!(exits > 0, "no trace left the think region");
        assert!(latents > 0, "no trace compressed anything");
    }

    #[test]
    fn session_trace_replays_through_one_full_forward_pass() {
        let (store, ids, cfg, vocab, data) = warmed();
        let fast = FastModel::new(ids.clone(), cfg.clone());
        let mut latents_seen = 0usize;
        for rec in &data[..5] {
            let trace = decode_problem(
                &fast,
                store,
                vocab,
                rec,
                DecodeMode::Selective { gamma: 0.0 },
                40,
            );
            // Rebuild the committed row stream from the trace alone.
            let prompt = rec.prompt();
            let zs: Vec<Vec<f32>> = trace
                .events
                .iter()
                .filter_map(|ev| match ev {
                    TraceEvent::Lat { tokens, .. } => Some(fast.compress(store, tokens)),
                    _ => None,
                })
                .collect();
            latents_seen += zs.len();
            let mut zi = 0;
            let mut rows: Vec<FastInput> = prompt.iter().map(|&t| FastInput::Tok(t)).collect();
            for ev in &trace.events {
                match ev {
                    TraceEvent::Tok { id } => rows.push(FastInput::Tok(*id)),
                    TraceEvent::Lat { .. } => {
                        rows.push(FastInput::Row(&zs[zi]));
                        zi += 1;
                    }
                }
            }
            let run = fast.backbone_run(store, &rows);
            // Walk the session again and compare every computed logits row.
            let mut session = DecodeSession::new(
                &fast,
                store,
                vocab,
                &prompt,
                DecodeMode::Selective { gamma: 0.0 },
                40,
            );
            let mut row = prompt.len() - 1;
            loop {
                for (a, b) in session.last.logits.iter().zip(run.logits.row(row)) {
                    assert!((a - b).abs() < 1e-5, "row {row} drifted: {a} vs {b}");
                }
                let d = session.decide_step();
                session.apply_decision(d);
                if session.done {
                    break;
                }
                row += 1;
            }
        }
        assert!(latents_seen > 0, "no latent rows exercised");
    }

    #[test]
    fn evaluation_is_deterministic_and_bounded() {
        let (store, ids, cfg, vocab) = tiny_setup(38);
        let fast = FastModel::new(ids, cfg.clone());
        let data = tiny_corpus(6, 39, &vocab);
        let run = || {
            evaluate(
                &fast,
                &store,
                &vocab,
                &data,
                DecodeMode::Selective { gamma: 0.25 },
                40,
                Some(0.1),
            )
        };
        let (m1, t1) = run();
        let (m2, t2) = run();
        assert_eq!(serde_json::to_string(&t1).unwrap(), serde_json::to_string(&t2).unwrap());
        assert_eq!(serde_json::to_string(&m1).unwrap(), serde_json::to_string(&m2).unwrap());
        assert_eq!(m1.hist[0], 0);
        assert_eq!(m1.hist.len(), cfg.c_max + 1);
        assert_eq!(m1.n, data.len());
        // Forward steps in selective mode never exceed explicit mode.
        for rec in &data {
            let sel = decode_problem(
                &fast,
                &store,
                &vocab,
                rec,
                DecodeMode::Selective { gamma: 0.25 },
                40,
            );
            let exp = decode_problem(&fast, &store, &vocab, rec, DecodeMode::Explicit, 40);
            assert!(sel.forward_steps <= exp.forward_steps);
        }
    }

    #[test]
    fn sweep_covers_the_grid_and_rejects_an_empty_one() {
        let (store, ids, cfg, vocab) = tiny_setup(42);
        let fast = FastModel::new(ids, cfg);
        let data = tiny_corpus(3, 43, &vocab);
        let grid = default_gamma_grid();
        assert_eq!(grid.len(), 9);
        assert_eq!(grid[0], -1.0);
        assert_eq!(grid[8], 1.0);
        let points = threshold_sweep(&fast, &store, &vocab, &data, &grid, 40, None);
        assert_eq!(points.len(), 9);
        for (p, &g) in points.iter().zip(&grid) {
            assert_eq!(p.gamma, g);
            assert_eq!(p.n, data.len());
        }
        let empty: &[f64] = &[];
        assert!(std::panic::catch_unwind(|| {
            threshold_sweep(&fast, &store, &vocab, &data, empty, 40, None)
        })
        .is_err());
    }

    #[test]
    fn timing_report_flags_small_samples() {
        let (store, ids, cfg, vocab) = tiny_setup(44);
        let fast = FastModel::new(ids, cfg);
        let data = tiny_corpus(3, 45, &vocab);
        let rows = timing_benchmark(
            &fast,
            &store,
            &vocab,
            &data,
            &[DecodeMode::Explicit, DecodeMode::Selective { gamma: 0.0 }],
            40,
        );
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert!(r.warning.is_some(), "3 problems must trigger the small-sample warning");
            assert!(r.mean_ms >= 0.0 && r.median_ms >= 0.0);
        }
    }

    #[test]
    fn teacher_forced_scoring_matches_a_graph_replay() {
        let (store, ids, cfg, vocab) = tiny_setup(46);
        let fast = FastModel::new(ids.clone(), cfg.clone());
        let data = tiny_corpus(3, 47, &vocab);
        // Spans from the numeric-skipping heuristic.
        let spans_for = |rec: &TokenizedProblem, tokens: &[usize]| {
            let (think, end_think) = rec.think_bounds();
            let cot = &tokens[think + 1..end_think];
            select_spans_skipnum(cot, think + 1, cfg.c_max, |t| vocab.is_numeric(t))
        };
        let report = teacher_forced_eval(&fast, &store, &data, spans_for);
        assert!(report.n_latent > 0);
        assert!(report.coverage > 0.0 && report.coverage < 1.0);
        // Replay one record through the graph path and recount.
        let rec = &data[0];
        let tokens = rec.full_sequence();
        let spans = spans_for(rec, &tokens);
        let hybrid = build_hybrid(&tokens, &spans).unwrap();
        let mut g = crate::num::Graph::new(&store);
        let emb = g.param(ids.emb);
        let rows: Vec<crate::num::RowSrc> = hybrid
            .elems
            .iter()
            .map(|e| match e {
                HybridElem::Explicit { tok, .. } => crate::num::RowSrc::Tok(*tok),
                HybridElem::Latent { span } => crate::num::RowSrc::Node(
                    crate::model::compressor::compress_span(
                        &mut g,
                        &ids,
                        &cfg,
                        &tokens[span.start..span.end()],
                        emb,
                    ),
                ),
            })
            .collect();
        let out = backbone_forward(&mut g, &ids, &cfg, &rows);
        let single = teacher_forced_eval(&fast, &store, &data[..1], spans_for);
        let (_, end_think) = rec.think_bounds();
        let mut graph_latent_hits = 0usize;
        let mut graph_latent_total = 0usize;
        let mut graph_answer = false;
        let logits = g.value(out.logits);
        for (r, elem) in hybrid.elems.iter().enumerate() {
            match elem {
                HybridElem::Explicit { orig_pos, .. } if *orig_pos == end_think => {
                    graph_answer = argmax(logits.row(r)) == tokens[end_think + 1];
                }
                HybridElem::Latent { .. } => {
                    graph_latent_total += 1;
                    graph_latent_hits +=
                        (argmax(logits.row(r)) == hybrid.targets[r].unwrap()) as usize;
                }
                _ => {}
            }
        }
        assert_eq!(single.answer_acc, graph_answer as usize as f64);
        assert_eq!(single.n_latent, graph_latent_total);
        assert_eq!(
            single.post_latent_acc.unwrap(),
            graph_latent_hits as f64 / graph_latent_total as f64
        );
    }

    #[test]
    fn explicit_teacher_forcing_needs_no_spans() {
        let (store, ids, cfg, vocab) = tiny_setup(48);
        let fast = FastModel::new(ids, cfg);
        let data = tiny_corpus(4, 49, &vocab);
        let report = teacher_forced_eval(&fast, &store, &data, |_, _| Vec::new());
        assert_eq!(report.n_latent, 0);
        assert!(report.post_latent_acc.is_none());
        assert_eq!(report.coverage, 0.0);
    }

    #[test]
    fn trace_and_frontier_files_round_trip() {
        let (store, ids, cfg, vocab) = tiny_setup(52);
        let fast = FastModel::new(ids, cfg);
        let data = tiny_corpus(2, 53, &vocab);
        let (_, traces) =
            evaluate(&fast, &store, &vocab, &data, DecodeMode::Selective { gamma: 0.0 }, 40, None);
        let dir = tempfile::tempdir().unwrap();
        let tpath = dir.path().join("traces.jsonl");
        write_traces(&tpath, "cafef00d", &traces).unwrap();
        let text = std::fs::read_to_string(&tpath).unwrap();
        assert_eq!(text.lines().count(), traces.len() + 1);
        let meta: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(meta["config"], "cafef00d");
        let first: serde_json::Value =
            serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        assert!(first["events"].is_array());
        assert!(first["t_llm"].is_u64());
        let kinds: Vec<&str> = first["events"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e["kind"].as_str().unwrap())
            .collect();
        assert!(kinds.iter().all(|&k| k == "tok" || k == "lat"));
        let points = vec![FrontierPoint {
            gamma: -0.5,
            pass1: 0.75,
            mean_explicit: 12.0,
            mean_latent: 3.5,
            delta_acc_per_l: None,
            n: 2,
        }];
        let fpath = dir.path().join("frontier.csv");
        write_frontier_csv(&fpath, "cafef00d", &points, 5).unwrap();
        let text = std::fs::read_to_string(&fpath).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# config cafef00d");
        assert_eq!(lines.next().unwrap(), "gamma,c_max,pass1,mean_L,mean_latent,delta_acc_per_L,n");
        assert_eq!(lines.next().unwrap(), "-0.5,5,0.750000,12.0000,3.5000,,2");
    }
}
