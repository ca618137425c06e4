//! Hybrid sequences: selected reasoning spans collapse into one latent slot
//! each, and every surviving element is trained against the next original
//! token after the positions it covers. The element right before a latent
//! slot therefore predicts the first compressed token, and the slot itself
//! predicts the first token after its span.

use crate::model::vocab::{Vocabulary, END_THINK, THINK};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanStrategy {
    Random,
    Skipnum,
}

impl std::str::FromStr for SpanStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(SpanStrategy::Random),
            "skipnum" => Ok(SpanStrategy::Skipnum),
            other => Err(format!("unknown span strategy {other:?} (expected random or skipnum)")),
        }
    }
}

/// A run of original token positions to be compressed. `start` indexes the
/// full token sequence, 0-based; the span covers `start..start + len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    /// One past the last covered position.
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HybridElem {
    Explicit { tok: usize, orig_pos: usize },
    Latent { span: Span },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridSequence {
    pub elems: Vec<HybridElem>,
    /// Prediction target per element; None when no original token follows.
    pub targets: Vec<Option<usize>>,
}

impl HybridSequence {
    pub fn len(&self) -> usize {
        self.elems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elems.is_empty()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HybridError {
    #[error("span at {start} has zero length")]
    EmptySpan { start: usize },
    #[error("span at 0 has no token before it")]
    NoPrefix,
    #[error("span {start}..{end} runs past the sequence (len {len})")]
    OutOfBounds { start: usize, end: usize, len: usize },
    #[error("span starting at {second} overlaps the span ending at {first_end}")]
    Overlap { first_end: usize, second: usize },
    #[error("span {start}..{end} leaves the think region {region_start}..{region_end}")]
    OutsideThinkRegion { start: usize, end: usize, region_start: usize, region_end: usize },
}

/// Replace each span with a latent slot and assign alignment targets.
/// Span order does not matter; they are sorted before validation.
pub fn build_hybrid(tokens: &[usize], spans: &[Span]) -> Result<HybridSequence, HybridError> {
    let mut spans = spans.to_vec();
    spans.sort_by_key(|s| s.start);
    for (i, s) in spans.iter().enumerate() {
        if s.len == 0 {
            return Err(HybridError::EmptySpan { start: s.start });
        }
        if s.start == 0 {
            return Err(HybridError::NoPrefix);
        }
        if s.end() > tokens.len() {
            return Err(HybridError::OutOfBounds {
                start: s.start,
                end: s.end(),
                len: tokens.len(),
            });
        }
        if i > 0 && spans[i - 1].end() > s.start {
            return Err(HybridError::Overlap { first_end: spans[i - 1].end(), second: s.start });
        }
    }
    let think = tokens.iter().position(|&t| t == THINK);
    let end_think = tokens.iter().position(|&t| t == END_THINK);
    if let (Some(tp), Some(ep)) = (think, end_think) {
        for s in &spans {
            if s.start <= tp || s.end() > ep {
                return Err(HybridError::OutsideThinkRegion {
                    start: s.start,
                    end: s.end(),
                    region_start: tp + 1,
                    region_end: ep,
                });
            }
        }
    }

    let mut elems = Vec::with_capacity(tokens.len());
    let mut cursor = 0usize;
    for s in &spans {
        for p in cursor..s.start {
            elems.push(HybridElem::Explicit { tok: tokens[p], orig_pos: p });
        }
        elems.push(HybridElem::Latent { span: *s });
        cursor = s.end();
    }
    for p in cursor..tokens.len() {
        elems.push(HybridElem::Explicit { tok: tokens[p], orig_pos: p });
    }
    let targets = elems
        .iter()
        .map(|e| {
            let next = match e {
                HybridElem::Explicit { orig_pos, .. } => orig_pos + 1,
                HybridElem::Latent { span } => span.end(),
            };
            tokens.get(next).copied()
        })
        .collect();
    Ok(HybridSequence { elems, targets })
}

/// Walk the region left to right in chunks of 2 to 5 tokens (capped by
/// `c_max`), keeping each chunk with probability `fraction`, until coverage
/// first reaches the target. The final chunk is resized so a lone 1-token
/// tail is never left behind; at fraction 1.0 the region tiles completely.
pub fn select_spans_random<R: Rng>(
    cot: &[usize],
    region_start: usize,
    fraction: f64,
    c_max: usize,
    rng: &mut R,
) -> Vec<Span> {
    let n = cot.len();
    if n < 2 || fraction <= 0.0 {
        return Vec::new();
    }
    let target = fraction.min(1.0) * n as f64;
    let max_len = c_max.min(5).max(2);
    let mut spans = Vec::new();
    let mut covered = 0usize;
    let mut cursor = 0usize;
    while n - cursor >= 2 && (covered as f64) < target {
        let mut len = rng.gen_range(2..=5usize).min(max_len).min(n - cursor);
        if n - cursor - len == 1 {
            if len + 1 <= max_len {
                len += 1;
            } else if len > 2 {
                len -= 1;
            }
        }
        if fraction >= 1.0 || rng.gen_bool(fraction) {
            spans.push(Span { start: region_start + cursor, len });
            covered += len;
        }
        cursor += len;
    }
    spans
}

/// Cover every maximal run of non-numeric tokens, splitting runs longer than
/// `c_max` into left-to-right maximal chunks. Numeric tokens stay explicit.
pub fn select_spans_skipnum(
    cot: &[usize],
    region_start: usize,
    c_max: usize,
    is_numeric: impl Fn(usize) -> bool,
) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut i = 0usize;
    while i < cot.len() {
        if is_numeric(cot[i]) {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < cot.len() && !is_numeric(cot[j]) {
            j += 1;
        }
        let mut s = i;
        while s < j {
            let len = (j - s).min(c_max);
            spans.push(Span { start: region_start + s, len });
            s += len;
        }
        i = j;
    }
    spans
}

/// Strategy dispatch over a CoT region. Skipnum ignores the fraction; its
/// coverage is fixed by where the numeric tokens sit.
pub fn select_spans<R: Rng>(
    strategy: SpanStrategy,
    cot: &[usize],
    region_start: usize,
    fraction: f64,
    c_max: usize,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Vec<Span> {
    match strategy {
        SpanStrategy::Random => select_spans_random(cot, region_start, fraction, c_max, rng),
        SpanStrategy::Skipnum => {
            select_spans_skipnum(cot, region_start, c_max, |t| vocab.is_numeric(t))
        }
    }
}

/// Linear ramp from `start` to `end` over `ramp_epochs`, clamped to [0, 1].
pub fn schedule_fraction(epoch: usize, start: f64, end: f64, ramp_epochs: usize) -> f64 {
    let f = if ramp_epochs == 0 || epoch >= ramp_epochs {
        end
    } else {
        start + (end - start) * epoch as f64 / ramp_epochs as f64
    };
    f.clamp(0.0, 1.0)
}
