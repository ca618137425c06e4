//! Arithmetic-chain task: modular update programs rendered through fixed
//! templates. Filler words are fully determined by the template while every
//! result value carries fresh information, which is exactly the contrast the
//! compression experiments lean on.

use crate::config::DataConfig;
use crate::model::vocab::{TokenizeError, Vocabulary, BOS, END_THINK, EOS, PAD, THINK};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

const MODULUS: i64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
}

impl OpKind {
    pub fn word(self) -> &'static str {
        match self {
            OpKind::Add => "plus",
            OpKind::Sub => "minus",
            OpKind::Mul => "times",
        }
    }

    pub fn apply(self, a: i64, k: i64) -> i64 {
        let r = match self {
            OpKind::Add => a + k,
            OpKind::Sub => a - k,
            OpKind::Mul => a * k,
        };
        r.rem_euclid(MODULUS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Operation {
    pub kind: OpKind,
    pub k: i64,
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub v0: i64,
    pub ops: Vec<Operation>,
    /// Value after each operation; the last entry is the answer.
    pub steps: Vec<i64>,
    pub question: String,
    pub cot: String,
    pub answer: i64,
}

impl Problem {
    /// Evaluate a program and render the fixed question and chain templates.
    pub fn from_program(v0: i64, ops: Vec<Operation>) -> Problem {
        assert!((0..MODULUS).contains(&v0), "start value {v0} out of range");
        assert!(!ops.is_empty(), "a program needs at least one operation");
        let mut steps = Vec::with_capacity(ops.len());
        let mut question = format!("start with {v0} .");
        let mut cot = String::new();
        let mut a = v0;
        for (i, op) in ops.iter().enumerate() {
            let r = op.kind.apply(a, op.k);
            write!(question, " then {} {}", op.word_str(), op.k).unwrap();
            if i > 0 {
                cot.push(' ');
            }
            write!(cot, "{a} {} {} equals {r} .", op.word_str(), op.k).unwrap();
            steps.push(r);
            a = r;
        }
        question.push_str(" what is the result ?");
        Problem { v0, ops, steps, question, cot, answer: a }
    }
}

impl Operation {
    fn word_str(&self) -> &'static str {
        self.kind.word()
    }
}

/// Draw a random program whose answer value never appears in the question,
/// so the question alone cannot leak the result.
pub fn generate_problem<R: Rng>(rng: &mut R, n_ops: usize, min_k: i64, max_k: i64) -> Problem {
    assert!(n_ops >= 1, "n_ops must be at least 1");
    loop {
        let v0 = rng.gen_range(0..MODULUS);
        let ops: Vec<Operation> = (0..n_ops)
            .map(|_| {
                let kind = match rng.gen_range(0..3u8) {
                    0 => OpKind::Add,
                    1 => OpKind::Sub,
                    _ => OpKind::Mul,
                };
                Operation { kind, k: rng.gen_range(min_k..=max_k) }
            })
            .collect();
        let p = Problem::from_program(v0, ops);
        let leaked = p.answer == p.v0 || p.ops.iter().any(|o| o.k == p.answer);
        if !leaked {
            return p;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: u64,
    pub question: String,
    pub cot: String,
    pub answer: String,
    pub difficulty: u32,
}

impl DatasetRecord {
    pub fn from_problem(id: u64, p: &Problem) -> DatasetRecord {
        DatasetRecord {
            id,
            question: p.question.clone(),
            cot: p.cot.clone(),
            answer: p.answer.to_string(),
            difficulty: p.ops.len() as u32,
        }
    }

    pub fn tokenized(&self, vocab: &Vocabulary) -> Result<TokenizedProblem, TokenizeError> {
        let question = vocab.tokenize(&self.question)?;
        let cot = vocab.tokenize(&self.cot)?;
        let answer = vocab.tokenize(&self.answer)?;
        let answer_value = match answer.as_slice() {
            [single] => vocab.token_value(*single),
            _ => None,
        }
        .unwrap_or_else(|| panic!("record {} answer {:?} is not one value token", self.id, self.answer));
        Ok(TokenizedProblem {
            id: self.id,
            question,
            cot,
            answer,
            answer_value,
            difficulty: self.difficulty,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TokenizedProblem {
    pub id: u64,
    pub question: Vec<usize>,
    pub cot: Vec<usize>,
    pub answer: Vec<usize>,
    pub answer_value: i64,
    pub difficulty: u32,
}

impl TokenizedProblem {
    /// `<bos> question <think> cot </think> answer <eos>`
    pub fn full_sequence(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.question.len() + self.cot.len() + self.answer.len() + 4);
        s.push(BOS);
        s.extend_from_slice(&self.question);
        s.push(THINK);
        s.extend_from_slice(&self.cot);
        s.push(END_THINK);
        s.extend_from_slice(&self.answer);
        s.push(EOS);
        s
    }

    /// Same layout with an empty think region.
    pub fn no_cot_sequence(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.question.len() + self.answer.len() + 4);
        s.push(BOS);
        s.extend_from_slice(&self.question);
        s.push(THINK);
        s.push(END_THINK);
        s.extend_from_slice(&self.answer);
        s.push(EOS);
        s
    }

    /// What the model sees before it starts generating.
    pub fn prompt(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.question.len() + 1);
        s.push(BOS);
        s.extend_from_slice(&self.question);
        s
    }

    /// Positions of `<think>` and `</think>` in `full_sequence()`.
    pub fn think_bounds(&self) -> (usize, usize) {
        let think = 1 + self.question.len();
        (think, think + 1 + self.cot.len())
    }
}

/// Exact-match correctness: the region after `</think>` (pads stripped,
/// `<eos>` excluded) must be the single gold value token.
pub fn check_answer(answer_region: &[usize], gold: i64, vocab: &Vocabulary) -> bool {
    let mut it = answer_region.iter().copied().filter(|&t| t != PAD);
    match (it.next(), it.next()) {
        (Some(tok), None) => tok == vocab.value_token(gold),
        _ => false,
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encode(#[from] serde_json::Error),
    #[error("line {line}: {source}")]
    Malformed { line: usize, source: serde_json::Error },
    #[error("record {id}: {source}")]
    Tokenize { id: u64, source: TokenizeError },
}

pub fn write_dataset<'a>(
    records: impl IntoIterator<Item = &'a DatasetRecord>,
    path: &Path,
) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|source| DataError::Malformed { line: i + 1, source })?;
        out.push(rec);
    }
    Ok(out)
}

/// 64-bit mix used to assign records to splits independently of generation
/// order.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Val => "val.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

/// 98/1/1 split keyed on the record id alone.
pub fn split_for_id(id: u64) -> Split {
    match splitmix64(id) % 100 {
        98 => Split::Val,
        99 => Split::Test,
        _ => Split::Train,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub vocab_len: usize,
}

/// Stream `cfg.count` generated records into train/val/test JSONL files plus
/// `vocab.json`. Each record's randomness is keyed on (seed, id), so the
/// corpus is reproducible byte for byte and independent of write order.
pub fn generate_corpus(cfg: &DataConfig, seed: u64, out_dir: &Path) -> Result<CorpusSummary, DataError> {
    std::fs::create_dir_all(out_dir)?;
    let vocab = Vocabulary::arithmetic();
    std::fs::write(out_dir.join("vocab.json"), vocab.to_json())?;
    let mut writers = [
        BufWriter::new(File::create(out_dir.join(Split::Train.file_name()))?),
        BufWriter::new(File::create(out_dir.join(Split::Val.file_name()))?),
        BufWriter::new(File::create(out_dir.join(Split::Test.file_name()))?),
    ];
    let mut counts = [0usize; 3];
    for id in 0..cfg.count as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ id));
        let n_ops = rng.gen_range(cfg.min_ops..=cfg.max_ops);
        let p = generate_problem(&mut rng, n_ops, cfg.min_k, cfg.max_k);
        let rec = DatasetRecord::from_problem(id, &p);
        let slot = match split_for_id(id) {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        serde_json::to_writer(&mut writers[slot], &rec)?;
        writers[slot].write_all(b"\n")?;
        counts[slot] += 1;
    }
    for w in &mut writers {
        w.flush()?;
    }
    Ok(CorpusSummary { train: counts[0], val: counts[1], test: counts[2], vocab_len: vocab.len() })
}

/// Load one split and tokenize every record.
pub fn load_tokenized(dir: &Path, split: Split, vocab: &Vocabulary) -> Result<Vec<TokenizedProblem>, DataError> {
    let recs = read_dataset(&dir.join(split.file_name()))?;
    recs.iter()
        .map(|r| r.tokenized(vocab).map_err(|source| DataError::Tokenize { id: r.id, source }))
        .collect()
}
