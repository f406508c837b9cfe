//! Deterministic synthetic datasets and epoch batching.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    BinaryClassification,
    Regression,
    CharSequence,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::BinaryClassification => "binary_classification",
            TaskKind::Regression => "regression",
            TaskKind::CharSequence => "char_sequence",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary_classification" => Ok(TaskKind::BinaryClassification),
            "regression" => Ok(TaskKind::Regression),
            "char_sequence" => Ok(TaskKind::CharSequence),
            other => Err(Error::arg(format!("unknown task kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    /// Feature vector with a scalar target (class label 0/1 or real value).
    Vector { x: Vec<f64>, y: f64 },
    /// Fixed window of symbol indices and the symbol that follows it.
    Tokens { context: Vec<u16>, next: u16 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    /// Feature dimension, or window length for character sequences.
    pub dim: usize,
    /// Symbol count for character sequences, 0 otherwise.
    pub vocab: usize,
    pub samples: Vec<Sample>,
    /// Generating direction for vector tasks, when known.
    pub teacher: Option<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn gather(&self, indices: &[usize]) -> Vec<&Sample> {
        indices.iter().map(|&i| &self.samples[i]).collect()
    }

    /// Moves the last `n` samples into a second dataset.
    pub fn split_off(&mut self, n: usize) -> Result<Dataset> {
        if n >= self.samples.len() {
            return Err(Error::arg(format!(
                "cannot hold out {n} of {} samples",
                self.samples.len()
            )));
        }
        let tail = self.samples.split_off(self.samples.len() - n);
        Ok(Dataset { samples: tail, teacher: self.teacher.clone(), ..*self })
    }

    /// Plain-text export: a `kind=… dim=… vocab=…` header, then one
    /// comma-separated example per line with the target last.
    pub fn to_text(&self) -> String {
        let mut out = format!("kind={} dim={} vocab={}\n", self.kind.as_str(), self.dim, self.vocab);
        for sample in &self.samples {
            match sample {
                Sample::Vector { x, y } => {
                    for v in x {
                        let _ = write!(out, "{v},");
                    }
                    let _ = writeln!(out, "{y}");
                }
                Sample::Tokens { context, next } => {
                    for t in context {
                        let _ = write!(out, "{t},");
                    }
                    let _ = writeln!(out, "{next}");
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Dataset> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "missing header".into() })?;
        let mut kind = None;
        let mut dim = None;
        let mut vocab = 0usize;
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: 1, msg: format!("bad header field {field:?}") })?;
            let bad = |e: String| Error::Parse { line: 1, msg: e };
            match key {
                "kind" => kind = Some(value.parse::<TaskKind>().map_err(|e| bad(e.to_string()))?),
                "dim" => dim = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                "vocab" => vocab = value.parse::<usize>().map_err(|e| bad(e.to_string()))?,
                other => return Err(bad(format!("unknown header key {other:?}"))),
            }
        }
        let kind = kind.ok_or(Error::Parse { line: 1, msg: "header lacks kind".into() })?;
        let dim = dim.ok_or(Error::Parse { line: 1, msg: "header lacks dim".into() })?;
        let mut samples = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != dim + 1 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {} fields, found {}", dim + 1, fields.len()),
                });
            }
            let bad = |e: String| Error::Parse { line: lineno, msg: e };
            let sample = match kind {
                TaskKind::CharSequence => {
                    let tokens = fields
                        .iter()
                        .map(|f| f.parse::<u16>().map_err(|e| bad(e.to_string())))
                        .collect::<Result<Vec<_>>>()?;
                    if tokens.iter().any(|&t| usize::from(t) >= vocab) {
                        return Err(bad(format!("symbol outside vocabulary of {vocab}")));
                    }
                    Sample::Tokens { next: tokens[dim], context: tokens[..dim].to_vec() }
                }
                _ => {
                    let values = fields
                        .iter()
                        .map(|f| f.parse::<f64>().map_err(|e| bad(e.to_string())))
                        .collect::<Result<Vec<_>>>()?;
                    Sample::Vector { y: values[dim], x: values[..dim].to_vec() }
                }
            };
            samples.push(sample);
        }
        if samples.is_empty() {
            return Err(Error::Parse { line: 2, msg: "dataset has no examples".into() });
        }
        Ok(Dataset { kind, dim, vocab, samples, teacher: None })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: TaskKind,
    pub n: usize,
    /// Feature dimension, or context window for `char_sequence`.
    pub dim: usize,
    /// Symbol count for `char_sequence` (8..=64).
    pub vocab: usize,
    /// Minimum `|w·x|` for classification points.
    pub margin: f64,
    /// Target noise for regression.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::BinaryClassification,
            n: 10_000,
            dim: 10,
            vocab: 32,
            margin: 0.1,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("dataset size must be >= 1"));
        }
        if self.dim == 0 {
            return Err(Error::config("dataset dimension must be >= 1"));
        }
        if self.kind == TaskKind::CharSequence && !(8..=64).contains(&self.vocab) {
            return Err(Error::config(format!("vocabulary must lie in 8..=64, got {}", self.vocab)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::config("margin must be >= 0"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std must be >= 0"));
        }
        Ok(())
    }
}

/// Generates a dataset as a pure function of `spec`.
///
/// * `binary_classification`: `x ~ N(0, I)`, label `1{w·x ≥ 0}` for a random
///   unit teacher `w`; points inside the margin are pushed out along `w`, so
///   `|w·x| ≥ margin` holds for every example.
/// * `regression`: `y = w·x + noise_std·ε`.
/// * `char_sequence`: next-symbol windows over a stream of lines, each line
///   drawn from one of two tones whose word lists use disjoint alphabets.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    match spec.kind {
        TaskKind::BinaryClassification | TaskKind::Regression => Ok(gen_vector(spec, &mut rng)),
        TaskKind::CharSequence => Ok(gen_chars(spec, &mut rng)),
    }
}

fn gaussian_vec(rng: &mut ChaCha20Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gen_vector(spec: &SyntheticSpec, rng: &mut ChaCha20Rng) -> Dataset {
    let mut teacher = gaussian_vec(rng, spec.dim);
    let norm = dot(&teacher, &teacher).sqrt();
    teacher.iter_mut().for_each(|w| *w /= norm);

    let samples = (0..spec.n)
        .map(|_| {
            let mut x = gaussian_vec(rng, spec.dim);
            let score = dot(&teacher, &x);
            match spec.kind {
                TaskKind::BinaryClassification => {
                    let sign = if score >= 0.0 { 1.0 } else { -1.0 };
                    if score.abs() < spec.margin {
                        for (xi, wi) in x.iter_mut().zip(&teacher) {
                            *xi += sign * spec.margin * wi;
                        }
                    }
                    Sample::Vector { x, y: if sign > 0.0 { 1.0 } else { 0.0 } }
                }
                _ => {
                    let eps: f64 = rng.sample(StandardNormal);
                    Sample::Vector { x, y: score + spec.noise_std * eps }
                }
            }
        })
        .collect();
    Dataset { kind: spec.kind, dim: spec.dim, vocab: 0, samples, teacher: Some(teacher) }
}

/// Symbol 0 ends a line, symbol 1 separates words.
pub const NEWLINE: u16 = 0;
pub const SPACE: u16 = 1;
const WORDS_PER_TONE: usize = 12;

fn gen_chars(spec: &SyntheticSpec, rng: &mut ChaCha20Rng) -> Dataset {
    let letters = (spec.vocab - 2) as u16;
    let half = letters / 2;
    let alphabets = [(2, 2 + half), (2 + half, 2 + letters)];
    let words: Vec<Vec<Vec<u16>>> = alphabets
        .iter()
        .map(|&(lo, hi)| {
            (0..WORDS_PER_TONE)
                .map(|_| {
                    let len = rng.random_range(2..=6);
                    (0..len).map(|_| rng.random_range(lo..hi)).collect()
                })
                .collect()
        })
        .collect();

    let needed = spec.n + spec.dim;
    let mut stream: Vec<u16> = Vec::with_capacity(needed + 64);
    while stream.len() < needed {
        let tone = &words[rng.random_range(0..2)];
        let count = rng.random_range(3..=8);
        for w in 0..count {
            if w > 0 {
                stream.push(SPACE);
            }
            stream.extend_from_slice(&tone[rng.random_range(0..tone.len())]);
        }
        stream.push(NEWLINE);
    }
    let samples = (0..spec.n)
        .map(|i| Sample::Tokens { context: stream[i..i + spec.dim].to_vec(), next: stream[i + spec.dim] })
        .collect();
    Dataset { kind: TaskKind::CharSequence, dim: spec.dim, vocab: spec.vocab, samples, teacher: None }
}

/// One logical batch: dataset indices plus the microbatch size used to split
/// it.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub micro_size: usize,
}

impl Batch {
    /// Realized batch size `B_t`.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Consecutive chunks of at most `micro_size` indices, in batch order.
    pub fn microbatches(&self) -> Vec<&[usize]> {
        self.indices.chunks(self.micro_size).collect()
    }

    /// Sampling rate `B_t / N` for the accountant.
    pub fn sampling_rate(&self, dataset_len: usize) -> f64 {
        self.indices.len() as f64 / dataset_len as f64
    }
}

/// One shuffled pass over `0..n`, cut into batches of `batch_size` (the last
/// may be shorter).
#[derive(Debug, Clone)]
pub struct Batches {
    order: Vec<usize>,
    batch_size: usize,
    micro_size: usize,
    cursor: usize,
}

pub fn batches(n: usize, batch_size: usize, micro_size: usize, epoch_seed: u64) -> Result<Batches> {
    if !(1 <= micro_size && micro_size <= batch_size && batch_size <= n) {
        return Err(Error::config(format!(
            "need 1 <= micro ({micro_size}) <= batch ({batch_size}) <= dataset size ({n})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(epoch_seed));
    Ok(Batches { order, batch_size, micro_size, cursor: 0 })
}

impl Batches {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(Batch { indices, micro_size: self.micro_size })
    }
}
