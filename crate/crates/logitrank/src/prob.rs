//! Shared primitives: token sequences, logit vectors, probability vectors.
//!
//! Logits are compared after projecting out the all-ones direction, i.e. after
//! subtracting the per-position mean ([`mean_center`]). Two raw logit vectors
//! that differ by a constant shift describe the same distribution, and the
//! mean-centered representative is the canonical one used everywhere else in
//! the crate.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Alphabet symbol. Alphabets are `0..sigma` with `sigma <= 256`.
pub type Token = u8;

/// A logit vector indexed by the alphabet.
pub type LogitVec = Vec<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum ProbError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("empty vector")]
    Empty,
    #[error("not a probability vector: {0}")]
    NotADistribution(String),
    #[error("non-finite entry")]
    NonFinite,
}

/// A token sequence (a prefix, history, or future).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Seq(pub Vec<Token>);

impl Seq {
    pub fn empty() -> Self {
        Seq(Vec::new())
    }

    pub fn single(y: Token) -> Self {
        Seq(vec![y])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    /// First `n` tokens as a new sequence.
    pub fn prefix(&self, n: usize) -> Seq {
        Seq(self.0[..n].to_vec())
    }

    /// The sequence without its last token, plus that token. Errors on empty.
    pub fn split_last(&self) -> Option<(Seq, Token)> {
        let (&last, head) = self.0.split_last()?;
        Some((Seq(head.to_vec()), last))
    }

    /// `self ∘ other`.
    pub fn concat(&self, other: &Seq) -> Seq {
        let mut v = Vec::with_capacity(self.len() + other.len());
        v.extend_from_slice(&self.0);
        v.extend_from_slice(&other.0);
        Seq(v)
    }

    /// `self ∘ (slice) ∘ y`.
    pub fn concat_slice_token(&self, mid: &[Token], y: Token) -> Seq {
        let mut v = Vec::with_capacity(self.len() + mid.len() + 1);
        v.extend_from_slice(&self.0);
        v.extend_from_slice(mid);
        v.push(y);
        Seq(v)
    }

    /// `self ∘ y`.
    pub fn push_token(&self, y: Token) -> Seq {
        let mut v = self.0.clone();
        v.push(y);
        Seq(v)
    }

    /// Space-separated token list, empty string for the empty sequence.
    pub fn to_space_string(&self) -> String {
        self.0
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse_space_string(s: &str) -> Result<Seq, std::num::ParseIntError> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(Seq::empty());
        }
        s.split_whitespace()
            .map(|w| w.parse::<Token>())
            .collect::<Result<Vec<_>, _>>()
            .map(Seq)
    }
}

impl fmt::Display for Seq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_space_string())
    }
}

/// A probability vector. Construction validates nonnegativity and
/// normalization to 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct Dist(Vec<f64>);

impl Dist {
    pub fn new(p: Vec<f64>) -> Result<Dist, ProbError> {
        if p.is_empty() {
            return Err(ProbError::Empty);
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(ProbError::NonFinite);
        }
        if let Some(bad) = p.iter().find(|&&x| x < -1e-12) {
            return Err(ProbError::NotADistribution(format!("negative entry {bad}")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(ProbError::NotADistribution(format!("sums to {s}")));
        }
        Ok(Dist(p))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Inverse-CDF sample from one uniform draw.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in self.0.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.0.len() - 1
    }
}

/// Stabilized softmax.
pub fn softmax(logits: &[f64]) -> Result<Dist, ProbError> {
    if logits.is_empty() {
        return Err(ProbError::Empty);
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(ProbError::NonFinite);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Dist::new(exps.iter().map(|&e| e / z).collect())
}

/// Stabilized log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&x| (x - m).exp()).sum();
    let lz = m + z.ln();
    logits.iter().map(|&x| x - lz).collect()
}

/// Projection orthogonal to the all-ones vector: subtract the mean.
pub fn mean_center(v: &[f64]) -> Vec<f64> {
    let mean: f64 = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|&x| x - mean).collect()
}

/// Total variation distance between two distributions on the same index set.
pub fn tv_distance(p: &Dist, q: &Dist) -> Result<f64, ProbError> {
    if p.len() != q.len() {
        return Err(ProbError::DimMismatch(p.len(), q.len()));
    }
    Ok(p.probs()
        .iter()
        .zip(q.probs())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / 2.0)
}

pub fn linf_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Lexicographic rank of a sequence among all of Σ^len (σ-ary numeral).
pub fn lex_rank(seq: &Seq, sigma: usize) -> usize {
    seq.tokens()
        .iter()
        .fold(0usize, |acc, &y| acc * sigma + y as usize)
}

/// Inverse of [`lex_rank`] for fixed length.
pub fn seq_from_rank(rank: usize, sigma: usize, len: usize) -> Seq {
    let mut toks = vec![0 as Token; len];
    let mut r = rank;
    for slot in toks.iter_mut().rev() {
        *slot = (r % sigma) as Token;
        r /= sigma;
    }
    Seq(toks)
}

/// CSV float format: 17 significant digits, enough to round-trip f64.
pub fn csv_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// FNV-1a over a byte stream. Used to derive per-prefix noise streams; stable
/// across platforms.
pub(crate) fn fnv1a64(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
