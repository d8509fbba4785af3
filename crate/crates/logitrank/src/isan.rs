//! Input-switched affine network models.
//!
//! A model over `Σ^T` with hidden dimension `d` carries, per step `t`, one
//! `d×d` transition matrix per token and one `|Σ|×d` emission matrix. The
//! state starts at `mu`; step `t` samples `y_t ~ softmax(B_t x_{t-1})` and
//! then switches the state by `x_t = A[t][y_t] x_{t-1}`. These models realize
//! exactly the sequence distributions whose mean-centered next-token logit
//! matrices have rank at most `d` at every history/future split.

use crate::prob::{log_softmax, softmax, LogitVec, Seq, Token};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IsanError {
    #[error("inconsistent shape: {0}")]
    Shape(String),
    #[error("token {token} out of range for alphabet size {sigma}")]
    TokenOutOfRange { token: Token, sigma: usize },
    #[error("prefix length {len} exceeds limit {limit}")]
    PrefixTooLong { len: usize, limit: usize },
    #[error("non-finite entry in model")]
    NonFinite,
    #[error("bad parameter: {0}")]
    Param(String),
    #[error("parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelMeta {
    pub seed: u64,
    pub generator: String,
}

/// An input-switched affine network over `Σ^T`.
///
/// `trans[t][y]` is the row-major `d×d` transition applied after reading
/// token `y` at step `t+1`; `emit[t]` is the row-major `|Σ|×d` emission whose
/// product with the incoming state gives the step-`t+1` logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsanModel {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub sigma: usize,
    pub d: usize,
    pub mu: Vec<f64>,
    #[serde(rename = "A")]
    pub trans: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "B")]
    pub emit: Vec<Vec<f64>>,
    pub meta: ModelMeta,
}

fn matvec(mat: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(mat.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let row = &mat[r * cols..(r + 1) * cols];
        out[r] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
    out
}

fn spectral_norm(mat: &[f64], d: usize) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(d, d, mat);
    m.svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

impl IsanModel {
    pub fn validate(&self) -> Result<(), IsanError> {
        let (t, s, d) = (self.horizon, self.sigma, self.d);
        if t == 0 || s < 2 || d == 0 {
            return Err(IsanError::Param(format!(
                "need T >= 1, sigma >= 2, d >= 1; got T={t} sigma={s} d={d}"
            )));
        }
        if s > Token::MAX as usize + 1 {
            return Err(IsanError::Param(format!("alphabet size {s} exceeds 256")));
        }
        if self.mu.len() != d {
            return Err(IsanError::Shape(format!("mu has length {}", self.mu.len())));
        }
        if self.trans.len() != t || self.emit.len() != t {
            return Err(IsanError::Shape("A or B has wrong step count".into()));
        }
        for (i, per_tok) in self.trans.iter().enumerate() {
            if per_tok.len() != s {
                return Err(IsanError::Shape(format!("A[{i}] has {} tokens", per_tok.len())));
            }
            for a in per_tok {
                if a.len() != d * d {
                    return Err(IsanError::Shape(format!("A[{i}] entry is not {d}x{d}")));
                }
            }
        }
        for (i, b) in self.emit.iter().enumerate() {
            if b.len() != s * d {
                return Err(IsanError::Shape(format!("B[{i}] is not {s}x{d}")));
            }
        }
        let finite = self.mu.iter().all(|x| x.is_finite())
            && self.trans.iter().flatten().flatten().all(|x| x.is_finite())
            && self.emit.iter().flatten().all(|x| x.is_finite());
        if !finite {
            return Err(IsanError::NonFinite);
        }
        Ok(())
    }

    fn check_prefix(&self, prefix: &Seq, limit: usize) -> Result<(), IsanError> {
        if prefix.len() > limit {
            return Err(IsanError::PrefixTooLong {
                len: prefix.len(),
                limit,
            });
        }
        if let Some(&bad) = prefix.tokens().iter().find(|&&y| y as usize >= self.sigma) {
            return Err(IsanError::TokenOutOfRange {
                token: bad,
                sigma: self.sigma,
            });
        }
        Ok(())
    }

    /// Hidden state after reading `prefix`.
    pub fn state(&self, prefix: &Seq) -> Result<Vec<f64>, IsanError> {
        self.check_prefix(prefix, self.horizon)?;
        let mut x = self.mu.clone();
        for (t, &y) in prefix.tokens().iter().enumerate() {
            x = matvec(&self.trans[t][y as usize], self.d, self.d, &x);
        }
        Ok(x)
    }

    /// Raw next-token logits `B_{t+1} x_t` after reading a length-`t` prefix.
    pub fn next_logits(&self, prefix: &Seq) -> Result<LogitVec, IsanError> {
        self.check_prefix(prefix, self.horizon.saturating_sub(1))?;
        let x = self.state(prefix)?;
        Ok(matvec(&self.emit[prefix.len()], self.sigma, self.d, &x))
    }

    /// Exact log conditional probabilities `log M(y_{t+1} = · | prefix)`.
    pub fn log_probs(&self, prefix: &Seq) -> Result<Vec<f64>, IsanError> {
        Ok(log_softmax(&self.next_logits(prefix)?))
    }

    /// Draw a full trajectory.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Seq, IsanError> {
        let mut x = self.mu.clone();
        let mut out = Vec::with_capacity(self.horizon);
        for t in 0..self.horizon {
            let logits = matvec(&self.emit[t], self.sigma, self.d, &x);
            let dist = softmax(&logits).map_err(|e| IsanError::Param(e.to_string()))?;
            let y = dist.sample(rng) as Token;
            out.push(y);
            x = matvec(&self.trans[t][y as usize], self.d, self.d, &x);
        }
        Ok(Seq(out))
    }

    /// Log probability of a (possibly partial) sequence under the chain rule.
    pub fn seq_logprob(&self, y: &Seq) -> Result<f64, IsanError> {
        self.check_prefix(y, self.horizon)?;
        let mut x = self.mu.clone();
        let mut lp = 0.0;
        for (t, &tok) in y.tokens().iter().enumerate() {
            let logits = matvec(&self.emit[t], self.sigma, self.d, &x);
            lp += log_softmax(&logits)[tok as usize];
            x = matvec(&self.trans[t][tok as usize], self.d, self.d, &x);
        }
        Ok(lp)
    }

    /// Random model: `mu` and emissions uniform in `[-scale, scale]`,
    /// transitions drawn the same way then rescaled to spectral norm at most
    /// one. Draw order is fixed (mu, then transitions by step and token, then
    /// emissions by step), so a seed pins the model bit-exactly.
    pub fn random(
        horizon: usize,
        sigma: usize,
        d: usize,
        scale: f64,
        seed: u64,
    ) -> Result<IsanModel, IsanError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(IsanError::Param(format!("scale must be positive, got {scale}")));
        }
        if horizon == 0 || sigma < 2 || d == 0 {
            return Err(IsanError::Param(format!(
                "need T >= 1, sigma >= 2, d >= 1; got T={horizon} sigma={sigma} d={d}"
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let unif = |n: usize, rng: &mut ChaCha20Rng| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-scale..scale)).collect()
        };
        let mu = unif(d, &mut rng);
        let mut trans = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let mut per_tok = Vec::with_capacity(sigma);
            for _ in 0..sigma {
                let mut a = unif(d * d, &mut rng);
                let norm = spectral_norm(&a, d);
                if norm > 1.0 {
                    for v in &mut a {
                        *v /= norm;
                    }
                }
                per_tok.push(a);
            }
            trans.push(per_tok);
        }
        let emit = (0..horizon).map(|_| unif(sigma * d, &mut rng)).collect();
        let m = IsanModel {
            horizon,
            sigma,
            d,
            mu,
            trans,
            emit,
            meta: ModelMeta {
                seed,
                generator: format!("random(T={horizon},sigma={sigma},d={d},scale={scale})"),
            },
        };
        m.validate()?;
        Ok(m)
    }

    /// Product model: dimension one, identity transitions, so every step's
    /// distribution ignores the history entirely.
    pub fn random_product(
        horizon: usize,
        sigma: usize,
        scale: f64,
        seed: u64,
    ) -> Result<IsanModel, IsanError> {
        let mut m = IsanModel::random(horizon, sigma, 1, scale, seed)?;
        m.mu = vec![1.0];
        for per_tok in &mut m.trans {
            for a in per_tok {
                a[0] = 1.0;
            }
        }
        m.meta.generator = format!("product(T={horizon},sigma={sigma},scale={scale})");
        Ok(m)
    }

    /// Scale all emissions by `1/tau`: conditional distributions become
    /// `softmax(logits / tau)`. Logits are linear in the emissions, so this is
    /// an exact temperature wrap.
    pub fn temperature(&self, tau: f64) -> Result<IsanModel, IsanError> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(IsanError::Param(format!("tau must be positive, got {tau}")));
        }
        let mut m = self.clone();
        for b in &mut m.emit {
            for v in b {
                *v /= tau;
            }
        }
        m.meta.generator = format!("temperature(tau={tau}) of {}", self.meta.generator);
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<IsanModel, IsanError> {
        let m: IsanModel =
            serde_json::from_str(s).map_err(|e| IsanError::Parse(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

/// A real function on `{0,1}^n` given by a sparse multilinear (Fourier)
/// expansion: `f(x) = constant + Σ_i coeff_i · (-1)^{Σ_{j∈vars_i} x_j}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseBoolFn {
    pub n: usize,
    pub terms: Vec<SparseTerm>,
    pub constant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseTerm {
    /// 1-based variable indices, strictly increasing, nonempty.
    pub vars: Vec<usize>,
    pub coeff: f64,
}

impl SparseBoolFn {
    pub fn validate(&self) -> Result<(), IsanError> {
        if self.n == 0 || self.n > 63 {
            return Err(IsanError::Param(format!("need 1 <= n <= 63, got {}", self.n)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.terms {
            if t.vars.is_empty() {
                return Err(IsanError::Param(
                    "empty variable set; use the constant field".into(),
                ));
            }
            if !t.vars.windows(2).all(|w| w[0] < w[1]) {
                return Err(IsanError::Param(format!("unsorted variable set {:?}", t.vars)));
            }
            if *t.vars.last().unwrap() > self.n || t.vars[0] == 0 {
                return Err(IsanError::Param(format!(
                    "variable out of 1..={} in {:?}",
                    self.n, t.vars
                )));
            }
            if !seen.insert(t.vars.clone()) {
                return Err(IsanError::Param(format!("duplicate term {:?}", t.vars)));
            }
            if !t.coeff.is_finite() {
                return Err(IsanError::NonFinite);
            }
        }
        Ok(())
    }

    /// Evaluate on a 0/1 token string of length `n`.
    pub fn eval_bits(&self, x: &[Token]) -> f64 {
        let mut acc = self.constant;
        for t in &self.terms {
            let parity: u32 = t.vars.iter().map(|&j| x[j - 1] as u32).sum();
            acc += if parity % 2 == 0 { t.coeff } else { -t.coeff };
        }
        acc
    }

    /// Evaluate on a bitmask (bit `j-1` holds `x_j`).
    pub fn eval_mask(&self, x: u64) -> f64 {
        let mut acc = self.constant;
        for t in &self.terms {
            let mut mask: u64 = 0;
            for &j in &t.vars {
                mask |= 1 << (j - 1);
            }
            acc += if (x & mask).count_ones() % 2 == 0 {
                t.coeff
            } else {
                -t.coeff
            };
        }
        acc
    }

    /// Parse "1,2:0.5;3:-0.25" (semicolon-separated `vars:coeff` terms; an
    /// empty variable list, as in ":0.1", sets the constant).
    pub fn parse(s: &str, n: usize) -> Result<SparseBoolFn, IsanError> {
        let mut terms = Vec::new();
        let mut constant = 0.0;
        for part in s.split(';').filter(|p| !p.trim().is_empty()) {
            let (vars_s, coeff_s) = part
                .split_once(':')
                .ok_or_else(|| IsanError::Parse(format!("term `{part}` has no `:`")))?;
            let coeff: f64 = coeff_s
                .trim()
                .parse()
                .map_err(|_| IsanError::Parse(format!("bad coefficient `{coeff_s}`")))?;
            let vars_s = vars_s.trim();
            if vars_s.is_empty() {
                constant += coeff;
                continue;
            }
            let mut vars = Vec::new();
            for v in vars_s.split(',') {
                let idx: usize = v
                    .trim()
                    .parse()
                    .map_err(|_| IsanError::Parse(format!("bad variable `{v}`")))?;
                vars.push(idx);
            }
            vars.sort_unstable();
            vars.dedup();
            terms.push(SparseTerm { vars, coeff });
        }
        let f = SparseBoolFn { n, terms, constant };
        f.validate()?;
        Ok(f)
    }
}

/// Build the width-`|terms|` model over `Σ = {0,1}`, `T = n+1` whose last
/// step emits token 1 with probability `sigmoid(logit_scale · f(x))`.
///
/// The state tracks one parity character per term: transitions for token 0
/// are the identity, transitions for token 1 at step `t` negate exactly the
/// coordinates whose term contains `t`. Steps `1..=n` emit all-zero logits
/// (uniform bits); step `n+1` emits `(0, logit_scale · Σ_i coeff_i · χ_i(x))`.
pub fn isan_from_sparse_fn(f: &SparseBoolFn, logit_scale: f64) -> Result<IsanModel, IsanError> {
    f.validate()?;
    if !(logit_scale.is_finite() && logit_scale > 0.0) {
        return Err(IsanError::Param(format!(
            "logit_scale must be positive, got {logit_scale}"
        )));
    }
    // The constant term, when present, rides along as a character on the
    // empty set: its coordinate is never negated.
    let mut coeffs: Vec<f64> = Vec::new();
    let mut var_sets: Vec<Vec<usize>> = Vec::new();
    if f.constant != 0.0 {
        coeffs.push(f.constant);
        var_sets.push(Vec::new());
    }
    for t in &f.terms {
        coeffs.push(t.coeff);
        var_sets.push(t.vars.clone());
    }
    if coeffs.is_empty() {
        return Err(IsanError::Param("function has no terms".into()));
    }
    let d = coeffs.len();
    let n = f.n;
    let horizon = n + 1;
    let ident: Vec<f64> = {
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            m[i * d + i] = 1.0;
        }
        m
    };
    let mut trans = Vec::with_capacity(horizon);
    for step in 1..=horizon {
        let mut flip = ident.clone();
        for (i, vs) in var_sets.iter().enumerate() {
            if vs.contains(&step) {
                flip[i * d + i] = -1.0;
            }
        }
        trans.push(vec![ident.clone(), flip]);
    }
    let mut emit = vec![vec![0.0; 2 * d]; horizon];
    for (i, &c) in coeffs.iter().enumerate() {
        emit[horizon - 1][d + i] = logit_scale * c;
    }
    let m = IsanModel {
        horizon,
        sigma: 2,
        d,
        mu: vec![1.0; d],
        trans,
        emit,
        meta: ModelMeta {
            seed: 0,
            generator: format!("sparse_fn(n={n},terms={})", d),
        },
    };
    m.validate()?;
    Ok(m)
}
