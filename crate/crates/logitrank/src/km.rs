//! Learning bounded boolean functions from value queries, by reduction to
//! sequence-model learning.
//!
//! A function `f : {0,1}^n -> [-1,1]` induces a binary sequence model over
//! `n+1` positions: the first `n` tokens are uniform and the last is drawn
//! with `P(1 | x) = sigmoid(f(x))`. Logit queries at the first `n` positions
//! are constants answered for free; each last-position query costs one `f`
//! evaluation, cached per point. Running the sequence learner on this model
//! and inverting the sigmoid on the learned last-step conditionals recovers
//! an approximation `g` of `f`.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::isan::{IsanError, SparseBoolFn};
use crate::learner::{
    default_params, learn, LearnOutcome, LearnerConfig, LearnerError, ModelSampler,
};
use crate::oracle::{LogitBackend, Oracle, OracleError};
use crate::prob::{LogitVec, Seq, Token};
use crate::sampler::{SampleSession, SamplerError};

/// Largest input arity with exact (enumerated) evaluation support.
pub const MAX_ARITY: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum KmError {
    #[error("bad parameter: {0}")]
    Param(String),
    #[error("function value out of range: {0}")]
    Range(String),
    #[error("bad value table: {0}")]
    Table(String),
    #[error("learner ran out of epochs after {epochs}")]
    Budget { epochs: usize },
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Isan(#[from] IsanError),
}

/// Parity character: `chi(mask, x) = (-1)^{|mask & x|}`, where bit `i-1`
/// of a mask stands for coordinate `i`.
pub fn chi(mask: u32, x: u32) -> f64 {
    if (mask & x).count_ones() % 2 == 1 {
        -1.0
    } else {
        1.0
    }
}

fn seq_of_mask(x: u32, n: usize) -> Seq {
    Seq((0..n).map(|t| ((x >> t) & 1) as Token).collect())
}

fn mask_of_tokens(tokens: &[Token]) -> u32 {
    tokens
        .iter()
        .enumerate()
        .fold(0u32, |m, (t, &y)| m | ((y as u32 & 1) << t))
}

/// Full value table of a sparse function over all `2^n` points, indexed by
/// input mask. Requires `n <= MAX_ARITY`.
pub fn enumerate_table(f: &SparseBoolFn) -> Result<Vec<f64>, KmError> {
    f.validate()?;
    if f.n > MAX_ARITY {
        return Err(KmError::Param(format!(
            "enumeration needs n <= {MAX_ARITY}, got {}",
            f.n
        )));
    }
    Ok((0..1u32 << f.n).map(|x| f.eval_mask(x as u64)).collect())
}

/// Exact parity-basis coefficients of a full value table (length `2^n`,
/// `n <= MAX_ARITY`), indexed by set mask: `coeff[S] = E_x[f(x) chi(S, x)]`.
pub fn fourier_coeffs(table: &[f64]) -> Result<Vec<f64>, KmError> {
    let m = table.len();
    if m == 0 || !m.is_power_of_two() || m > 1 << MAX_ARITY {
        return Err(KmError::Table(format!(
            "table length {m} is not a power of two within 2^{MAX_ARITY}"
        )));
    }
    if table.iter().any(|v| !v.is_finite()) {
        return Err(KmError::Table("non-finite table entry".into()));
    }
    let mut v = table.to_vec();
    let mut h = 1;
    while h < m {
        let mut start = 0;
        while start < m {
            for j in start..start + h {
                let (a, b) = (v[j], v[j + h]);
                v[j] = a + b;
                v[j + h] = a - b;
            }
            start += 2 * h;
        }
        h *= 2;
    }
    let scale = m as f64;
    for c in &mut v {
        *c /= scale;
    }
    Ok(v)
}

/// Value-query interface to a deterministic function on `{0,1}^n` with
/// responses in `[-1, 1]`. Evaluations are cached per point; the query
/// counter counts distinct points only. Clones share the cache and counter.
#[derive(Clone)]
pub struct BoolFnOracle {
    inner: Rc<BoolFnInner>,
}

struct BoolFnInner {
    n: usize,
    f: Box<dyn Fn(u32) -> f64>,
    cache: RefCell<BTreeMap<u32, f64>>,
    queries: Cell<usize>,
}

impl fmt::Debug for BoolFnOracle {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        fm.debug_struct("BoolFnOracle")
            .field("n", &self.inner.n)
            .field("queries", &self.inner.queries.get())
            .finish()
    }
}

impl BoolFnOracle {
    pub fn new(n: usize, f: impl Fn(u32) -> f64 + 'static) -> Result<BoolFnOracle, KmError> {
        if n == 0 || n > 31 {
            return Err(KmError::Param(format!("need 1 <= n <= 31, got {n}")));
        }
        Ok(BoolFnOracle {
            inner: Rc::new(BoolFnInner {
                n,
                f: Box::new(f),
                cache: RefCell::new(BTreeMap::new()),
                queries: Cell::new(0),
            }),
        })
    }

    pub fn n(&self) -> usize {
        self.inner.n
    }

    /// Value at the point encoded by `x` (bit `i-1` = coordinate `i`).
    /// Repeated evaluations at the same point are free.
    pub fn eval_mask(&self, x: u32) -> f64 {
        debug_assert!(self.inner.n == 31 || x < (1u32 << self.inner.n));
        if let Some(&v) = self.inner.cache.borrow().get(&x) {
            return v;
        }
        let v = (self.inner.f)(x);
        self.inner.queries.set(self.inner.queries.get() + 1);
        self.inner.cache.borrow_mut().insert(x, v);
        v
    }

    /// Distinct points evaluated so far.
    pub fn query_count(&self) -> usize {
        self.inner.queries.get()
    }
}

/// Wrap a sparse function as a value-query oracle. For `n <= MAX_ARITY` the
/// range bound `|f(x)| <= 1` is checked by enumeration up front.
pub fn sparse_fn_oracle(f: &SparseBoolFn) -> Result<BoolFnOracle, KmError> {
    if f.n <= MAX_ARITY {
        for (x, v) in enumerate_table(f)?.into_iter().enumerate() {
            if v.abs() > 1.0 + 1e-12 {
                return Err(KmError::Range(format!("f({x:#b}) = {v} lies outside [-1, 1]")));
            }
        }
    }
    let g = f.clone();
    BoolFnOracle::new(f.n, move |x| g.eval_mask(x as u64))
}

/// Logit backend of the induced sequence model. Positions `1..n` answer the
/// constant zero vector without touching `f`; the last position answers
/// `(0, f(x))`, one cached `f` query per distinct `x`.
pub struct BoolFnBackend {
    f: BoolFnOracle,
}

impl BoolFnBackend {
    pub fn new(f: BoolFnOracle) -> BoolFnBackend {
        BoolFnBackend { f }
    }
}

impl LogitBackend for BoolFnBackend {
    fn sigma(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.f.n() + 1
    }

    fn raw_logits(&self, prefix: &Seq) -> Result<LogitVec, OracleError> {
        if let Some(&bad) = prefix.tokens().iter().find(|&&y| y > 1) {
            return Err(OracleError::Param(format!("token {bad} outside {{0,1}}")));
        }
        let n = self.f.n();
        if prefix.len() < n {
            return Ok(vec![0.0, 0.0]);
        }
        if prefix.len() > n {
            return Err(OracleError::Param(format!(
                "prefix length {} exceeds last position {n}",
                prefix.len()
            )));
        }
        Ok(vec![0.0, self.f.eval_mask(mask_of_tokens(prefix.tokens()))])
    }
}

/// Trajectory sampler for the induced model. The learner reads a trajectory
/// only through its first `n` coordinates, which are uniform regardless of
/// `f`; the final coordinate is drawn uniformly too so that sampling never
/// spends function queries on points the logit oracle does not read.
pub struct UniformBitSampler {
    pub n: usize,
}

impl ModelSampler for UniformBitSampler {
    fn horizon(&self) -> usize {
        self.n + 1
    }

    fn sample_trajectory(&self, rng: &mut dyn rand::RngCore) -> Result<Seq, LearnerError> {
        let mut tokens = Vec::with_capacity(self.n + 1);
        for _ in 0..=self.n {
            tokens.push((rng.next_u32() & 1) as Token);
        }
        Ok(Seq(tokens))
    }
}

/// Result of a reduction run: the recovered function as a value table over
/// `{0,1}^n`, indexed by input mask, with query accounting and the exact
/// mean squared error against the target when it was enumerable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedBoolFn {
    pub n: usize,
    /// Recovered values, clamped to `[-1, 1]`; prefixes the learned model
    /// could not extend read out as 0.
    pub g: Vec<f64>,
    pub mse_vs_f: Option<f64>,
    /// Distinct points of `f` evaluated during learning.
    pub f_queries: usize,
    /// Distinct last-position prefixes in the logit-oracle trace.
    pub last_step_reads: usize,
    pub epochs: usize,
    /// Points whose next-token program was infeasible (read out as 0).
    pub fail_points: usize,
}

impl LearnedBoolFn {
    pub fn eval_mask(&self, x: u32) -> f64 {
        self.g[x as usize]
    }
}

/// Learner schedule for the induced model, scaled down to desk size: the
/// analysis constants give epoch and sample counts far beyond what the
/// `2^n`-point instances need, so samples per epoch, spanner draws, and the
/// epoch cap are clamped to small fixed values.
pub fn km_config(
    n: usize,
    d: usize,
    eps: f64,
    delta: f64,
    seed: u64,
) -> Result<LearnerConfig, KmError> {
    if n == 0 || n > MAX_ARITY {
        return Err(KmError::Param(format!(
            "need 1 <= n <= {MAX_ARITY}, got {n}"
        )));
    }
    if d == 0 {
        return Err(KmError::Param("need d >= 1".into()));
    }
    let mut c = default_params(n + 1, 2, d, 1.0, eps, delta, 1e-6)?;
    c.n_samples = 16;
    c.eta = 0.05;
    c.m_max = 200;
    c.k_epochs = c.k_epochs.min(24);
    c.seed = seed;
    Ok(c)
}

fn sigmoid_inv(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Run the sequence learner on the model induced by `f` under an explicit
/// config (horizon must be `f.n() + 1`) and read the learned function off
/// the learned last-step conditionals: `g(x) = clamp(logit(P(1|x)), -1, 1)`,
/// with 0 where the learned model fails to extend `x`.
pub fn km_learn_with(f: &BoolFnOracle, config: &LearnerConfig) -> Result<LearnedBoolFn, KmError> {
    let n = f.n();
    if n > MAX_ARITY {
        return Err(KmError::Param(format!(
            "exact readout needs n <= {MAX_ARITY}, got {n}"
        )));
    }
    let mut oracle = Oracle::new(BoolFnBackend::new(f.clone()));
    let sampler = UniformBitSampler { n };
    let report = learn(&mut oracle, &sampler, config)?;
    let lm = match report.outcome {
        LearnOutcome::Learned(lm) => lm,
        LearnOutcome::BudgetExhausted => {
            return Err(KmError::Budget {
                epochs: report.stats.epochs_used,
            })
        }
    };
    // snapshot before any evaluation work below touches f
    let f_queries = f.query_count();
    let last_step_reads = oracle
        .trace()
        .responses()
        .iter()
        .filter(|r| r.prefix.len() == n)
        .count();

    let mut session = SampleSession::new(&lm)?;
    let mut g = Vec::with_capacity(1 << n);
    let mut fail_points = 0;
    for x in 0..1u32 << n {
        let prefix = seq_of_mask(x, n);
        match session.next_dist(&prefix)? {
            Some(dist) => g.push(sigmoid_inv(dist.probs()[1]).clamp(-1.0, 1.0)),
            None => {
                fail_points += 1;
                g.push(0.0);
            }
        }
    }
    let mse = g
        .iter()
        .enumerate()
        .map(|(x, &v)| (f.eval_mask(x as u32) - v).powi(2))
        .sum::<f64>()
        / (1u64 << n) as f64;

    Ok(LearnedBoolFn {
        n,
        g,
        mse_vs_f: Some(mse),
        f_queries,
        last_step_reads,
        epochs: report.stats.epochs_used,
        fail_points,
    })
}

/// Learn a bounded function on `{0,1}^n` that is close to a `d`-term parity
/// combination, from value queries alone, to mean squared error on the order
/// of `eps` with probability `1 - delta`.
pub fn km_learn(
    f: &BoolFnOracle,
    n: usize,
    d: usize,
    eps: f64,
    delta: f64,
    seed: u64,
) -> Result<LearnedBoolFn, KmError> {
    if n != f.n() {
        return Err(KmError::Param(format!(
            "arity mismatch: oracle has n = {}, caller says {n}",
            f.n()
        )));
    }
    let config = km_config(n, d, eps, delta, seed)?;
    km_learn_with(f, &config)
}
