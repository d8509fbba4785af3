//! Autoregressive generation from a learned model: per-prefix LP solves
//! induce a deterministic next-token distribution, which is sampled token by
//! token. Generation reads only the learned model, never an oracle.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::learner::{FutureSets, LearnedModel, SpannerBank};
use crate::lp::{build_feasibility, solve_feasibility, FeasOutcome};
use crate::prob::{lex_rank, softmax, Dist, Seq, Token};

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("sampler parameter error: {0}")]
    Param(String),
    #[error("prefix length {0} outside horizon {1}")]
    Horizon(usize, usize),
    #[error("enumeration scale guard: {0}")]
    Scale(String),
    #[error(transparent)]
    Lp(#[from] crate::lp::LpError),
    #[error(transparent)]
    Prob(#[from] crate::prob::ProbError),
}

/// A full generated sequence, or the step at which the per-prefix program
/// first went infeasible. The failure step lies in [1, T-1]: the empty
/// prefix never solves a program and the last token needs none.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleOutcome {
    Tokens(Seq),
    Fail { step: usize },
}

impl SampleOutcome {
    pub fn tokens(&self) -> Option<&Seq> {
        match self {
            SampleOutcome::Tokens(s) => Some(s),
            SampleOutcome::Fail { .. } => None,
        }
    }

    /// CLI line format: space-separated tokens, or FAIL@step.
    pub fn render_line(&self) -> String {
        match self {
            SampleOutcome::Tokens(s) => s.to_space_string(),
            SampleOutcome::Fail { step } => format!("FAIL@{step}"),
        }
    }
}

fn validate_model(lm: &LearnedModel) -> Result<(), SamplerError> {
    if lm.horizon == 0 || lm.sigma < 2 || lm.dstar == 0 {
        return Err(SamplerError::Param(format!(
            "degenerate learned model: T={}, sigma={}, d*={}",
            lm.horizon, lm.sigma, lm.dstar
        )));
    }
    if lm.single_token.len() != lm.horizon
        || lm.spanner.len() != lm.horizon
        || lm.futures_tilde.len() != lm.horizon
        || lm.futures_hat.len() != lm.horizon
    {
        return Err(SamplerError::Param(
            "learned model field lengths disagree with its horizon".into(),
        ));
    }
    if lm.single_token[0].len() != lm.dstar || lm.single_token[0][0].len() != lm.sigma {
        return Err(SamplerError::Param(
            "single-token value table has the wrong shape".into(),
        ));
    }
    Ok(())
}

fn check_prefix(lm: &LearnedModel, prefix: &Seq) -> Result<(), SamplerError> {
    if prefix.len() >= lm.horizon {
        return Err(SamplerError::Horizon(prefix.len(), lm.horizon));
    }
    if prefix.tokens().iter().any(|&y| y as usize >= lm.sigma) {
        return Err(SamplerError::Param(format!(
            "prefix token out of range for sigma = {}",
            lm.sigma
        )));
    }
    Ok(())
}

fn next_dist_inner(
    lm: &LearnedModel,
    bank: &SpannerBank,
    fs: &FutureSets,
    prefix: &Seq,
) -> Result<Option<Dist>, SamplerError> {
    check_prefix(lm, prefix)?;
    let t = prefix.len();
    if t == 0 {
        // P̂_1(y) ∝ exp(L_{1,1}(y)); every step-1 row is the same
        return Ok(Some(softmax(&lm.single_token[0][0])?));
    }
    let problem = build_feasibility(bank, fs, prefix, lm.beta)?;
    let sol = match solve_feasibility(&problem, lm.tau_feas)? {
        FeasOutcome::Feasible(sol) => sol,
        FeasOutcome::Infeasible => return Ok(None),
    };
    let y_t = *prefix.tokens().last().expect("t >= 1");
    let ct = &sol.c[t - 1];
    let mut logits = vec![0.0; lm.sigma];
    for (y, slot) in logits.iter_mut().enumerate() {
        // y_t ∘ y sits in F̃_t because Σ ⊆ F̂_{t+1}
        let fut = Seq(vec![y_t, y as Token]);
        let j = fs.tilde_index(t, &fut).ok_or_else(|| {
            SamplerError::Param(format!(
                "two-token future {fut:?} missing from the step-{t} working set"
            ))
        })?;
        *slot = (0..lm.dstar).map(|i| ct[i] * lm.spanner[t - 1][i][j]).sum();
    }
    Ok(Some(softmax(&logits)?))
}

/// The learned next-token distribution after `prefix`: softmax of the
/// extended row L̂_{t,t+1}(y) = Σ_i c_{t,t,i} L_{t,i}(y_t ∘ y), or the
/// stored step-1 row for the empty prefix. None means the per-prefix
/// program was infeasible.
pub fn next_token_dist(lm: &LearnedModel, prefix: &Seq) -> Result<Option<Dist>, SamplerError> {
    validate_model(lm)?;
    let bank = lm.spanner_bank();
    let fs = lm.future_sets();
    next_dist_inner(lm, &bank, &fs, prefix)
}

/// Memoizes per-prefix distributions so repeated generation solves each
/// program once. The induced law is identical to calling
/// [`next_token_dist`] fresh every step.
pub struct SampleSession<'a> {
    lm: &'a LearnedModel,
    bank: SpannerBank,
    fs: FutureSets,
    cache: BTreeMap<Seq, Option<Dist>>,
}

impl<'a> SampleSession<'a> {
    pub fn new(lm: &'a LearnedModel) -> Result<SampleSession<'a>, SamplerError> {
        validate_model(lm)?;
        Ok(SampleSession {
            lm,
            bank: lm.spanner_bank(),
            fs: lm.future_sets(),
            cache: BTreeMap::new(),
        })
    }

    pub fn next_dist(&mut self, prefix: &Seq) -> Result<Option<Dist>, SamplerError> {
        if let Some(d) = self.cache.get(prefix) {
            return Ok(d.clone());
        }
        let d = next_dist_inner(self.lm, &self.bank, &self.fs, prefix)?;
        self.cache.insert(prefix.clone(), d.clone());
        Ok(d)
    }

    pub fn sample<R: rand::Rng>(&mut self, rng: &mut R) -> Result<SampleOutcome, SamplerError> {
        let mut seq = Seq::empty();
        for step in 0..self.lm.horizon {
            match self.next_dist(&seq)? {
                Some(dist) => {
                    let y = dist.sample(rng) as Token;
                    seq = seq.push_token(y);
                }
                None => return Ok(SampleOutcome::Fail { step }),
            }
        }
        Ok(SampleOutcome::Tokens(seq))
    }
}

/// Draw one sequence from the learned model.
pub fn sample<R: rand::Rng>(
    lm: &LearnedModel,
    rng: &mut R,
) -> Result<SampleOutcome, SamplerError> {
    SampleSession::new(lm)?.sample(rng)
}

/// The learned distribution over Σ^T, fully enumerated. `probs` is indexed
/// by lexicographic rank; `fail_mass` is the total probability routed to
/// infeasible prefixes, kept separate rather than renormalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedDist {
    pub sigma: usize,
    pub horizon: usize,
    pub probs: Vec<f64>,
    pub fail_mass: f64,
}

pub const ENUM_GUARD: usize = 100_000;

/// Chain-multiply next-token distributions over the whole prefix tree.
pub fn enumerate_learned_dist(lm: &LearnedModel) -> Result<LearnedDist, SamplerError> {
    validate_model(lm)?;
    let total = (lm.sigma as f64).powi(lm.horizon as i32);
    if !(total <= ENUM_GUARD as f64) {
        return Err(SamplerError::Scale(format!(
            "|Σ|^T = {}^{} exceeds {ENUM_GUARD}",
            lm.sigma, lm.horizon
        )));
    }
    let mut session = SampleSession::new(lm)?;
    let mut probs = vec![0.0; total as usize];
    let mut fail_mass = 0.0;
    let mut level: Vec<(Seq, f64)> = vec![(Seq::empty(), 1.0)];
    for _ in 0..lm.horizon {
        let mut next = Vec::with_capacity(level.len() * lm.sigma);
        for (p, mass) in level {
            match session.next_dist(&p)? {
                Some(dist) => {
                    for (y, &py) in dist.probs().iter().enumerate() {
                        next.push((p.push_token(y as Token), mass * py));
                    }
                }
                None => fail_mass += mass,
            }
        }
        level = next;
    }
    for (seq, mass) in level {
        probs[lex_rank(&seq, lm.sigma)] = mass;
    }
    Ok(LearnedDist {
        sigma: lm.sigma,
        horizon: lm.horizon,
        probs,
        fail_mass,
    })
}
