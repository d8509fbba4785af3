//! Ground-truth evaluation: exact sequence distributions by enumeration,
//! total-variation distance to a learned model, logit-matrix construction,
//! rank profiles, and sampled average-closeness estimates.
//!
//! Rank fits here are Frobenius-optimal (truncated-SVD equivalents); the
//! reported average-L1 errors upper-bound the optimal-L1 fit error up to the
//! Frobenius-vs-L1 gap, and no L1 optimality is claimed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::isan::IsanModel;
use crate::learner::LearnedModel;
use crate::oracle::best_rank_fit;
use crate::prob::{csv_f64, mean_center, Seq, Token};
use crate::sampler::{enumerate_learned_dist, ENUM_GUARD};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("eval parameter error: {0}")]
    Param(String),
    #[error("enumeration scale guard: {0}")]
    Scale(String),
    #[error(transparent)]
    Model(#[from] crate::isan::IsanError),
    #[error(transparent)]
    Sampler(#[from] crate::sampler::SamplerError),
    #[error(transparent)]
    Prob(#[from] crate::prob::ProbError),
}

/// Exact model distribution over Σ^T, indexed by lexicographic rank.
pub fn enumerate_true_dist(m: &IsanModel) -> Result<Vec<f64>, EvalError> {
    let total = (m.sigma as f64).powi(m.horizon as i32);
    if !(total <= ENUM_GUARD as f64) {
        return Err(EvalError::Scale(format!(
            "|Σ|^T = {}^{} exceeds {ENUM_GUARD}",
            m.sigma, m.horizon
        )));
    }
    let total = total as usize;
    let mut probs = vec![0.0; total];
    for (r, slot) in probs.iter_mut().enumerate() {
        let seq = crate::prob::seq_from_rank(r, m.sigma, m.horizon);
        *slot = m.seq_logprob(&seq)?.exp();
    }
    Ok(probs)
}

/// Exact TV distance between the model and the learned model over Σ^T plus
/// the failure atom. Failure mass shares nothing with the target, so it
/// counts as full loss: tv = (Σ|P-Q| + fail_mass) / 2.
pub fn tv_exact(m: &IsanModel, lm: &LearnedModel) -> Result<f64, EvalError> {
    if m.sigma != lm.sigma || m.horizon != lm.horizon {
        return Err(EvalError::Param(format!(
            "shape mismatch: model ({}, {}) vs learned ({}, {})",
            m.horizon, m.sigma, lm.horizon, lm.sigma
        )));
    }
    let p = enumerate_true_dist(m)?;
    let q = enumerate_learned_dist(lm)?;
    let l1: f64 = p.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum();
    Ok((l1 + q.fail_mass) / 2.0)
}

/// Dense logit matrix: rows indexed by histories, columns by (future, token)
/// pairs with column index `f_idx * sigma + y`. Entry (h, (f, y)) is the
/// exact mean-centered logit of y after h ∘ f.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitMatrix {
    pub histories: Vec<Seq>,
    pub futures: Vec<Seq>,
    pub sigma: usize,
    pub entries: Vec<Vec<f64>>,
}

impl LogitMatrix {
    pub fn rows(&self) -> usize {
        self.histories.len()
    }

    pub fn cols(&self) -> usize {
        self.futures.len() * self.sigma
    }

    pub fn col_index(&self, f_idx: usize, y: Token) -> usize {
        f_idx * self.sigma + y as usize
    }

    pub fn to_dmatrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.rows(), self.cols(), |r, c| self.entries[r][c])
    }

    /// Singular values of the entry matrix, descending.
    pub fn singular_values(&self) -> Vec<f64> {
        let sv = self.to_dmatrix().svd(false, false).singular_values;
        let mut v: Vec<f64> = sv.iter().copied().collect();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }
}

/// Evaluate the exact logit matrix of an ISAN on explicit history and future
/// lists. Every pair must leave room for one more token: |h| + |f| <= T - 1.
pub fn build_logit_matrix(
    m: &IsanModel,
    histories: &[Seq],
    futures: &[Seq],
) -> Result<LogitMatrix, EvalError> {
    if histories.is_empty() || futures.is_empty() {
        return Err(EvalError::Param("need at least one history and one future".into()));
    }
    let max_h = histories.iter().map(Seq::len).max().unwrap_or(0);
    let max_f = futures.iter().map(Seq::len).max().unwrap_or(0);
    if max_h + max_f > m.horizon - 1 {
        return Err(EvalError::Param(format!(
            "|h| + |f| up to {} exceeds T - 1 = {}",
            max_h + max_f,
            m.horizon - 1
        )));
    }
    for s in histories.iter().chain(futures) {
        if s.tokens().iter().any(|&y| y as usize >= m.sigma) {
            return Err(EvalError::Param(format!("token out of range in {s:?}")));
        }
    }
    let mut entries = Vec::with_capacity(histories.len());
    for h in histories {
        let mut row = Vec::with_capacity(futures.len() * m.sigma);
        for f in futures {
            let logits = mean_center(&m.log_probs(&h.concat(f))?);
            row.extend_from_slice(&logits);
        }
        entries.push(row);
    }
    Ok(LogitMatrix {
        histories: histories.to_vec(),
        futures: futures.to_vec(),
        sigma: m.sigma,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankFit {
    pub rank: usize,
    pub frobenius_error: f64,
    pub avg_l1_error: f64,
}

/// Low-rank approximation error curve for one matrix. `source` records how
/// the rows/columns were chosen; `seed` is set for sampled matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankProfile {
    pub fits: Vec<RankFit>,
    pub rows: usize,
    pub cols: usize,
    pub source: String,
    pub seed: Option<u64>,
}

/// Frobenius-optimal rank-d fits at each requested rank (ascending), with
/// Frobenius and average entrywise L1 errors. Ranks above min(rows, cols)
/// are clipped with a warning.
pub fn rank_profile(mat: &LogitMatrix, ranks: &[usize]) -> Result<RankProfile, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Param("empty rank list".into()));
    }
    if ranks.windows(2).any(|w| w[0] > w[1]) {
        return Err(EvalError::Param("ranks must be sorted ascending".into()));
    }
    let a = mat.to_dmatrix();
    let (nr, nc) = (a.nrows(), a.ncols());
    let maxrank = nr.min(nc);
    let denom = (nr * nc) as f64;
    let mut fits = Vec::with_capacity(ranks.len());
    for &r in ranks {
        let eff = if r > maxrank {
            log::warn!("rank {r} clipped to min dimension {maxrank}");
            maxrank
        } else {
            r
        };
        let fit = best_rank_fit(&a, eff);
        let diff = &a - &fit;
        let frob = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
        let l1 = diff.iter().map(|x| x.abs()).sum::<f64>() / denom;
        fits.push(RankFit {
            rank: r,
            frobenius_error: frob,
            avg_l1_error: l1,
        });
    }
    for w in fits.windows(2) {
        debug_assert!(
            w[1].frobenius_error <= w[0].frobenius_error + 1e-9 * (1.0 + w[0].frobenius_error),
            "frobenius error must be nonincreasing in rank"
        );
    }
    Ok(RankProfile {
        fits,
        rows: nr,
        cols: nc,
        source: "explicit".into(),
        seed: None,
    })
}

/// CSV rows (rank, frobenius_error, avg_l1_error, rows, cols, seed), ready
/// for a log-log error-vs-rank plot.
pub fn write_rank_profile_csv<W: std::io::Write>(
    p: &RankProfile,
    w: &mut W,
) -> std::io::Result<()> {
    writeln!(w, "rank,frobenius_error,avg_l1_error,rows,cols,seed")?;
    let seed = p.seed.map(|s| s.to_string()).unwrap_or_default();
    for f in &p.fits {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            f.rank,
            csv_f64(f.frobenius_error),
            csv_f64(f.avg_l1_error),
            p.rows,
            p.cols,
            seed
        )?;
    }
    Ok(())
}

/// Sampled average-closeness estimate at a split (s, t): histories are
/// y_{1:s-1} ~ M with a uniform final token, futures are y_{s+1:t-1} ~ M,
/// and the column token is uniform. Fits rank d and returns the average
/// entrywise L1 deviation — an estimate of the per-split approximation
/// error under the model's own weighting.
#[allow(clippy::too_many_arguments)]
pub fn estimate_eps_avg(
    m: &IsanModel,
    d: usize,
    s: usize,
    t: usize,
    n_rows: usize,
    n_cols: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    if t <= s {
        return Err(EvalError::Param(format!("need t > s, got s={s}, t={t}")));
    }
    if t > m.horizon {
        return Err(EvalError::Param(format!(
            "t = {t} exceeds horizon {}",
            m.horizon
        )));
    }
    if n_rows == 0 || n_cols == 0 {
        return Err(EvalError::Param("need n_rows, n_cols >= 1".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut histories = Vec::with_capacity(n_rows);
    if s == 0 {
        histories.push(Seq::empty());
    } else {
        for _ in 0..n_rows {
            let traj = m.sample(&mut rng)?;
            let h = traj
                .prefix(s - 1)
                .push_token(rng.random_range(0..m.sigma as Token));
            histories.push(h);
        }
    }
    let mut futures = Vec::with_capacity(n_cols);
    if t == s + 1 {
        futures.push(Seq::empty());
    } else {
        for _ in 0..n_cols {
            let traj = m.sample(&mut rng)?;
            futures.push(Seq(traj.tokens()[s..t - 1].to_vec()));
        }
    }
    let mat = build_logit_matrix(m, &histories, &futures)?;
    let a = mat.to_dmatrix();
    let fit = best_rank_fit(&a, d);
    let denom = (a.nrows() * a.ncols()) as f64;
    Ok((&a - &fit).iter().map(|x| x.abs()).sum::<f64>() / denom)
}

/// Max of [`estimate_eps_avg`] over several end splits t at a fixed s.
pub fn estimate_eps_avg_max(
    m: &IsanModel,
    d: usize,
    s: usize,
    ts: &[usize],
    n_rows: usize,
    n_cols: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    if ts.is_empty() {
        return Err(EvalError::Param("need at least one end split".into()));
    }
    let mut worst = 0.0f64;
    for (k, &t) in ts.iter().enumerate() {
        let e = estimate_eps_avg(m, d, s, t, n_rows, n_cols, seed.wrapping_add(k as u64))?;
        worst = worst.max(e);
    }
    Ok(worst)
}
