//! The epoch-loop learner: maintain per-step tested-future sets, build
//! spanners of sampled logit rows, solve the per-prefix feasibility programs,
//! scan for discrepancies, and extract a learned model.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::lp::{build_feasibility, solve_feasibility, FeasOutcome, LPSolution};
use crate::oracle::{LogitBackend, Oracle};
use crate::prob::{Seq, Token};
use crate::spanner::{dist_spanner, verify_spanner, DistSpannerParams, VectorSampler};

#[derive(Debug, thiserror::Error)]
pub enum LearnerError {
    #[error("learner parameter error: {0}")]
    Param(String),
    #[error("learner internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Oracle(#[from] crate::oracle::OracleError),
    #[error(transparent)]
    Spanner(#[from] crate::spanner::SpannerError),
    #[error(transparent)]
    Model(#[from] crate::isan::IsanError),
    #[error(transparent)]
    Lp(#[from] crate::lp::LpError),
}

/// Per-step future sets. `hat[t-1]` is the tested set F̂_t of futures for
/// step t; `tilde[t-1]` is the working set F̃_t = F̂_t ∪ (Σ ∘ F̂_{t+1}) over
/// which spanner rows are measured; `dstar` is the common spanner size,
/// the largest |F̃_t|.
///
/// Every future in F̂_t fits in the remaining horizon: its length is at most
/// T − t + 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FutureSets {
    pub horizon: usize,
    pub sigma: usize,
    pub hat: Vec<Vec<Seq>>,
    pub tilde: Vec<Vec<Seq>>,
    pub dstar: usize,
}

impl FutureSets {
    /// Seed every F̂_t with all single tokens. The final extraction and the
    /// sampler's next-token reads require Σ ⊆ F̂_t throughout.
    pub fn seeded(horizon: usize, sigma: usize) -> Result<FutureSets, LearnerError> {
        if horizon == 0 || sigma < 2 {
            return Err(LearnerError::Param(format!(
                "need horizon >= 1 and sigma >= 2, got T={horizon}, sigma={sigma}"
            )));
        }
        let singles: Vec<Seq> = (0..sigma as Token).map(|y| Seq(vec![y])).collect();
        let mut fs = FutureSets {
            horizon,
            sigma,
            hat: vec![singles; horizon],
            tilde: vec![Vec::new(); horizon],
            dstar: 0,
        };
        fs.rebuild_tilde();
        Ok(fs)
    }

    /// Recompute every F̃_t and d* from the current F̂ sets. Order is
    /// deterministic: F̂_t first, then Σ ∘ F̂_{t+1} grouped by token, with
    /// duplicates dropped on first occurrence.
    pub fn rebuild_tilde(&mut self) {
        let t_max = self.horizon;
        for t in 1..=t_max {
            let mut seen = std::collections::BTreeSet::new();
            let mut out = Vec::new();
            for f in &self.hat[t - 1] {
                if seen.insert(f.clone()) {
                    out.push(f.clone());
                }
            }
            if t < t_max {
                for y in 0..self.sigma as Token {
                    for f in &self.hat[t] {
                        let g = Seq(vec![y]).concat(f);
                        if seen.insert(g.clone()) {
                            out.push(g);
                        }
                    }
                }
            }
            self.tilde[t - 1] = out;
        }
        self.dstar = self.tilde.iter().map(Vec::len).max().unwrap_or(0);
    }

    /// Add one future to F̂_s (1-based step), ignoring exact duplicates.
    /// Returns whether the set grew. Callers must `rebuild_tilde` before the
    /// next epoch.
    pub fn add_future(&mut self, s: usize, f: Seq) -> Result<bool, LearnerError> {
        if s == 0 || s > self.horizon {
            return Err(LearnerError::Param(format!(
                "step {s} outside [1, {}]",
                self.horizon
            )));
        }
        if f.is_empty() || f.len() > self.horizon - s + 1 {
            return Err(LearnerError::Param(format!(
                "future of length {} invalid at step {s} with horizon {}",
                f.len(),
                self.horizon
            )));
        }
        if f.tokens().iter().any(|&y| y as usize >= self.sigma) {
            return Err(LearnerError::Param("future token out of range".into()));
        }
        if self.hat[s - 1].contains(&f) {
            return Ok(false);
        }
        self.hat[s - 1].push(f);
        Ok(true)
    }

    /// Index of future `f` within F̃_t, if present.
    pub fn tilde_index(&self, t: usize, f: &Seq) -> Option<usize> {
        self.tilde
            .get(t - 1)
            .and_then(|v| v.iter().position(|g| g == f))
    }

    /// Index of future `f` within F̂_t, if present.
    pub fn hat_index(&self, t: usize, f: &Seq) -> Option<usize> {
        self.hat
            .get(t - 1)
            .and_then(|v| v.iter().position(|g| g == f))
    }
}

/// Per-step spanner rows for one epoch: `histories[t-1][i]` is the sampled
/// history h_{t,i} and `vectors[t-1][i][j]` is the mean-centered read
/// L_{t,i}(f_j) over f_j ∈ F̃_t. Every step is padded with duplicates to the
/// common size d*. Step 1 has no history to sample: all its rows are the
/// empty-history row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpannerBank {
    pub histories: Vec<Vec<Seq>>,
    pub vectors: Vec<Vec<Vec<f64>>>,
}

impl SpannerBank {
    /// The spanner row L_{t,i} over F̃_t.
    pub fn row(&self, t: usize, i: usize) -> Option<&[f64]> {
        self.vectors
            .get(t - 1)
            .and_then(|rows| rows.get(i))
            .map(Vec::as_slice)
    }

    pub fn history(&self, t: usize, i: usize) -> Option<&Seq> {
        self.histories.get(t - 1).and_then(|hs| hs.get(i))
    }

    pub fn dstar(&self) -> usize {
        self.vectors.first().map(Vec::len).unwrap_or(0)
    }
}

/// Tunable constants in the parameter schedule. The defaults are small
/// stand-ins for the asymptotic constants; desk-scale runs tune them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub c_k: f64,
    pub c_n: f64,
    pub c_ell: f64,
    /// Use the concentration-lemma form `n = C_n ln(TK/δ) Kβα/γ_thres`
    /// instead of the schedule form `n = C_n ln(TK/δ)/γ_thres`.
    pub n_lemma_form: bool,
}

impl Default for TheoryConstants {
    fn default() -> Self {
        TheoryConstants {
            c_k: 2.0,
            c_n: 2.0,
            c_ell: 4.0,
            n_lemma_form: false,
        }
    }
}

/// Full parameter set for one learning run. Derived fields follow
/// [`default_params`] unless overridden; `beta` is fixed at 2.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub d: usize,
    pub alpha: f64,
    pub eps: f64,
    pub delta: f64,
    pub eps_apx: f64,
    pub beta: f64,
    pub gamma: f64,
    pub gamma_thres: f64,
    pub k_epochs: usize,
    pub n_samples: usize,
    pub eta: f64,
    pub constants: TheoryConstants,
    pub c_m: f64,
    pub m_max: usize,
    pub tau_feas: f64,
    pub seed: u64,
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if self.d == 0 || self.k_epochs == 0 || self.n_samples == 0 {
            return Err(LearnerError::Param(
                "d, epoch budget, and sample count must be positive".into(),
            ));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("eps", self.eps),
            ("delta", self.delta),
            ("eps_apx", self.eps_apx),
            ("gamma", self.gamma),
            ("gamma_thres", self.gamma_thres),
            ("eta", self.eta),
            ("c_m", self.c_m),
            ("tau_feas", self.tau_feas),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(LearnerError::Param(format!("{name} must be positive: {v}")));
            }
        }
        if self.beta != 2.0 {
            return Err(LearnerError::Param(format!(
                "beta is fixed at 2, got {}",
                self.beta
            )));
        }
        if self.delta >= 1.0 || self.eta >= 1.0 {
            return Err(LearnerError::Param(
                "delta and eta must lie in (0,1)".into(),
            ));
        }
        Ok(())
    }
}

/// Parameter schedule with explicit constants:
/// K = ceil(C_K T d ln(βdαT/(ε_apx δ))), γ = 4Kε_apx,
/// γ_thres = γ √(C_ell d ln(2βKα²/γ)), n = ceil(C_n ln(TK/δ)/γ_thres),
/// η = ε/(3T²n). Warns (does not fail) when ε is below the guarantee
/// threshold ε_apx K T² √(d ln(Kα/ε_apx)).
pub fn default_params_with(
    t_horizon: usize,
    sigma: usize,
    d: usize,
    alpha: f64,
    eps: f64,
    delta: f64,
    eps_apx: f64,
    constants: &TheoryConstants,
) -> Result<LearnerConfig, LearnerError> {
    if t_horizon == 0 || sigma < 2 || d == 0 {
        return Err(LearnerError::Param(format!(
            "need T >= 1, sigma >= 2, d >= 1; got T={t_horizon}, sigma={sigma}, d={d}"
        )));
    }
    for (name, v) in [
        ("alpha", alpha),
        ("eps", eps),
        ("delta", delta),
        ("eps_apx", eps_apx),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(LearnerError::Param(format!("{name} must be positive: {v}")));
        }
    }
    if delta >= 1.0 {
        return Err(LearnerError::Param(format!(
            "delta must lie in (0,1): {delta}"
        )));
    }
    let beta = 2.0;
    let tf = t_horizon as f64;
    let df = d as f64;
    let k_arg = beta * df * alpha * tf / (eps_apx * delta);
    if k_arg <= 1.0 {
        return Err(LearnerError::Param(format!(
            "degenerate schedule: βdαT/(ε_apx δ) = {k_arg} <= 1"
        )));
    }
    let k_epochs = (constants.c_k * tf * df * k_arg.ln()).ceil().max(1.0) as usize;
    let kf = k_epochs as f64;
    let gamma = 4.0 * kf * eps_apx;
    let g_arg = 2.0 * beta * kf * alpha * alpha / gamma;
    if g_arg <= 1.0 {
        return Err(LearnerError::Param(format!(
            "degenerate schedule: 2βKα²/γ = {g_arg} <= 1"
        )));
    }
    let gamma_thres = gamma * (constants.c_ell * df * g_arg.ln()).sqrt();
    let n_base = constants.c_n * (tf * kf / delta).ln();
    let n_raw = if constants.n_lemma_form {
        n_base * kf * beta * alpha / gamma_thres
    } else {
        n_base / gamma_thres
    };
    let n_samples = n_raw.ceil().max(1.0) as usize;
    let eta = eps / (3.0 * tf * tf * n_samples as f64);
    let guarantee_floor = eps_apx * kf * tf * tf * (df * (kf * alpha / eps_apx).ln()).sqrt();
    if eps < guarantee_floor {
        log::warn!(
            "target eps {eps} is below the guarantee threshold {guarantee_floor:.3e}; \
             the run is still well-defined but the error bound does not apply"
        );
    }
    let config = LearnerConfig {
        d,
        alpha,
        eps,
        delta,
        eps_apx,
        beta,
        gamma,
        gamma_thres,
        k_epochs,
        n_samples,
        eta,
        constants: constants.clone(),
        c_m: 1.0,
        m_max: 2000,
        tau_feas: 1e-8,
        seed: 0,
    };
    config.validate()?;
    Ok(config)
}

pub fn default_params(
    t_horizon: usize,
    sigma: usize,
    d: usize,
    alpha: f64,
    eps: f64,
    delta: f64,
    eps_apx: f64,
) -> Result<LearnerConfig, LearnerError> {
    default_params_with(
        t_horizon,
        sigma,
        d,
        alpha,
        eps,
        delta,
        eps_apx,
        &TheoryConstants::default(),
    )
}

/// Cap on per-step future additions over a whole run,
/// ceil(C_ell d ln(βdαK/γ)): the elliptic-potential count.
pub fn addition_bound(config: &LearnerConfig) -> usize {
    let arg = config.beta * config.d as f64 * config.alpha * config.k_epochs as f64 / config.gamma;
    (config.constants.c_ell * config.d as f64 * arg.ln().max(1.0)).ceil() as usize
}

/// Query budget shape c (K⁴T|Σ|ln(1/δ)/η² + nT³K²|Σ|); measured query
/// counts are compared against this.
pub fn query_budget_bound(config: &LearnerConfig, t_horizon: usize, sigma: usize, c: f64) -> f64 {
    let k = config.k_epochs as f64;
    let t = t_horizon as f64;
    let s = sigma as f64;
    c * (k.powi(4) * t * s * (1.0 / config.delta).ln() / (config.eta * config.eta)
        + config.n_samples as f64 * t.powi(3) * k * k * s)
}

/// Draws whole trajectories from the target model. The learner needs both
/// this and a logit oracle addressing the same model.
pub trait ModelSampler {
    fn horizon(&self) -> usize;
    fn sample_trajectory(&self, rng: &mut dyn rand::RngCore) -> Result<Seq, LearnerError>;
}

impl ModelSampler for crate::isan::IsanModel {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn sample_trajectory(&self, mut rng: &mut dyn rand::RngCore) -> Result<Seq, LearnerError> {
        Ok(self.sample(&mut rng)?)
    }
}

/// Spanner-input sampler for step t: draw a history y_{1:t-1} from the model
/// and read the mean-centered row over F̃_t at that history.
struct PrefixRowSampler<'a, B: LogitBackend, S: ModelSampler + ?Sized> {
    oracle: &'a mut Oracle<B>,
    model: &'a S,
    rng: &'a mut ChaCha20Rng,
    t: usize,
    tilde: &'a [Seq],
}

impl<B: LogitBackend, S: ModelSampler + ?Sized> VectorSampler for PrefixRowSampler<'_, B, S> {
    fn dim(&self) -> usize {
        self.tilde.len()
    }

    fn draw(&mut self) -> Result<(Seq, Vec<f64>), crate::spanner::SpannerError> {
        let wrap = |e: LearnerError| crate::spanner::SpannerError::Sampler(e.to_string());
        let traj = self.model.sample_trajectory(self.rng).map_err(wrap)?;
        if traj.len() < self.t - 1 {
            return Err(crate::spanner::SpannerError::Sampler(format!(
                "sampled trajectory has length {}, need at least {}",
                traj.len(),
                self.t - 1
            )));
        }
        let h = traj.prefix(self.t - 1);
        let mut row = Vec::with_capacity(self.tilde.len());
        for f in self.tilde {
            let v = self
                .oracle
                .l_apx(&h.concat(f))
                .map_err(|e| wrap(LearnerError::Oracle(e)))?;
            row.push(v);
        }
        Ok((h, row))
    }
}

/// One discrepancy-test hit: the extended row and the solved row disagree by
/// more than γ_thres on `future` at step `s`. The remaining fields locate the
/// scan point that fired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub s: usize,
    pub future: Seq,
    pub u: usize,
    pub r: usize,
    pub token: Token,
    pub gap: f64,
}

/// Scan |L̂_{t,s,u}(y_{s:r-1,u} ∘ y') − Σ_i c_{t,s,u,i} L_{s,i}(y_{s:r-1,u} ∘ y')|
/// over ascending u, then s ∈ [1..t], then r ∈ [s..t+1], then y' ∈ Σ, and
/// report the first gap above γ_thres. The extension uses the previous step:
/// L̂_{t,s,u}(f) = Σ_i c_{t,s-1,u,i} L_{s-1,i}(y_{s-1,u} ∘ f), with
/// L̂_{t,1,u}(f) = L_apx(f). s = t+1 has no solved coefficient block and is
/// skipped; at s = 1 both sides are L_apx(f) and the gap is identically zero,
/// kept for scan-order fidelity.
#[allow(clippy::too_many_arguments)]
pub fn discrepancy_test<B: LogitBackend>(
    oracle: &mut Oracle<B>,
    bank: &SpannerBank,
    trajectories: &[Seq],
    solutions: &[LPSolution],
    t: usize,
    sigma: usize,
    gamma_thres: f64,
) -> Result<Option<Violation>, LearnerError> {
    if t == 0 {
        return Err(LearnerError::Param("discrepancy step must be >= 1".into()));
    }
    if !(gamma_thres > 0.0) {
        return Err(LearnerError::Param(format!(
            "gamma_thres must be positive: {gamma_thres}"
        )));
    }
    if solutions.len() > trajectories.len() {
        return Err(LearnerError::Param(format!(
            "{} solutions but only {} trajectories",
            solutions.len(),
            trajectories.len()
        )));
    }
    let dstar = bank.dstar();
    if bank.vectors.len() < t || dstar == 0 {
        return Err(LearnerError::Param(format!(
            "spanner bank covers {} steps with d*={dstar}, need step {t}",
            bank.vectors.len()
        )));
    }
    for (u, traj) in trajectories.iter().enumerate().take(solutions.len()) {
        if traj.len() < t + 1 {
            return Err(LearnerError::Param(format!(
                "trajectory {u} has length {}, need at least {}",
                traj.len(),
                t + 1
            )));
        }
        if solutions[u].c.len() != t || solutions[u].c.iter().any(|b| b.len() != dstar) {
            return Err(LearnerError::Param(format!(
                "solution {u} does not have {t} coefficient blocks of size {dstar}"
            )));
        }
    }
    for (u, sol) in solutions.iter().enumerate() {
        let y = trajectories[u].tokens();
        for s in 1..=t {
            for r in s..=t + 1 {
                // y_{s:r-1,u} is empty when r = s
                let mid = &y[s - 1..r - 1];
                for yp in 0..sigma as Token {
                    let f = Seq::empty().concat_slice_token(mid, yp);
                    let lhs = if s == 1 {
                        oracle.l_apx(&f)?
                    } else {
                        let mut acc = 0.0;
                        for i in 0..dstar {
                            let h = bank.history(s - 1, i).ok_or_else(|| {
                                LearnerError::Internal(format!("missing history ({},{i})", s - 1))
                            })?;
                            let g = h.concat_slice_token(&y[s - 2..r - 1], yp);
                            acc += sol.c[s - 2][i] * oracle.l_apx(&g)?;
                        }
                        acc
                    };
                    let mut rhs = 0.0;
                    for i in 0..dstar {
                        let h = bank.history(s, i).ok_or_else(|| {
                            LearnerError::Internal(format!("missing history ({s},{i})"))
                        })?;
                        let g = h.concat_slice_token(mid, yp);
                        rhs += sol.c[s - 1][i] * oracle.l_apx(&g)?;
                    }
                    let gap = (lhs - rhs).abs();
                    if gap > gamma_thres {
                        return Ok(Some(Violation {
                            s,
                            future: f,
                            u,
                            r,
                            token: yp,
                            gap,
                        }));
                    }
                }
            }
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpochEvent {
    Infeasible,
    Violation,
    Pass,
}

impl std::fmt::Display for EpochEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EpochEvent::Infeasible => write!(f, "infeasible"),
            EpochEvent::Violation => write!(f, "violation"),
            EpochEvent::Pass => write!(f, "pass"),
        }
    }
}

/// One run-log row: how epoch `epoch` ended.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step_reached: usize,
    pub event: EpochEvent,
    pub violated_step: Option<usize>,
    pub added_future: Option<Seq>,
    pub dstar: usize,
    pub queries_cum: usize,
}

/// Write the run log as CSV with a fixed header.
pub fn write_run_log_csv<W: std::io::Write>(
    records: &[EpochRecord],
    w: &mut W,
) -> std::io::Result<()> {
    writeln!(
        w,
        "epoch,step_reached,event,violated_step,added_future,dstar,queries_cum"
    )?;
    for r in records {
        let vs = r.violated_step.map(|s| s.to_string()).unwrap_or_default();
        let af = r
            .added_future
            .as_ref()
            .map(Seq::to_space_string)
            .unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.epoch, r.step_reached, r.event, vs, af, r.dstar, r.queries_cum
        )?;
    }
    Ok(())
}

/// Aggregate run diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnStats {
    pub epochs_used: usize,
    pub queries: usize,
    pub dstar_final: usize,
    pub additions_per_step: Vec<usize>,
    pub infeasible_epochs: usize,
    pub violation_epochs: usize,
    pub returned: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LearnMeta {
    pub seed: u64,
    pub epochs: usize,
    pub queries: usize,
}

/// Everything the sampler needs to generate from the learned model: the
/// final future sets, the per-step spanner rows over F̃_t, the spanner
/// histories, and the single-token values L_{t,i}(y).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LearnedModel {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub sigma: usize,
    pub dstar: usize,
    pub beta: f64,
    pub tau_feas: f64,
    pub futures_hat: Vec<Vec<Seq>>,
    pub futures_tilde: Vec<Vec<Seq>>,
    /// spanner[t-1][i][j] = L_{t,i}(f_j) over f_j ∈ futures_tilde[t-1].
    pub spanner: Vec<Vec<Vec<f64>>>,
    /// single_token[t-1][i][y] = L_{t,i}(y) for y ∈ Σ.
    pub single_token: Vec<Vec<Vec<f64>>>,
    pub meta: LearnMeta,
}

impl LearnedModel {
    pub fn to_json(&self) -> Result<String, LearnerError> {
        serde_json::to_string_pretty(self)
            .map_err(|e| LearnerError::Internal(format!("serialize: {e}")))
    }

    pub fn from_json(s: &str) -> Result<LearnedModel, LearnerError> {
        serde_json::from_str(s).map_err(|e| LearnerError::Param(format!("parse: {e}")))
    }

    /// Reassemble the future-set view used by the LP builder.
    pub fn future_sets(&self) -> FutureSets {
        FutureSets {
            horizon: self.horizon,
            sigma: self.sigma,
            hat: self.futures_hat.clone(),
            tilde: self.futures_tilde.clone(),
            dstar: self.dstar,
        }
    }

    /// Spanner-row view for the LP builder. Histories are not serialized;
    /// generation never needs them.
    pub fn spanner_bank(&self) -> SpannerBank {
        SpannerBank {
            histories: vec![Vec::new(); self.horizon],
            vectors: self.spanner.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum LearnOutcome {
    Learned(Box<LearnedModel>),
    BudgetExhausted,
}

impl LearnOutcome {
    pub fn learned(&self) -> Option<&LearnedModel> {
        match self {
            LearnOutcome::Learned(m) => Some(m),
            LearnOutcome::BudgetExhausted => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LearnReport {
    pub outcome: LearnOutcome,
    pub stats: LearnStats,
    pub log: Vec<EpochRecord>,
}

/// The epoch loop. Per epoch: rebuild F̃ and d*, build one spanner per step
/// (step 1 is the empty-history row repeated), draw n trajectories, solve the
/// per-prefix feasibility program for every t ∈ [1..T-1] and sample, and scan
/// for discrepancies. Infeasibility or a violation ends the epoch (a
/// violation adds one future); a full pass stores the single-token values and
/// returns the learned model. Exhausting the epoch budget is a normal
/// outcome, reported with diagnostics.
pub fn learn<B: LogitBackend, S: ModelSampler>(
    oracle: &mut Oracle<B>,
    sampler: &S,
    config: &LearnerConfig,
) -> Result<LearnReport, LearnerError> {
    config.validate()?;
    let t_hor = oracle.horizon();
    let sigma = oracle.sigma();
    if sampler.horizon() != t_hor {
        return Err(LearnerError::Param(format!(
            "sampler horizon {} does not match oracle horizon {t_hor}",
            sampler.horizon()
        )));
    }
    let q0 = oracle.query_count();
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut fs = FutureSets::seeded(t_hor, sigma)?;
    let mut log: Vec<EpochRecord> = Vec::new();
    let mut additions = vec![0usize; t_hor];
    let mut infeasible_epochs = 0usize;
    let mut violation_epochs = 0usize;
    let sp_params = DistSpannerParams {
        c_m: config.c_m,
        m_max: config.m_max,
    };
    let sp_delta = config.delta / (10.0 * config.k_epochs as f64 * t_hor as f64);

    for epoch in 1..=config.k_epochs {
        fs.rebuild_tilde();
        let dstar = fs.dstar;
        // growth cap: |F̂_t| <= σ + K, so |F̃_t| <= (σ+K)(1+σ)
        assert!(
            dstar <= (sigma + config.k_epochs) * (1 + sigma),
            "d* {dstar} exceeded its growth cap"
        );

        let mut histories: Vec<Vec<Seq>> = Vec::with_capacity(t_hor);
        let mut vectors: Vec<Vec<Vec<f64>>> = Vec::with_capacity(t_hor);
        let mut row1 = Vec::with_capacity(fs.tilde[0].len());
        for f in &fs.tilde[0] {
            row1.push(oracle.l_apx(f)?);
        }
        histories.push(vec![Seq::empty(); dstar]);
        vectors.push(vec![row1; dstar]);
        for t in 2..=t_hor {
            let tilde = &fs.tilde[t - 1];
            let mut vs = PrefixRowSampler {
                oracle,
                model: sampler,
                rng: &mut rng,
                t,
                tilde,
            };
            let (sp, batch) = dist_spanner(&mut vs, tilde.len(), config.eta, sp_delta, &sp_params)?;
            let check = verify_spanner(&batch.rows, &sp, config.beta);
            assert!(check.ok, "spanner at step {t} failed re-verification");
            if sp.effective_rank == 0 {
                // every sampled row was zero: the zero row spans the batch
                histories.push(vec![batch.histories[0].clone(); dstar]);
                vectors.push(vec![vec![0.0; tilde.len()]; dstar]);
            } else {
                let (hs, rows) = sp.padded(dstar)?;
                histories.push(hs);
                vectors.push(rows);
            }
        }
        let bank = SpannerBank { histories, vectors };

        let mut trajectories = Vec::with_capacity(config.n_samples);
        for _ in 0..config.n_samples {
            let traj = sampler.sample_trajectory(&mut rng)?;
            if traj.len() != t_hor {
                return Err(LearnerError::Param(format!(
                    "sampled trajectory has length {}, want {t_hor}",
                    traj.len()
                )));
            }
            trajectories.push(traj);
        }

        let mut ended: Option<EpochRecord> = None;
        'steps: for t in 1..t_hor {
            let mut solutions = Vec::with_capacity(config.n_samples);
            for traj in &trajectories {
                let prefix = traj.prefix(t);
                let problem = build_feasibility(&bank, &fs, &prefix, config.beta)?;
                match solve_feasibility(&problem, config.tau_feas)? {
                    FeasOutcome::Feasible(sol) => solutions.push(sol),
                    FeasOutcome::Infeasible => {
                        infeasible_epochs += 1;
                        ended = Some(EpochRecord {
                            epoch,
                            step_reached: t,
                            event: EpochEvent::Infeasible,
                            violated_step: None,
                            added_future: None,
                            dstar,
                            queries_cum: oracle.query_count() - q0,
                        });
                        break 'steps;
                    }
                }
            }
            if let Some(v) = discrepancy_test(
                oracle,
                &bank,
                &trajectories,
                &solutions,
                t,
                sigma,
                config.gamma_thres,
            )? {
                if !fs.add_future(v.s, v.future.clone())? {
                    return Err(LearnerError::Internal(format!(
                        "violating future {:?} at step {} was already tracked",
                        v.future, v.s
                    )));
                }
                additions[v.s - 1] += 1;
                violation_epochs += 1;
                ended = Some(EpochRecord {
                    epoch,
                    step_reached: t,
                    event: EpochEvent::Violation,
                    violated_step: Some(v.s),
                    added_future: Some(v.future),
                    dstar,
                    queries_cum: oracle.query_count() - q0,
                });
                break 'steps;
            }
        }

        match ended {
            Some(rec) => log.push(rec),
            None => {
                // full pass: store L_{t,i}(y) for every t, i, y and return
                let mut single = vec![vec![vec![0.0; sigma]; dstar]; t_hor];
                for t in 1..=t_hor {
                    for i in 0..dstar {
                        let h = bank.history(t, i).ok_or_else(|| {
                            LearnerError::Internal(format!("missing history ({t},{i})"))
                        })?;
                        for y in 0..sigma as Token {
                            single[t - 1][i][y as usize] = oracle.l_apx(&h.push_token(y))?;
                        }
                    }
                }
                let queries = oracle.query_count() - q0;
                log.push(EpochRecord {
                    epoch,
                    step_reached: t_hor.saturating_sub(1),
                    event: EpochEvent::Pass,
                    violated_step: None,
                    added_future: None,
                    dstar,
                    queries_cum: queries,
                });
                let model = LearnedModel {
                    horizon: t_hor,
                    sigma,
                    dstar,
                    beta: config.beta,
                    tau_feas: config.tau_feas,
                    futures_hat: fs.hat.clone(),
                    futures_tilde: fs.tilde.clone(),
                    spanner: bank.vectors.clone(),
                    single_token: single,
                    meta: LearnMeta {
                        seed: config.seed,
                        epochs: epoch,
                        queries,
                    },
                };
                let stats = LearnStats {
                    epochs_used: epoch,
                    queries,
                    dstar_final: dstar,
                    additions_per_step: additions,
                    infeasible_epochs,
                    violation_epochs,
                    returned: true,
                };
                return Ok(LearnReport {
                    outcome: LearnOutcome::Learned(Box::new(model)),
                    stats,
                    log,
                });
            }
        }
    }

    let stats = LearnStats {
        epochs_used: config.k_epochs,
        queries: oracle.query_count() - q0,
        dstar_final: fs.dstar,
        additions_per_step: additions,
        infeasible_epochs,
        violation_epochs,
        returned: false,
    };
    Ok(LearnReport {
        outcome: LearnOutcome::BudgetExhausted,
        stats,
        log,
    })
}

#[cfg(test)]
mod future_set_tests {
    use super::*;

    #[test]
    fn seeding_includes_every_single_token() {
        let fs = FutureSets::seeded(4, 3).unwrap();
        for t in 1..=4 {
            for y in 0..3u8 {
                assert!(fs.hat_index(t, &Seq(vec![y])).is_some(), "t={t} y={y}");
            }
        }
        // F̃_t for t < T holds Σ and Σ∘Σ; duplicates collapse
        assert_eq!(fs.tilde[0].len(), 3 + 9);
        assert_eq!(fs.tilde[3].len(), 3);
        assert_eq!(fs.dstar, 12);
    }

    #[test]
    fn tilde_matches_definition_after_growth() {
        let mut fs = FutureSets::seeded(4, 2).unwrap();
        assert!(fs.add_future(2, Seq(vec![0, 1])).unwrap());
        assert!(!fs.add_future(2, Seq(vec![0, 1])).unwrap());
        fs.rebuild_tilde();
        // F̃_1 = F̂_1 ∪ (Σ ∘ F̂_2)
        for f in &fs.hat[0] {
            assert!(fs.tilde_index(1, f).is_some());
        }
        for y in 0..2u8 {
            for f in &fs.hat[1] {
                let g = Seq(vec![y]).concat(f);
                assert!(fs.tilde_index(1, &g).is_some(), "missing {g:?}");
            }
        }
        assert_eq!(fs.tilde[0].len(), 2 + 2 * 3);
        assert_eq!(fs.dstar, 8);
    }

    #[test]
    fn add_future_rejects_bad_inputs() {
        let mut fs = FutureSets::seeded(3, 2).unwrap();
        assert!(fs.add_future(0, Seq(vec![0])).is_err());
        assert!(fs.add_future(4, Seq(vec![0])).is_err());
        assert!(fs.add_future(3, Seq(vec![0, 1])).is_err()); // beyond horizon
        assert!(fs.add_future(1, Seq(vec![])).is_err());
        assert!(fs.add_future(1, Seq(vec![5])).is_err());
        assert!(fs.add_future(1, Seq(vec![0, 1, 0])).unwrap());
    }
}

#[cfg(test)]
mod learner_tests {
    use super::*;
    use crate::isan::IsanModel;
    use crate::oracle::{ExactIsan, NoiseMode, NoiseSpec, NoisyBackend, Oracle};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn exact_oracle(model: &IsanModel) -> Oracle<ExactIsan> {
        Oracle::new(ExactIsan::new(model.clone()))
    }

    // schedule values with desk-size batch overrides
    fn desk_config(t: usize, sigma: usize, d: usize) -> LearnerConfig {
        let mut c = default_params(t, sigma, d, 5.0, 0.1, 0.1, 1e-6).unwrap();
        c.n_samples = 12;
        c.eta = 0.05;
        c.m_max = 150;
        c.k_epochs = c.k_epochs.min(6);
        c
    }

    #[test]
    fn schedule_formulas_match() {
        let (t, sigma, d) = (4usize, 3usize, 2usize);
        let (alpha, eps, delta, eps_apx) = (5.0, 0.1, 0.1, 1e-3);
        let c = default_params(t, sigma, d, alpha, eps, delta, eps_apx).unwrap();
        assert_eq!(c.beta, 2.0);
        let tf = t as f64;
        let df = d as f64;
        let k = (2.0 * tf * df * (2.0 * df * alpha * tf / (eps_apx * delta)).ln()).ceil() as usize;
        assert_eq!(c.k_epochs, k);
        let kf = k as f64;
        assert_eq!(c.gamma, 4.0 * kf * eps_apx);
        let gt = c.gamma * (4.0 * df * (2.0 * 2.0 * kf * alpha * alpha / c.gamma).ln()).sqrt();
        assert!((c.gamma_thres - gt).abs() < 1e-12 * gt);
        let n = (2.0 * (tf * kf / delta).ln() / c.gamma_thres).ceil() as usize;
        assert_eq!(c.n_samples, n);
        assert_eq!(c.eta, eps / (3.0 * tf * tf * n as f64));
        c.validate().unwrap();
    }

    #[test]
    fn schedule_rejects_bad_inputs() {
        assert!(default_params(0, 3, 2, 5.0, 0.1, 0.1, 1e-3).is_err());
        assert!(default_params(4, 1, 2, 5.0, 0.1, 0.1, 1e-3).is_err());
        assert!(default_params(4, 3, 0, 5.0, 0.1, 0.1, 1e-3).is_err());
        assert!(default_params(4, 3, 2, 0.0, 0.1, 0.1, 1e-3).is_err());
        assert!(default_params(4, 3, 2, 5.0, -0.1, 0.1, 1e-3).is_err());
        assert!(default_params(4, 3, 2, 5.0, 0.1, 1.0, 1e-3).is_err());
        assert!(default_params(4, 3, 2, 5.0, 0.1, 0.1, 0.0).is_err());

        let mut c = default_params(4, 3, 2, 5.0, 0.1, 0.1, 1e-3).unwrap();
        c.beta = 1.5;
        assert!(c.validate().is_err());
        c.beta = 2.0;
        c.n_samples = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn lemma_form_sample_count_scales_up() {
        let base = TheoryConstants::default();
        let lemma = TheoryConstants {
            n_lemma_form: true,
            ..base.clone()
        };
        let a = default_params_with(4, 3, 2, 5.0, 0.1, 0.1, 1e-3, &base).unwrap();
        let b = default_params_with(4, 3, 2, 5.0, 0.1, 0.1, 1e-3, &lemma).unwrap();
        assert!(b.n_samples > a.n_samples);
    }

    #[test]
    fn product_model_learns_in_few_epochs() {
        let m = IsanModel::random_product(4, 3, 1.0, 11).unwrap();
        let mut oracle = exact_oracle(&m);
        let cfg = desk_config(4, 3, 1);
        let report = learn(&mut oracle, &m, &cfg).unwrap();
        let model = report.outcome.learned().expect("product model should learn");
        assert!(report.stats.epochs_used <= 2, "took {}", report.stats.epochs_used);
        assert_eq!(model.horizon, 4);
        assert_eq!(model.sigma, 3);
        assert_eq!(model.dstar, 12);
        assert_eq!(model.futures_hat.len(), 4);
        assert_eq!(model.spanner.len(), 4);
        for (t, rows) in model.spanner.iter().enumerate() {
            assert_eq!(rows.len(), model.dstar);
            for row in rows {
                assert_eq!(row.len(), model.futures_tilde[t].len());
            }
        }
        assert_eq!(model.single_token.len(), 4);
        assert!(model.single_token.iter().all(|per_i| per_i.len() == model.dstar
            && per_i.iter().all(|v| v.len() == 3)));
        // measured queries sit far under the budget shape
        let bound = query_budget_bound(&cfg, 4, 3, 1.0);
        assert!((report.stats.queries as f64) < bound);
        assert!(report.stats.additions_per_step.iter().all(|&a| a <= addition_bound(&cfg)));
        // run log has one row per epoch, ending in a pass
        assert_eq!(report.log.len(), report.stats.epochs_used);
        assert_eq!(report.log.last().unwrap().event, EpochEvent::Pass);
        let mut csv = Vec::new();
        write_run_log_csv(&report.log, &mut csv).unwrap();
        let txt = String::from_utf8(csv).unwrap();
        let mut lines = txt.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,step_reached,event,violated_step,added_future,dstar,queries_cum"
        );
        assert_eq!(lines.count(), report.log.len());
    }

    #[test]
    fn stored_single_token_values_match_oracle_reads() {
        let m = IsanModel::random_product(3, 2, 0.8, 4).unwrap();
        let mut oracle = exact_oracle(&m);
        let cfg = desk_config(3, 2, 1);
        let report = learn(&mut oracle, &m, &cfg).unwrap();
        let model = report.outcome.learned().unwrap();
        // single-token futures sit inside F̃_t, so the stored values must
        // reproduce spanner-row entries exactly
        for t in 1..=3usize {
            for (i, per_y) in model.single_token[t - 1].iter().enumerate() {
                for y in 0..2u8 {
                    let j = model.futures_tilde[t - 1]
                        .iter()
                        .position(|f| f == &Seq(vec![y]))
                        .unwrap();
                    assert_eq!(per_y[y as usize], model.spanner[t - 1][i][j], "t={t} i={i} y={y}");
                }
            }
        }
    }

    #[test]
    fn exact_rank_two_solutions_reproduce_extended_rows() {
        let m = IsanModel::random(4, 3, 2, 0.8, 7).unwrap();
        let mut oracle = exact_oracle(&m);
        let cfg = desk_config(4, 3, 2);
        let report = learn(&mut oracle, &m, &cfg).unwrap();
        let model = report.outcome.learned().expect("exact rank-2 model should learn");

        let bank = model.spanner_bank();
        let fs = model.future_sets();
        let mut truth = exact_oracle(&m);
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for _ in 0..5 {
            let traj = m.sample(&mut rng).unwrap();
            for t in 1..4usize {
                let prefix = traj.prefix(t);
                let problem =
                    crate::lp::build_feasibility(&bank, &fs, &prefix, model.beta).unwrap();
                match crate::lp::solve_feasibility(&problem, model.tau_feas).unwrap() {
                    crate::lp::FeasOutcome::Feasible(sol) => {
                        for (j, f) in fs.hat[t].iter().enumerate() {
                            let want = truth.l_apx(&prefix.concat(f)).unwrap();
                            let got = sol.lhat[t][j];
                            assert!(
                                (got - want).abs() <= 10.0 * model.tau_feas,
                                "t={t} f={f:?}: {got} vs {want}"
                            );
                        }
                    }
                    crate::lp::FeasOutcome::Infeasible => {
                        panic!("prefix {prefix:?} infeasible on an exact model")
                    }
                }
            }
        }
    }

    #[test]
    fn hand_built_violation_is_located_exactly() {
        let m = IsanModel::random(3, 2, 1, 0.9, 3).unwrap();
        let mut oracle = exact_oracle(&m);
        let traj = Seq(vec![0, 1, 0]);
        let bank = SpannerBank {
            histories: vec![vec![Seq::empty()], vec![Seq(vec![1])]],
            vectors: vec![vec![vec![]], vec![vec![]]],
        };
        let gamma_thres = 0.05;
        let a = oracle.l_apx(&Seq(vec![0, 0])).unwrap();
        let b = oracle.l_apx(&Seq(vec![1, 0])).unwrap();
        assert!(b.abs() > 1e-3, "degenerate instance: {b}");
        // scale the step-2 coefficient so the first scanned point at s=2
        // (r=2, token 0) misses by exactly 2*gamma_thres
        let w = (a - 2.0 * gamma_thres) / b;
        let sols = vec![LPSolution {
            c: vec![vec![1.0], vec![w]],
            lhat: vec![],
        }];
        let v = discrepancy_test(&mut oracle, &bank, &[traj.clone()], &sols, 2, 2, gamma_thres)
            .unwrap()
            .expect("violation must fire");
        assert_eq!(v.s, 2);
        assert_eq!(v.future, Seq(vec![0]));
        assert_eq!(v.u, 0);
        assert_eq!(v.r, 2);
        assert_eq!(v.token, 0);
        assert!((v.gap - 2.0 * gamma_thres).abs() < 1e-9);

        let again = discrepancy_test(&mut oracle, &bank, &[traj], &sols, 2, 2, gamma_thres)
            .unwrap()
            .unwrap();
        assert_eq!(v, again);
    }

    #[test]
    fn exact_solutions_pass_discrepancy() {
        // sigma > d: the seeded single tokens already pin the state, so no
        // violation ever fires on an exact model
        let m = IsanModel::random(3, 3, 2, 0.8, 21).unwrap();
        let mut oracle = exact_oracle(&m);
        let cfg = desk_config(3, 3, 2);
        let report = learn(&mut oracle, &m, &cfg).unwrap();
        assert!(report.outcome.learned().is_some());
        assert_eq!(report.stats.violation_epochs, 0);
    }

    #[test]
    fn narrow_alphabet_grows_futures_before_learning() {
        // sigma = 2 gives one independent single-token functional, so rank-2
        // state is underdetermined until the discrepancy test adds a longer
        // future
        let m = IsanModel::random(3, 2, 2, 0.8, 21).unwrap();
        let mut oracle = exact_oracle(&m);
        let cfg = desk_config(3, 2, 2);
        let report = learn(&mut oracle, &m, &cfg).unwrap();
        assert!(report.outcome.learned().is_some());
        assert!(report.stats.violation_epochs >= 1);
    }

    #[test]
    fn learned_model_round_trips_json() {
        let m = IsanModel::random_product(3, 2, 1.0, 8).unwrap();
        let mut oracle = exact_oracle(&m);
        let cfg = desk_config(3, 2, 1);
        let report = learn(&mut oracle, &m, &cfg).unwrap();
        let model = report.outcome.learned().unwrap();
        let json = model.to_json().unwrap();
        let back = LearnedModel::from_json(&json).unwrap();
        assert_eq!(*model, back);
        assert!(json.contains("\"T\""));
    }

    #[test]
    fn noisy_run_grows_futures_monotonically() {
        let m = IsanModel::random(3, 2, 2, 1.0, 5).unwrap();
        let backend = NoisyBackend::new(
            ExactIsan::new(m.clone()),
            NoiseSpec {
                eps_apx: 0.05,
                mode: NoiseMode::UniformBounded,
                seed: 9,
            },
        )
        .unwrap();
        let mut oracle = Oracle::new(backend);
        let mut cfg = desk_config(3, 2, 2);
        cfg.gamma_thres = 0.02;
        cfg.k_epochs = 4;
        let report = learn(&mut oracle, &m, &cfg).unwrap();
        // every violation adds exactly one future
        let total_adds: usize = report.stats.additions_per_step.iter().sum();
        assert_eq!(total_adds, report.stats.violation_epochs);
        let viol_rows = report
            .log
            .iter()
            .filter(|r| r.event == EpochEvent::Violation)
            .count();
        assert_eq!(viol_rows, report.stats.violation_epochs);
        assert!(report.log.len() <= 4);
        for pair in report.log.windows(2) {
            assert!(pair[1].queries_cum >= pair[0].queries_cum);
            assert!(pair[1].dstar >= pair[0].dstar);
        }
        let sigma = 2usize;
        assert!(report.stats.dstar_final <= (sigma + cfg.k_epochs) * (1 + sigma));
    }

    #[test]
    fn learn_rejects_mismatched_sampler() {
        let m4 = IsanModel::random(4, 2, 1, 1.0, 1).unwrap();
        let m3 = IsanModel::random(3, 2, 1, 1.0, 1).unwrap();
        let mut oracle = exact_oracle(&m4);
        let cfg = desk_config(4, 2, 1);
        assert!(matches!(
            learn(&mut oracle, &m3, &cfg),
            Err(LearnerError::Param(_))
        ));
    }

    #[test]
    fn learn_is_deterministic() {
        let m = IsanModel::random(3, 2, 2, 0.8, 13).unwrap();
        let cfg = desk_config(3, 2, 2);
        let mut o1 = exact_oracle(&m);
        let r1 = learn(&mut o1, &m, &cfg).unwrap();
        let mut o2 = exact_oracle(&m);
        let r2 = learn(&mut o2, &m, &cfg).unwrap();
        let (m1, m2) = (r1.outcome.learned().unwrap(), r2.outcome.learned().unwrap());
        assert_eq!(m1, m2);
        assert_eq!(r1.stats.queries, r2.stats.queries);
    }
}
