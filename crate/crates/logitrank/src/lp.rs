//! Per-prefix joint feasibility program.
//!
//! For a prefix y_{1:t} the program looks for coefficient vectors
//! c_1, …, c_t ∈ R^{d*} with c_1 = e_1 and ‖c_s‖_∞ ≤ β such that consecutive
//! steps chain: for every tested future f ∈ F̂_s,
//!
//! ```text
//!   Σ_i c_{s,i} · L_{s,i}(f)  =  Σ_i c_{s-1,i} · L_{s-1,i}(y_{s-1} ∘ f)
//! ```
//!
//! Each implied row L̂_s is a linear image of c_s, so only the c vectors are
//! solver unknowns; the L̂ values are reconstructed from the solution. The
//! final block, L̂_{t+1}(f) = Σ_i c_{t,i}·L_{t,i}(y_t ∘ f) over f ∈ F̂_{t+1},
//! is definitional: it prices the step the learner has not yet anchored with
//! its own spanner.

use serde::{Deserialize, Serialize};

use crate::learner::{FutureSets, SpannerBank};
use crate::prob::Seq;

#[derive(Debug, thiserror::Error)]
pub enum LpError {
    #[error("feasibility problem parameter error: {0}")]
    Param(String),
    #[error("internal consistency error: {0}")]
    Consistency(String),
    #[error("numerical breakdown in the solver: {0}")]
    Numeric(String),
}

/// The assembled program for one prefix. `futures[s-1]` is F̂_s for
/// s ∈ [1, t+1]; `vals_own[s-1][i][j]` is L_{s,i}(f_j) over f_j ∈ F̂_s and
/// `vals_next[s-1][i][j]` is L_{s,i}(y_s ∘ f_j) over f_j ∈ F̂_{s+1}, both for
/// s ∈ [1, t].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeasProblem {
    pub t: usize,
    pub beta: f64,
    pub dstar: usize,
    pub futures: Vec<Vec<Seq>>,
    pub vals_own: Vec<Vec<Vec<f64>>>,
    pub vals_next: Vec<Vec<Vec<f64>>>,
    pub prefix: Seq,
}

/// A chained solution. `c[s-1]` has length d* with `c[0] = e_1` exactly;
/// `lhat[s-1][j]` is the implied row value over `futures[s-1]`, for
/// s ∈ [1, t+1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LPSolution {
    pub c: Vec<Vec<f64>>,
    pub lhat: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub enum FeasOutcome {
    Feasible(LPSolution),
    Infeasible,
}

impl FeasOutcome {
    pub fn is_feasible(&self) -> bool {
        matches!(self, FeasOutcome::Feasible(_))
    }
}

impl FeasProblem {
    pub fn validate(&self) -> Result<(), LpError> {
        if self.t == 0 {
            return Err(LpError::Param("t must be >= 1".into()));
        }
        if self.prefix.len() != self.t {
            return Err(LpError::Param(format!(
                "prefix length {} != t = {}",
                self.prefix.len(),
                self.t
            )));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(LpError::Param("beta must be positive".into()));
        }
        if self.dstar == 0 {
            return Err(LpError::Param("dstar must be >= 1".into()));
        }
        if self.futures.len() != self.t + 1 {
            return Err(LpError::Consistency(format!(
                "need {} future sets, found {}",
                self.t + 1,
                self.futures.len()
            )));
        }
        if self.vals_own.len() != self.t || self.vals_next.len() != self.t {
            return Err(LpError::Consistency("value tables must cover s in [1, t]".into()));
        }
        for s in 1..=self.t {
            let own = &self.vals_own[s - 1];
            let next = &self.vals_next[s - 1];
            if own.len() != self.dstar || next.len() != self.dstar {
                return Err(LpError::Consistency(format!(
                    "step {s}: expected {} spanner rows",
                    self.dstar
                )));
            }
            for i in 0..self.dstar {
                if own[i].len() != self.futures[s - 1].len() {
                    return Err(LpError::Consistency(format!(
                        "step {s} row {i}: own values do not match |futures|"
                    )));
                }
                if next[i].len() != self.futures[s].len() {
                    return Err(LpError::Consistency(format!(
                        "step {s} row {i}: next values do not match |futures|"
                    )));
                }
                if own[i].iter().chain(&next[i]).any(|v| !v.is_finite()) {
                    return Err(LpError::Param("non-finite value in problem".into()));
                }
            }
        }
        Ok(())
    }

    /// Row count as reported: one row per (s ∈ [1, t], f ∈ F̂_{s+1}). The
    /// final block (s = t) is definitional rather than a solver constraint.
    pub fn constraint_count(&self) -> usize {
        (1..=self.t).map(|s| self.futures[s].len()).sum()
    }

    /// Solver unknowns: c_2, …, c_t.
    pub fn variable_count(&self) -> usize {
        (self.t - 1) * self.dstar
    }

    fn scale(&self) -> f64 {
        let mut m = 1.0f64;
        for tbl in self.vals_own.iter().chain(&self.vals_next) {
            for row in tbl {
                for &v in row {
                    m = m.max(v.abs());
                }
            }
        }
        m
    }

    /// Debug dump in LP text format for cross-checks against external
    /// solvers during development.
    pub fn dump_lp(&self) -> String {
        use std::fmt::Write;
        let mut out = String::from("Minimize\n obj: 0\nSubject To\n");
        for s in 2..=self.t {
            for (j, _) in self.futures[s - 1].iter().enumerate() {
                let mut line = format!(" chain_{s}_{j}:");
                for i in 0..self.dstar {
                    let _ = write!(line, " {:+.17e} c_{s}_{i}", self.vals_own[s - 1][i][j]);
                }
                if s - 1 >= 2 {
                    for i in 0..self.dstar {
                        let _ = write!(line, " {:+.17e} c_{}_{i}", -self.vals_next[s - 2][i][j], s - 1);
                    }
                    let _ = writeln!(out, "{line} = 0");
                } else {
                    let _ = writeln!(out, "{line} = {:.17e}", self.vals_next[0][0][j]);
                }
            }
        }
        out.push_str("Bounds\n");
        for s in 2..=self.t {
            for i in 0..self.dstar {
                let _ = writeln!(out, " {:.17e} <= c_{s}_{i} <= {:.17e}", -self.beta, self.beta);
            }
        }
        out.push_str("End\n");
        out
    }
}

/// Assemble the program for `prefix` from the epoch's spanner bank. Every
/// value the program needs is a bank lookup: F̂_s ⊆ F̃_s covers the own-step
/// table and y_s ∘ F̂_{s+1} ⊆ F̃_s covers the chained one.
pub fn build_feasibility(
    bank: &SpannerBank,
    futures: &FutureSets,
    prefix: &Seq,
    beta: f64,
) -> Result<FeasProblem, LpError> {
    let t = prefix.len();
    if t == 0 {
        return Err(LpError::Param("prefix must be nonempty".into()));
    }
    if t + 1 > futures.horizon {
        return Err(LpError::Param(format!(
            "prefix length {t} needs step {} beyond horizon {}",
            t + 1,
            futures.horizon
        )));
    }
    if bank.vectors.len() < t {
        return Err(LpError::Consistency(format!(
            "spanner bank covers {} steps, prefix needs {t}",
            bank.vectors.len()
        )));
    }
    let dstar = bank.dstar();
    if dstar == 0 {
        return Err(LpError::Consistency("empty spanner bank".into()));
    }
    let fut: Vec<Vec<Seq>> = (1..=t + 1).map(|s| futures.hat[s - 1].clone()).collect();
    let mut vals_own = Vec::with_capacity(t);
    let mut vals_next = Vec::with_capacity(t);
    for s in 1..=t {
        let y_s = prefix.tokens()[s - 1];
        let mut own_rows = Vec::with_capacity(dstar);
        let mut next_rows = Vec::with_capacity(dstar);
        for i in 0..dstar {
            let row = bank.row(s, i).ok_or_else(|| {
                LpError::Consistency(format!("missing spanner row ({s}, {i})"))
            })?;
            let mut own = Vec::with_capacity(fut[s - 1].len());
            for f in &fut[s - 1] {
                let j = futures.tilde_index(s, f).ok_or_else(|| {
                    LpError::Consistency(format!("future {f:?} not in working set of step {s}"))
                })?;
                own.push(row[j]);
            }
            let mut next = Vec::with_capacity(fut[s].len());
            for f in &fut[s] {
                let g = Seq(vec![y_s]).concat(f);
                let j = futures.tilde_index(s, &g).ok_or_else(|| {
                    LpError::Consistency(format!(
                        "chained future {g:?} not in working set of step {s}"
                    ))
                })?;
                next.push(row[j]);
            }
            own_rows.push(own);
            next_rows.push(next);
        }
        vals_own.push(own_rows);
        vals_next.push(next_rows);
    }
    let p = FeasProblem {
        t,
        beta,
        dstar,
        futures: fut,
        vals_own,
        vals_next,
        prefix: prefix.clone(),
    };
    p.validate()?;
    Ok(p)
}

/// Solve the program. Feasibility is decided by a phase-1 simplex on the
/// chaining equalities under the box constraints: feasible iff the summed
/// constraint violation can be brought below `tau_feas`, scaled by the
/// largest coefficient magnitude, times the row count. A feasible program is
/// then re-solved under a fixed phase-2 objective, minimizing Σ_s ‖c_s‖_1,
/// so the returned point is deterministic.
pub fn solve_feasibility(p: &FeasProblem, tau_feas: f64) -> Result<FeasOutcome, LpError> {
    p.validate()?;
    if !(tau_feas > 0.0 && tau_feas.is_finite()) {
        return Err(LpError::Param("tau_feas must be positive".into()));
    }
    let d = p.dstar;
    let mut e1 = vec![0.0; d];
    e1[0] = 1.0;

    if p.t == 1 {
        let c = vec![e1];
        let lhat = implied_rows(p, &c);
        return Ok(FeasOutcome::Feasible(LPSolution { c, lhat }));
    }

    // unknowns: c_s for s in [2, t], variable (s, i) at (s-2)*d + i
    let nv = p.variable_count();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for s in 2..=p.t {
        for j in 0..p.futures[s - 1].len() {
            let mut row = vec![0.0; nv];
            for i in 0..d {
                row[(s - 2) * d + i] = p.vals_own[s - 1][i][j];
            }
            let mut b = 0.0;
            if s - 1 >= 2 {
                for i in 0..d {
                    row[(s - 3) * d + i] = -p.vals_next[s - 2][i][j];
                }
            } else {
                // c_1 = e_1 folds into the right-hand side
                b = p.vals_next[0][0][j];
            }
            rows.push(row);
            rhs.push(b);
        }
    }

    let tau_eff = tau_feas * p.scale().max(1.0);
    let Some(x) = solve_box_equalities(&rows, &rhs, p.beta, tau_eff)? else {
        return Ok(FeasOutcome::Infeasible);
    };

    let mut c = Vec::with_capacity(p.t);
    c.push(e1);
    for s in 2..=p.t {
        c.push(x[(s - 2) * d..(s - 1) * d].to_vec());
    }
    let lhat = implied_rows(p, &c);

    // re-verify: the solver's verdict must survive direct substitution
    let m = rows.len().max(1) as f64;
    let mut worst = 0.0f64;
    for (row, &b) in rows.iter().zip(&rhs) {
        let lhs: f64 = row.iter().zip(&x).map(|(a, v)| a * v).sum();
        worst = worst.max((lhs - b).abs());
    }
    assert!(
        worst <= tau_eff * m,
        "solution violates chaining by {worst} (allowed {})",
        tau_eff * m
    );
    let sup = c
        .iter()
        .flat_map(|cs| cs.iter())
        .fold(0.0f64, |a, &v| a.max(v.abs()));
    assert!(sup <= p.beta + tau_feas, "coefficient {sup} above the box");

    Ok(FeasOutcome::Feasible(LPSolution { c, lhat }))
}

fn implied_rows(p: &FeasProblem, c: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = p.dstar;
    let mut lhat = Vec::with_capacity(p.t + 1);
    for s in 1..=p.t {
        let row: Vec<f64> = (0..p.futures[s - 1].len())
            .map(|j| (0..d).map(|i| c[s - 1][i] * p.vals_own[s - 1][i][j]).sum())
            .collect();
        lhat.push(row);
    }
    let last: Vec<f64> = (0..p.futures[p.t].len())
        .map(|j| (0..d).map(|i| c[p.t - 1][i] * p.vals_next[p.t - 1][i][j]).sum())
        .collect();
    lhat.push(last);
    lhat
}

/// Decide whether some x with ‖x‖_∞ ≤ beta satisfies rows·x = rhs, each
/// equality within `tau`; if so return the point minimizing ‖x‖_1 under
/// deterministic (Bland) pivoting. Two-phase dense simplex over the split
/// x = p − q with explicit upper-bound rows p, q ≤ beta.
pub fn solve_box_equalities(
    rows: &[Vec<f64>],
    rhs: &[f64],
    beta: f64,
    tau: f64,
) -> Result<Option<Vec<f64>>, LpError> {
    let nr = rows.len();
    let nv = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != nv) {
        return Err(LpError::Param("ragged constraint rows".into()));
    }
    if rhs.len() != nr {
        return Err(LpError::Param("rhs length mismatch".into()));
    }
    if rows
        .iter()
        .flat_map(|r| r.iter())
        .chain(rhs)
        .any(|v| !v.is_finite())
    {
        return Err(LpError::Param("non-finite coefficient".into()));
    }
    if nv == 0 {
        let ok = rhs.iter().all(|&b| b.abs() <= tau.max(1e-300) * nr.max(1) as f64);
        return Ok(if ok { Some(vec![]) } else { None });
    }
    if nr == 0 {
        return Ok(Some(vec![0.0; nv]));
    }

    // columns: p(nv) | q(nv) | sp(nv) | sq(nv) | artificials(nr)
    let ncols = 4 * nv + nr;
    let nrows = nr + 2 * nv;
    let art0 = 4 * nv;
    let mut tab = vec![vec![0.0f64; ncols + 1]; nrows];
    let mut basis = vec![0usize; nrows];
    for (r, (row, &b)) in rows.iter().zip(rhs).enumerate() {
        let sgn = if b < 0.0 { -1.0 } else { 1.0 };
        for (i, &a) in row.iter().enumerate() {
            tab[r][i] = sgn * a;
            tab[r][nv + i] = -sgn * a;
        }
        tab[r][art0 + r] = 1.0;
        tab[r][ncols] = sgn * b;
        basis[r] = art0 + r;
    }
    for i in 0..nv {
        let r_p = nr + i;
        tab[r_p][i] = 1.0;
        tab[r_p][2 * nv + i] = 1.0;
        tab[r_p][ncols] = beta;
        basis[r_p] = 2 * nv + i;
        let r_q = nr + nv + i;
        tab[r_q][nv + i] = 1.0;
        tab[r_q][3 * nv + i] = 1.0;
        tab[r_q][ncols] = beta;
        basis[r_q] = 3 * nv + i;
    }

    let scale = rows
        .iter()
        .flat_map(|r| r.iter())
        .chain(rhs)
        .fold(beta.abs().max(1.0), |a, &v| a.max(v.abs()));
    let pivot_tol = 1e-11 * scale;
    let cost_tol = 1e-12 * scale;

    // phase 1: minimize the sum of artificials
    let mut cost = vec![0.0f64; ncols];
    for j in art0..ncols {
        cost[j] = 1.0;
    }
    let opt1 = run_simplex(&mut tab, &mut basis, &cost, art0, false, pivot_tol, cost_tol)?;
    if opt1 > tau * nr as f64 {
        return Ok(None);
    }

    // phase 2: minimize sum of p + q (the l1 norm of x); artificials may
    // linger in the basis at value ~0 but may not re-enter
    let mut cost2 = vec![0.0f64; ncols];
    for j in 0..2 * nv {
        cost2[j] = 1.0;
    }
    run_simplex(&mut tab, &mut basis, &cost2, art0, true, pivot_tol, cost_tol)?;

    let mut x = vec![0.0f64; nv];
    for (r, &bv) in basis.iter().enumerate() {
        if bv < nv {
            x[bv] += tab[r][ncols];
        } else if bv < 2 * nv {
            x[bv - nv] -= tab[r][ncols];
        }
    }
    Ok(Some(x))
}

/// Bland-rule primal simplex on an explicit tableau. Returns the objective
/// value at termination. `bar_artificials` forbids artificial columns from
/// entering (phase 2).
fn run_simplex(
    tab: &mut [Vec<f64>],
    basis: &mut [usize],
    cost: &[f64],
    art0: usize,
    bar_artificials: bool,
    pivot_tol: f64,
    cost_tol: f64,
) -> Result<f64, LpError> {
    let nrows = tab.len();
    let ncols = tab[0].len() - 1;
    // reduced costs from the current basis
    let mut red = cost.to_vec();
    let mut obj = 0.0f64;
    for r in 0..nrows {
        let cb = cost[basis[r]];
        if cb != 0.0 {
            obj += cb * tab[r][ncols];
            for j in 0..ncols {
                red[j] -= cb * tab[r][j];
            }
        }
    }
    let max_iters = 50 * (nrows + ncols).max(100);
    for _ in 0..max_iters {
        // Bland: first eligible entering column
        let mut enter = None;
        for (j, &rj) in red.iter().enumerate() {
            if bar_artificials && j >= art0 {
                break;
            }
            if rj < -cost_tol {
                enter = Some(j);
                break;
            }
        }
        let Some(e) = enter else {
            return Ok(obj);
        };
        // ratio test; Bland tie-break on the smallest basis variable
        let mut leave: Option<(usize, f64)> = None;
        for r in 0..nrows {
            let a = tab[r][e];
            if a > pivot_tol {
                let ratio = tab[r][ncols] / a;
                match leave {
                    None => leave = Some((r, ratio)),
                    Some((lr, lratio)) => {
                        if ratio < lratio - 1e-300
                            || (ratio <= lratio && basis[r] < basis[lr])
                        {
                            leave = Some((r, ratio));
                        }
                    }
                }
            }
        }
        let Some((lr, _)) = leave else {
            return Err(LpError::Numeric(
                "unbounded pivot in a bounded program".into(),
            ));
        };
        // pivot on (lr, e)
        let piv = tab[lr][e];
        for v in tab[lr].iter_mut() {
            *v /= piv;
        }
        for r in 0..nrows {
            if r != lr {
                let f = tab[r][e];
                if f != 0.0 {
                    for j in 0..=ncols {
                        tab[r][j] -= f * tab[lr][j];
                    }
                }
            }
        }
        let f = red[e];
        if f != 0.0 {
            // entering at level theta = tab[lr][ncols] changes the objective
            // by its reduced cost times theta
            obj += f * tab[lr][ncols];
            for j in 0..ncols {
                red[j] -= f * tab[lr][j];
            }
        }
        basis[lr] = e;
    }
    Err(LpError::Numeric("simplex iteration budget exhausted".into()))
}

/// Exact rational feasibility reference for tiny systems, used to cross-check
/// the float solver's verdicts: decides whether some x ∈ [−beta, beta]^v
/// satisfies rows·x = rhs exactly, by Gaussian elimination over the
/// rationals followed by Fourier-Motzkin elimination of the free variables.
#[cfg(feature = "reference")]
pub mod exact {
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::{One, Signed, Zero};

    fn rat(x: f64) -> BigRational {
        BigRational::from_float(x).expect("finite float")
    }

    pub fn box_equalities_feasible(rows: &[Vec<f64>], rhs: &[f64], beta: f64) -> bool {
        let nv = rows.first().map(Vec::len).unwrap_or(0);
        let b_rat = rat(beta);
        // row echelon over [A | b]
        let mut a: Vec<Vec<BigRational>> = rows
            .iter()
            .zip(rhs)
            .map(|(r, &b)| {
                r.iter()
                    .map(|&v| rat(v))
                    .chain(std::iter::once(rat(b)))
                    .collect()
            })
            .collect();
        let nr = a.len();
        let mut pivot_of_col: Vec<Option<usize>> = vec![None; nv];
        let mut rank = 0usize;
        for col in 0..nv {
            let Some(pr) = (rank..nr).find(|&r| !a[r][col].is_zero()) else {
                continue;
            };
            a.swap(rank, pr);
            let inv = a[rank][col].clone();
            for v in a[rank].iter_mut() {
                *v /= &inv;
            }
            for r in 0..nr {
                if r != rank && !a[r][col].is_zero() {
                    let f = a[r][col].clone();
                    for j in 0..=nv {
                        let delta = &f * &a[rank][j];
                        a[r][j] -= delta;
                    }
                }
            }
            pivot_of_col[col] = Some(rank);
            rank += 1;
            if rank == nr {
                break;
            }
        }
        // inconsistent row: 0 = nonzero
        for r in rank..nr {
            if !a[r][nv].is_zero() {
                return false;
            }
        }
        let free: Vec<usize> = (0..nv).filter(|&c| pivot_of_col[c].is_none()).collect();
        // box constraints as inequalities over the free variables:
        // sum coeff_j * z_j <= rhs
        let mut ineqs: Vec<(Vec<BigRational>, BigRational)> = Vec::new();
        for col in 0..nv {
            // x_col = const + sum over free of coeff * z  (identity if free)
            let mut coeffs = vec![BigRational::zero(); free.len()];
            let constant;
            match pivot_of_col[col] {
                Some(r) => {
                    constant = a[r][nv].clone();
                    for (k, &fc) in free.iter().enumerate() {
                        coeffs[k] = -a[r][fc].clone();
                    }
                }
                None => {
                    constant = BigRational::zero();
                    let k = free.iter().position(|&fc| fc == col).unwrap();
                    coeffs[k] = BigRational::one();
                }
            }
            // x_col <= beta  and  -x_col <= beta
            ineqs.push((coeffs.clone(), &b_rat - &constant));
            ineqs.push((
                coeffs.iter().map(|c| -c.clone()).collect(),
                &b_rat + &constant,
            ));
        }
        // eliminate free variables one at a time
        for k in (0..free.len()).rev() {
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            let mut rest = Vec::new();
            for (mut coeffs, rhs) in ineqs {
                let ck = coeffs[k].clone();
                if ck.is_zero() {
                    coeffs.truncate(k);
                    rest.push((coeffs, rhs));
                } else {
                    // normalize the k coefficient to +-1
                    let inv = ck.abs();
                    let cs: Vec<BigRational> =
                        coeffs[..k].iter().map(|c| c / &inv).collect();
                    let rr = rhs / &inv;
                    if ck.is_positive() {
                        // z_k + cs·z' <= rr
                        pos.push((cs, rr));
                    } else {
                        // -z_k + cs·z' <= rr
                        neg.push((cs, rr));
                    }
                }
            }
            // pos: z_k + u <= su ; neg gives lower bounds as -z_k + l <= sl
            ineqs = rest;
            for (u, su) in &pos {
                for (l, sl) in &neg {
                    let coeffs: Vec<BigRational> = u
                        .iter()
                        .zip(l)
                        .map(|(a, b)| a + b)
                        .collect();
                    ineqs.push((coeffs, su + sl));
                }
            }
        }
        ineqs.iter().all(|(_, rhs)| !rhs.is_negative())
    }

    /// Exact feasibility cross-check of `BigInt`-representable arithmetic:
    /// keeps the reference honest about its own conversions.
    pub fn rat_roundtrip(x: f64) -> bool {
        let r = rat(x);
        let back = r.numer().to_string().parse::<f64>().unwrap_or(f64::NAN)
            / r.denom().to_string().parse::<f64>().unwrap_or(f64::NAN);
        (back - x).abs() <= 1e-9 * x.abs().max(1.0)
    }

    #[allow(unused)]
    fn _typecheck(_: BigInt) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::Seq;

    fn toy_problem(own2: Vec<Vec<f64>>, next1: Vec<Vec<f64>>, beta: f64) -> FeasProblem {
        // t = 2, one spanner row per step (dstar chosen by the tables)
        let d = own2.len();
        FeasProblem {
            t: 2,
            beta,
            dstar: d,
            futures: vec![
                vec![Seq(vec![0])],
                (0..own2[0].len()).map(|j| Seq(vec![j as u8])).collect(),
                vec![Seq(vec![0])],
            ],
            vals_own: vec![vec![vec![1.0]; d], own2],
            vals_next: vec![next1, vec![vec![0.5]; d]],
            prefix: Seq(vec![0, 0]),
        }
    }

    #[test]
    fn t1_trivially_feasible() {
        let p = FeasProblem {
            t: 1,
            beta: 2.0,
            dstar: 2,
            futures: vec![vec![Seq(vec![0]), Seq(vec![1])], vec![Seq(vec![0])]],
            vals_own: vec![vec![vec![0.3, -0.3], vec![0.3, -0.3]]],
            vals_next: vec![vec![vec![0.7], vec![0.7]]],
            prefix: Seq(vec![1]),
        };
        let out = solve_feasibility(&p, 1e-8).unwrap();
        let FeasOutcome::Feasible(sol) = out else {
            panic!("t=1 must be feasible")
        };
        assert_eq!(sol.c, vec![vec![1.0, 0.0]]);
        assert_eq!(sol.lhat.len(), 2);
        assert!((sol.lhat[0][0] - 0.3).abs() < 1e-15);
        assert!((sol.lhat[1][0] - 0.7).abs() < 1e-15);
        assert_eq!(p.constraint_count(), 1);
        assert_eq!(p.variable_count(), 0);
    }

    #[test]
    fn counts_by_construction() {
        let p = toy_problem(vec![vec![1.0, 1.0]], vec![vec![0.5, 0.5]], 2.0);
        // |F̂_2| + |F̂_3| = 2 + 1
        assert_eq!(p.constraint_count(), 3);
        assert_eq!(p.variable_count(), 1);
    }

    #[test]
    fn contradictory_rows_are_infeasible() {
        // c_2 forced to 3 on one future and -3 on the other, beta = 2
        let p = toy_problem(vec![vec![1.0, 1.0]], vec![vec![3.0, -3.0]], 2.0);
        let out = solve_feasibility(&p, 1e-8).unwrap();
        assert!(!out.is_feasible());
    }

    #[test]
    fn proportional_rows_return_e1() {
        // all spanner rows read the same value pattern: c_s = e_1 works
        let p = toy_problem(vec![vec![0.4, -0.2]], vec![vec![0.4, -0.2]], 2.0);
        let out = solve_feasibility(&p, 1e-8).unwrap();
        let FeasOutcome::Feasible(sol) = out else {
            panic!("must be feasible")
        };
        assert_eq!(sol.c[0], vec![1.0]);
        assert!((sol.c[1][0] - 1.0).abs() < 1e-9, "c_2 = {:?}", sol.c[1]);
    }

    #[test]
    fn feasibility_survives_future_reindexing() {
        let p1 = toy_problem(vec![vec![0.9, 0.1]], vec![vec![0.3, 0.2]], 2.0);
        let p2 = toy_problem(vec![vec![0.1, 0.9]], vec![vec![0.2, 0.3]], 2.0);
        let a = solve_feasibility(&p1, 1e-8).unwrap().is_feasible();
        let b = solve_feasibility(&p2, 1e-8).unwrap().is_feasible();
        assert_eq!(a, b);
        let q1 = toy_problem(vec![vec![1.0, 1.0]], vec![vec![3.0, -3.0]], 2.0);
        let q2 = toy_problem(vec![vec![1.0, 1.0]], vec![vec![-3.0, 3.0]], 2.0);
        assert_eq!(
            solve_feasibility(&q1, 1e-8).unwrap().is_feasible(),
            solve_feasibility(&q2, 1e-8).unwrap().is_feasible()
        );
    }

    #[test]
    fn solutions_are_deterministic() {
        let p = toy_problem(
            vec![vec![0.4, -0.2], vec![0.8, -0.4]],
            vec![vec![0.4, -0.2], vec![0.4, -0.2]],
            2.0,
        );
        let a = solve_feasibility(&p, 1e-8).unwrap();
        let b = solve_feasibility(&p, 1e-8).unwrap();
        let (FeasOutcome::Feasible(sa), FeasOutcome::Feasible(sb)) = (a, b) else {
            panic!("must be feasible")
        };
        assert_eq!(sa, sb);
        for (x, y) in sa.c.iter().flatten().zip(sb.c.iter().flatten()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn box_solver_finds_interior_points() {
        let rows = vec![vec![1.0, 1.0, 0.0], vec![0.0, 1.0, -1.0]];
        let rhs = vec![1.5, 0.25];
        let x = solve_box_equalities(&rows, &rhs, 2.0, 1e-10)
            .unwrap()
            .expect("feasible");
        for (row, &b) in rows.iter().zip(&rhs) {
            let lhs: f64 = row.iter().zip(&x).map(|(a, v)| a * v).sum();
            assert!((lhs - b).abs() <= 1e-9);
        }
        assert!(x.iter().all(|v| v.abs() <= 2.0 + 1e-9));
    }

    #[test]
    fn box_solver_respects_bounds() {
        // x = 3 required but box is [-2, 2]
        let rows = vec![vec![1.0]];
        assert!(solve_box_equalities(&rows, &[3.0], 2.0, 1e-10)
            .unwrap()
            .is_none());
        assert!(solve_box_equalities(&rows, &[1.75], 2.0, 1e-10)
            .unwrap()
            .is_some());
    }

    #[test]
    fn empty_shapes() {
        assert_eq!(
            solve_box_equalities(&[], &[], 2.0, 1e-10).unwrap(),
            Some(vec![])
        );
        let no_vars: Vec<Vec<f64>> = vec![vec![]];
        assert!(solve_box_equalities(&no_vars, &[5.0], 2.0, 1e-10)
            .unwrap()
            .is_none());
        assert!(solve_box_equalities(&[vec![f64::NAN]], &[0.0], 2.0, 1e-10).is_err());
    }

    #[test]
    fn phase_two_minimizes_l1() {
        // one row, two vars: x0 + 2 x1 = 2; l1-minimal point is (0, 1)
        let rows = vec![vec![1.0, 2.0]];
        let x = solve_box_equalities(&rows, &[2.0], 2.0, 1e-10)
            .unwrap()
            .expect("feasible");
        assert!((x[0] - 0.0).abs() < 1e-9 && (x[1] - 1.0).abs() < 1e-9, "x = {x:?}");
    }

    #[test]
    fn dump_lp_has_constraints_and_bounds() {
        let p = toy_problem(vec![vec![1.0, 1.0]], vec![vec![3.0, -3.0]], 2.0);
        let s = p.dump_lp();
        assert!(s.contains("Subject To"));
        assert!(s.contains("chain_2_0"));
        assert!(s.contains("Bounds"));
    }

    #[cfg(feature = "reference")]
    #[test]
    fn exact_reference_agrees_on_small_systems() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(2024);
        let mut checked = 0;
        for case in 0..100 {
            let nv = rng.random_range(1..=6);
            let nr = rng.random_range(1..=8);
            // Planted-feasible cases use a dyadic 1/16 grid so the float dot
            // products are exact and the planted point satisfies the system
            // in exact rational arithmetic too, even when nr > nv.
            let rows: Vec<Vec<f64>> = if case % 2 == 0 {
                (0..nr)
                    .map(|_| {
                        (0..nv)
                            .map(|_| rng.random_range(-32..=32i32) as f64 / 16.0)
                            .collect()
                    })
                    .collect()
            } else {
                (0..nr)
                    .map(|_| (0..nv).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .collect()
            };
            let rhs: Vec<f64> = if case % 2 == 0 {
                let x0: Vec<f64> = (0..nv)
                    .map(|_| rng.random_range(-24..=24i32) as f64 / 16.0)
                    .collect();
                rows.iter()
                    .map(|r| r.iter().zip(&x0).map(|(a, v)| a * v).sum())
                    .collect()
            } else {
                (0..nr).map(|_| rng.random_range(-4.0..4.0)).collect()
            };
            let float_verdict = solve_box_equalities(&rows, &rhs, 2.0, 1e-9)
                .unwrap()
                .is_some();
            let exact_verdict = exact::box_equalities_feasible(&rows, &rhs, 2.0);
            assert_eq!(
                float_verdict, exact_verdict,
                "case {case}: float {float_verdict} vs exact {exact_verdict}"
            );
            checked += 1;
        }
        assert_eq!(checked, 100);
    }
}
