//! Approximate barycentric spanners of sampled logit-row batches.
//!
//! A set of rows S is a C-approximate barycentric spanner of a row collection
//! W (within the span of W) when every row of W is a linear combination of
//! the rows of S with coefficients bounded by C in absolute value. The
//! learner draws batches of mean-centered logit rows, extracts a spanner with
//! C = 2, and uses the spanning histories as the representative prefixes
//! whose logit rows anchor the per-step feasibility programs.

use nalgebra::DMatrix;

use crate::oracle::OracleError;
use crate::prob::Seq;

#[derive(Debug, thiserror::Error)]
pub enum SpannerError {
    #[error("spanner parameter error: {0}")]
    Param(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("sampler failure: {0}")]
    Sampler(String),
}

/// Selected spanner rows. `indices` point into the batch that produced the
/// spanner; `histories` carry the sampled prefixes behind the selected rows
/// (empty when the spanner was built from a bare matrix).
///
/// Invariant: `indices.len() == effective_rank <= min(batch rows, row dim)`,
/// and the selected vectors are linearly independent to working tolerance.
#[derive(Debug, Clone)]
pub struct SpannerResult {
    pub indices: Vec<usize>,
    pub vectors: Vec<Vec<f64>>,
    pub histories: Vec<Seq>,
    pub effective_rank: usize,
}

impl SpannerResult {
    /// Spanner rows padded with duplicates up to `count` rows, cycling
    /// through the selected rows in order. The learner pads every per-step
    /// spanner to the common size d* so the feasibility programs have a
    /// fixed shape.
    pub fn padded(&self, count: usize) -> Result<(Vec<Seq>, Vec<Vec<f64>>), SpannerError> {
        if self.effective_rank == 0 {
            return Err(SpannerError::Param(
                "cannot pad an empty spanner".into(),
            ));
        }
        if count < self.effective_rank {
            return Err(SpannerError::Param(format!(
                "pad target {count} below effective rank {}",
                self.effective_rank
            )));
        }
        let mut hs = Vec::with_capacity(count);
        let mut vs = Vec::with_capacity(count);
        for i in 0..count {
            let j = i % self.effective_rank;
            hs.push(self.histories.get(j).cloned().unwrap_or_else(Seq::empty));
            vs.push(self.vectors[j].clone());
        }
        Ok((hs, vs))
    }
}

/// Draws a history prefix from the target model and reads off the row of
/// approximate mean-centered logits over the current tested-future set.
/// One draw costs one row's worth of mean-centered oracle reads.
pub trait VectorSampler {
    /// Row dimension: the number of tested futures.
    fn dim(&self) -> usize;
    /// Draw one (history, logit row) pair.
    fn draw(&mut self) -> Result<(Seq, Vec<f64>), SpannerError>;
}

/// Knobs for the sampled spanner construction. The theoretical sample count
/// is far too conservative at desk scale, so a hard cap applies, with a
/// logged warning whenever it binds.
#[derive(Debug, Clone)]
pub struct DistSpannerParams {
    pub c_m: f64,
    pub m_max: usize,
}

impl Default for DistSpannerParams {
    fn default() -> Self {
        DistSpannerParams {
            c_m: 1.0,
            m_max: 2000,
        }
    }
}

/// Theoretical batch size before capping:
/// `ceil(c_m * (N/eta)^2 * ln(N/(delta*eta)))`.
pub fn dist_spanner_sample_count(n_dim: usize, eta: f64, delta: f64, c_m: f64) -> usize {
    let n = n_dim as f64;
    let raw = c_m * (n / eta).powi(2) * (n / (delta * eta)).ln();
    raw.ceil().clamp(1.0, 1e15) as usize
}

// Swap threshold slack: a hair above C so float noise at exactly C cannot
// oscillate, while keeping final coefficients within verify_spanner's
// beta + 1e-8 envelope.
const SWAP_SLACK: f64 = 1e-9;
// Residual threshold for counting a row as a new independent direction.
const RANK_TOL: f64 = 1e-9;

#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct SpannerStats {
    pub swaps: usize,
    pub seed_log_vol: f64,
    pub final_log_vol: f64,
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize, SpannerError> {
    let Some(first) = rows.first() else {
        return Err(SpannerError::Param("need at least one row".into()));
    };
    let n = first.len();
    if n == 0 {
        return Err(SpannerError::Param("rows must have positive length".into()));
    }
    for r in rows {
        if r.len() != n {
            return Err(SpannerError::Param(format!(
                "ragged rows: expected length {n}, found {}",
                r.len()
            )));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(SpannerError::Param("rows must be finite".into()));
        }
    }
    Ok(n)
}

/// C-approximate barycentric spanner of the given rows, restricted to their
/// span. Seeds with a greedy maximal-volume basis (pivoted Gram-Schmidt),
/// then repeatedly swaps in any row whose representation over the current
/// basis has a coefficient larger than C in absolute value; each swap
/// multiplies the basis volume by that coefficient, so the loop terminates.
pub fn barycentric_spanner(
    rows: &[Vec<f64>],
    c_approx: f64,
) -> Result<SpannerResult, SpannerError> {
    let (result, _) = spanner_with_stats(rows, c_approx)?;
    Ok(result)
}

pub(crate) fn spanner_with_stats(
    rows: &[Vec<f64>],
    c_approx: f64,
) -> Result<(SpannerResult, SpannerStats), SpannerError> {
    if c_approx < 1.0 {
        return Err(SpannerError::Param(format!(
            "approximation factor must be >= 1, got {c_approx}"
        )));
    }
    let n = check_rows(rows)?;
    let m = rows.len();
    let scale = rows
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |a, &v| a.max(v.abs()));
    let tol = RANK_TOL * (1.0 + scale);

    // Greedy maximal-volume seed: repeatedly take the row with the largest
    // residual against the span of the rows already chosen.
    let mut ortho: Vec<Vec<f64>> = Vec::new(); // orthonormal span basis
    let mut selected: Vec<usize> = Vec::new();
    loop {
        let mut best = (0usize, -1.0f64);
        for (i, r) in rows.iter().enumerate() {
            let res = residual_norm(r, &ortho);
            if res > best.1 {
                best = (i, res);
            }
        }
        if best.1 <= tol || selected.len() == n.min(m) {
            break;
        }
        selected.push(best.0);
        let mut dir = rows[best.0].clone();
        orthogonalize(&mut dir, &ortho);
        // second pass guards against cancellation in nearly dependent rows
        orthogonalize(&mut dir, &ortho);
        let nrm = norm(&dir);
        debug_assert!(nrm > 0.0);
        for v in &mut dir {
            *v /= nrm;
        }
        ortho.push(dir);
    }
    let k = selected.len();
    if k == 0 {
        return Ok((
            SpannerResult {
                indices: vec![],
                vectors: vec![],
                histories: vec![],
                effective_rank: 0,
            },
            SpannerStats {
                swaps: 0,
                seed_log_vol: 0.0,
                final_log_vol: 0.0,
            },
        ));
    }

    // Work in coordinates over the orthonormal span basis; there the basis
    // matrix is square and the swap test is Cramer's rule: replacing basis
    // row j by row w rescales det by the j-th coefficient of w.
    let coords: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| ortho.iter().map(|q| dot(r, q)).collect())
        .collect();
    let seed_log_vol = log_abs_det(&coords, &selected, k);
    let mut swaps = 0usize;
    let threshold = c_approx * (1.0 + SWAP_SLACK);
    'outer: loop {
        let lu = basis_lu(&coords, &selected, k);
        for (i, coord) in coords.iter().enumerate() {
            if selected.contains(&i) {
                continue;
            }
            let c = lu
                .solve(&nalgebra::DVector::from_row_slice(coord))
                .ok_or_else(|| {
                    SpannerError::Param("spanner basis became singular".into())
                })?;
            for j in 0..k {
                if c[j].abs() > threshold {
                    selected[j] = i;
                    swaps += 1;
                    continue 'outer;
                }
            }
        }
        break;
    }
    let final_log_vol = log_abs_det(&coords, &selected, k);

    let result = SpannerResult {
        indices: selected.clone(),
        vectors: selected.iter().map(|&i| rows[i].clone()).collect(),
        histories: vec![],
        effective_rank: k,
    };
    Ok((
        result,
        SpannerStats {
            swaps,
            seed_log_vol,
            final_log_vol,
        },
    ))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn orthogonalize(v: &mut [f64], ortho: &[Vec<f64>]) {
    for q in ortho {
        let p = dot(v, q);
        for (vi, qi) in v.iter_mut().zip(q) {
            *vi -= p * qi;
        }
    }
}

fn residual_norm(row: &[f64], ortho: &[Vec<f64>]) -> f64 {
    let mut v = row.to_vec();
    orthogonalize(&mut v, ortho);
    norm(&v)
}

/// LU of the transposed basis-coordinate matrix, so `solve` returns the
/// representation coefficients of a row over the selected basis rows.
fn basis_lu(
    coords: &[Vec<f64>],
    selected: &[usize],
    k: usize,
) -> nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn> {
    let mut b = DMatrix::<f64>::zeros(k, k);
    for (j, &si) in selected.iter().enumerate() {
        for i in 0..k {
            // column j holds the coordinates of selected row j
            b[(i, j)] = coords[si][i];
        }
    }
    b.lu()
}

fn log_abs_det(coords: &[Vec<f64>], selected: &[usize], k: usize) -> f64 {
    let mut b = DMatrix::<f64>::zeros(k, k);
    for (j, &si) in selected.iter().enumerate() {
        for i in 0..k {
            b[(i, j)] = coords[si][i];
        }
    }
    let lu = b.lu();
    let mut acc = 0.0f64;
    for i in 0..k {
        acc += lu.u()[(i, i)].abs().ln();
    }
    acc
}

/// Least-squares verification report: `ok` iff every input row is
/// represented over the spanner rows with residual at most
/// `1e-8 * (1 + ||row||_2)` and coefficients bounded by `beta + 1e-8`.
#[derive(Debug, Clone)]
pub struct SpannerCheck {
    pub ok: bool,
    pub coeffs: Vec<Vec<f64>>,
}

const TAU_SPAN: f64 = 1e-8;

/// Check the spanner property of `spanner` against every row of `rows` at
/// coefficient bound `beta`. Each row is represented by the least-squares
/// solve over the spanner rows (small Gram system).
pub fn verify_spanner(rows: &[Vec<f64>], spanner: &SpannerResult, beta: f64) -> SpannerCheck {
    let k = spanner.vectors.len();
    let mut ok = true;
    let mut coeffs = Vec::with_capacity(rows.len());
    let gram_lu = if k > 0 {
        let mut g = DMatrix::<f64>::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                g[(i, j)] = dot(&spanner.vectors[i], &spanner.vectors[j]);
            }
        }
        // ridge at relative machine scale keeps duplicate-padded spanners solvable
        let ridge = 1e-14 * (1.0 + g.diagonal().amax());
        for i in 0..k {
            g[(i, i)] += ridge;
        }
        Some(g.lu())
    } else {
        None
    };
    for row in rows {
        let c: Vec<f64> = match &gram_lu {
            Some(lu) => {
                let rhs =
                    nalgebra::DVector::from_iterator(k, spanner.vectors.iter().map(|s| dot(s, row)));
                match lu.solve(&rhs) {
                    Some(sol) => sol.iter().copied().collect(),
                    None => {
                        ok = false;
                        coeffs.push(vec![f64::NAN; k]);
                        continue;
                    }
                }
            }
            None => vec![],
        };
        let mut resid = row.to_vec();
        for (ci, s) in c.iter().zip(&spanner.vectors) {
            for (ri, si) in resid.iter_mut().zip(s) {
                *ri -= ci * si;
            }
        }
        let sup = c.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if norm(&resid) > TAU_SPAN * (1.0 + norm(row)) || sup > beta + TAU_SPAN {
            ok = false;
        }
        coeffs.push(c);
    }
    SpannerCheck { ok, coeffs }
}

/// The full batch drawn by [`dist_spanner`], kept so callers can re-verify
/// the spanner property against it or reuse a drawn history.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub histories: Vec<Seq>,
    pub rows: Vec<Vec<f64>>,
}

/// Sampled spanner construction: draw
/// `m = min(m_max, ceil(c_m * (N/eta)^2 * ln(N/(delta*eta))))` rows from the
/// sampler, then extract a C = 2 barycentric spanner and attach the sampled
/// histories to the selected rows. Returns the spanner together with the
/// full batch so the caller can re-verify the spanner property against it.
pub fn dist_spanner(
    sampler: &mut dyn VectorSampler,
    n_dim: usize,
    eta: f64,
    delta: f64,
    params: &DistSpannerParams,
) -> Result<(SpannerResult, SampleBatch), SpannerError> {
    if !(0.0..1.0).contains(&eta) || eta <= 0.0 {
        return Err(SpannerError::Param(format!("eta must be in (0,1): {eta}")));
    }
    if !(0.0..1.0).contains(&delta) || delta <= 0.0 {
        return Err(SpannerError::Param(format!(
            "delta must be in (0,1): {delta}"
        )));
    }
    if n_dim == 0 || n_dim != sampler.dim() {
        return Err(SpannerError::Param(format!(
            "dimension mismatch: n_dim {n_dim}, sampler dim {}",
            sampler.dim()
        )));
    }
    let m_theory = dist_spanner_sample_count(n_dim, eta, delta, params.c_m);
    let m = if m_theory > params.m_max {
        log::warn!(
            "spanner batch capped at {} (theoretical size {})",
            params.m_max,
            m_theory
        );
        params.m_max
    } else {
        m_theory
    };
    let mut histories = Vec::with_capacity(m);
    let mut batch = Vec::with_capacity(m);
    for _ in 0..m {
        let (h, v) = sampler.draw()?;
        if v.len() != n_dim {
            return Err(SpannerError::Sampler(format!(
                "sampler returned a row of length {} (want {n_dim})",
                v.len()
            )));
        }
        histories.push(h);
        batch.push(v);
    }
    let mut result = barycentric_spanner(&batch, 2.0)?;
    result.histories = result.indices.iter().map(|&i| histories[i].clone()).collect();
    Ok((result, SampleBatch { histories, rows: batch }))
}
