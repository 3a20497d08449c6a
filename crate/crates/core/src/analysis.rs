//! Recovery and phenomenology detectors: the initialization matrix, greedy
//! maximum selection, sequential-elimination detection, recovery predicates,
//! and condition checks on initial data.

use nalgebra::DMatrix;

use crate::dynamics::{noise_generator_mij, Trajectory};
use crate::error::{Error, Result};
use crate::manifold::{correlation_matrix, overlap_gram, CorrelationMatrix, StiefelPoint};
use crate::model::{NoiseTensor, SpikedModel};

/// I0_ij = lambda_i lambda_j m_ij(0)^{p-2} 1{m_ij(0)^{p-2} >= 0}.
///
/// For p = 2 the power is constant and the initialization has little
/// influence; the ordering matrix is lambda_i lambda_j alone.
pub fn init_matrix_i0(m0: &CorrelationMatrix, lambdas: &[f64], p: u32) -> DMatrix<f64> {
    let r = m0.r();
    assert_eq!(lambdas.len(), r);
    assert!(p >= 2);
    let pm2 = p as i32 - 2;
    DMatrix::from_fn(r, r, |i, j| {
        let weight = m0.entry(i, j).powi(pm2);
        if weight >= 0.0 {
            lambdas[i] * lambdas[j] * weight
        } else {
            0.0
        }
    })
}

/// Result of the greedy maximum selection: r pairs, rows and columns each a
/// permutation of 0..r, with the |entry| selected at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub pairs: Vec<(usize, usize)>,
    pub values: Vec<f64>,
}

/// Repeatedly take the argmax of |entries| over the surviving submatrix and
/// delete its row and column. Ties within 1e-12 break by smallest (row,
/// column) lexicographic index.
pub fn greedy_max_selection(a: &DMatrix<f64>) -> SelectionResult {
    let r = a.nrows();
    assert_eq!(a.ncols(), r);
    let mut row_alive = vec![true; r];
    let mut col_alive = vec![true; r];
    let mut pairs = Vec::with_capacity(r);
    let mut values = Vec::with_capacity(r);
    for _ in 0..r {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..r {
            if !row_alive[i] {
                continue;
            }
            for j in 0..r {
                if !col_alive[j] {
                    continue;
                }
                let v = a[(i, j)].abs();
                let better = match best {
                    None => true,
                    Some((_, _, bv)) => v > bv + 1e-12,
                };
                if better {
                    best = Some((i, j, v));
                }
            }
        }
        let (i, j, v) = best.expect("submatrix is nonempty");
        row_alive[i] = false;
        col_alive[j] = false;
        pairs.push((i, j));
        values.push(v);
    }
    SelectionResult { pairs, values }
}

/// Outcome of sequential-elimination detection.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EliminationReport {
    /// Pairs (i_k, j_k) in stop-time order.
    pub ordering: Vec<(usize, usize)>,
    /// Non-decreasing stop times T_1 <= ... <= T_r when satisfied.
    pub stop_times: Vec<f64>,
    pub satisfied: bool,
    /// Human-readable diagnostics for unclaimed rows/columns.
    pub violations: Vec<String>,
    /// Number of snapshots the detection scanned; stop times are resolved
    /// only to the recording stride.
    pub snapshots: usize,
}

/// Detect a sequential elimination along a recorded trajectory: pairs
/// (i_k, j_k) with stop times T_k such that from T_k to the trajectory end
/// |m_{i_k j_k}| >= 1 - eps while every other entry in row i_k and column
/// j_k stays <= eps'. Absence is a valid outcome, reported with diagnostics.
pub fn detect_sequential_elimination(
    traj: &Trajectory,
    eps: f64,
    eps_prime: f64,
) -> Result<EliminationReport> {
    if traj.is_empty() {
        return Err(Error::InvalidParameter("empty trajectory".into()));
    }
    if !(eps > 0.0 && eps < 1.0) || !(eps_prime > 0.0 && eps_prime <= 1.0) {
        return Err(Error::InvalidParameter(
            "need 0 < eps < 1 and 0 < eps' <= 1".into(),
        ));
    }
    let r = traj.r();
    let len = traj.len();

    // qualification time per pair: earliest snapshot from which both clauses
    // hold through the end of the trajectory, found by a backward scan
    let mut qual = vec![vec![None as Option<usize>; r]; r];
    for i in 0..r {
        for j in 0..r {
            let mut from_here = None;
            for s in (0..len).rev() {
                let m = &traj.corr[s];
                let mut ok = m.entry(i, j).abs() >= 1.0 - eps;
                if ok {
                    for b in 0..r {
                        if b != j && m.entry(i, b).abs() > eps_prime {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok {
                    for a in 0..r {
                        if a != i && m.entry(a, j).abs() > eps_prime {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok {
                    from_here = Some(s);
                } else {
                    break;
                }
            }
            qual[i][j] = from_here;
        }
    }

    // greedy pick by earliest qualification, rows and columns distinct
    let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
    for i in 0..r {
        for j in 0..r {
            if let Some(s) = qual[i][j] {
                candidates.push((s, i, j));
            }
        }
    }
    candidates.sort();
    let mut row_used = vec![false; r];
    let mut col_used = vec![false; r];
    let mut ordering = Vec::new();
    let mut stop_times = Vec::new();
    for (s, i, j) in candidates {
        if row_used[i] || col_used[j] {
            continue;
        }
        row_used[i] = true;
        col_used[j] = true;
        ordering.push((i, j));
        stop_times.push(traj.times[s]);
    }
    let satisfied = ordering.len() == r;
    let mut violations = Vec::new();
    if !satisfied {
        for i in 0..r {
            if !row_used[i] {
                let best = (0..r)
                    .map(|j| {
                        traj.corr
                            .iter()
                            .fold(0.0f64, |m, c| m.max(c.entry(i, j).abs()))
                    })
                    .fold(0.0f64, f64::max);
                violations.push(format!(
                    "row {i} never claimed a pair; max |m| attained {best:.4}"
                ));
            }
        }
        for j in 0..r {
            if !col_used[j] {
                violations.push(format!("column {j} never claimed a pair"));
            }
        }
    }
    Ok(EliminationReport {
        ordering,
        stop_times,
        satisfied,
        violations,
        snapshots: len,
    })
}

/// Exact recovery: |m_ii| >= 1 - eps for every i.
pub fn exact_recovery(m: &CorrelationMatrix, eps: f64) -> bool {
    (0..m.r()).all(|i| m.entry(i, i).abs() >= 1.0 - eps)
}

/// Recovery of a permutation: sigma with |m_{sigma(i), i}| >= 1 - eps for
/// every column i. Each column's max row is checked for the threshold and
/// injectivity; absence is None.
pub fn permutation_recovery(m: &CorrelationMatrix, eps: f64) -> Option<Vec<usize>> {
    let r = m.r();
    let mut sigma = Vec::with_capacity(r);
    let mut used = vec![false; r];
    for j in 0..r {
        let mut best = (0usize, f64::NEG_INFINITY);
        for i in 0..r {
            let v = m.entry(i, j).abs();
            if v > best.1 {
                best = (i, v);
            }
        }
        if best.1 < 1.0 - eps || used[best.0] {
            return None;
        }
        used[best.0] = true;
        sigma.push(best.0);
    }
    Some(sigma)
}

/// Subspace error reported through both algebraic routes:
/// ||X X^T - V V^T||_F^2 / s^4 and 2 (r - Tr G). The two agree to 1e-9.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct SubspaceError {
    pub frob_sq: f64,
    pub trace_gap: f64,
}

pub fn subspace_error(x: &StiefelPoint, v: &StiefelPoint) -> Result<SubspaceError> {
    if x.scale() != v.scale() {
        return Err(Error::ConventionMismatch);
    }
    let s2 = x.scale_sq();
    let diff = x.data() * x.data().transpose() - v.data() * v.data().transpose();
    let frob_sq = diff.norm_squared() / (s2 * s2);
    let gram = overlap_gram(&correlation_matrix(v, x)?);
    let trace_gap = 2.0 * (x.r() as f64 - gram.trace());
    Ok(SubspaceError { frob_sq, trace_gap })
}

/// Thresholds of the initial-data conditions.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionParams {
    #[serde(default = "default_gamma0")]
    pub gamma0: f64,
    #[serde(default = "default_gamma1")]
    pub gamma1: f64,
    #[serde(default = "default_gamma2")]
    pub gamma2: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Supported noise-regularity level; only 1 is implemented.
    #[serde(default = "default_n_level")]
    pub n_level: usize,
}

fn default_gamma0() -> f64 {
    2.0
}
fn default_gamma1() -> f64 {
    3.0
}
fn default_gamma2() -> f64 {
    0.05
}
fn default_gamma() -> f64 {
    0.5
}
fn default_n_level() -> usize {
    1
}

impl Default for ConditionParams {
    fn default() -> Self {
        Self {
            gamma0: 2.0,
            gamma1: 3.0,
            gamma2: 0.05,
            gamma: 0.5,
            n_level: 1,
        }
    }
}

impl ConditionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma1 > self.gamma2 && self.gamma2 > 0.0) {
            return Err(Error::InvalidParameter(
                "need gamma1 > gamma2 > 0".into(),
            ));
        }
        if !(self.gamma1 > self.gamma && self.gamma > 0.0) {
            return Err(Error::InvalidParameter("need gamma1 > gamma > 0".into()));
        }
        if !(self.gamma0 > 0.0) {
            return Err(Error::InvalidParameter("need gamma0 > 0".into()));
        }
        Ok(())
    }
}

/// Outcome of the initial-scale band check. `pass` uses the signed band
/// gamma2/sqrt(N) <= m_ij < gamma1/sqrt(N); `pass_abs` applies the same band
/// to |m_ij|, the variant relevant when signs are handled by parity.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Condition1Report {
    pub pass: bool,
    pub pass_abs: bool,
    /// Entries violating the signed band, with their values.
    pub offending: Vec<(usize, usize, f64)>,
}

/// Initial-scale band check on the correlations of X against V.
pub fn check_condition1(
    x: &StiefelPoint,
    v: &StiefelPoint,
    params: &ConditionParams,
) -> Result<Condition1Report> {
    params.validate()?;
    let m = correlation_matrix(v, x)?;
    let sqrt_n = (x.n() as f64).sqrt();
    let lo = params.gamma2 / sqrt_n;
    let hi = params.gamma1 / sqrt_n;
    let mut pass = true;
    let mut pass_abs = true;
    let mut offending = Vec::new();
    for i in 0..m.r() {
        for j in 0..m.r() {
            let val = m.entry(i, j);
            if !(val >= lo && val < hi) {
                pass = false;
                offending.push((i, j, val));
            }
            let a = val.abs();
            if !(a >= lo && a < hi) {
                pass_abs = false;
            }
        }
    }
    Ok(Condition1Report {
        pass,
        pass_abs,
        offending,
    })
}

/// Outcome of the separation check on lambda_i lambda_j m_ij^{p-2} products.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Condition2Report {
    pub pass: bool,
    /// Smallest |ratio - 1| found over distinct quadruples.
    pub min_separation: f64,
    /// The quadruple attaining it, as ((i, j), (k, l)).
    pub argmin: Option<((usize, usize), (usize, usize))>,
}

/// Separation check: |lambda_i lambda_j m_ij^{p-2} / (lambda_k lambda_l
/// m_kl^{p-2}) - 1| > gamma / gamma1 for all quadruples with (i,j) != (k,l).
/// Identical quadruples are excluded (their ratio is identically 1). A zero
/// denominator counts as a condition failure, not a fault.
pub fn check_condition2(
    x: &StiefelPoint,
    v: &StiefelPoint,
    lambdas: &[f64],
    p: u32,
    params: &ConditionParams,
) -> Result<Condition2Report> {
    params.validate()?;
    if p < 3 {
        return Err(Error::InvalidRegime(format!(
            "the separation condition is defined for p >= 3, got p={p}"
        )));
    }
    let m = correlation_matrix(v, x)?;
    let r = m.r();
    let pm2 = p as i32 - 2;
    let products: Vec<f64> = (0..r * r)
        .map(|idx| {
            let (i, j) = (idx / r, idx % r);
            lambdas[i] * lambdas[j] * m.entry(i, j).powi(pm2)
        })
        .collect();
    let threshold = params.gamma / params.gamma1;
    let mut pass = true;
    let mut min_separation = f64::INFINITY;
    let mut argmin = None;
    for a in 0..r * r {
        for b in 0..r * r {
            if a == b {
                continue;
            }
            if products[b] == 0.0 {
                pass = false;
                min_separation = 0.0;
                argmin = Some(((a / r, a % r), (b / r, b % r)));
                continue;
            }
            let sep = (products[a] / products[b] - 1.0).abs();
            if sep < min_separation {
                min_separation = sep;
                argmin = Some(((a / r, a % r), (b / r, b % r)));
            }
            if sep <= threshold {
                pass = false;
            }
        }
    }
    Ok(Condition2Report {
        pass,
        min_separation,
        argmin,
    })
}

/// Outcome of the level-1 noise-generator regularity check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Condition0Report {
    pub pass: bool,
    /// max over entries of sqrt(N) |L0 m_ij|.
    pub max_scaled: f64,
}

/// Level-1 regularity of the noise generator: |L0 m_ij| <= gamma0 / sqrt(N)
/// for all i, j, with L0 m_ij = -(1/sqrt(M)) <grad_M H0, grad m_ij> (the
/// gradient-flow noise generator). Levels above 1 would require iterated
/// generators and are unsupported.
pub fn check_condition0_level1(
    x: &StiefelPoint,
    w: Option<&NoiseTensor>,
    model: &SpikedModel,
    m_samples: f64,
    gamma0: f64,
    level: usize,
) -> Result<Condition0Report> {
    if level != 1 {
        return Err(Error::UnsupportedLevel(level));
    }
    if !(gamma0 > 0.0) {
        return Err(Error::InvalidParameter("need gamma0 > 0".into()));
    }
    let sqrt_n = (x.n() as f64).sqrt();
    let max_scaled = match w {
        None => 0.0,
        Some(w) => {
            let gen = noise_generator_mij(x, w, model)? / m_samples.sqrt();
            gen.iter().fold(0.0f64, |m, v| m.max(v.abs())) * sqrt_n
        }
    };
    Ok(Condition0Report {
        pass: max_scaled <= gamma0,
        max_scaled,
    })
}
