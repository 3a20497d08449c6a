//! Deterministic low-dimensional systems: the r^2 correlation ODE, the
//! isotropic Riccati system on G, closed-form solutions, and escape-time
//! predictors.
//!
//! The beta*sqrt(M) prefactor of the stochastic generators is factored into
//! the time unit here, so population trajectories are parameter-free up to
//! the SNRs and the tensor order.

use nalgebra::DMatrix;

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::manifold::{sorted_eigenvalues, CorrelationMatrix};

/// State of the correlation ODE at one time.
#[derive(Debug, Clone)]
pub struct PopulationState {
    pub m: DMatrix<f64>,
    pub t: f64,
}

/// Population drift of the correlations:
/// dm_ij/dt = p l_i l_j m_ij^{p-1}
///            - (p/2) sum_{k,l} l_k m_il m_kj m_kl (l_j m_kj^{p-2} + l_l m_kl^{p-2}).
///
/// At r = 1 this reduces to p l^2 m^{p-1} (1 - m^2).
pub fn corr_rhs(m: &DMatrix<f64>, lambdas: &[f64], p: u32) -> DMatrix<f64> {
    let r = m.nrows();
    assert_eq!(m.ncols(), r);
    assert_eq!(lambdas.len(), r);
    assert!(p >= 2);
    let pf = p as f64;
    let pm1 = p as i32 - 1;
    let pm2 = p as i32 - 2;
    let mut out = DMatrix::zeros(r, r);
    for i in 0..r {
        for j in 0..r {
            let mut drift = pf * lambdas[i] * lambdas[j] * m[(i, j)].powi(pm1);
            let mut correction = 0.0;
            for k in 0..r {
                for l in 0..r {
                    correction += lambdas[k]
                        * m[(i, l)]
                        * m[(k, j)]
                        * m[(k, l)]
                        * (lambdas[j] * m[(k, j)].powi(pm2) + lambdas[l] * m[(k, l)].powi(pm2));
                }
            }
            drift -= 0.5 * pf * correction;
            out[(i, j)] = drift;
        }
    }
    out
}

/// Drift-only part of the population dynamics, dm_ij/dt = p l_i l_j m_ij^{p-1},
/// whose solutions are the closed forms checked by `closed_form_single`.
pub fn corr_rhs_drift(m: &DMatrix<f64>, lambdas: &[f64], p: u32) -> DMatrix<f64> {
    let r = m.nrows();
    let pf = p as f64;
    let pm1 = p as i32 - 1;
    DMatrix::from_fn(r, r, |i, j| pf * lambdas[i] * lambdas[j] * m[(i, j)].powi(pm1))
}

/// Which right-hand side `integrate_corr` uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrRhs {
    /// Full population dynamics with the manifold correction term.
    Full,
    /// Drift term only; blows up in finite time for p >= 3.
    DriftOnly,
}

/// Diagnostic attached to a truncated integration.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BlowupInfo {
    pub t: f64,
    pub max_abs_entry: f64,
}

/// Result of a population integration: the trajectory, and a blow-up
/// diagnostic when the integration halted early.
#[derive(Debug, Clone)]
pub struct PopulationRun {
    pub trajectory: Trajectory,
    pub blowup: Option<BlowupInfo>,
}

/// Entries along a valid trajectory stay in [-1, 1] up to integrator error;
/// beyond this the integration halts with a diagnostic.
const BLOWUP_LIMIT: f64 = 1.0 + 1e-6;

/// Integrate the correlation ODE with classic fixed-step RK4.
pub fn integrate_corr(
    m0: &DMatrix<f64>,
    lambdas: &[f64],
    p: u32,
    horizon: f64,
    dt: f64,
    rhs: CorrRhs,
    record_every: usize,
) -> Result<PopulationRun> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let steps = (horizon / dt).round() as usize;
    let stride = if record_every > 0 {
        record_every
    } else {
        (steps / 2000).max(1)
    };
    let f = |m: &DMatrix<f64>| match rhs {
        CorrRhs::Full => corr_rhs(m, lambdas, p),
        CorrRhs::DriftOnly => corr_rhs_drift(m, lambdas, p),
    };
    let mut trajectory = Trajectory::with_capacity(steps / stride + 2);
    trajectory.push(0.0, CorrelationMatrix::from_matrix(m0.clone()));
    let mut state = m0.clone();
    let mut blowup = None;
    for step in 1..=steps {
        let next = rk4_step(&state, dt, &f);
        let max_abs = next.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if !max_abs.is_finite() || max_abs > BLOWUP_LIMIT {
            blowup = Some(BlowupInfo {
                t: step as f64 * dt,
                max_abs_entry: max_abs,
            });
            break;
        }
        state = next;
        if step % stride == 0 || step == steps {
            trajectory.push(step as f64 * dt, CorrelationMatrix::from_matrix(state.clone()));
        }
    }
    trajectory.detect_crossings(&crate::dynamics::DEFAULT_THRESHOLDS);
    Ok(PopulationRun { trajectory, blowup })
}

fn rk4_step(y: &DMatrix<f64>, dt: f64, f: &impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> DMatrix<f64> {
    let k1 = f(y);
    let k2 = f(&(y + &k1 * (dt / 2.0)));
    let k3 = f(&(y + &k2 * (dt / 2.0)));
    let k4 = f(&(y + &k3 * dt));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Isotropic Riccati drift dG/dt = 4 lambda^2 G (I - G).
pub fn gram_rhs(g: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let r = g.nrows();
    let mut out = g.clone();
    out -= g * g;
    out *= 4.0 * lambda * lambda;
    debug_assert_eq!(out.ncols(), r);
    out
}

/// Integrate the Riccati system with RK4; returns (times, G snapshots).
pub fn integrate_gram(
    g0: &DMatrix<f64>,
    lambda: f64,
    horizon: f64,
    dt: f64,
    record_every: usize,
) -> Result<(Vec<f64>, Vec<DMatrix<f64>>)> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let steps = (horizon / dt).round() as usize;
    let stride = record_every.max(1);
    let f = |g: &DMatrix<f64>| gram_rhs(g, lambda);
    let mut times = vec![0.0];
    let mut grams = vec![g0.clone()];
    let mut state = g0.clone();
    for step in 1..=steps {
        state = rk4_step(&state, dt, &f);
        if step % stride == 0 || step == steps {
            times.push(step as f64 * dt);
            grams.push(state.clone());
        }
    }
    Ok((times, grams))
}

/// Closed-form solution of the drift-only scalar ODE dm/dt = c p m^{p-1}:
/// m(t) = m0 (1 - c p (p-2) m0^{p-2} t)^{-1/(p-2)} for p >= 3 and
/// m(t) = m0 exp(2 c t) for p = 2, where c is the product of the two SNRs.
pub fn closed_form_single(m0: f64, c: f64, p: u32, t: f64) -> Result<f64> {
    if !(m0 > 0.0) {
        return Err(Error::InvalidParameter(format!("need m0 > 0, got {m0}")));
    }
    if p == 2 {
        return Ok(m0 * (2.0 * c * t).exp());
    }
    let t_star = single_blowup_time(m0, c, p).expect("p >= 3 has a finite blow-up time");
    if t >= t_star {
        return Err(Error::BlowUp { t, t_star });
    }
    let pm2 = p as f64 - 2.0;
    Ok(m0 * (1.0 - c * p as f64 * pm2 * m0.powf(pm2) * t).powf(-1.0 / pm2))
}

/// Blow-up time t* = (c p (p-2) m0^{p-2})^{-1} of the drift-only ODE;
/// None for p = 2 (exponential growth, no blow-up).
pub fn single_blowup_time(m0: f64, c: f64, p: u32) -> Option<f64> {
    if p == 2 {
        return None;
    }
    let pm2 = p as f64 - 2.0;
    Some(1.0 / (c * p as f64 * pm2 * m0.powf(pm2)))
}

/// Escape-time regime, keyed by the tensor order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum EscapeRegime {
    P3plus,
    P2,
}

/// Bracketing prediction for the hitting time of a macroscopic threshold.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EscapeTimePrediction {
    pub t_lower: f64,
    pub t_upper: f64,
    pub regime: EscapeRegime,
}

/// Escape-time brackets for the correlation recursion.
///
/// For p >= 3 the hitting time of eps lies in
///   [1 - ((1 +- c0) gamma / (eps sqrt(N)))^{p-2}]
///     / [delta (1 +- c0)^{p-1} p l_i l_j gamma^{p-2}] * N^{(p-1)/2},
/// with the (1+c0) branch as lower and (1-c0) as upper bracket. For p = 2 the
/// brackets are log(eps sqrt(N) / ((1 +- c0) gamma)) over
/// log(1 + 2 delta (1 +- c0) l_i l_j / sqrt(N)).
pub fn escape_time_bounds(
    p: u32,
    c0: f64,
    delta: f64,
    lambda_prod: f64,
    gamma: f64,
    n: usize,
    eps: f64,
) -> Result<EscapeTimePrediction> {
    if !(0.0..1.0).contains(&c0) {
        return Err(Error::InvalidParameter(format!("need c0 in [0, 1), got {c0}")));
    }
    if !(delta > 0.0 && lambda_prod > 0.0 && gamma > 0.0 && eps > 0.0) {
        return Err(Error::InvalidParameter(
            "delta, lambda product, gamma, eps must be positive".into(),
        ));
    }
    let nf = n as f64;
    let target = eps * nf.sqrt();
    if target <= gamma {
        return Err(Error::OrderingError { target, gamma });
    }
    let (t_lower, t_upper, regime) = if p >= 3 {
        let pm2 = p as f64 - 2.0;
        let bound = |sign: f64| -> f64 {
            let c = 1.0 + sign * c0;
            let numer = 1.0 - (c * gamma / target).powf(pm2);
            let denom = delta * c.powi(p as i32 - 1) * p as f64 * lambda_prod * gamma.powf(pm2);
            numer / denom * nf.powf((p as f64 - 1.0) / 2.0)
        };
        (bound(1.0), bound(-1.0), EscapeRegime::P3plus)
    } else {
        let bound = |sign: f64| -> f64 {
            let c = 1.0 + sign * c0;
            (target / (c * gamma)).ln() / (1.0 + 2.0 * delta * c * lambda_prod / nf.sqrt()).ln()
        };
        (bound(1.0), bound(-1.0), EscapeRegime::P2)
    };
    debug_assert!(t_lower <= t_upper + 1e-12);
    Ok(EscapeTimePrediction {
        t_lower,
        t_upper,
        regime,
    })
}

/// Escape-time bracket computed by iterating the extremal comparison
/// recursions u_t = a +- b sum u_s^{p-1} exactly, with
/// a = (1 +- c0) gamma / sqrt(N) and b = (1 +- c0) delta p lambda_i lambda_j
/// / sqrt(N). Any sequence pinched between the two recursions hits eps inside
/// this bracket, with no continuous-limit approximation. Entries are None
/// when the recursion does not reach eps within `max_steps`.
pub fn escape_time_discrete(
    p: u32,
    c0: f64,
    delta: f64,
    lambda_prod: f64,
    gamma: f64,
    n: usize,
    eps: f64,
    max_steps: u64,
) -> Result<(Option<u64>, Option<u64>)> {
    if !(0.0..1.0).contains(&c0) {
        return Err(Error::InvalidParameter(format!("need c0 in [0, 1), got {c0}")));
    }
    let nf = n as f64;
    if eps * nf.sqrt() <= gamma {
        return Err(Error::OrderingError {
            target: eps * nf.sqrt(),
            gamma,
        });
    }
    let hit = |sign: f64| -> Option<u64> {
        let c = 1.0 + sign * c0;
        let a = c * gamma / nf.sqrt();
        let b = c * delta * p as f64 * lambda_prod / nf.sqrt();
        let mut u = a;
        let mut sum = 0.0;
        if u >= eps {
            return Some(0);
        }
        for t in 1..=max_steps {
            sum += u.powi(p as i32 - 1);
            u = a + b * sum;
            if u >= eps {
                return Some(t);
            }
        }
        None
    };
    Ok((hit(1.0), hit(-1.0)))
}

/// Continuous eigenvalue tracks along a trajectory of symmetric PSD matrices.
/// Each track continues to the nearest eigenvalue of the next snapshot
/// (greedy one-to-one matching); gaps below 1e-12 fall back to sorted order.
pub fn eigen_track(grams: &[DMatrix<f64>]) -> Vec<Vec<f64>> {
    if grams.is_empty() {
        return Vec::new();
    }
    let r = grams[0].nrows();
    let mut tracks: Vec<Vec<f64>> = vec![Vec::with_capacity(grams.len()); r];
    let first = sorted_eigenvalues(&grams[0]);
    for (i, track) in tracks.iter_mut().enumerate() {
        track.push(first[i]);
    }
    let mut prev = first;
    for g in &grams[1..] {
        let eigs = sorted_eigenvalues(g); // descending
        let assignment = match_nearest(&prev, &eigs);
        for (i, track) in tracks.iter_mut().enumerate() {
            track.push(eigs[assignment[i]]);
        }
        for (i, &a) in assignment.iter().enumerate() {
            prev[i] = eigs[a];
        }
    }
    tracks
}

/// Greedy one-to-one nearest matching: repeatedly pair the globally closest
/// (track, eigenvalue) couple. Ties below 1e-12 resolve by index order,
/// which for sorted inputs is the sorted fallback.
fn match_nearest(prev: &[f64], next: &[f64]) -> Vec<usize> {
    let r = prev.len();
    let mut assignment = vec![usize::MAX; r];
    let mut track_used = vec![false; r];
    let mut next_used = vec![false; r];
    for _ in 0..r {
        let mut best = (usize::MAX, usize::MAX, f64::INFINITY);
        for i in 0..r {
            if track_used[i] {
                continue;
            }
            for j in 0..r {
                if next_used[j] {
                    continue;
                }
                let d = (prev[i] - next[j]).abs();
                if d + 1e-12 < best.2 {
                    best = (i, j, d);
                }
            }
        }
        let (i, j, _) = best;
        assignment[i] = j;
        track_used[i] = true;
        next_used[j] = true;
    }
    assignment
}
