//! Comparison-inequality oracles: discrete Gronwall, Bihari-LaSalle and
//! logistic envelopes, their continuous counterparts, and the closed-form
//! Laplacian of the correlations.
//!
//! Discrete bounds evaluate at integer t only; continuous bounds at real t.
//! No interpolation is offered — the two regimes must not be blurred.

use crate::error::{Error, Result};
use crate::manifold::StiefelPoint;

/// Parameters of the discrete comparison lemmas: initial-value band
/// 0 < a1 <= a2, drift band 0 < b1 <= b2, order p, and (where applicable)
/// the contraction parameter c0.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct BoundParams {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
    pub p: u32,
    pub c0: Option<f64>,
}

impl BoundParams {
    pub fn new(a1: f64, a2: f64, b1: f64, b2: f64, p: u32) -> Result<Self> {
        let params = Self {
            a1,
            a2,
            b1,
            b2,
            p,
            c0: None,
        };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        if !(self.a1 > 0.0 && self.a1 <= self.a2 && self.b1 > 0.0 && self.b1 <= self.b2) {
            return Err(Error::InvalidParameter(
                "need 0 < a1 <= a2 and 0 < b1 <= b2".into(),
            ));
        }
        if let Some(c0) = self.c0 {
            if !(0.0..1.0).contains(&c0) {
                return Err(Error::InvalidParameter(format!(
                    "need c0 in [0, 1), got {c0}"
                )));
            }
        }
        Ok(())
    }
}

/// Envelope for sequences with a1 + b1 sum u_s <= u_t <= a2 + b2 sum u_s:
/// a1 (1 + b1)^t <= u_t <= a2 (1 + b2)^t.
pub fn discrete_gronwall_bounds(params: &BoundParams, t: u64) -> Result<(f64, f64)> {
    params.validate()?;
    let tf = t as f64;
    Ok((
        params.a1 * (1.0 + params.b1).powf(tf),
        params.a2 * (1.0 + params.b2).powf(tf),
    ))
}

/// Envelope for sequences with a1 + b1 sum u_s^{p-1} <= u_t <= a2 + b2 sum
/// u_s^{p-1}, p >= 3:
///   upper  a2 (1 - (p-2) b2 a2^{p-2} t)^{-1/(p-2)},
///   lower  a1 (1 - b1' a1^{p-2} t)^{-1/(p-2)},
/// where b1' = b1 for non-negative sequences (the default) and
/// b1' = b1 / (1 + b1 u_{t-1}^{p-2})^{p-1} with the caller-supplied previous
/// iterate; the corrected form accounts for the discrete scheme trailing the
/// continuous flow and is the one that contains exact recursions for all t.
/// The upper bound blows up at t* = ((p-2) b2 a2^{p-2})^{-1}.
pub fn discrete_bihari_bounds(
    params: &BoundParams,
    t: u64,
    u_prev: Option<f64>,
) -> Result<(f64, f64)> {
    params.validate()?;
    if params.p < 3 {
        return Err(Error::InvalidRegime(format!(
            "the Bihari-LaSalle envelope requires p >= 3, got p={}",
            params.p
        )));
    }
    let pm2 = params.p as f64 - 2.0;
    let tf = t as f64;
    let t_star = 1.0 / (pm2 * params.b2 * params.a2.powf(pm2));
    if tf >= t_star {
        return Err(Error::BlowUp { t: tf, t_star });
    }
    let upper = params.a2 * (1.0 - pm2 * params.b2 * params.a2.powf(pm2) * tf).powf(-1.0 / pm2);
    let b1_eff = match u_prev {
        None => params.b1,
        Some(u) => params.b1 / (1.0 + params.b1 * u.powf(pm2)).powf(params.p as f64 - 1.0),
    };
    let lower_arg = 1.0 - b1_eff * params.a1.powf(pm2) * tf;
    let lower = if lower_arg > 0.0 {
        params.a1 * lower_arg.powf(-1.0 / pm2)
    } else {
        f64::INFINITY
    };
    Ok((lower, upper))
}

/// Blow-up time of the upper Bihari envelope.
pub fn discrete_bihari_blowup(params: &BoundParams) -> Result<f64> {
    params.validate()?;
    if params.p < 3 {
        return Err(Error::InvalidRegime("no blow-up for p = 2".into()));
    }
    let pm2 = params.p as f64 - 2.0;
    Ok(1.0 / (pm2 * params.b2 * params.a2.powf(pm2)))
}

/// Envelope for [0,1]-valued sequences with
/// a1 + b1 sum u_s (1 - u_s) <= u_t <= a2 + b2 sum u_s (1 - u_s), valid while
/// u_t <= 1/2:
///   lower  (a1/(1-a1)) e^{(b1/(1+b1)) t} / (1 + e^{(b1/(1+b1)) t} a1/(1-a1)),
///   upper  (a2/(1-a2)) e^{b2 t}          / (1 + e^{b2 t} a2/(1-a2)).
pub fn discrete_logistic_bounds(params: &BoundParams, t: u64) -> Result<(f64, f64)> {
    params.validate()?;
    if !(params.a2 < 0.5) {
        return Err(Error::InvalidParameter(format!(
            "the logistic envelope needs a1, a2 in (0, 1/2), got a2 = {}",
            params.a2
        )));
    }
    let tf = t as f64;
    let lower = {
        let odds = params.a1 / (1.0 - params.a1);
        let growth = (params.b1 / (1.0 + params.b1) * tf).exp();
        odds * growth / (1.0 + growth * odds)
    };
    let upper = {
        let odds = params.a2 / (1.0 - params.a2);
        let growth = (params.b2 * tf).exp();
        odds * growth / (1.0 + growth * odds)
    };
    Ok((lower, upper))
}

/// First integer t at which the upper logistic envelope exceeds 1/2; the
/// envelope is only valid strictly before this ceiling.
pub fn discrete_logistic_validity_ceiling(params: &BoundParams) -> Result<u64> {
    params.validate()?;
    let mut t = 0u64;
    loop {
        let (_, upper) = discrete_logistic_bounds(params, t)?;
        if upper > 0.5 {
            return Ok(t);
        }
        t += 1;
        if t > 1_000_000_000 {
            return Err(Error::NonFinite("logistic validity ceiling"));
        }
    }
}

/// Lower solution of the continuous inequality f(t) >= a + int c f^gamma:
/// a (1 - (gamma-1) c a^{gamma-1} t)^{-1/(gamma-1)} for gamma > 1 and
/// a e^{ct} for gamma = 1.
pub fn continuous_bihari(a: f64, c: f64, gamma: f64, t: f64) -> Result<f64> {
    if !(a > 0.0 && c > 0.0 && gamma >= 1.0) {
        return Err(Error::InvalidParameter(
            "need a > 0, c > 0, gamma >= 1".into(),
        ));
    }
    if gamma == 1.0 {
        return Ok(a * (c * t).exp());
    }
    let t_star = blowup_time(a, c, gamma)?.expect("gamma > 1 has a finite blow-up time");
    if t >= t_star {
        return Err(Error::BlowUp { t, t_star });
    }
    let gm1 = gamma - 1.0;
    Ok(a * (1.0 - gm1 * c * a.powf(gm1) * t).powf(-1.0 / gm1))
}

/// Blow-up time t* = ((gamma-1) c a^{gamma-1})^{-1}; None for gamma = 1.
pub fn blowup_time(a: f64, c: f64, gamma: f64) -> Result<Option<f64>> {
    if !(a > 0.0 && c > 0.0 && gamma >= 1.0) {
        return Err(Error::InvalidParameter(
            "need a > 0, c > 0, gamma >= 1".into(),
        ));
    }
    if gamma == 1.0 {
        return Ok(None);
    }
    let gm1 = gamma - 1.0;
    Ok(Some(1.0 / (gm1 * c * a.powf(gm1))))
}

/// Which discrete envelope a sequence is checked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecursionKind {
    Gronwall,
    Bihari,
    Logistic,
}

/// Outcome of an envelope containment check.
#[derive(Debug, Clone)]
pub struct BoundsCheck {
    pub ok: bool,
    /// (index, value, lower, upper) of the first violation.
    pub first_violation: Option<(usize, f64, f64, f64)>,
    /// Number of sequence elements actually checked (the check stops at the
    /// envelope's blow-up or validity ceiling).
    pub checked: usize,
}

/// Verify that every element of a recursion trace lies inside the
/// corresponding envelope. The caller asserts that the sequence satisfies
/// the recursion inequalities; tolerance is exact (0.0) by default callers.
pub fn verify_recursion_bounds(
    sequence: &[f64],
    params: &BoundParams,
    kind: RecursionKind,
    tolerance: f64,
) -> Result<BoundsCheck> {
    params.validate()?;
    let mut checked = 0usize;
    for (t, &u) in sequence.iter().enumerate() {
        let bounds = match kind {
            RecursionKind::Gronwall => discrete_gronwall_bounds(params, t as u64)?,
            RecursionKind::Bihari => match discrete_bihari_bounds(
                params,
                t as u64,
                if t == 0 { None } else { Some(sequence[t - 1]) },
            ) {
                Ok(b) => b,
                Err(Error::BlowUp { .. }) => break,
                Err(e) => return Err(e),
            },
            RecursionKind::Logistic => {
                if u > 0.5 {
                    break;
                }
                discrete_logistic_bounds(params, t as u64)?
            }
        };
        // lower bounds with the u_{t-1} correction can exceed the exact
        // trajectory only through the caller's tolerance
        if u < bounds.0 - tolerance || u > bounds.1 + tolerance {
            return Ok(BoundsCheck {
                ok: false,
                first_violation: Some((t, u, bounds.0, bounds.1)),
                checked: t + 1,
            });
        }
        checked = t + 1;
    }
    Ok(BoundsCheck {
        ok: true,
        first_violation: None,
        checked,
    })
}

/// Closed-form Laplace-Beltrami of the linear function m_ij on the sqrt(N)
/// manifold: -((2N - r - 1) / (2N)) m_ij.
///
/// Linear functions feel only the mean-curvature term, and on the normalized
/// manifold the tangent-space partial trace is (N - (r+1)/2) I_r, so the
/// coefficient is (N - (r+1)/2)/N. At r = 1 this is the sphere value
/// (N-1)/N; the finite-difference oracle over an orthonormal tangent basis
/// pins the r >= 2 coefficient.
pub fn laplacian_mij(x: &StiefelPoint, i: usize, j: usize, v: &StiefelPoint) -> Result<f64> {
    if x.scale() != crate::manifold::Scale::SqrtN || v.scale() != crate::manifold::Scale::SqrtN {
        return Err(Error::ConventionMismatch);
    }
    let m = crate::manifold::correlation_matrix(v, x)?;
    let n = x.n() as f64;
    let r = x.r() as f64;
    Ok(-(2.0 * n - r - 1.0) / (2.0 * n) * m.entry(i, j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{
        polar_retract, project_tangent, sample_invariant, Scale, StiefelPoint, TangentVector,
    };
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::Rng as _;

    #[test]
    fn gronwall_values() {
        let p = BoundParams::new(1.0, 1.0, 1.0, 1.0, 2).unwrap();
        assert_eq!(discrete_gronwall_bounds(&p, 0).unwrap(), (1.0, 1.0));
        assert_eq!(discrete_gronwall_bounds(&p, 3).unwrap(), (8.0, 8.0));
        let p = BoundParams::new(0.5, 1.5, 0.1, 0.2, 2).unwrap();
        let (lo, hi) = discrete_gronwall_bounds(&p, 0).unwrap();
        assert_eq!((lo, hi), (0.5, 1.5));
    }

    #[test]
    fn bihari_values_and_blowup() {
        let p = BoundParams::new(1.0, 1.0, 1.0, 1.0, 3).unwrap();
        assert_eq!(discrete_bihari_bounds(&p, 0, None).unwrap(), (1.0, 1.0));
        // blow-up at t = 1: only t = 0 is defined on the integer grid
        assert_relative_eq!(discrete_bihari_blowup(&p).unwrap(), 1.0);
        assert!(matches!(
            discrete_bihari_bounds(&p, 1, None),
            Err(Error::BlowUp { .. })
        ));
    }

    #[test]
    fn logistic_endpoints() {
        let p = BoundParams::new(0.1, 0.3, 0.5, 0.7, 2).unwrap();
        let (lo, hi) = discrete_logistic_bounds(&p, 0).unwrap();
        assert_relative_eq!(lo, 0.1, epsilon = 1e-12);
        assert_relative_eq!(hi, 0.3, epsilon = 1e-12);
        // b = 0 is rejected by validation; near-zero b keeps bounds near the
        // endpoints
        let p = BoundParams::new(0.1, 0.3, 1e-15, 1e-15, 2).unwrap();
        let (lo, hi) = discrete_logistic_bounds(&p, 10).unwrap();
        assert_relative_eq!(lo, 0.1, epsilon = 1e-9);
        assert_relative_eq!(hi, 0.3, epsilon = 1e-9);
    }

    #[test]
    fn logistic_validity_ceiling() {
        let params = BoundParams::new(0.05, 0.1, 0.2, 0.3, 2).unwrap();
        let ceiling = discrete_logistic_validity_ceiling(&params).unwrap();
        let (_, below) = discrete_logistic_bounds(&params, ceiling - 1).unwrap();
        let (_, at) = discrete_logistic_bounds(&params, ceiling).unwrap();
        assert!(below <= 0.5 && at > 0.5, "{below} / {at} around t={ceiling}");
    }

    #[test]
    fn continuous_bihari_values() {
        // gamma = 1: exponential branch
        assert_relative_eq!(
            continuous_bihari(1.0, 1.0, 1.0, 1.0).unwrap(),
            std::f64::consts::E,
            epsilon = 1e-12
        );
        // gamma = 3, a = c = 1: t* = 1/2
        assert_relative_eq!(blowup_time(1.0, 1.0, 3.0).unwrap().unwrap(), 0.5);
        assert!(matches!(
            continuous_bihari(1.0, 1.0, 3.0, 0.6),
            Err(Error::BlowUp { .. })
        ));
        assert_eq!(blowup_time(1.0, 1.0, 1.0).unwrap(), None);
    }

    #[test]
    fn continuous_bihari_matches_ode() {
        // integrate f' = c f^gamma from a and compare at 0.9 t*
        let (a, c, gamma) = (0.7, 1.3, 2.5);
        let t_star = blowup_time(a, c, gamma).unwrap().unwrap();
        let t_end = 0.9 * t_star;
        let steps = 200_000usize;
        let dt = t_end / steps as f64;
        let mut f = a;
        for _ in 0..steps {
            // RK4 on the scalar ODE
            let k1 = c * f.powf(gamma);
            let k2 = c * (f + 0.5 * dt * k1).powf(gamma);
            let k3 = c * (f + 0.5 * dt * k2).powf(gamma);
            let k4 = c * (f + dt * k3).powf(gamma);
            f += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        let closed = continuous_bihari(a, c, gamma, t_end).unwrap();
        assert_relative_eq!(f, closed, max_relative = 1e-4);
    }

    #[test]
    fn recursion_simulation_gronwall() {
        let mut rng = crate::rng::stream_rng(1);
        for _ in 0..100 {
            let a1 = rng.gen_range(0.01..0.5);
            let a2 = a1 * rng.gen_range(1.0..2.0);
            let b1 = rng.gen_range(0.01..0.3);
            let b2 = b1 * rng.gen_range(1.0..2.0);
            let params = BoundParams::new(a1, a2, b1, b2, 2).unwrap();
            let a = rng.gen_range(a1..=a2);
            let b = rng.gen_range(b1..=b2);
            let mut seq = Vec::with_capacity(51);
            let mut sum = 0.0;
            for t in 0..=50u64 {
                let u = if t == 0 { a } else { a + b * sum };
                seq.push(u);
                sum += u;
            }
            let check =
                verify_recursion_bounds(&seq, &params, RecursionKind::Gronwall, 0.0).unwrap();
            assert!(check.ok, "violation: {:?}", check.first_violation);
        }
    }

    #[test]
    fn recursion_simulation_gronwall_exact_equality() {
        // a1 = a2, b1 = b2: the recursion meets the bounds with equality
        let params = BoundParams::new(0.2, 0.2, 0.1, 0.1, 2).unwrap();
        let mut seq = Vec::new();
        let mut sum = 0.0;
        for t in 0..=30u64 {
            let u = if t == 0 { 0.2 } else { 0.2 + 0.1 * sum };
            seq.push(u);
            sum += u;
        }
        for (t, &u) in seq.iter().enumerate() {
            let (lo, hi) = discrete_gronwall_bounds(&params, t as u64).unwrap();
            assert_relative_eq!(u, lo, max_relative = 1e-12);
            assert_relative_eq!(u, hi, max_relative = 1e-12);
        }
        // a perturbed sequence is caught; equality cases need the stated
        // 1e-12 tolerance against rounding in the closed forms
        let mut bad = seq.clone();
        bad[10] *= 1.5;
        let check =
            verify_recursion_bounds(&bad, &params, RecursionKind::Gronwall, 1e-12).unwrap();
        assert!(!check.ok);
        assert_eq!(check.first_violation.unwrap().0, 10);
    }

    #[test]
    fn recursion_simulation_bihari() {
        let mut rng = crate::rng::stream_rng(2);
        for trial in 0..100 {
            let p = if trial % 2 == 0 { 3 } else { 4 };
            let a1 = rng.gen_range(0.01..0.2);
            let a2 = a1 * rng.gen_range(1.0..1.5);
            let b1 = rng.gen_range(0.001..0.05);
            let b2 = b1 * rng.gen_range(1.0..1.5);
            let params = BoundParams::new(a1, a2, b1, b2, p).unwrap();
            let a = rng.gen_range(a1..=a2);
            let b = rng.gen_range(b1..=b2);
            let mut seq = Vec::new();
            let mut sum = 0.0;
            for t in 0..=50u64 {
                let u: f64 = if t == 0 { a } else { a + b * sum };
                if !u.is_finite() || u > 1e12 {
                    break;
                }
                seq.push(u);
                sum += u.powi(p as i32 - 1);
            }
            let check =
                verify_recursion_bounds(&seq, &params, RecursionKind::Bihari, 0.0).unwrap();
            assert!(check.ok, "violation: {:?}", check.first_violation);
        }
    }

    #[test]
    fn recursion_simulation_logistic() {
        let mut rng = crate::rng::stream_rng(3);
        for _ in 0..100 {
            let a1 = rng.gen_range(0.01..0.2);
            let a2 = a1 * rng.gen_range(1.0..1.5);
            let b1 = rng.gen_range(0.01..0.3);
            let b2 = b1 * rng.gen_range(1.0..1.5);
            let params = BoundParams::new(a1, a2, b1, b2, 2).unwrap();
            let a = rng.gen_range(a1..=a2);
            let b = rng.gen_range(b1..=b2);
            let mut seq = Vec::new();
            let mut sum = 0.0;
            for t in 0..=100u64 {
                let u: f64 = if t == 0 { a } else { a + b * sum };
                if u > 1.0 {
                    break;
                }
                seq.push(u);
                sum += u * (1.0 - u);
            }
            let check =
                verify_recursion_bounds(&seq, &params, RecursionKind::Logistic, 0.0).unwrap();
            assert!(check.ok, "violation: {:?}", check.first_violation);
        }
    }

    #[test]
    fn bihari_upper_bound_diverges_near_blowup() {
        let params = BoundParams::new(0.1, 0.1, 0.05, 0.05, 3).unwrap();
        let t_star = discrete_bihari_blowup(&params).unwrap(); // 200
        let just_below = t_star.ceil() as u64 - 1;
        let (_, hi_early) = discrete_bihari_bounds(&params, 1, None).unwrap();
        let (_, hi_late) = discrete_bihari_bounds(&params, just_below, None).unwrap();
        assert!(hi_late > 1e2 * hi_early, "{hi_early} -> {hi_late}");
        assert!(matches!(
            discrete_bihari_bounds(&params, t_star.ceil() as u64, None),
            Err(Error::BlowUp { .. })
        ));
    }

    #[test]
    fn envelopes_monotone_and_nested() {
        let base = BoundParams::new(0.1, 0.2, 0.05, 0.1, 3).unwrap();
        let wider = BoundParams::new(0.08, 0.25, 0.04, 0.15, 3).unwrap();
        for t in 0..10u64 {
            let (lo, hi) = discrete_bihari_bounds(&base, t, None).unwrap();
            let (lo_w, hi_w) = discrete_bihari_bounds(&wider, t, None).unwrap();
            assert!(lo_w <= lo && hi_w >= hi, "nesting fails at t={t}");
        }
        // increasing the drift coefficient widens the envelope upward
        let pushed = BoundParams::new(0.1, 0.2, 0.05, 0.2, 3).unwrap();
        for t in 0..10u64 {
            let (_, hi) = discrete_bihari_bounds(&base, t, None).unwrap();
            let (_, hi_p) = discrete_bihari_bounds(&pushed, t, None).unwrap();
            assert!(hi_p >= hi);
        }
    }

    #[test]
    fn laplacian_closed_form_small_n() {
        // N = 2, r = 1: Delta m = -(1/2) m
        let x = StiefelPoint::new(
            DMatrix::from_row_slice(2, 1, &[2f64.sqrt(), 0.0]),
            Scale::SqrtN,
        )
        .unwrap();
        let v = StiefelPoint::new(
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            Scale::SqrtN,
        )
        .unwrap();
        let m01 = 2f64.sqrt() / 2.0;
        let lap = laplacian_mij(&x, 0, 0, &v).unwrap();
        assert_relative_eq!(lap, -0.5 * m01, epsilon = 1e-12);
        // m = 0 gives 0
        let v_orth = StiefelPoint::new(
            DMatrix::from_row_slice(2, 1, &[0.0, 2f64.sqrt()]),
            Scale::SqrtN,
        )
        .unwrap();
        assert_eq!(laplacian_mij(&x, 0, 0, &v_orth).unwrap(), 0.0);
    }

    #[test]
    fn laplacian_matches_tangent_basis_finite_differences() {
        // sum of second derivatives along an orthonormal tangent basis,
        // using polar-retraction curves (a second-order retraction)
        let n = 6;
        let r = 2;
        let mut rng = crate::rng::stream_rng(4);
        let x = sample_invariant(n, r, Scale::SqrtN, &mut rng).unwrap();
        let v = sample_invariant(n, r, Scale::SqrtN, &mut rng).unwrap();

        // orthonormal tangent basis by Gram-Schmidt over projected canonical
        // basis matrices
        let mut basis: Vec<DMatrix<f64>> = Vec::new();
        for a in 0..n {
            for b in 0..r {
                let mut e = DMatrix::zeros(n, r);
                e[(a, b)] = 1.0;
                let mut u = project_tangent(&x, &e).unwrap().data().clone();
                for q in &basis {
                    let c = q.dot(&u);
                    u -= q * c;
                }
                let norm = u.norm();
                if norm > 1e-8 {
                    basis.push(u / norm);
                }
            }
        }
        let expected_dim = n * r - r * (r + 1) / 2;
        assert_eq!(basis.len(), expected_dim);

        let m_of = |pt: &StiefelPoint, i: usize, j: usize| {
            crate::manifold::correlation_matrix(&v, pt).unwrap().entry(i, j)
        };
        let h = 1e-4;
        for i in 0..r {
            for j in 0..r {
                let mut fd = 0.0;
                let center = m_of(&x, i, j);
                for u in &basis {
                    let tv = TangentVector::new(&x, u.clone()).unwrap();
                    let plus = polar_retract(&x, &tv.scaled(h)).unwrap();
                    let minus = polar_retract(&x, &tv.scaled(-h)).unwrap();
                    fd += (m_of(&plus, i, j) - 2.0 * center + m_of(&minus, i, j)) / (h * h);
                }
                let closed = laplacian_mij(&x, i, j, &v).unwrap();
                assert_relative_eq!(fd, closed, max_relative = 1e-3, epsilon = 1e-6);
            }
        }
    }
}
