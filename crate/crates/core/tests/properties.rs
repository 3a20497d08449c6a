//! Property tests for the structural invariants of the geometry, detectors,
//! and comparison bounds.

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng as _;

use stpca_core::analysis::{greedy_max_selection, init_matrix_i0};
use stpca_core::bounds::{discrete_gronwall_bounds, BoundParams};
use stpca_core::manifold::{
    correlation_matrix, overlap_gram, polar_retract, project_tangent, random_tangent,
    sample_invariant, tangency_deviation, CorrelationMatrix, Scale,
};
use stpca_core::rng::stream_rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Retraction of any tangent step lands on the manifold; projection of
    /// any ambient matrix is tangent.
    #[test]
    fn retraction_and_projection_invariants(
        seed in 0u64..1_000,
        n in 3usize..12,
        r in 1usize..4,
        norm in 0.01f64..2.0,
        scale_sqrtn in any::<bool>(),
    ) {
        prop_assume!(n >= r);
        let scale = if scale_sqrtn { Scale::SqrtN } else { Scale::Unit };
        let mut rng = stream_rng(seed);
        let x = sample_invariant(n, r, scale, &mut rng).unwrap();
        let u = random_tangent(&x, norm * x.scale_sq().sqrt(), &mut rng);
        prop_assert!(tangency_deviation(&x, u.data()) < 1e-9);
        let y = polar_retract(&x, &u).unwrap();
        prop_assert!(y.constraint_deviation() < 1e-10);
    }

    /// Correlation entries of two frames on the same convention are bounded
    /// by 1 in absolute value, and the overlap Gram eigenvalues lie in [0,1].
    #[test]
    fn correlation_and_gram_bounds(seed in 0u64..1_000, n in 2usize..14, r in 1usize..4) {
        prop_assume!(n >= r);
        let mut rng = stream_rng(seed);
        let v = sample_invariant(n, r, Scale::Unit, &mut rng).unwrap();
        let x = sample_invariant(n, r, Scale::Unit, &mut rng).unwrap();
        let m = correlation_matrix(&v, &x).unwrap();
        prop_assert!(m.max_abs() <= 1.0 + 1e-10);
        let g = overlap_gram(&m);
        for &e in g.eigenvalues() {
            prop_assert!(e >= -1e-10 && e <= 1.0 + 1e-10);
        }
        // eigenvalues are sorted non-increasing
        for w in g.eigenvalues().windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
    }

    /// The projector is self-adjoint in the Frobenius inner product.
    #[test]
    fn projector_self_adjoint(seed in 0u64..1_000) {
        let mut rng = stream_rng(seed);
        let x = sample_invariant(10, 3, Scale::Unit, &mut rng).unwrap();
        let a = DMatrix::from_fn(10, 3, |_, _| rng.gen_range(-1.0..1.0f64));
        let b = DMatrix::from_fn(10, 3, |_, _| rng.gen_range(-1.0..1.0f64));
        let pa = project_tangent(&x, &a).unwrap();
        let pb = project_tangent(&x, &b).unwrap();
        prop_assert!((pa.data().dot(&b) - a.dot(pb.data())).abs() < 1e-10);
    }

    /// Greedy selection is invariant under positive rescaling, and the
    /// composition with the initialization matrix is invariant under global
    /// rescaling of the SNRs.
    #[test]
    fn greedy_rescaling_invariance(
        seed in 0u64..1_000,
        scale in 0.01f64..100.0,
        p in 2u32..5,
    ) {
        let mut rng = stream_rng(seed);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0f64));
        prop_assert_eq!(
            greedy_max_selection(&a).pairs,
            greedy_max_selection(&(&a * scale)).pairs
        );

        let m0 = CorrelationMatrix::from_matrix(DMatrix::from_fn(3, 3, |_, _| {
            rng.gen_range(-0.3..0.3f64)
        }));
        let lambdas = [3.0, 2.0, 1.0];
        let scaled: Vec<f64> = lambdas.iter().map(|l| l * scale).collect();
        let i0 = init_matrix_i0(&m0, &lambdas, p);
        let i0_scaled = init_matrix_i0(&m0, &scaled, p);
        prop_assert_eq!(
            greedy_max_selection(&i0).pairs,
            greedy_max_selection(&i0_scaled).pairs
        );
    }

    /// Gronwall envelopes contain per-step-varying compliant recursions.
    #[test]
    fn gronwall_contains_varying_recursions(
        seed in 0u64..1_000,
        a1 in 0.01f64..0.4,
        spread_a in 1.0f64..2.0,
        b1 in 0.01f64..0.2,
        spread_b in 1.0f64..2.0,
    ) {
        let a2 = a1 * spread_a;
        let b2 = b1 * spread_b;
        let params = BoundParams::new(a1, a2, b1, b2, 2).unwrap();
        let mut rng = stream_rng(seed);
        let mut sum = 0.0;
        for t in 0..=40u64 {
            // per-step coefficients anywhere inside the bands
            let a = rng.gen_range(a1..=a2);
            let b = rng.gen_range(b1..=b2);
            let u = if t == 0 { a } else { a + b * sum };
            let (lo, hi) = discrete_gronwall_bounds(&params, t).unwrap();
            prop_assert!(u >= lo - 1e-12 && u <= hi + 1e-12, "t={} u={} [{}, {}]", t, u, lo, hi);
            sum += u;
        }
    }
}
