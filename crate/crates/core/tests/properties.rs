use ipslab::coercivity::{pencil_min, time_threshold, HypothesisSpace};
use ipslab::density::{density_from_samples, l1_distance, Axes, Estimator};
use ipslab::dynamics::{build_frame, energy_full, hamiltonian};
use ipslab::potentials::Potential;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn matrix(n: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| v[i * n + j])
}

/// A symmetric `G` and a well-conditioned SPD `M`.
fn pencil(n: usize, a: &[f64], b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let a = matrix(n, a);
    let b = matrix(n, b);
    let g = (&a + a.transpose()) * 0.5;
    let m = &b * b.transpose() + DMatrix::identity(n, n);
    (g, m)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frame_factorizes_a(n in 2usize..=10, d in 1usize..=3) {
        let f = build_frame(n, d).unwrap();
        prop_assert!((&f.s * f.s.transpose() - &f.a).amax() <= 1e-12);
        let e = f.a_spectrum();
        prop_assert!((e[e.len() - 1] - n as f64).abs() < 1e-10);
        let smallest = if n == 2 { 2.0 } else { 1.0 };
        prop_assert!((e[0] - smallest).abs() < 1e-10);
    }

    #[test]
    fn y_coordinates_round_trip(r in proptest::collection::vec(-5.0f64..5.0, 6)) {
        let f = build_frame(4, 2).unwrap();
        let back = f.y_to_relative(&f.relative_to_y(&r));
        for (a, b) in back.iter().zip(&r) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_matches_hamiltonian_and_ignores_translation(
        x in proptest::collection::vec(-3.0f64..3.0, 8),
        shift in proptest::collection::vec(-10.0f64..10.0, 2),
    ) {
        let p = Potential::power_shifted(1.0, 1.5, 0.9).unwrap();
        let f = build_frame(4, 2).unwrap();
        let j = energy_full(&p, 4, 2, &x);
        let h = hamiltonian(&f, &p, &f.full_to_relative(&x));
        prop_assert!((j - h).abs() <= 1e-12 * j.abs().max(1.0));
        let moved: Vec<f64> = x.iter().enumerate().map(|(k, v)| v + shift[k % 2]).collect();
        prop_assert!((energy_full(&p, 4, 2, &moved) - j).abs() <= 1e-10 * j.abs().max(1.0));
    }

    #[test]
    fn pencil_minimum_is_basis_invariant(
        a in proptest::collection::vec(-1.0f64..1.0, 16),
        b in proptest::collection::vec(-1.0f64..1.0, 16),
        t in proptest::collection::vec(-0.3f64..0.3, 16),
    ) {
        let (g, m) = pencil(4, &a, &b);
        let change = DMatrix::identity(4, 4) + matrix(4, &t);
        let g2 = change.transpose() * &g * &change;
        let m2 = change.transpose() * &m * &change;
        let (c1, _) = pencil_min(&g, &m).unwrap();
        let (c2, _) = pencil_min(&g2, &m2).unwrap();
        prop_assert!((c1 - c2).abs() <= 1e-8 * c1.abs().max(1.0));
    }

    #[test]
    fn form_is_bounded_below_on_the_m_sphere(
        a in proptest::collection::vec(-1.0f64..1.0, 9),
        b in proptest::collection::vec(-1.0f64..1.0, 9),
        h in proptest::collection::vec(-1.0f64..1.0, 3),
    ) {
        prop_assume!(h.iter().any(|v| v.abs() > 1e-3));
        let (g, m) = pencil(3, &a, &b);
        let (c, w) = pencil_min(&g, &m).unwrap();
        let h = nalgebra::DVector::from_vec(h);
        let norm = h.dot(&(&m * &h));
        prop_assert!(h.dot(&(&g * &h)) / norm >= c - 1e-10);
        prop_assert!((w.dot(&(&m * &w)) - 1.0).abs() < 1e-10);
        prop_assert!((w.dot(&(&g * &w)) - c).abs() < 1e-10);
    }

    #[test]
    fn hats_partition_unity(n in 2usize..12, r_max in 0.5f64..20.0, s in 0.0f64..1.0) {
        let hs = HypothesisSpace::hats(n, r_max).unwrap();
        let total: f64 = hs.eval(s * r_max).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_grows_with_s_h(s in 0.01f64..50.0, ds in 0.01f64..5.0, c in 0.1f64..5.0, kappa in 0.2f64..8.0) {
        let (tc1, t1) = time_threshold(s, c, 3, kappa).unwrap();
        let (tc2, t2) = time_threshold(s + ds, c, 3, kappa).unwrap();
        prop_assert!(tc2 > tc1);
        prop_assert!(t2 > t1);
    }
}

fn samples(seed: u64, shift: f64) -> Vec<f64> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut r = ipslab::rng::stream(seed, 0, ipslab::rng::Purpose::Sampling);
    (0..4000).map(|_| shift + r.sample::<f64, _>(StandardNormal)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn l1_is_a_metric_on_grids(s1 in 0u64..100, s2 in 0u64..100, s3 in 0u64..100, shift in -2.0f64..2.0) {
        let axes = Axes::cube(1, 3.0, 12);
        let est = Estimator::Histogram;
        let p = density_from_samples(&samples(s1, 0.0), &axes, est).unwrap();
        let q = density_from_samples(&samples(s2, shift), &axes, est).unwrap();
        let r = density_from_samples(&samples(s3, -shift), &axes, est).unwrap();
        let pq = l1_distance(&p, &q).unwrap();
        prop_assert!((pq - l1_distance(&q, &p).unwrap()).abs() < 1e-12);
        prop_assert!(pq >= 0.0);
        prop_assert!(l1_distance(&p, &r).unwrap() <= pq + l1_distance(&q, &r).unwrap() + 1e-12);
        prop_assert!((p.mass() + p.deficit - 1.0).abs() < 1e-12);
    }
}
