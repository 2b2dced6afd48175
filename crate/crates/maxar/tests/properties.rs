use std::collections::BTreeSet;

use proptest::prelude::*;

use maxar::brown_resnick::exponent_v_spatial;
use maxar::diagnostics::{all_pairs, empirical_crosscorr, fmadogram_theta};
use maxar::gev::{from_frechet, to_frechet, GevParams};
use maxar::grid::{build_mask, read_field, write_field, Scale, SpaceTimeField, SpatialGrid};
use maxar::inference::{spacetime_pl, spacetime_term_count, PsiEpsilon};
use maxar::model::{exponent_v_st, extremal_coeff, ModelParams, StPair};
use maxar::rng::{frechet, substream};
use maxar::scoring::crps;
use maxar::Error;

fn params() -> impl Strategy<Value = ModelParams> {
    (0.3f64..4.0, 0.05f64..1.0, -1.5f64..1.5, -1.5f64..1.5, 0.01f64..0.99)
        .prop_map(|(k, h, t1, t2, a)| ModelParams::new(k, h, [t1, t2], a).unwrap())
}

fn frechet_field(m1: usize, m2: usize, t_len: usize, seed: u64) -> SpaceTimeField {
    let g = SpatialGrid::new(0.5, m1, m2, [1.0, -2.0]).unwrap();
    let mut rng = substream(seed, &[]);
    let v = (0..m1 * m2 * t_len).map(|_| frechet(&mut rng)).collect();
    SpaceTimeField::new(g, t_len, v, Scale::Frechet).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn field_csv_round_trip_is_bit_exact(m1 in 2usize..5, m2 in 1usize..5, t in 1usize..6, seed in any::<u64>()) {
        let f = frechet_field(m1, m2, t, seed);
        let mut buf = Vec::new();
        write_field(&f, &mut buf).unwrap();
        let back = read_field(&buf[..], Scale::Frechet).unwrap();
        prop_assert_eq!(back.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        f.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back.grid, f.grid);
    }

    #[test]
    fn half_mask_and_its_negation_tile_the_disk(r in 1.0f64..6.0, mesh in 0.1f64..2.0) {
        let half = build_mask(mesh, r, 1, true).unwrap();
        let full = build_mask(mesh, r, 1, false).unwrap();
        let mut tiled: BTreeSet<(i64, i64)> = half.offsets.iter().cloned().collect();
        let n_half = tiled.len();
        tiled.extend(half.offsets.iter().map(|&(a, b)| (-a, -b)));
        prop_assert_eq!(tiled.len(), 2 * n_half);
        tiled.insert((0, 0));
        let disk: BTreeSet<(i64, i64)> = full.offsets.iter().cloned().collect();
        prop_assert_eq!(tiled, disk);
    }

    #[test]
    fn frechet_transform_is_increasing_and_invertible(
        mu in -5.0f64..5.0, sigma in 0.1f64..3.0, xi in -0.45f64..0.45, q1 in 0.001f64..0.999, q2 in 0.001f64..0.999,
    ) {
        let g = GevParams::new(mu, sigma, xi).unwrap();
        let (x1, x2) = (g.quantile(q1.min(q2)), g.quantile(q1.max(q2)));
        let (z1, z2) = (to_frechet(x1, &g).unwrap(), to_frechet(x2, &g).unwrap());
        if x1 < x2 {
            prop_assert!(z1 < z2);
        }
        prop_assert!((from_frechet(z1, &g) - x1).abs() <= 1e-10 * x1.abs().max(1.0));
    }

    #[test]
    fn exponent_measure_has_frechet_margins(z1 in 0.05f64..20.0, g in 0.0f64..8.0, p in params(), u in 0usize..4, h1 in -3.0f64..3.0) {
        let v = exponent_v_spatial(z1, 1e10, g).v;
        prop_assert!((v - 1.0 / z1).abs() < 1e-8);
        let v = exponent_v_st(StPair::new([h1, 0.5], u), z1, 1e10, &p).v;
        prop_assert!((v - 1.0 / z1).abs() < 1e-8);
    }

    #[test]
    fn extremal_coefficient_bounds(p in params(), u in 0usize..6, h1 in -4.0f64..4.0, h2 in -4.0f64..4.0) {
        let theta = extremal_coeff(StPair::new([h1, h2], u), &p);
        prop_assert!((1.0 - 1e-12..=2.0 + 1e-12).contains(&theta));
        prop_assert!(theta >= 2.0 - p.a.powi(u as i32) - 1e-12);
        let uf = u as f64;
        let shifted = extremal_coeff(StPair::new([h1 + uf * p.tau[0], h2 + uf * p.tau[1]], u), &p);
        prop_assert!(shifted >= extremal_coeff(StPair::new([h1, h2], 0), &p) - 1e-12);
    }

    #[test]
    fn projection_lands_in_the_admissible_set(t1 in -3.0f64..3.0, t2 in -3.0f64..3.0, r in 1.0f64..3.0, p in 1usize..3) {
        let mask = build_mask(0.5, r, p, false).unwrap();
        let space = PsiEpsilon::new(PsiEpsilon::default_eps(0.5, p), &mask).unwrap();
        let (t, depth) = space.project_tau([t1, t2]);
        prop_assert!(space.contains_tau(t));
        prop_assert_eq!(depth == 0.0, space.contains_tau([t1, t2]));
    }

    #[test]
    fn likelihood_refuses_excluded_advection(c in 0usize..5, dx in -1.0f64..1.0, dy in -1.0f64..1.0) {
        let f = frechet_field(4, 4, 6, 1);
        let mask = build_mask(0.5, 1.0, 1, false).unwrap();
        let space = PsiEpsilon::new(0.05, &mask).unwrap();
        let centre = space.centers[c % space.centers.len()];
        let tau = [centre[0] + 0.04 * dx / 2f64.sqrt(), centre[1] + 0.04 * dy / 2f64.sqrt()];
        let psi = ModelParams::new(1.0, 0.5, tau, 0.5).unwrap();
        let refused = matches!(spacetime_pl(&f, &mask, &psi, &space), Err(Error::OutsideParameterSpace(_)));
        prop_assert!(refused);
    }

    #[test]
    fn term_count_matches_brute_force(m1 in 2usize..7, m2 in 2usize..7, t_len in 2usize..6, r in 1.0f64..3.0, p in 1usize..3) {
        let f = frechet_field(m1, m2, t_len, 2);
        let mask = build_mask(0.5, r, p, false).unwrap();
        let space = PsiEpsilon::new(0.02, &mask).unwrap();
        // τ far from every centre
        let psi = ModelParams::new(1.0, 0.5, [0.123, 0.0371], 0.5).unwrap();
        prop_assume!(space.contains(&psi));
        let mut brute = 0usize;
        for &(a, b) in &mask.offsets {
            for i1 in 0..m1 as i64 {
                for i2 in 0..m2 as i64 {
                    let (j1, j2) = (i1 + a, i2 + b);
                    if j1 >= 0 && j2 >= 0 && j1 < m1 as i64 && j2 < m2 as i64 {
                        brute += (1..=p).map(|u| t_len.saturating_sub(u)).sum::<usize>();
                    }
                }
            }
        }
        prop_assert_eq!(spacetime_term_count(&f.grid, &mask, t_len), brute);
        prop_assert_eq!(spacetime_pl(&f, &mask, &psi, &space).unwrap().terms, brute);
    }

    #[test]
    fn crps_is_nonnegative_and_zero_only_at_a_point_mass(
        ens in proptest::collection::vec(-10.0f64..10.0, 1..40), y in -12.0f64..12.0,
    ) {
        let s = crps(&ens, y);
        prop_assert!(s >= 0.0);
        prop_assert_eq!(crps(&vec![y; ens.len()], y), 0.0);
        if ens.iter().any(|x| (x - y).abs() > 1e-6) {
            prop_assert!(s > 0.0);
        }
    }

    #[test]
    fn crosscorr_ignores_log_location(c in 0.01f64..100.0, u in 0usize..3) {
        let f = frechet_field(4, 4, 30, 3);
        let shifted = f.map(Scale::Frechet, |z| z * c).unwrap();
        let a = empirical_crosscorr(&f, (1, 0), u).unwrap();
        let b = empirical_crosscorr(&shifted, (1, 0), u).unwrap();
        prop_assert!((a.mean - b.mean).abs() < 1e-9);
    }
}

#[test]
fn madogram_estimates_are_clipped_to_one_two() {
    let f = frechet_field(5, 5, 40, 4);
    for e in fmadogram_theta(&f, &all_pairs(25)).unwrap() {
        assert!((1.0..=2.0).contains(&e.theta));
    }
}

#[test]
fn extremal_coefficient_tends_to_two_along_an_escaping_sequence() {
    let p = ModelParams::new(1.0, 0.5, [0.4, -0.2], 0.8).unwrap();
    let mut last = 0.0;
    for n in 1..=60usize {
        let h = [n as f64, 0.5 * n as f64];
        last = extremal_coeff(StPair::new(h, n), &p);
    }
    assert!(2.0 - last < 1e-3, "gap {}", 2.0 - last);
}

#[test]
fn parallel_and_sequential_likelihoods_agree() {
    let f = frechet_field(8, 8, 30, 5);
    let mask = build_mask(0.5, 2.0, 2, false).unwrap();
    let space = PsiEpsilon::new(0.02, &mask).unwrap();
    let psi = ModelParams::new(1.2, 0.4, [0.31, -0.17], 0.6).unwrap();
    let run = |n: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| spacetime_pl(&f, &mask, &psi, &space).unwrap().value)
    };
    let one = run(1);
    let many = run(4);
    assert!((one - many).abs() <= 1e-9 * one.abs());
}
