use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::DMatrix;
use proptest::prelude::*;

use hr4bp::archive::{Archive, FamilyRecord, MemberRecord};
use hr4bp::bifurcation::{singular_spectrum, STRUCTURAL_ZERO_TOL};
use hr4bp::continuation::{Provenance, Termination};
use hr4bp::dynamics::{hr4bp_field, mirror_xy, mirror_xz, symmetry_map, State, Symmetry, SystemParams, MU_EM};
use hr4bp::melnikov::{melnikov_zeros, MelnikovBasis};
use hr4bp::pipeline::parse_period;

fn state() -> impl Strategy<Value = State> {
    (prop::array::uniform3(-1.5f64..1.5), prop::array::uniform3(-0.5f64..0.5))
        .prop_map(|(r, v)| State::new(r[0], r[1], r[2], v[0], v[1], v[2]))
        // Keep clear of both primaries.
        .prop_filter("near a primary", |x| {
            let d1 = ((x[0] + MU_EM).powi(2) + x[1].powi(2) + x[2].powi(2)).sqrt();
            let d2 = ((x[0] - 1.0 + MU_EM).powi(2) + x[1].powi(2) + x[2].powi(2)).sqrt();
            d1 > 0.05 && d2 > 0.05
        })
}

fn symmetry() -> impl Strategy<Value = Symmetry> {
    prop_oneof![Just(Symmetry::S1), Just(Symmetry::S2)]
}

fn close(a: &State, b: &State) -> bool {
    (a - b).norm() <= 1e-12 * (1.0 + a.norm())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn symmetry_maps_are_involutions(x in state(), tau in -10.0f64..10.0, which in symmetry(), k in -3i64..4) {
        let (y, t) = symmetry_map(&x, tau, which, k);
        let (z, back) = symmetry_map(&y, t, which, k);
        prop_assert_eq!(z, x);
        prop_assert!((back - tau).abs() <= 1e-12 * (1.0 + tau.abs()));
    }

    #[test]
    fn field_is_reversible_under_both_symmetries(
        x in state(), tau in 0.0f64..PI, m in 0.0f64..0.15, which in symmetry(), k in -2i64..3
    ) {
        let p = SystemParams::new(m, MU_EM).unwrap();
        let (y, t) = symmetry_map(&x, tau, which, k);
        let lhs = hr4bp_field(&y, &p, t).unwrap();
        let rhs = -mirror_xz(&hr4bp_field(&x, &p, tau).unwrap());
        prop_assert!(close(&lhs, &rhs), "{lhs} vs {rhs}");
    }

    #[test]
    fn field_commutes_with_the_plane_mirror(x in state(), tau in 0.0f64..PI, m in 0.0f64..0.15) {
        let p = SystemParams::new(m, MU_EM).unwrap();
        let lhs = hr4bp_field(&mirror_xy(&x), &p, tau).unwrap();
        let rhs = mirror_xy(&hr4bp_field(&x, &p, tau).unwrap());
        prop_assert!(close(&lhs, &rhs));
    }

    #[test]
    fn field_has_period_pi_in_time(x in state(), tau in 0.0f64..PI, m in 0.0f64..0.15) {
        let p = SystemParams::new(m, MU_EM).unwrap();
        let a = hr4bp_field(&x, &p, tau).unwrap();
        let b = hr4bp_field(&x, &p, tau + PI).unwrap();
        prop_assert!((a - b).norm() <= 1e-11 * (1.0 + a.norm()));
    }

    #[test]
    fn padded_spectrum_has_a_structural_zero(entries in prop::collection::vec(-10.0f64..10.0, 42)) {
        let db = DMatrix::from_row_slice(6, 7, &entries);
        let s = singular_spectrum(&db);
        prop_assert!(s.structural_zero <= STRUCTURAL_ZERO_TOL * s.sigma[0]);
        prop_assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert_eq!(s.sigma_alpha, s.sigma[5]);
        prop_assert_eq!(s.sigma_beta, s.sigma[4]);
        // The kept right singular vectors are unit and orthogonal.
        let dot: f64 = s.v_alpha.iter().zip(&s.v_beta).map(|(a, b)| a * b).sum();
        let na: f64 = s.v_alpha.iter().map(|a| a * a).sum();
        prop_assert!(dot.abs() <= 1e-10 && (na - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn analytic_zeros_are_a_quarter_period_apart(
        m0 in -5.0f64..5.0, m1 in -5.0f64..5.0, quarters in 1u32..9
    ) {
        prop_assume!(m0.abs().max(m1.abs()) > 1e-3);
        let t_star = quarters as f64 * FRAC_PI_2;
        let basis = MelnikovBasis::from_values(m0, m1, t_star, 1e-10);
        let zeros = melnikov_zeros(&basis).unwrap();
        prop_assert_eq!(zeros.len(), quarters as usize);
        prop_assert!(zeros.iter().all(|z| (0.0..t_star).contains(z)));
        for w in zeros.windows(2) {
            prop_assert!((w[1] - w[0] - FRAC_PI_2).abs() <= 1e-12);
        }
        let scale = m0.abs().max(m1.abs());
        for z in &zeros {
            prop_assert!(basis.reconstruct(*z, 0.0).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn rational_multiples_of_pi_parse(p in 1u32..40, q in 1u32..40) {
        let v = parse_period(&format!("{p}pi/{q}")).unwrap();
        prop_assert_eq!(v, p as f64 * PI / q as f64);
        prop_assert_eq!(parse_period(&format!("{p}π")).unwrap(), p as f64 * PI);
    }

    #[test]
    fn plain_periods_parse_exactly(t in 1e-3f64..1e3) {
        prop_assert_eq!(parse_period(&format!("{t:e}")).unwrap(), t);
        let negative = format!("-{t}");
        prop_assert!(parse_period(&negative).is_err());
    }

    #[test]
    fn archive_json_round_trips_bit_for_bit(
        mu in 1e-3f64..0.5,
        rows in prop::collection::vec((0.0f64..0.2, prop::array::uniform6(-2.0f64..2.0), 0.0f64..1e-10), 1..6),
        tau0 in prop_oneof![Just(0.0), Just(FRAC_PI_2)],
    ) {
        let mut archive = Archive::new(mu);
        archive.families.push(FamilyRecord {
            id: "s@pi/point".into(),
            schema_version: archive.schema_version,
            provenance: Provenance::Seed { tag: "s@pi".into() },
            mu,
            b: 1,
            tau0,
            members: rows
                .iter()
                .map(|(m, x0, r)| MemberRecord {
                    m: *m,
                    x0: *x0,
                    residual: *r,
                    sigma_alpha: r.sqrt(),
                    sigma_beta: 1.0 / (1.0 + m),
                    tangent: Some([*m; 7]),
                })
                .collect(),
            termination: Termination::MaxM,
        });
        let text = archive.to_json().unwrap();
        let back = Archive::from_json(&text).unwrap();
        prop_assert_eq!(&back, &archive);
        prop_assert_eq!(back.to_json().unwrap(), text);
    }
}
