use proptest::prelude::*;
use sobomap_core::diffeo::{Pipeline, Stage, Wiggle};
use sobomap_core::fields::{compose_with_diffeo, Field, MapField, RigidField, Seed};
use sobomap_core::grid::Cubication;
use sobomap_core::sets::{Piece, SingularSet};
use sobomap_core::shrink::{select_tau, shrink_map_rect, ShrinkGeometry};
use sobomap_core::targets::Target;
use sobomap_core::uncross::{build_phi_top_lines, Well};
use std::sync::Arc;

fn point3() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.999f64..0.999, 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn set_distance_matches_brute_force(
        segs in prop::collection::vec((point3(), point3()), 1..40),
        pts in prop::collection::vec(point3(), 1..20),
    ) {
        let pieces: Vec<Piece> = segs.into_iter().map(|(a, b)| Piece::segment(a, b)).collect();
        let set = SingularSet::new(3, pieces.clone());
        for x in &pts {
            let brute = pieces.iter().map(|p| p.dist(x)).fold(f64::INFINITY, f64::min);
            prop_assert!((set.dist(x) - brute).abs() <= 1e-12, "{} vs {}", set.dist(x), brute);
        }
    }

    #[test]
    fn top_push_is_identity_outside_the_well(mu in 0.02f64..0.45, pts in prop::collection::vec(point3(), 50)) {
        let c = Cubication::new(3, 2).unwrap();
        let phi = build_phi_top_lines(&c, mu).unwrap();
        let well = Well::new(&c, 1, mu).unwrap();
        for x in &pts {
            if !well.contains(x) {
                prop_assert_eq!(phi.apply(x), x.clone());
            }
            if !phi.in_support(x) {
                prop_assert_eq!(phi.apply(x), x.clone());
            }
        }
    }

    #[test]
    fn top_push_preserves_orientation(mu in 0.02f64..0.45, pts in prop::collection::vec(point3(), 50)) {
        let c = Cubication::new(3, 2).unwrap();
        let phi = build_phi_top_lines(&c, mu).unwrap();
        for x in &pts {
            let det = phi.jacobian(x).determinant();
            prop_assert!(det > 0.0, "det {det} at {x:?}");
        }
    }

    #[test]
    fn shrink_is_identity_outside_the_outer_region(mu in 0.05f64..0.45, tau in 0.01f64..0.25, pts in prop::collection::vec(point3(), 50)) {
        let c = Cubication::new(3, 2).unwrap();
        let u: Field = Arc::new(RigidField::new(c, 1, Target::Sphere(1), Seed::Vortex { degree: 1 }).unwrap());
        let g = ShrinkGeometry::vertical_columns(&c, mu, tau).unwrap();
        let sh = shrink_map_rect(u.clone(), &g).unwrap();
        let outer = g.region(2.0);
        for x in &pts {
            if !outer.contains(x) {
                prop_assert_eq!(sh.eval(x).unwrap(), u.eval(x).unwrap());
            }
        }
    }

    #[test]
    fn selected_tau_satisfies_the_energy_inequality(inner in 1e-6f64..1e6, outer in 1e-6f64..1e6, p in 1.05f64..1.95) {
        let tau = select_tau(inner, outer, p, 2);
        prop_assert!(tau > 0.0 && tau <= 0.25);
        if tau > 1e-15 {
            prop_assert!(tau.powf(2.0 - p) * inner <= outer * (1.0 + 1e-9));
        }
    }

    #[test]
    fn wiggle_round_trips(a in -0.3f64..0.3, ph in prop::collection::vec(0.0f64..std::f64::consts::TAU, 3), x in point3()) {
        let w = Wiggle::new(3, a, ph).unwrap();
        let phi = Pipeline::new(3, vec![Stage::new("w", vec![Arc::new(w)]).unwrap()]).unwrap();
        let y = phi.apply(&x);
        let back = phi.inverse(&y).unwrap();
        for (p, q) in back.iter().zip(&x) {
            prop_assert!((p - q).abs() < 1e-9);
        }
        prop_assert!(phi.jacobian(&x).determinant() > 0.0);
    }
}

#[test]
fn composed_field_agrees_with_manual_composition() {
    let c = Cubication::new(3, 2).unwrap();
    let u: Field = Arc::new(RigidField::new(c, 1, Target::Sphere(1), Seed::Vortex { degree: 1 }).unwrap());
    let phi = Arc::new(build_phi_top_lines(&c, 0.2).unwrap());
    let v = compose_with_diffeo(u.clone(), phi.clone()).unwrap();
    for x in [[0.1, 0.2, 0.3], [0.45, -0.55, 0.9], [-0.3, 0.7, -0.2]] {
        assert_eq!(v.eval(&x).unwrap(), u.eval(&phi.apply(&x)).unwrap());
    }
}
