use rand::{Rng, SeedableRng};
use sobomap_core::energy::EnergyOptions;
use sobomap_core::error::Error;
use sobomap_core::fields::{ClassOptions, Field, MapField, RigidField, Seed};
use sobomap_core::grid::Cubication;
use sobomap_core::shrink::{uncross_and_shrink_pipeline, ShrinkGeometry, ShrinkPipelineOptions};
use sobomap_core::targets::Target;
use std::sync::Arc;

fn vortex(c: &Cubication) -> Field {
    Arc::new(RigidField::new(*c, 1, Target::Sphere(1), Seed::Vortex { degree: 1 }).unwrap())
}

fn opts(strict: bool) -> ShrinkPipelineOptions {
    ShrinkPipelineOptions { energy: EnergyOptions::mc(4000, 1), class: ClassOptions { per_band: 200, ..Default::default() }, strict }
}

#[test]
fn shrunk_map_agrees_with_u_away_from_the_columns() {
    let c = Cubication::new(3, 2).unwrap();
    let u = vortex(&c);
    let steps = uncross_and_shrink_pipeline(u.clone(), &c, 1, 1.0, 1.5, &[0.2], &opts(false)).unwrap();
    let st = &steps[0];
    assert!(st.tau > 0.0 && st.tau <= 0.25);
    assert_eq!(st.field.singular_set().crossing_count(), 0);
    assert!(st.distance.distance.is_finite() && st.distance.distance > 0.0);
    let outer = ShrinkGeometry::vertical_columns(&c, 0.2, st.tau).unwrap().region(2.0);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    while checked < 2000 {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if outer.contains(&x) {
            continue;
        }
        if let (Ok(a), Ok(b)) = (st.field.eval(&x), u.eval(&x)) {
            assert_eq!(a, b, "at {x:?}");
            checked += 1;
        }
    }
}

#[test]
fn large_p_skips_gradient_energies() {
    let c = Cubication::new(3, 2).unwrap();
    let steps = uncross_and_shrink_pipeline(vortex(&c), &c, 1, 0.5, 3.0, &[0.2], &opts(false)).unwrap();
    assert_eq!(steps[0].inner, None);
    assert_eq!(steps[0].tau, 0.25);
}

#[test]
fn pipeline_rejects_bad_configurations() {
    let c = Cubication::new(3, 2).unwrap();
    let u = vortex(&c);
    assert!(matches!(uncross_and_shrink_pipeline(u.clone(), &c, 1, 1.0, 2.0, &[0.2], &opts(false)), Err(Error::Domain(_))));
    assert!(matches!(uncross_and_shrink_pipeline(u.clone(), &c, 0, 1.0, 0.5, &[0.2], &opts(false)), Err(Error::Unsupported(_))));
    assert!(matches!(uncross_and_shrink_pipeline(u, &c, 1, 1.0, 1.5, &[0.6], &opts(false)), Err(Error::Domain(_))));
}

#[test]
fn strict_mode_reports_the_failing_bands() {
    let c = Cubication::new(3, 2).unwrap();
    match uncross_and_shrink_pipeline(vortex(&c), &c, 1, 1.0, 1.5, &[0.1], &opts(true)) {
        Ok(steps) => assert!(steps[0].class.pass),
        Err(Error::Classification(msg)) => assert!(msg.contains("band sups"), "{msg}"),
        Err(e) => panic!("unexpected {e}"),
    }
}
