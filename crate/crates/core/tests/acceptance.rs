//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Exits 0 so the rest of the suite keeps running; set `SOBOMAP_ACCEPTANCE_STRICT=1`
//! to turn any FAIL into a non-zero exit.

use rand::{Rng, SeedableRng};
use sobomap_core::diffeo::{Pipeline, Stage, Wiggle};
use sobomap_core::energy::{grad_energy, Domain, EnergyOptions};
use sobomap_core::fields::{compose_with_diffeo, verify_class, ClassOptions, ClassTag, Field, MapField, RadialField, RigidField, Seed, SignField, VortexField};
use sobomap_core::grid::{enumerate_skeleton, Cubication};
use sobomap_core::project::{mollifier_estimate_check, projection_pipeline, PipelineOptions};
use sobomap_core::shrink::{a_mu_measure, shrink_energy_check, uncross_and_shrink_pipeline, ShrinkGeometry, ShrinkPipelineOptions};
use sobomap_core::targets::Target;
use sobomap_core::uncross::{build_phi_planes, build_phi_top_lines, crossing_report, distortion_constant, model_retraction_g, Well};
use std::f64::consts::PI;
use std::sync::Arc;
use std::time::{Duration, Instant};

type Outcome = Result<(bool, String), String>;

fn decreasing(d: &[(f64, f64)], k: f64) -> bool {
    d.windows(2).all(|w| w[1].0 < w[0].0 + k * (w[0].1 + w[1].1))
}

fn vortex_energy() -> Outcome {
    let u = RadialField::new(2);
    let mut worst = 0.0f64;
    for p in [1.25, 1.5, 1.75] {
        let exact = 2.0 * PI / (2.0 - p);
        for opts in [EnergyOptions::grid(32), EnergyOptions::mc(200_000, 1)] {
            let r = grad_energy(&u, 1, p, &Domain::unit_ball(2), &opts).map_err(|e| e.to_string())?;
            worst = worst.max((r.value / exact - 1.0).abs());
        }
    }
    Ok((worst <= 0.02, format!("worst relative error {worst:.4}")))
}

fn scaling_slope() -> Outcome {
    let g = ShrinkGeometry::new(3, vec![0, 1], vec![vec![0.0, 0.0]], 0.2, 0.5, 0.25).map_err(|e| e.to_string())?;
    let v: Field = Arc::new(VortexField::new(3, [0, 1], vec![0.0, 0.0, 0.0], 1).map_err(|e| e.to_string())?);
    let mut ok = true;
    let mut detail = Vec::new();
    for p in [1.25, 1.5] {
        let r = shrink_energy_check(v.clone(), &g, &[0.25, 0.125, 0.0625], p, &EnergyOptions::mc(40_000, 3)).map_err(|e| e.to_string())?;
        ok &= (r.slope - (2.0 - p)).abs() <= 0.1;
        detail.push(format!("p={p}: slope {:.3}", r.slope));
    }
    Ok((ok, detail.join(", ")))
}

fn projection_convergence() -> Outcome {
    let u: Field = Arc::new(RadialField::new(2));
    let etas = [0.2, 0.1, 0.05];
    let opts = PipelineOptions { n_shifts: 32, energy: EnergyOptions::mc(100_000, 11), mollify: None };
    let run = |s: f64, p: f64| -> Result<Vec<(f64, f64)>, String> {
        let steps = projection_pipeline(u.clone(), Target::Sphere(1), s, p, &etas, &Domain::cube(2), &opts).map_err(|e| e.to_string())?;
        Ok(steps.iter().map(|st| (st.distance.distance, st.distance.stderr)).collect())
    };
    let a = run(1.0, 1.5)?;
    let b = run(0.5, 2.5)?;
    let ratio = a[2].0 / a[0].0;
    let ok = decreasing(&a, 2.0) && ratio <= 0.25 && decreasing(&b, 3.0);
    let fmt = |d: &[(f64, f64)]| d.iter().map(|x| format!("{:.3}", x.0)).collect::<Vec<_>>().join(" > ");
    Ok((ok, format!("s=1: {} (final/initial {ratio:.3}); s=0.5: {}", fmt(&a), fmt(&b))))
}

fn mollifier_stability() -> Outcome {
    let fields: Vec<(&str, Field)> = vec![
        ("radial", Arc::new(RadialField::new(2))),
        ("vortex2", Arc::new(VortexField::new(2, [0, 1], vec![0.0, 0.0], 2).map_err(|e| e.to_string())?)),
        ("sign", Arc::new(SignField::new(2, 0))),
    ];
    let pts = |eta: f64| -> Vec<Vec<f64>> { [(1.5, 0.3), (2.0, 1.9), (2.5, 4.0), (0.8, 1.2)].iter().map(|&(k, th): &(f64, f64)| vec![k * eta * th.cos(), k * eta * th.sin()]).collect() };
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, f) in fields {
        let r = mollifier_estimate_check(f, 0.5, 1.5, &[0.2, 0.1, 0.05], &Domain::cube(2), pts, 20_000, 5).map_err(|e| e.to_string())?;
        ok &= r.pass;
        detail.push(format!("{name}: spread {:.3}/{:.3}", r.c_spread, r.c_prime_spread));
    }
    Ok((ok, detail.join(", ")))
}

fn line_uncrossing() -> Outcome {
    let c = Cubication::new(3, 2).map_err(|e| e.to_string())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut ok = true;
    let mut detail = Vec::new();
    for mu in [0.2, 0.1, 0.05] {
        let phi = build_phi_top_lines(&c, mu).map_err(|e| e.to_string())?;
        let (rep, _) = crossing_report(&phi, &c, 1).map_err(|e| e.to_string())?;
        let well = Well::new(&c, 1, mu).map_err(|e| e.to_string())?;
        let (mut outside, mut moved, mut bad_det) = (0, 0, 0);
        let mut checked_det = 0;
        while outside < 10_000 || checked_det < 10_000 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if checked_det < 10_000 {
                checked_det += 1;
                if phi.jacobian(&x).determinant().partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                    bad_det += 1;
                }
            }
            if outside < 10_000 && !well.contains(&x) {
                outside += 1;
                if phi.apply(&x) != x {
                    moved += 1;
                }
            }
        }
        ok &= rep.before > 0 && rep.after == 0 && moved == 0 && bad_det == 0;
        detail.push(format!("mu={mu}: crossings {}->{}, moved {moved}, det<=0 {bad_det}", rep.before, rep.after));
    }
    Ok((ok, detail.join("; ")))
}

fn plane_uncrossing() -> Outcome {
    let c = Cubication::new(3, 2).map_err(|e| e.to_string())?;
    let pp = build_phi_planes(&c, 0.2).map_err(|e| e.to_string())?;
    let (r1, _) = crossing_report(&pp.pass1, &c, 0).map_err(|e| e.to_string())?;
    let (r2, _) = crossing_report(&pp.full, &c, 0).map_err(|e| e.to_string())?;
    let vh = r1.by_kind.iter().find(|k| k.kind == "vertical-horizontal").map(|k| k.after).unwrap_or(usize::MAX);
    Ok((vh == 0 && r2.after == 0, format!("pass 1: {vh} vertical-horizontal left; pass 2: {} crossings left (of {})", r2.after, r2.before)))
}

fn full_pipeline() -> Outcome {
    let c = Cubication::new(3, 2).map_err(|e| e.to_string())?;
    let u: Field = Arc::new(RigidField::new(c, 1, Target::Sphere(1), Seed::Vortex { degree: 1 }).map_err(|e| e.to_string())?);
    let opts = ShrinkPipelineOptions { energy: EnergyOptions::mc(40_000, 42), class: ClassOptions::default(), strict: false };
    let steps = uncross_and_shrink_pipeline(u, &c, 1, 1.0, 1.5, &[0.4, 0.2, 0.1, 0.05], &opts).map_err(|e| e.to_string())?;
    let d: Vec<(f64, f64)> = steps.iter().map(|s| (s.distance.distance, s.distance.stderr)).collect();
    let ratio = d[d.len() - 1].0 / d[0].0;
    let classes: Vec<bool> = steps.iter().map(|s| s.class.pass).collect();
    let ok = decreasing(&d, 2.0) && ratio <= 0.25 && classes.iter().all(|&b| b);
    let ds = d.iter().map(|x| format!("{:.2}", x.0)).collect::<Vec<_>>().join(" > ");
    Ok((ok, format!("distances {ds} (final/initial {ratio:.3}); uncr class per mu {classes:?}")))
}

fn measure_law() -> Outcome {
    let c = Cubication::new(3, 2).map_err(|e| e.to_string())?;
    let mut ratios = Vec::new();
    for mu in [0.4, 0.2, 0.1, 0.05] {
        ratios.push(a_mu_measure(&c, 1, mu).map_err(|e| e.to_string())? / (mu * c.eta_f64()).powi(2));
    }
    let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
    Ok((hi / lo <= 2.0 * (1.0 + 1e-12), format!("ratios {ratios:.2?}, spread {:.3}", hi / lo)))
}

fn topological_counts() -> Outcome {
    let g = model_retraction_g();
    let comps = g.set.components(1e-9);
    let torus = Target::Torus.sigma_set().components(1e-9);
    let c = Cubication::unit_cube(3);
    let edges = enumerate_skeleton(&c, 1).map_err(|e| e.to_string())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for e in &edges {
        let (lo, hi) = e.bounds::<f64>();
        for _ in 0..200 {
            let x: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| if a == b { *a } else { rng.gen_range(*a..=*b) }).collect();
            let y = g.eval(&x).map_err(|e| e.to_string())?;
            worst = worst.max(y.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    Ok((comps == 5 && torus == 2 && worst <= 1e-9, format!("S components {comps}, torus sigma components {torus}, edge displacement {worst:.1e}")))
}

fn class_stability() -> Outcome {
    let c = Cubication::new(3, 2).map_err(|e| e.to_string())?;
    let u: Field = Arc::new(RigidField::new(c, 1, Target::Sphere(1), Seed::Vortex { degree: 1 }).map_err(|e| e.to_string())?);
    let cu = verify_class(u.as_ref(), ClassTag::Cros, ClassOptions::default()).map_err(|e| e.to_string())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
    let mut ok = cu.pass;
    let mut detail = vec![format!("C(u) {:.2}", cu.c1)];
    for k in 0..5u64 {
        let a = rng.gen_range(0.05..0.25);
        let ph: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        let mut stages = vec![Stage::new("wiggle", vec![Arc::new(Wiggle::new(3, a, ph).map_err(|e| e.to_string())?)]).map_err(|e| e.to_string())?];
        if k % 2 == 1 {
            stages.extend(build_phi_top_lines(&c, rng.gen_range(0.05..0.4)).map_err(|e| e.to_string())?.stages);
        }
        let phi = Arc::new(Pipeline::new(3, stages).map_err(|e| e.to_string())?);
        let v = compose_with_diffeo(u.clone(), phi.clone()).map_err(|e| e.to_string())?;
        let cphi = distortion_constant(&phi, v.singular_set(), u.singular_set(), 20_000, k);
        let cv = verify_class(&v, ClassTag::Cros, ClassOptions { seed: k, ..Default::default() }).map_err(|e| e.to_string())?;
        let bound = 4.0 * cu.c1 * cphi;
        ok &= cv.pass && cv.c1 <= bound;
        detail.push(format!("#{k}: {:.1} <= {:.1}", cv.c1, bound));
    }
    Ok((ok, detail.join(", ")))
}

type Criterion = (&'static str, fn() -> Outcome, Duration);

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("1 vortex energy oracle", vortex_energy, Duration::from_secs(30)),
        ("2 shrink scaling slope", scaling_slope, Duration::from_secs(120)),
        ("3 projection-method convergence", projection_convergence, Duration::from_secs(600)),
        ("4 mollifier-estimate stability", mollifier_stability, Duration::from_secs(300)),
        ("5 line uncrossing", line_uncrossing, Duration::from_secs(120)),
        ("6 plane uncrossing in two passes", plane_uncrossing, Duration::from_secs(180)),
        ("7 uncross-and-shrink convergence", full_pipeline, Duration::from_secs(900)),
        ("8 measure law", measure_law, Duration::from_secs(60)),
        ("9 topological counts", topological_counts, Duration::from_secs(10)),
        ("10 class stability", class_stability, Duration::from_secs(180)),
    ];
    let mut passed = 0;
    for (name, f, budget) in &criteria {
        let t = Instant::now();
        let out = f();
        let el = t.elapsed();
        let (ok, detail) = match out {
            Ok((ok, d)) => (ok && el <= *budget, d),
            Err(e) => (false, format!("error: {e}")),
        };
        passed += ok as usize;
        println!("{} criterion {name}: {detail} [{:.1}s of {}s]", if ok { "PASS" } else { "FAIL" }, el.as_secs_f64(), budget.as_secs());
    }
    println!("acceptance: {passed}/{} criteria passed", criteria.len());
    if passed < criteria.len() && std::env::var("SOBOMAP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
