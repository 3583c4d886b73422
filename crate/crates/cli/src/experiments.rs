//! One function per experiment. Each writes its artifacts into `out` and reports whether its checks held.

use crate::config::{ExperimentConfig, SchemaError};
use anyhow::{Context, Result};
use serde_json::{json, Value};
use sobomap_core::diffeo::Pipeline;
use sobomap_core::energy::{gagliardo_seminorm_p, grad_energy, lp_norm_p, Domain, EnergyOptions};
use sobomap_core::fields::{compose_with_diffeo, verify_class, ClassOptions, ClassTag, Field, RadialField, RigidField, Seed, SignField, VortexField};
use sobomap_core::grid::{enumerate_skeleton, Cubication};
use sobomap_core::io::{csv_string, CsvRow, ObjWriter};
use sobomap_core::project::{projection_pipeline, PipelineOptions};
use sobomap_core::shrink::{uncross_and_shrink_pipeline, ShrinkPipelineOptions};
use sobomap_core::targets::Target;
use sobomap_core::uncross::{build_phi_planes, build_phi_top_lines, crossing_report, model_retraction_g, planes_pullback_obj};
use std::path::Path;
use std::sync::Arc;

pub struct Outcome {
    pub pass: bool,
    pub summary: Value,
}

fn write(out: &Path, name: &str, contents: &str) -> Result<()> {
    let path = out.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn row(cfg: &ExperimentConfig, id: &str, quantity: String, value: f64, stderr: f64) -> CsvRow {
    CsvRow {
        experiment_id: id.into(),
        quantity,
        s: cfg.s,
        p: cfg.p,
        sigma: cfg.s - cfg.s.floor(),
        value,
        stderr,
        samples: cfg.samples as u64,
        seed: cfg.seed,
    }
}

/// Each value is below its predecessor up to `k` combined standard errors.
fn decreasing(d: &[(f64, f64)], k: f64) -> bool {
    d.windows(2).all(|w| w[1].0 < w[0].0 + k * (w[0].1 + w[1].1))
}

fn cubication(cfg: &ExperimentConfig) -> Result<Cubication> {
    Cubication::from_eta_f64(cfg.m, cfg.eta[0]).map_err(|e| SchemaError::new("eta[0]", &e.to_string()).into())
}

fn target(cfg: &ExperimentConfig) -> Result<Target> {
    Target::parse(&cfg.target).map_err(|e| SchemaError::new("target", &e.to_string()).into())
}

fn rigid(cfg: &ExperimentConfig) -> Result<Field> {
    let seed = if cfg.l == 0 { Seed::Checker } else { Seed::Vortex { degree: 1 } };
    Ok(Arc::new(RigidField::new(cubication(cfg)?, cfg.l, target(cfg)?, seed)?))
}

fn named_field(cfg: &ExperimentConfig) -> Result<Field> {
    let m = cfg.m;
    Ok(match cfg.field.as_str() {
        "radial" => Arc::new(RadialField::new(m)),
        "vortex" => {
            if m < 2 {
                return Err(SchemaError::new("m", "the vortex field needs m >= 2").into());
            }
            Arc::new(VortexField::new(m, [0, 1], vec![0.0; m], 1)?)
        }
        "sign" => Arc::new(SignField::new(m, 0)),
        _ => rigid(cfg)?,
    })
}

pub fn project(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let t = target(cfg)?;
    if t != Target::Sphere(cfg.m - 1) {
        return Err(SchemaError::new("target", &format!("the radial map x/|x| on Q^{} takes values in sphere:{}", cfg.m, cfg.m - 1)).into());
    }
    let u: Field = Arc::new(RadialField::new(cfg.m));
    let opts = PipelineOptions { n_shifts: cfg.shifts, energy: EnergyOptions::mc(cfg.samples, cfg.seed), mollify: None };
    let steps = projection_pipeline(u, t, cfg.s, cfg.p, &cfg.eta, &Domain::cube(cfg.m), &opts)?;
    let mut rows = Vec::new();
    for st in &steps {
        rows.push(row(cfg, "project", format!("distance[eta={}]", st.eta), st.distance.distance, st.distance.stderr));
        rows.push(row(cfg, "project", format!("shift_average[eta={}]", st.eta), st.average.mean, st.average.stderr));
        let pts = &st.selected.transversality.points;
        let mut w = ObjWriter::new(&format!("preimage_eta{}", st.eta));
        for q in pts {
            w.point(q);
        }
        write(out, &format!("preimage_eta{}.obj", st.eta), &w.finish())?;
        if cfg.m == 2 {
            write(out, &format!("preimage_eta{}.svg", st.eta), &svg_points(pts))?;
        }
    }
    write(out, "ladder.csv", &csv_string(&rows))?;
    let d: Vec<(f64, f64)> = steps.iter().map(|s| (s.distance.distance, s.distance.stderr)).collect();
    let pass = decreasing(&d, 2.0);
    Ok(Outcome { pass, summary: json!({"steps": steps.iter().map(|s| s.summary()).collect::<Vec<_>>(), "decreasing": pass}) })
}

/// `[-1,1]²` cross-section with the given points, y axis up.
fn svg_points(pts: &[Vec<f64>]) -> String {
    let mut s = String::from("<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"-1.05 -1.05 2.1 2.1\">\n");
    s.push_str("<rect x=\"-1\" y=\"-1\" width=\"2\" height=\"2\" fill=\"none\" stroke=\"black\" stroke-width=\"0.01\"/>\n");
    for q in pts {
        s.push_str(&format!("<circle cx=\"{}\" cy=\"{}\" r=\"0.02\" fill=\"red\"/>\n", q[0], -q[1]));
    }
    s.push_str("</svg>\n");
    s
}

pub fn uncross(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let c = cubication(cfg)?;
    if cfg.l == 0 {
        return uncross_planes(cfg, &c, out);
    }
    let u = rigid(cfg)?;
    let opts = ShrinkPipelineOptions {
        energy: EnergyOptions::mc(cfg.samples, cfg.seed),
        class: ClassOptions { per_band: cfg.per_band, seed: cfg.seed, ..ClassOptions::default() },
        strict: !cfg.keep_going,
    };
    let steps = uncross_and_shrink_pipeline(u, &c, cfg.l, cfg.s, cfg.p, &cfg.mu, &opts)?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut crossings_ok = true;
    for st in &steps {
        let (rep, pulled) = crossing_report(&build_phi_top_lines(&c, st.mu)?, &c, cfg.l)?;
        crossings_ok &= rep.after == 0;
        if let Some(set) = pulled {
            write(out, &format!("singular_mu{}.obj", st.mu), &set.to_obj(&format!("singular_mu{}", st.mu)))?;
        }
        write(out, &format!("pipeline_mu{}.json", st.mu), &serde_json::to_string_pretty(&st.pipeline.describe())?)?;
        rows.push(row(cfg, "uncross", format!("distance[mu={}]", st.mu), st.distance.distance, st.distance.stderr));
        rows.push(row(cfg, "uncross", format!("tau[mu={}]", st.mu), st.tau, 0.0));
        rows.push(row(cfg, "uncross", format!("a_mu_ratio[mu={}]", st.mu), st.measure_ratio, 0.0));
        rows.push(row(cfg, "uncross", format!("crossings_after[mu={}]", st.mu), rep.after as f64, 0.0));
        let mut s = st.summary();
        s["crossing_report"] = serde_json::to_value(&rep)?;
        summary.push(s);
    }
    write(out, "ladder.csv", &csv_string(&rows))?;
    let d: Vec<(f64, f64)> = steps.iter().map(|s| (s.distance.distance, s.distance.stderr)).collect();
    let classes = steps.iter().all(|s| s.class.pass);
    let pass = crossings_ok && decreasing(&d, 2.0) && classes;
    Ok(Outcome { pass, summary: json!({"steps": summary, "crossings_removed": crossings_ok, "decreasing": decreasing(&d, 2.0), "classes_pass": classes}) })
}

fn uncross_planes(cfg: &ExperimentConfig, c: &Cubication, out: &Path) -> Result<Outcome> {
    let faces = sobomap_core::grid::dual_skeleton(c, 0)?.pieces;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut pass = true;
    for &mu in &cfg.mu {
        let pp = build_phi_planes(c, mu)?;
        let (r1, _) = crossing_report(&pp.pass1, c, 0)?;
        let (r2, _) = crossing_report(&pp.full, c, 0)?;
        pass &= r2.after == 0;
        write(out, &format!("planes_mu{mu}.obj"), &planes_pullback_obj(&pp.full, &faces, 16, &format!("planes_mu{mu}")))?;
        write(out, &format!("pipeline_mu{mu}.json"), &serde_json::to_string_pretty(&pp.full.describe())?)?;
        rows.push(row(cfg, "uncross", format!("crossings_before[mu={mu}]"), r1.before as f64, 0.0));
        rows.push(row(cfg, "uncross", format!("crossings_after_pass1[mu={mu}]"), r1.after as f64, 0.0));
        rows.push(row(cfg, "uncross", format!("crossings_after_pass2[mu={mu}]"), r2.after as f64, 0.0));
        summary.push(json!({"mu": mu, "pass1": r1, "full": r2, "rho": pp.rho, "clearance": pp.clearance}));
    }
    write(out, "ladder.csv", &csv_string(&rows))?;
    Ok(Outcome { pass, summary: json!({"steps": summary}) })
}

pub fn energy(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let u = named_field(cfg)?;
    let domain = if cfg.domain == "ball" { Domain::unit_ball(cfg.m) } else { Domain::cube(cfg.m) };
    let opts = if cfg.estimator == "grid" { EnergyOptions::grid(0) } else { EnergyOptions::mc(cfg.samples, cfg.seed) };
    let (k, sigma) = (cfg.s.floor() as usize, cfg.s - cfg.s.floor());
    let report = if sigma == 0.0 {
        grad_energy(u.as_ref(), k, cfg.p, &domain, &opts)?
    } else if k == 0 {
        gagliardo_seminorm_p(u.as_ref(), sigma, cfg.p, &domain, &opts)?
    } else {
        return Err(SchemaError::new("s", "energy supports integer s or 0 < s < 1").into());
    };
    let lp = lp_norm_p(u.as_ref(), cfg.p, &domain, &opts)?;
    let quantity = if sigma == 0.0 { format!("grad{k}_energy_p") } else { "gagliardo_p".to_string() };
    let rows = vec![report.csv_row("energy", &quantity, cfg.seed), lp.csv_row("energy", "lp_norm_p", cfg.seed)];
    write(out, "energy.csv", &csv_string(&rows))?;
    write(out, "strata.json", &serde_json::to_string_pretty(&report.strata)?)?;
    let pass = report.value.is_finite();
    Ok(Outcome { pass, summary: json!({"value": report.value, "uncertainty": report.uncertainty(), "lp_norm_p": lp.value, "excluded": report.excluded}) })
}

pub fn retraction_demo(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let g = model_retraction_g();
    let edges = enumerate_skeleton(&Cubication::unit_cube(3), 1)?;
    let mut w = ObjWriter::new("retraction_g");
    w.group("singular_set");
    for p in &g.set.pieces {
        for (a, b) in p.segments() {
            w.polyline(&[a, b]);
        }
    }
    w.group("edge_skeleton");
    for e in &edges {
        let (lo, hi) = e.bounds::<f64>();
        w.polyline(&[lo, hi]);
    }
    write(out, "retraction_g.obj", &w.finish())?;
    let components = g.set.components(1e-9);
    let mut worst = 0.0f64;
    for e in &edges {
        let (lo, hi) = e.bounds::<f64>();
        for k in 0..=64 {
            let t = k as f64 / 64.0;
            let x: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| a + t * (b - a)).collect();
            let y = g.eval(&x)?;
            worst = worst.max(y.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    let rows = vec![row(cfg, "retraction-demo", "components".into(), components as f64, 0.0), row(cfg, "retraction-demo", "edge_displacement".into(), worst, 0.0)];
    write(out, "retraction.csv", &csv_string(&rows))?;
    write(out, "singular_set.json", &serde_json::to_string_pretty(&g.set.to_json())?)?;
    Ok(Outcome { pass: components == 5 && worst <= 1e-9, summary: json!({"components": components, "edge_displacement": worst, "segments": g.set.pieces.len()}) })
}

pub fn class_verify(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let u = named_field(cfg)?;
    let tag = ClassTag::parse(&cfg.class).map_err(|e| SchemaError::new("class", &e.to_string()))?;
    let opts = ClassOptions { per_band: cfg.per_band, seed: cfg.seed, ..ClassOptions::default() };
    let mut fields: Vec<(String, Field)> = vec![("u".into(), u.clone())];
    if !cfg.mu.is_empty() {
        if cfg.field != "rigid" || cfg.m != 3 || cfg.l != 1 {
            return Err(SchemaError::new("mu", "composition with the uncrossing map needs field = rigid, m = 3, l = 1").into());
        }
        let c = cubication(cfg)?;
        for &mu in &cfg.mu {
            let phi: Arc<Pipeline> = Arc::new(build_phi_top_lines(&c, mu)?);
            fields.push((format!("u_phi[mu={mu}]"), Arc::new(compose_with_diffeo(u.clone(), phi)?)));
        }
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut pass = true;
    for (name, f) in &fields {
        let r = verify_class(f.as_ref(), tag, opts)?;
        pass &= r.pass;
        rows.push(row(cfg, "class-verify", format!("c1[{name}]"), r.c1, 0.0));
        for b in &r.bands {
            rows.push(row(cfg, "class-verify", format!("band{}_sup[{name}]", b.k), b.sup, 0.0));
        }
        reports.push(json!({"field": name, "report": r, "singular_pieces": f.singular_set().pieces.len()}));
    }
    write(out, "class.csv", &csv_string(&rows))?;
    Ok(Outcome { pass, summary: json!({"reports": reports}) })
}
