//! Shrinking maps around skeleton columns, the τ-selection rule and the
//! uncross-then-shrink pipeline.

use crate::diffeo::{DiffeoPiece, Pipeline, ShrinkColumn, Stage};
use crate::energy::{grad_energy, lp_distance_p, wsp_distance, Domain, EnergyOptions, EnergyReport, WspReport};
use crate::error::{Error, Result};
use crate::fields::{compose_with_diffeo, verify_class, ClassOptions, ClassReport, ClassTag, ComposedField, Field, MapField};
use crate::geom::union_volume;
use crate::grid::{dual_skeleton, Cubication};
use crate::uncross::build_phi_top_lines;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

pub const TAU_CAP: f64 = 0.25;
const EPS0: f64 = 1e-12;
const TAU_FLOOR: f64 = 1e-15;

/// Columns `{x′ = c′}` (with `x′` the coordinates in `axes`) and their
/// sup-norm neighbourhoods `R_{kμ}` of radius `kμη`, clipped to `Q^m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkGeometry {
    pub m: usize,
    pub axes: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub mu: f64,
    pub eta: f64,
    pub tau: f64,
}

impl ShrinkGeometry {
    pub fn new(m: usize, axes: Vec<usize>, centers: Vec<Vec<f64>>, mu: f64, eta: f64, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 0.5) {
            return Err(Error::Domain(format!("tau must lie in (0, 1/2), got {tau}")));
        }
        if !(mu > 0.0 && mu < 0.5) {
            return Err(Error::Domain(format!("mu must lie in (0, 1/2), got {mu}")));
        }
        if axes.is_empty() || axes.len() > 2 || centers.iter().any(|c| c.len() != axes.len()) {
            return Err(Error::Domain("shrink columns support codimension 1 or 2".into()));
        }
        Ok(Self { m, axes, centers, mu, eta, tau })
    }

    /// Vertical columns of the dual 1-skeleton of a cubication of `Q³`.
    pub fn vertical_columns(c: &Cubication, mu: f64, tau: f64) -> Result<Self> {
        let n = c.cubes_per_axis() as f64;
        let cc = c.center_coords();
        let centers = cc.iter().flat_map(|&a| cc.iter().map(move |&b| vec![a as f64 / n, b as f64 / n])).collect();
        Self::new(c.dim(), vec![0, 1], centers, mu, c.eta_f64(), tau)
    }

    pub fn codim(&self) -> usize {
        self.axes.len()
    }

    fn column_box(&self, center: &[f64], r_lo: f64, r_hi: f64, side: Option<(usize, bool)>) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![-1.0; self.m];
        let mut hi = vec![1.0; self.m];
        for (k, (&a, &c)) in self.axes.iter().zip(center).enumerate() {
            let (l, h) = match side {
                Some((s, true)) if s == k => (c + r_lo, c + r_hi),
                Some((s, false)) if s == k => (c - r_hi, c - r_lo),
                Some((s, _)) if k < s => (c - r_lo, c + r_lo),
                _ => (c - r_hi, c + r_hi),
            };
            lo[a] = l.max(-1.0);
            hi[a] = h.min(1.0);
        }
        (lo, hi)
    }

    /// `R_{kμ}` around every column.
    pub fn region(&self, k: f64) -> Domain {
        let r = k * self.mu * self.eta;
        Domain::Boxes(self.centers.iter().map(|c| self.column_box(c, r, r, None)).collect())
    }

    /// `R_{k₂μ} ∖ R_{k₁μ}` as a disjoint union of boxes.
    pub fn annulus(&self, k1: f64, k2: f64) -> Domain {
        let (r1, r2) = (k1 * self.mu * self.eta, k2 * self.mu * self.eta);
        let mut boxes = Vec::new();
        for c in &self.centers {
            for s in 0..self.codim() {
                for up in [false, true] {
                    let (lo, hi) = self.column_box(c, r1, r2, Some((s, up)));
                    if lo.iter().zip(&hi).all(|(a, b)| a < b) {
                        boxes.push((lo, hi));
                    }
                }
            }
        }
        Domain::Boxes(boxes)
    }

    pub fn volume(&self, k: f64) -> f64 {
        self.region(k).volume()
    }

    pub fn stage(&self) -> Result<Stage> {
        let pieces: Vec<Arc<dyn DiffeoPiece>> = self
            .centers
            .iter()
            .map(|c| -> Result<Arc<dyn DiffeoPiece>> {
                Ok(Arc::new(ShrinkColumn::new(self.m, self.axes.clone(), c.clone(), self.mu, self.eta, self.tau)?))
            })
            .collect::<Result<_>>()?;
        Stage::new("shrink", pieces)
    }
}

/// `v^sh_τ = v ∘ Ψ` with `Ψ` the column shrink: `v(x′/τ, ·)` on `R_{τμ}`,
/// the radial transition on `R_{2μ} ∖ R_{τμ}` and `v` elsewhere.
pub fn shrink_map_rect(v: Field, geometry: &ShrinkGeometry) -> Result<ComposedField> {
    let pipe = Pipeline::new(geometry.m, vec![geometry.stage()?])?;
    compose_with_diffeo(v, Arc::new(pipe))
}

/// Largest discrepancy between adjacent branches of the shrink at the two seams
/// `|x′| = τμη` and `|x′| = 2μη`, over `samples` random seam points per column.
pub fn seam_discrepancy(v: &dyn MapField, geometry: &ShrinkGeometry, samples: usize, seed: u64) -> Result<f64> {
    let (tau, me) = (geometry.tau, geometry.mu * geometry.eta);
    let mut rng = crate::rng::stream(seed, 0);
    let mut worst = 0.0f64;
    for c in &geometry.centers {
        for k in 0..samples {
            let mut x: Vec<f64> = (0..geometry.m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d = geometry.codim();
            let dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sup = dir.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-3);
            let s = if k % 2 == 0 { tau * me } else { 2.0 * me };
            for (i, (&a, ci)) in geometry.axes.iter().zip(c).enumerate() {
                x[a] = ci + dir[i] / sup * s;
            }
            let at = |f: f64| -> Vec<f64> {
                let mut y = x.clone();
                for (&a, ci) in geometry.axes.iter().zip(c) {
                    y[a] = ci + (x[a] - ci) * f;
                }
                y
            };
            // inner or outer branch against the transition formula
            let (a, b) = if k % 2 == 0 { (at(1.0 / tau), at(((s - tau * me) / (2.0 - tau) + me) / s)) } else { (x.clone(), at(((s - tau * me) / (2.0 - tau) + me) / s)) };
            if crate::scalar::sup_norm(&a) >= 1.0 {
                continue;
            }
            if let (Ok(va), Ok(vb)) = (v.eval(&a), v.eval(&b)) {
                worst = worst.max(crate::scalar::dist2(&va, &vb));
            }
        }
    }
    Ok(worst)
}

/// `min(1/4, (outer / max(inner, ε₀))^{1/(codim − p)})`.
pub fn select_tau(inner: f64, outer: f64, p: f64, codim: usize) -> f64 {
    let e = codim as f64 - p;
    if !(e > 0.0) || inner <= EPS0 {
        return TAU_CAP;
    }
    TAU_CAP.min((outer / inner).powf(1.0 / e)).max(TAU_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkEnergyRow {
    pub tau: f64,
    /// `∫_{R_{2μ}} |Dv^sh|^p`.
    pub lhs: f64,
    /// `∫_{R_{τμ}} |Dv^sh|^p`.
    pub inner_shrunk: f64,
    pub c_fit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkEnergyCheck {
    pub p: f64,
    /// `∫_{R_{2μ}∖R_μ} |Dv|^p`.
    pub outer: f64,
    /// `∫_{R_μ} |Dv|^p`.
    pub inner: f64,
    pub rows: Vec<ShrinkEnergyRow>,
    /// Log–log slope of `inner_shrunk` against `τ`.
    pub slope: f64,
    pub pass: bool,
}

fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.max(1e-300).ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if den > 0.0 {
        num / den
    } else {
        f64::NAN
    }
}

/// Measures both sides of `∫_{R_{2μ}}|Dv^sh|^p ≲ ∫_{R_{2μ}∖R_μ}|Dv|^p + τ^{codim−p}∫_{R_μ}|Dv|^p`
/// over a τ ladder; PASS iff the fitted constant varies by at most 1.5×.
pub fn shrink_energy_check(v: Field, geometry: &ShrinkGeometry, taus: &[f64], p: f64, opts: &EnergyOptions) -> Result<ShrinkEnergyCheck> {
    let codim = geometry.codim();
    if !(p < codim as f64) {
        return Err(Error::Domain(format!("shrinking lowers energy only for p < {codim}, got p = {p}")));
    }
    let outer = grad_energy(v.as_ref(), 1, p, &geometry.annulus(1.0, 2.0), opts)?.value;
    let inner = grad_energy(v.as_ref(), 1, p, &geometry.region(1.0), opts)?.value;
    let mut rows = Vec::new();
    for &tau in taus {
        let g = ShrinkGeometry { tau, ..geometry.clone() };
        g.stage()?;
        let sh: Field = Arc::new(shrink_map_rect(v.clone(), &g)?);
        let lhs = grad_energy(sh.as_ref(), 1, p, &g.region(2.0), opts)?.value;
        let inner_shrunk = grad_energy(sh.as_ref(), 1, p, &g.region(tau), opts)?.value;
        let rhs = outer + tau.powf(codim as f64 - p) * inner;
        let c_fit = if rhs > 0.0 { lhs / rhs } else { 0.0 };
        rows.push(ShrinkEnergyRow { tau, lhs, inner_shrunk, c_fit });
    }
    let slope = fit_slope(&rows.iter().map(|r| r.tau).collect::<Vec<_>>(), &rows.iter().map(|r| r.inner_shrunk).collect::<Vec<_>>());
    let cs: Vec<f64> = rows.iter().map(|r| r.c_fit).collect();
    let (lo, hi) = cs.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &c| (a.min(c), b.max(c)));
    let pass = hi == 0.0 || (lo > 0.0 && hi / lo <= 1.5);
    Ok(ShrinkEnergyCheck { p, outer, inner, rows, slope, pass })
}

/// `|Q^m ∩ (𝒯^{ℓ*} + Q_{2μη})|`.
pub fn a_mu_measure(c: &Cubication, l: usize, mu: f64) -> Result<f64> {
    let r = 2.0 * mu * c.eta_f64();
    let dual = dual_skeleton(c, l)?;
    let boxes: Vec<(Vec<f64>, Vec<f64>)> = dual
        .pieces
        .iter()
        .map(|f| {
            let (lo, hi) = f.bounds::<f64>();
            (lo.iter().map(|v| (v - r).max(-1.0)).collect(), hi.iter().map(|v| (v + r).min(1.0)).collect())
        })
        .collect();
    Ok(union_volume(&boxes))
}

#[derive(Debug, Clone)]
pub struct ShrinkPipelineOptions {
    pub energy: EnergyOptions,
    pub class: ClassOptions,
    /// Abort on the first `μ` whose output fails the class check.
    pub strict: bool,
}

#[derive(Clone)]
pub struct ShrinkStep {
    pub mu: f64,
    pub tau: f64,
    /// `∫_{V_μ}|Dv_μ|^p` and `∫_{V_{2μ}∖V_μ}|Dv_μ|^p`; `None` when `p ≥ codim`, where they are infinite.
    pub inner: Option<f64>,
    pub outer: Option<f64>,
    pub distance: WspReport,
    pub lp: EnergyReport,
    pub v2mu_volume: f64,
    pub a_mu: f64,
    pub measure_ratio: f64,
    pub class: ClassReport,
    pub pipeline: Arc<Pipeline>,
    pub field: Arc<ComposedField>,
}

impl ShrinkStep {
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "mu": self.mu,
            "tau": self.tau,
            "inner": self.inner,
            "outer": self.outer,
            "distance": self.distance.distance,
            "stderr": self.distance.stderr,
            "lp_p": self.lp.value,
            "v2mu_volume": self.v2mu_volume,
            "a_mu": self.a_mu,
            "measure_ratio": self.measure_ratio,
            "class_pass": self.class.pass,
            "crossings": self.class.crossing_count,
        })
    }
}

/// For each `μ`: `v_μ = u ∘ Φ^top_μ`, `τ_μ` from the energy balance, then
/// `u_μ = v_μ ∘ Ψ_{τ_μ}` and its `W^{s,p}` distance to `u`.
pub fn uncross_and_shrink_pipeline(u: Field, c: &Cubication, l: usize, s: f64, p: f64, mus: &[f64], opts: &ShrinkPipelineOptions) -> Result<Vec<ShrinkStep>> {
    if (c.dim(), l) != (3, 1) {
        return Err(Error::Unsupported(format!("uncross-and-shrink for m = {}, l = {l}; supported: (3, 1)", c.dim())));
    }
    if !((l + 1) as f64 > s * p) {
        return Err(Error::Domain(format!("need l + 1 > sp, got l = {l}, sp = {}", s * p)));
    }
    let mut steps = Vec::new();
    for &mu in mus {
        let top = build_phi_top_lines(c, mu)?;
        let v_mu: Field = Arc::new(compose_with_diffeo(u.clone(), Arc::new(top.clone()))?);
        let probe = ShrinkGeometry::vertical_columns(c, mu, TAU_CAP)?;
        let (inner, outer, tau) = if p < probe.codim() as f64 {
            let inner = grad_energy(v_mu.as_ref(), 1, p, &probe.region(1.0), &opts.energy)?.value;
            let outer = grad_energy(v_mu.as_ref(), 1, p, &probe.annulus(1.0, 2.0), &opts.energy)?.value;
            (Some(inner), Some(outer), select_tau(inner, outer, p, probe.codim()))
        } else {
            (None, None, TAU_CAP)
        };
        let geometry = ShrinkGeometry { tau, ..probe };
        let mut stages = vec![geometry.stage()?];
        stages.extend(top.stages.iter().cloned());
        let pipeline = Arc::new(Pipeline::new(3, stages)?);
        let field = Arc::new(compose_with_diffeo(u.clone(), pipeline.clone())?);
        let class = verify_class(field.as_ref(), ClassTag::Uncr, opts.class).map_err(|e| Error::Classification(format!("mu = {mu}: {e}")))?;
        if opts.strict && !class.pass {
            let sups: Vec<String> = class.bands.iter().map(|b| format!("{:.3}", b.sup)).collect();
            return Err(Error::Classification(format!("mu = {mu}, tau = {tau}: u_mu fails the uncr class check, band sups [{}]", sups.join(", "))));
        }
        // u_μ = u outside V_{2μ}; nonlocal terms need the whole cube
        let domain = if s.fract() == 0.0 { geometry.region(2.0) } else { Domain::cube(3) };
        let fu: Field = field.clone();
        let distance = wsp_distance(fu.clone(), u.clone(), s, p, &domain, &opts.energy)?;
        let lp = lp_distance_p(fu, u.clone(), p, &geometry.region(2.0), &opts.energy)?;
        let a_mu = a_mu_measure(c, l, mu)?;
        let measure_ratio = a_mu / (mu * c.eta_f64()).powi(l as i32 + 1);
        steps.push(ShrinkStep { mu, tau, inner, outer, distance, lp, v2mu_volume: geometry.volume(2.0), a_mu, measure_ratio, class, pipeline, field });
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{ConstantField, VortexField};

    #[test]
    fn select_tau_examples() {
        assert_eq!(select_tau(0.0, 0.0, 1.5, 2), 0.25);
        assert_eq!(select_tau(3.0, 3.0, 1.5, 2), 0.25);
        let t = select_tau(1e6, 1.0, 1.5, 2);
        assert!((t / 1e-12 - 1.0).abs() < 1e-9, "{t}");
    }

    #[test]
    fn geometry_checks_bounds_and_nests() {
        assert!(matches!(ShrinkGeometry::new(3, vec![0, 1], vec![vec![0.0, 0.0]], 0.2, 0.5, 0.5), Err(Error::Domain(_))));
        assert!(matches!(ShrinkGeometry::new(3, vec![0, 1], vec![vec![0.0, 0.0]], 0.6, 0.5, 0.25), Err(Error::Domain(_))));
        let g = ShrinkGeometry::new(3, vec![0, 1], vec![vec![0.0, 0.0]], 0.2, 0.5, 0.25).unwrap();
        let (a, b, c) = (g.volume(0.25), g.volume(1.0), g.volume(2.0));
        assert!(a < b && b < c);
        assert!((g.annulus(1.0, 2.0).volume() - (c - b)).abs() < 1e-12);
        assert!((c - 2.0 * 0.2f64.powi(2) * 4.0).abs() < 1e-12);
    }

    #[test]
    fn shrink_branches() {
        let c = Cubication::new(3, 2).unwrap();
        let g = ShrinkGeometry::vertical_columns(&c, 0.2, 0.25).unwrap();
        let k: Field = Arc::new(ConstantField::new(3, vec![1.0, 0.0], None));
        let sk = shrink_map_rect(k, &g).unwrap();
        assert_eq!(sk.eval(&[0.51, 0.5, 0.0]).unwrap(), vec![1.0, 0.0]);
        let v: Field = Arc::new(VortexField::new(3, [0, 1], vec![0.5, 0.5, 0.0], 1).unwrap());
        let sv = shrink_map_rect(v.clone(), &g).unwrap();
        let x = [0.51, 0.495, 0.3];
        let want = v.eval(&[0.5 + 0.04, 0.5 - 0.02, 0.3]).unwrap();
        let got = sv.eval(&x).unwrap();
        assert!(crate::scalar::dist2(&want, &got) < 1e-12);
        let far = [0.1, 0.5, 0.3];
        assert_eq!(sv.eval(&far).unwrap(), v.eval(&far).unwrap());
        assert!(seam_discrepancy(v.as_ref(), &g, 1000, 7).unwrap() <= 1e-9);
    }

    #[test]
    fn constant_energy_check_is_zero() {
        let g = ShrinkGeometry::new(3, vec![0, 1], vec![vec![0.0, 0.0]], 0.2, 0.5, 0.25).unwrap();
        let k: Field = Arc::new(ConstantField::new(3, vec![0.0, 1.0], None));
        let r = shrink_energy_check(k, &g, &[0.25, 0.125], 1.5, &EnergyOptions::mc(2000, 1)).unwrap();
        assert_eq!(r.outer, 0.0);
        assert!(r.rows.iter().all(|row| row.lhs == 0.0));
        assert!(matches!(shrink_energy_check(Arc::new(ConstantField::new(3, vec![0.0, 1.0], None)), &g, &[0.25], 2.5, &EnergyOptions::mc(100, 1)), Err(Error::Domain(_))));
    }

    #[test]
    fn vortex_column_scaling_slope() {
        let g = ShrinkGeometry::new(3, vec![0, 1], vec![vec![0.0, 0.0]], 0.2, 0.5, 0.25).unwrap();
        let v: Field = Arc::new(VortexField::new(3, [0, 1], vec![0.0, 0.0, 0.0], 1).unwrap());
        let r = shrink_energy_check(v, &g, &[0.25, 0.125, 0.0625], 1.5, &EnergyOptions::mc(40_000, 3)).unwrap();
        assert!((r.slope - 0.5).abs() <= 0.1, "{r:?}");
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn measure_law() {
        let c = Cubication::new(3, 2).unwrap();
        let ratios: Vec<f64> = [0.4, 0.2, 0.1, 0.05].iter().map(|&mu| a_mu_measure(&c, 1, mu).unwrap() / (mu * 0.5f64).powi(2)).collect();
        let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
        assert!(hi / lo <= 2.0 * (1.0 + 1e-12), "{ratios:?}");
    }
}
