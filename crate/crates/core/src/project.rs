//! Mollification, shifted singular projection, cutoff splitting and shift selection.

use crate::energy::{wsp_distance, Domain, EnergyOptions, WspReport};
use crate::error::{Error, Result};
use crate::fields::{fd_jacobian, ConstantField, Field, MapField};
use crate::scalar::{dist2, norm2, smoothstep3};
use crate::sets::{Piece, SingularSet};
use crate::targets::Target;
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::sync::Arc;

const GAUSS9: [(f64, f64); 9] = [
    (0.0, 0.330_239_355_001_259_8),
    (-0.324_253_423_403_808_9, 0.312_347_077_040_002_84),
    (0.324_253_423_403_808_9, 0.312_347_077_040_002_84),
    (-0.613_371_432_700_590_4, 0.260_610_696_402_935_46),
    (0.613_371_432_700_590_4, 0.260_610_696_402_935_46),
    (-0.836_031_107_326_635_8, 0.180_648_160_694_857_4),
    (0.836_031_107_326_635_8, 0.180_648_160_694_857_4),
    (-0.968_160_239_507_626_1, 0.081_274_388_361_574_41),
    (0.968_160_239_507_626_1, 0.081_274_388_361_574_41),
];

/// Composite 9-point Gauss rule on `[a, b]` with `sub` pieces.
pub fn gauss_rule(a: f64, b: f64, sub: usize) -> Vec<(f64, f64)> {
    let h = (b - a) / sub as f64;
    let mut out = Vec::with_capacity(9 * sub);
    for k in 0..sub {
        let c = a + (k as f64 + 0.5) * h;
        for &(t, w) in &GAUSS9 {
            out.push((c + 0.5 * h * t, 0.5 * h * w));
        }
    }
    out
}

/// Unnormalized bump `exp(-1/(1-|z|²))` on the unit ball.
pub fn bump(z: &[f64]) -> f64 {
    let r2: f64 = z.iter().map(|v| v * v).sum();
    if r2 >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - r2)).exp()
    }
}

/// The standard mollifier `φ` on `R^m` and a tensor-Gauss stencil for `φ_η ∗ u`.
#[derive(Debug, Clone)]
pub struct Mollifier {
    pub m: usize,
    /// `∫ bump`, by radial quadrature.
    pub normalization: f64,
    /// Unit-scale nodes `z` and weights summing to one.
    pub stencil: Vec<(Vec<f64>, f64)>,
    /// Discrete `∫ z₀ ∂₀(-φ)`, exactly 1 in the continuum; divides the gradient weights.
    grad_scale: f64,
}

impl Mollifier {
    pub fn new(m: usize, subdivisions: usize) -> Self {
        let radial: f64 = gauss_rule(0.0, 1.0, 400).iter().map(|&(r, w)| w * (-1.0 / (1.0 - r * r)).exp() * r.powi(m as i32 - 1)).sum();
        let normalization = crate::energy::sphere_area(m) * radial;
        let rule = gauss_rule(-1.0, 1.0, subdivisions);
        let mut stencil = Vec::new();
        let total = rule.len().pow(m as u32);
        for idx in 0..total {
            let mut r = idx;
            let mut z = Vec::with_capacity(m);
            let mut w = 1.0;
            for _ in 0..m {
                let (t, wt) = rule[r % rule.len()];
                r /= rule.len();
                z.push(t);
                w *= wt;
            }
            let b = bump(&z);
            if b > 0.0 {
                stencil.push((z, w * b));
            }
        }
        let s: f64 = stencil.iter().map(|n| n.1).sum();
        for n in &mut stencil {
            n.1 /= s;
        }
        let grad_scale = stencil.iter().map(|(z, w)| 2.0 * w * z[0] * z[0] / (1.0 - z.iter().map(|t| t * t).sum::<f64>()).powi(2)).sum();
        Self { m, normalization, stencil, grad_scale }
    }

    /// `φ(z)` with unit integral.
    pub fn density(&self, z: &[f64]) -> f64 {
        bump(z) / self.normalization
    }

    /// `φ_η(z) = η^{-m} φ(z/η)`.
    pub fn scaled(&self, z: &[f64], eta: f64) -> f64 {
        let u: Vec<f64> = z.iter().map(|v| v / eta).collect();
        self.density(&u) / eta.powi(self.m as i32)
    }

    /// `(φ_η ∗ u)(x)` by the stencil; nodes on the singular set are dropped.
    pub fn convolve(&self, u: &dyn MapField, eta: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; u.ambient_dim()];
        let mut wsum = 0.0;
        let mut y = vec![0.0; x.len()];
        for (z, w) in &self.stencil {
            for i in 0..x.len() {
                y[i] = x[i] + eta * z[i];
            }
            match u.eval(&y) {
                Ok(v) => {
                    for (a, b) in acc.iter_mut().zip(&v) {
                        *a += w * b;
                    }
                    wsum += w;
                }
                Err(Error::Singular { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        if wsum <= 0.5 {
            return Err(Error::Singular { dist: 0.0 });
        }
        Ok(acc.into_iter().map(|a| a / wsum).collect())
    }

    /// `D(φ_η ∗ u)(x) = -η⁻¹ ∫ u(x + ηz) ∇φ(z) dz`, so jumps of `u` are seen.
    pub fn convolve_jacobian(&self, u: &dyn MapField, eta: f64, x: &[f64]) -> Result<DMatrix<f64>> {
        let mut j = DMatrix::zeros(u.ambient_dim(), x.len());
        let mut y = vec![0.0; x.len()];
        for (z, w) in &self.stencil {
            for i in 0..x.len() {
                y[i] = x[i] + eta * z[i];
            }
            let v = match u.eval(&y) {
                Ok(v) => v,
                Err(Error::Singular { .. }) => continue,
                Err(e) => return Err(e),
            };
            let r2: f64 = z.iter().map(|t| t * t).sum();
            // ∇bump(z) = -2z bump(z) / (1 - |z|²)²
            let g = 2.0 * w / ((1.0 - r2).powi(2) * eta * self.grad_scale);
            for (a, va) in v.iter().enumerate() {
                for k in 0..x.len() {
                    j[(a, k)] += g * z[k] * va;
                }
            }
        }
        Ok(j)
    }
}

/// Values on a regular lattice with bicubic Catmull-Rom interpolation (`m ≤ 2`).
#[derive(Debug, Clone)]
pub struct LatticeCache {
    pub m: usize,
    pub nu: usize,
    pub origin: Vec<f64>,
    pub pitch: f64,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

fn cr_weights(t: f64) -> ([f64; 4], [f64; 4]) {
    let (t2, t3) = (t * t, t * t * t);
    (
        [(-t3 + 2.0 * t2 - t) / 2.0, (3.0 * t3 - 5.0 * t2 + 2.0) / 2.0, (-3.0 * t3 + 4.0 * t2 + t) / 2.0, (t3 - t2) / 2.0],
        [(-3.0 * t2 + 4.0 * t - 1.0) / 2.0, (9.0 * t2 - 10.0 * t) / 2.0, (-9.0 * t2 + 8.0 * t + 1.0) / 2.0, (3.0 * t2 - 2.0 * t) / 2.0],
    )
}

impl LatticeCache {
    /// Nodes covering `[lo − 2h, hi + 2h]`.
    pub fn build<F>(lo: &[f64], hi: &[f64], pitch: f64, nu: usize, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
    {
        let m = lo.len();
        if m > 2 {
            return Err(Error::Unsupported("lattice cache above dimension 2".into()));
        }
        let origin: Vec<f64> = lo.iter().map(|v| v - 2.0 * pitch).collect();
        let dims: Vec<usize> = lo.iter().zip(hi).map(|(a, b)| ((b - a) / pitch).ceil() as usize + 5).collect();
        let total: usize = dims.iter().product();
        let rows: Vec<Result<Vec<f64>>> = (0..total)
            .into_par_iter()
            .map(|idx| {
                let mut x = Vec::with_capacity(m);
                let mut r = idx;
                for i in 0..m {
                    x.push(origin[i] + (r % dims[i]) as f64 * pitch);
                    r /= dims[i];
                }
                match f(&x) {
                    Ok(v) => Ok(v),
                    // a node exactly on the set: average of a slightly moved stencil
                    Err(Error::Singular { .. }) => {
                        let x2: Vec<f64> = x.iter().map(|v| v + pitch * 1e-3).collect();
                        f(&x2)
                    }
                    Err(e) => Err(e),
                }
            })
            .collect();
        let mut values = Vec::with_capacity(total * nu);
        for r in rows {
            values.extend(r?);
        }
        Ok(Self { m, nu, origin, pitch, dims, values })
    }

    pub fn node(&self, idx: &[usize]) -> &[f64] {
        let mut flat = 0;
        let mut stride = 1;
        for (&i, &d) in idx.iter().zip(&self.dims) {
            flat += i * stride;
            stride *= d;
        }
        &self.values[flat * self.nu..(flat + 1) * self.nu]
    }

    pub fn node_position(&self, idx: &[usize]) -> Vec<f64> {
        (0..self.m).map(|i| self.origin[i] + idx[i] as f64 * self.pitch).collect()
    }

    /// Whether the interpolation stencil at `x` lies inside the lattice.
    pub fn covers(&self, x: &[f64]) -> bool {
        (0..self.m).all(|i| {
            let t = (x[i] - self.origin[i]) / self.pitch;
            t >= 1.0 && t <= (self.dims[i] - 2) as f64
        })
    }

    /// Value and `ν × m` gradient.
    pub fn interpolate(&self, x: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let mut base = [0usize; 2];
        let mut w = [[0.0; 4]; 2];
        let mut dw = [[0.0; 4]; 2];
        for i in 0..self.m {
            let t = (x[i] - self.origin[i]) / self.pitch;
            let c = (t.floor() as isize).clamp(1, self.dims[i] as isize - 3) as usize;
            let (a, b) = cr_weights(t - c as f64);
            base[i] = c - 1;
            w[i] = a;
            dw[i] = b;
        }
        let mut val = vec![0.0; self.nu];
        let mut grad = DMatrix::zeros(self.nu, self.m);
        if self.m == 1 {
            for a in 0..4 {
                let v = self.node(&[base[0] + a]);
                for k in 0..self.nu {
                    val[k] += w[0][a] * v[k];
                    grad[(k, 0)] += dw[0][a] * v[k] / self.pitch;
                }
            }
        } else {
            for a in 0..4 {
                for b in 0..4 {
                    let v = self.node(&[base[0] + a, base[1] + b]);
                    for k in 0..self.nu {
                        val[k] += w[0][a] * w[1][b] * v[k];
                        grad[(k, 0)] += dw[0][a] * w[1][b] * v[k] / self.pitch;
                        grad[(k, 1)] += w[0][a] * dw[1][b] * v[k] / self.pitch;
                    }
                }
            }
        }
        (val, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MollifyOptions {
    /// Gauss sub-intervals per axis of the 9-point rule.
    pub subdivisions: usize,
    /// Cache pitch as a fraction of `η`; `None` evaluates every point directly.
    pub cache_pitch: Option<f64>,
}

impl MollifyOptions {
    pub fn for_dim(m: usize) -> Self {
        Self { subdivisions: if m <= 2 { 2 } else { 1 }, cache_pitch: (m <= 2).then_some(0.125) }
    }

    pub fn direct(subdivisions: usize) -> Self {
        Self { subdivisions, cache_pitch: None }
    }
}

/// `u_η = φ_η ∗ u`, vector valued and smooth.
pub struct MollifiedField {
    pub u: Field,
    pub eta: f64,
    pub gamma: f64,
    pub mollifier: Mollifier,
    lo: Vec<f64>,
    hi: Vec<f64>,
    cache: Option<LatticeCache>,
    empty: SingularSet,
}

/// Convolution of `u` with `φ_η`, defined on `domain` enlarged by `γ − η`.
pub fn mollify(u: Field, eta: f64, gamma: f64, domain: &Domain, opts: MollifyOptions) -> Result<MollifiedField> {
    if !(eta > 0.0) || gamma < eta {
        return Err(Error::Domain(format!("need eta > 0 and margin >= eta, got eta={eta}, gamma={gamma}")));
    }
    let m = u.domain_dim();
    let mollifier = Mollifier::new(m, opts.subdivisions.max(1));
    let (lo, hi) = domain.bbox();
    let cache = match opts.cache_pitch {
        Some(f) if m <= 2 => {
            let mol = &mollifier;
            let uu = u.as_ref();
            Some(LatticeCache::build(&lo, &hi, f * eta, u.ambient_dim(), |x| mol.convolve(uu, eta, x))?)
        }
        _ => None,
    };
    Ok(MollifiedField { empty: SingularSet::empty(m), u, eta, gamma, mollifier, lo, hi, cache })
}

impl MollifiedField {
    pub fn cache(&self) -> Option<&LatticeCache> {
        self.cache.as_ref()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        let slack = self.gamma - self.eta + 1e-12;
        if x.iter().zip(self.lo.iter().zip(&self.hi)).any(|(v, (a, b))| *v < a - slack || *v > b + slack) {
            return Err(Error::Domain(format!("{x:?} is outside the mollification margin")));
        }
        Ok(())
    }

    /// Stencil quadrature at `x`, bypassing the cache.
    pub fn eval_direct(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        self.mollifier.convolve(self.u.as_ref(), self.eta, x)
    }
}

impl MapField for MollifiedField {
    fn domain_dim(&self) -> usize {
        self.u.domain_dim()
    }
    fn ambient_dim(&self) -> usize {
        self.u.ambient_dim()
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        match &self.cache {
            Some(c) if c.covers(x) => Ok(c.interpolate(x).0),
            _ => self.mollifier.convolve(self.u.as_ref(), self.eta, x),
        }
    }
    fn singular_set(&self) -> &SingularSet {
        &self.empty
    }
    fn descriptor(&self) -> serde_json::Value {
        json!({"field": "mollified", "eta": self.eta, "gamma": self.gamma, "u": self.u.descriptor()})
    }
    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        match &self.cache {
            Some(c) if c.covers(x) => Ok(c.interpolate(x).1),
            _ => {
                self.check(x)?;
                self.mollifier.convolve_jacobian(self.u.as_ref(), self.eta, x)
            }
        }
    }
}

/// Located preimage `u_η^{-1}(Σ + a)` for `m ≤ 2`, where it is a finite point set.
pub fn locate_preimage(ueta: &MollifiedField, a: &[f64], t: &Target) -> Result<Vec<Vec<f64>>> {
    let m = ueta.domain_dim();
    let Some(cache) = ueta.cache() else {
        return Err(Error::Unsupported("preimage location needs the lattice cache (m <= 2)".into()));
    };
    let g = |v: &[f64]| {
        let y: Vec<f64> = v.iter().zip(a).map(|(p, q)| p - q).collect();
        t.sigma_dist(&y)
    };
    let alpha = t.sep() / 4.0;
    let inside = |i: usize, k: usize| {
        let x = cache.origin[k] + i as f64 * cache.pitch;
        x >= ueta.lo[k] - 1e-12 && x <= ueta.hi[k] + 1e-12
    };
    let mut candidates = Vec::new();
    let (d0, d1) = (cache.dims[0], if m == 2 { cache.dims[1] } else { 1 });
    for j in 0..d1 {
        for i in 0..d0 {
            if !inside(i, 0) || (m == 2 && !inside(j, 1)) {
                continue;
            }
            let idx: Vec<usize> = if m == 2 { vec![i, j] } else { vec![i] };
            let gv = g(cache.node(&idx));
            if gv >= alpha {
                continue;
            }
            let mut is_min = true;
            'nb: for di in -1i64..=1 {
                for dj in if m == 2 { -1i64..=1 } else { 0..=0 } {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let ni = i as i64 + di;
                    let nj = j as i64 + dj;
                    if ni < 0 || nj < 0 || ni >= d0 as i64 || nj >= d1 as i64 {
                        continue;
                    }
                    let nidx: Vec<usize> = if m == 2 { vec![ni as usize, nj as usize] } else { vec![ni as usize] };
                    let nv = g(cache.node(&nidx));
                    // ties broken by lattice order so plateaus yield one candidate
                    if nv < gv || (nv == gv && (dj, di) < (0, 0)) {
                        is_min = false;
                        break 'nb;
                    }
                }
            }
            if is_min {
                candidates.push(cache.node_position(&idx));
            }
        }
    }
    let roots: Vec<Option<Vec<f64>>> = candidates.par_iter().map(|c| gauss_newton(ueta, a, t, c, cache.pitch)).collect();
    let mut out: Vec<Vec<f64>> = Vec::new();
    for r in roots.into_iter().flatten() {
        if r.iter().zip(ueta.lo.iter().zip(&ueta.hi)).any(|(v, (l, h))| *v < *l || *v > *h) {
            continue;
        }
        if out.iter().all(|q| dist2(q, &r) > 1e-6) {
            out.push(r);
        }
    }
    Ok(out)
}

fn residual(ueta: &MollifiedField, a: &[f64], t: &Target, x: &[f64]) -> Option<Vec<f64>> {
    let v = ueta.eval(x).ok()?;
    let y: Vec<f64> = v.iter().zip(a).map(|(p, q)| p - q).collect();
    Some(t.sigma_residual(&y))
}

fn residual_jacobian(ueta: &MollifiedField, a: &[f64], t: &Target, x: &[f64], h: f64) -> Option<DMatrix<f64>> {
    let nu = t.ambient_dim();
    let mut j = DMatrix::zeros(nu, x.len());
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        xp[k] = x[k] + h;
        let p = residual(ueta, a, t, &xp)?;
        xp[k] = x[k] - h;
        let q = residual(ueta, a, t, &xp)?;
        xp[k] = x[k];
        for i in 0..nu {
            j[(i, k)] = (p[i] - q[i]) / (2.0 * h);
        }
    }
    Some(j)
}

/// Damped Gauss-Newton on the Σ-residual; a root is accepted at `|r| ≤ 1e-8`.
fn gauss_newton(ueta: &MollifiedField, a: &[f64], t: &Target, start: &[f64], pitch: f64) -> Option<Vec<f64>> {
    let mut x = start.to_vec();
    let mut r = residual(ueta, a, t, &x)?;
    let mut rn = norm2(&r);
    for _ in 0..60 {
        if rn <= 1e-12 {
            break;
        }
        let j = residual_jacobian(ueta, a, t, &x, pitch * 1e-3)?;
        let svd = j.svd(true, true);
        let step = svd.solve(&nalgebra::DVector::from_vec(r.clone()), 1e-12).ok()?;
        let mut lambda = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let xn: Vec<f64> = x.iter().enumerate().map(|(i, v)| v - lambda * step[i]).collect();
            if let Some(rr) = residual(ueta, a, t, &xn) {
                let nn = norm2(&rr);
                if nn < rn {
                    x = xn;
                    r = rr;
                    rn = nn;
                    improved = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !improved || dist2(start, &x) > 4.0 * pitch + 0.05 {
            break;
        }
    }
    (rn <= 1e-8).then_some(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransversalityReport {
    pub points: Vec<Vec<f64>>,
    /// Smallest relevant singular value of the normal differential at each point.
    pub sigma_min: Vec<f64>,
    /// `sup dist(x, S) / dist(u_η(x) − a, Σ)` over the sample.
    pub c_fit: f64,
    pub flagged: bool,
}

pub const TANGENCY_TOL: f64 = 1e-4;

/// Checks that the preimage is cut out transversally and that distances are comparable.
pub fn transversality_report(ueta: &MollifiedField, a: &[f64], t: &Target, points: &[Vec<f64>], margin: f64, samples: usize, seed: u64) -> Result<TransversalityReport> {
    let m = ueta.domain_dim();
    let codim = t.ambient_dim() - t.sigma_dim();
    let pitch = ueta.cache().map_or(ueta.eta / 8.0, |c| c.pitch);
    let mut sigma_min = Vec::new();
    for z in points {
        let s = match residual_jacobian(ueta, a, t, z, pitch * 1e-3) {
            Some(j) if m >= codim => {
                let mut sv: Vec<f64> = j.singular_values().iter().copied().collect();
                sv.sort_by(|x, y| y.total_cmp(x));
                sv[codim - 1]
            }
            _ => 0.0,
        };
        sigma_min.push(s);
    }
    let set = SingularSet::new(m, points.iter().map(|p| Piece::point(p.clone())).collect());
    let c_fit = if points.is_empty() {
        0.0
    } else {
        let parts = crate::rng::blocks(seed, samples, |rng, _, len| {
            let mut sup = 0.0f64;
            for _ in 0..len {
                let x: Vec<f64> = ueta.lo.iter().zip(&ueta.hi).map(|(l, h)| rng.gen_range(l + margin..h - margin)).collect();
                let Ok(v) = ueta.eval(&x) else { continue };
                let y: Vec<f64> = v.iter().zip(a).map(|(p, q)| p - q).collect();
                let d = t.sigma_dist(&y);
                if d > 0.0 {
                    sup = sup.max(set.dist(&x) / d);
                }
            }
            sup
        });
        parts.into_iter().fold(0.0, f64::max)
    };
    let flagged = sigma_min.iter().any(|&s| s < TANGENCY_TOL);
    Ok(TransversalityReport { points: points.to_vec(), sigma_min, c_fit, flagged })
}

/// `v_{η,a} = P ∘ (u_η − a)` with singular set `u_η^{-1}(Σ + a)`.
pub struct ShiftedProjection {
    pub ueta: Arc<MollifiedField>,
    pub a: Vec<f64>,
    pub target: Target,
    set: SingularSet,
}

pub fn shifted_projection(ueta: Arc<MollifiedField>, a: &[f64], t: Target) -> Result<ShiftedProjection> {
    if a.len() != t.ambient_dim() || ueta.ambient_dim() != t.ambient_dim() {
        return Err(Error::Domain("shift and field must live in the target's ambient space".into()));
    }
    let pts = locate_preimage(&ueta, a, &t)?;
    let set = SingularSet::new(ueta.domain_dim(), pts.into_iter().map(Piece::point).collect());
    Ok(ShiftedProjection { ueta, a: a.to_vec(), target: t, set })
}

impl ShiftedProjection {
    fn shifted(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.ueta.eval(x)?.iter().zip(&self.a).map(|(p, q)| p - q).collect())
    }

    /// `ψ(u_η(x) − a)`.
    pub fn psi(&self, x: &[f64]) -> Result<f64> {
        let alpha = self.target.sep() / 4.0;
        Ok(cutoff(self.target.sigma_dist(&self.shifted(x)?), alpha))
    }

    pub fn preimage(&self) -> Vec<Vec<f64>> {
        self.set
            .pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Flat { lo, .. } => Some(lo.clone()),
                Piece::Polyline { .. } => None,
            })
            .collect()
    }
}

/// `ψ = 0` below `α`, `1` above `2α`, cubic smoothstep between.
pub fn cutoff(d: f64, alpha: f64) -> f64 {
    smoothstep3(((d - alpha) / alpha).clamp(0.0, 1.0))
}

impl MapField for ShiftedProjection {
    fn domain_dim(&self) -> usize {
        self.ueta.domain_dim()
    }
    fn ambient_dim(&self) -> usize {
        self.target.ambient_dim()
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.target.project(&self.shifted(x)?)
    }
    fn singular_set(&self) -> &SingularSet {
        &self.set
    }
    fn descriptor(&self) -> serde_json::Value {
        json!({"field": "shifted-projection", "a": self.a, "target": self.target.name(), "u_eta": self.ueta.descriptor()})
    }
    fn target(&self) -> Option<Target> {
        Some(self.target)
    }
    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let y = self.shifted(x)?;
        Ok(self.target.jacobian(&y)? * self.ueta.jacobian(x)?)
    }
}

/// `w = ψ(u_η − a) v` (`far = true`) or `y = (1 − ψ(u_η − a)) v`.
pub struct CutoffPart {
    pub v: Arc<ShiftedProjection>,
    pub far: bool,
    set: SingularSet,
}

impl CutoffPart {
    pub fn factor(&self, x: &[f64]) -> Result<f64> {
        let psi = self.v.psi(x)?;
        Ok(if self.far { psi } else { 1.0 - psi })
    }
}

impl MapField for CutoffPart {
    fn domain_dim(&self) -> usize {
        self.v.domain_dim()
    }
    fn ambient_dim(&self) -> usize {
        self.v.ambient_dim()
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let f = self.factor(x)?;
        if f == 0.0 {
            return Ok(vec![0.0; self.ambient_dim()]);
        }
        Ok(self.v.eval(x)?.into_iter().map(|c| f * c).collect())
    }
    fn singular_set(&self) -> &SingularSet {
        &self.set
    }
    fn descriptor(&self) -> serde_json::Value {
        json!({"field": if self.far { "cutoff-far" } else { "cutoff-near" }, "v": self.v.descriptor()})
    }
    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        if self.far && self.factor(x)? == 0.0 {
            return Ok(DMatrix::zeros(self.ambient_dim(), self.domain_dim()));
        }
        if !self.far && self.factor(x)? == 0.0 && self.v.psi(x)? == 1.0 {
            // flat region of ψ = 1: check a small neighbourhood stays there
            let h = 1e-6;
            let still = (0..x.len()).all(|k| {
                let mut xp = x.to_vec();
                xp[k] += h;
                let mut xm = x.to_vec();
                xm[k] -= h;
                matches!((self.v.psi(&xp), self.v.psi(&xm)), (Ok(a), Ok(b)) if a == 1.0 && b == 1.0)
            });
            if still {
                return Ok(DMatrix::zeros(self.ambient_dim(), self.domain_dim()));
            }
        }
        fd_jacobian(self, x)
    }
}

/// `(w, y)` with `w + y = v_{η,a}`.
pub fn cutoff_split(v: Arc<ShiftedProjection>) -> (CutoffPart, CutoffPart) {
    let m = v.domain_dim();
    let set = v.singular_set().clone();
    (CutoffPart { v: v.clone(), far: true, set: SingularSet::empty(m) }, CutoffPart { v, far: false, set })
}

/// One mollification scale of the projection method.
pub struct ProjectionRun {
    pub u: Field,
    pub target: Target,
    pub eta: f64,
    pub alpha: f64,
    pub domain: Domain,
    pub ueta: Arc<MollifiedField>,
}

impl ProjectionRun {
    pub fn new(u: Field, target: Target, eta: f64, domain: &Domain, opts: MollifyOptions) -> Result<Self> {
        if u.ambient_dim() != target.ambient_dim() {
            return Err(Error::Domain("field values do not live in the target's ambient space".into()));
        }
        let ueta = Arc::new(mollify(u.clone(), eta, 2.0 * eta, domain, opts)?);
        Ok(Self { u, target, eta, alpha: target.sep() / 4.0, domain: domain.clone(), ueta })
    }

    pub fn shifted(&self, a: &[f64]) -> Result<Arc<ShiftedProjection>> {
        Ok(Arc::new(shifted_projection(self.ueta.clone(), a, self.target)?))
    }

    pub fn draw_shift<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        crate::rng::in_ball(rng, self.target.ambient_dim(), self.alpha)
    }

    /// `‖y_{η,a}‖^p_{W^{s,p}}`.
    pub fn near_part_norm_p(&self, a: &[f64], s: f64, p: f64, opts: &EnergyOptions) -> Result<f64> {
        let v = self.shifted(a)?;
        let (_, y) = cutoff_split(v);
        let y: Field = Arc::new(y);
        let zero: Field = Arc::new(ConstantField::new(self.ueta.domain_dim(), vec![0.0; self.target.ambient_dim()], None));
        Ok(wsp_distance(y, zero, s, p, &self.domain, opts)?.total_p())
    }

    /// Measure of `{|u_η − u| ≥ α}` by uniform sampling.
    pub fn bad_set_measure(&self, samples: usize, seed: u64) -> f64 {
        let hits: usize = crate::rng::blocks(seed, samples, |rng, _, len| {
            let mut c = 0;
            for _ in 0..len {
                let x = self.domain.sample_uniform(rng);
                if let (Ok(a), Ok(b)) = (self.ueta.eval(&x), self.u.eval(&x)) {
                    if dist2(&a, &b) >= self.alpha {
                        c += 1;
                    }
                }
            }
            c
        })
        .into_iter()
        .sum();
        self.domain.volume() * hits as f64 / samples as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftAverage {
    /// Mean of `‖y_{η,a}‖^p` over the drawn shifts.
    pub mean: f64,
    pub stderr: f64,
    /// The same mean times `|B_α|`.
    pub integral: f64,
    pub shifts: Vec<(Vec<f64>, f64)>,
}

/// Monte Carlo estimate of `∫_{B_α} ‖y_{η,a}‖^p_{W^{s,p}} da`.
pub fn average_over_shifts(run: &ProjectionRun, p: f64, s: f64, n_shifts: usize, opts: &EnergyOptions) -> Result<ShiftAverage> {
    if n_shifts < 16 {
        return Err(Error::Domain(format!("need at least 16 shifts, got {n_shifts}")));
    }
    let mut shifts = Vec::with_capacity(n_shifts);
    for k in 0..n_shifts {
        let mut rng = crate::rng::stream(opts.seed ^ 0x05ee_da11, k as u64);
        let a = run.draw_shift(&mut rng);
        let sub = EnergyOptions { seed: opts.seed.wrapping_add(1000 + k as u64), ..*opts };
        let v = run.near_part_norm_p(&a, s, p, &sub)?;
        shifts.push((a, v));
    }
    let n = n_shifts as f64;
    let mean = shifts.iter().map(|s| s.1).sum::<f64>() / n;
    let var = shifts.iter().map(|s| (s.1 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let vol = crate::energy::ball_volume(run.target.ambient_dim()) * run.alpha.powi(run.target.ambient_dim() as i32);
    Ok(ShiftAverage { mean, stderr: (var / n).sqrt(), integral: mean * vol, shifts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedShift {
    pub a: Vec<f64>,
    pub norm_p: f64,
    pub threshold: f64,
    pub draws: usize,
    pub transversality: TransversalityReport,
}

pub const MAX_DRAWS: usize = 64;

/// Draws shifts until `‖y_{η,a}‖^p` is below the Markov threshold
/// `max(√mean, 2·mean)` and the preimage is transversal.
pub fn select_shift(run: &ProjectionRun, p: f64, s: f64, avg: &ShiftAverage, opts: &EnergyOptions) -> Result<SelectedShift> {
    let threshold = avg.mean.sqrt().max(2.0 * avg.mean);
    let mut seen = Vec::new();
    for k in 0..MAX_DRAWS {
        let mut rng = crate::rng::stream(opts.seed ^ 0x00c4_01ce, k as u64);
        let a = run.draw_shift(&mut rng);
        let sub = EnergyOptions { seed: opts.seed.wrapping_add(5000 + k as u64), ..*opts };
        let norm_p = run.near_part_norm_p(&a, s, p, &sub)?;
        let pts = locate_preimage(&run.ueta, &a, &run.target)?;
        let tr = transversality_report(&run.ueta, &a, &run.target, &pts, 0.0, 2000, opts.seed)?;
        if norm_p <= threshold && !tr.flagged {
            return Ok(SelectedShift { a, norm_p, threshold, draws: k + 1, transversality: tr });
        }
        seen.push((norm_p, tr.flagged));
    }
    let flagged = seen.iter().filter(|s| s.1).count();
    let best = seen.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    Err(Error::Selection(format!(
        "{MAX_DRAWS} draws exhausted: threshold {threshold:.4e}, smallest norm {best:.4e}, {flagged} tangential draws"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub n_shifts: usize,
    pub energy: EnergyOptions,
    pub mollify: Option<MollifyOptions>,
}

pub struct LadderStep {
    pub eta: f64,
    pub average: ShiftAverage,
    pub selected: SelectedShift,
    pub field: Arc<ShiftedProjection>,
    pub distance: WspReport,
}

impl LadderStep {
    pub fn summary(&self) -> serde_json::Value {
        json!({
            "eta": self.eta,
            "a": self.selected.a,
            "draws": self.selected.draws,
            "average": self.average.mean,
            "average_stderr": self.average.stderr,
            "distance": self.distance.distance,
            "distance_stderr": self.distance.stderr,
            "preimage": self.selected.transversality.points,
            "c_fit": self.selected.transversality.c_fit,
        })
    }
}

/// Runs the projection method on each `η` and measures `‖v_{η,a_η} − u‖_{W^{s,p}}`.
pub fn projection_pipeline(u: Field, t: Target, s: f64, p: f64, etas: &[f64], domain: &Domain, opts: &PipelineOptions) -> Result<Vec<LadderStep>> {
    let l = (t.ambient_dim() - t.sigma_dim()) as f64;
    if s * p >= l {
        return Err(Error::Domain(format!("need s*p < {l} for target {}, got {}", t.name(), s * p)));
    }
    let mut out = Vec::new();
    for (k, &eta) in etas.iter().enumerate() {
        let mo = opts.mollify.unwrap_or_else(|| MollifyOptions::for_dim(u.domain_dim()));
        let run = ProjectionRun::new(u.clone(), t, eta, domain, mo)?;
        let eo = EnergyOptions { seed: opts.energy.seed.wrapping_add(7919 * k as u64), ..opts.energy };
        let average = average_over_shifts(&run, p, s, opts.n_shifts, &eo)?;
        let selected = select_shift(&run, p, s, &average, &eo)?;
        let field = run.shifted(&selected.a)?;
        let f: Field = field.clone();
        let distance = wsp_distance(f, u.clone(), s, p, domain, &eo)?;
        out.push(LadderStep { eta, average, selected, field, distance });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MollifierCheck {
    /// `(η, C, C′)` per scale.
    pub per_eta: Vec<(f64, f64, f64)>,
    pub c: f64,
    pub c_prime: f64,
    pub c_spread: f64,
    pub c_prime_spread: f64,
    pub counterexamples: Vec<Vec<f64>>,
    pub pass: bool,
}

/// Fits `|φ_η∗v − v| ≤ C η^σ D^{σ,p}v` and `|D(φ_η∗v)| ≤ C′ η^{σ−1} D^{σ,p}v`
/// on the points `points(η)`; passes when both constants move by at most 25% over the ladder.
pub fn mollifier_estimate_check<F>(v: Field, sigma: f64, p: f64, etas: &[f64], domain: &Domain, points: F, samples: usize, seed: u64) -> Result<MollifierCheck>
where
    F: Fn(f64) -> Vec<Vec<f64>>,
{
    let m = v.domain_dim();
    let mut per_eta = Vec::new();
    let mut counterexamples = Vec::new();
    let (lo, hi) = domain.bbox();
    for (k, &eta) in etas.iter().enumerate() {
        let ueta = mollify(v.clone(), eta, 2.0 * eta, domain, MollifyOptions::direct(MollifyOptions::for_dim(m).subdivisions))?;
        let (mut c, mut cp) = (0.0f64, 0.0f64);
        for (i, x) in points(eta).iter().enumerate() {
            if x.iter().zip(lo.iter().zip(&hi)).any(|(v, (a, b))| v - a <= eta || b - v <= eta) {
                return Err(Error::Domain(format!("{x:?} is within eta of the boundary")));
            }
            let ux = v.eval(x)?;
            let lhs = dist2(&ueta.eval_direct(x)?, &ux);
            let dlhs = ueta.jacobian(x)?.norm();
            let d = crate::energy::fractional_derivative_at(v.as_ref(), sigma, p, x, domain, samples, seed.wrapping_add((k * 1000 + i) as u64))?;
            if d.value <= 1e-12 {
                if lhs > 1e-8 || dlhs > 1e-8 {
                    counterexamples.push(x.clone());
                }
                continue;
            }
            c = c.max(lhs / (eta.powf(sigma) * d.value));
            cp = cp.max(dlhs / (eta.powf(sigma - 1.0) * d.value));
        }
        per_eta.push((eta, c, cp));
    }
    let spread = |sel: fn(&(f64, f64, f64)) -> f64| {
        let vals: Vec<f64> = per_eta.iter().map(sel).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(0.0, f64::max);
        if hi == 0.0 {
            1.0
        } else {
            hi / lo
        }
    };
    let c_spread = spread(|e| e.1);
    let c_prime_spread = spread(|e| e.2);
    let c = per_eta.iter().map(|e| e.1).fold(0.0, f64::max);
    let c_prime = per_eta.iter().map(|e| e.2).fold(0.0, f64::max);
    let pass = counterexamples.is_empty() && c_spread <= 1.25 && c_prime_spread <= 1.25;
    Ok(MollifierCheck { per_eta, c, c_prime, c_spread, c_prime_spread, counterexamples, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{AffineField, RadialField};

    #[test]
    fn mollifier_has_unit_mass() {
        for m in 1..=3 {
            let mol = Mollifier::new(m, 1);
            let rule = gauss_rule(-1.0, 1.0, 48);
            let mass: f64 = if m == 1 {
                rule.iter().map(|&(t, w)| w * mol.density(&[t])).sum()
            } else if m == 2 {
                rule.iter().flat_map(|&(a, wa)| rule.iter().map(move |&(b, wb)| (a, b, wa * wb))).map(|(a, b, w)| w * mol.density(&[a, b])).sum()
            } else {
                let mut s = 0.0;
                for &(a, wa) in &rule {
                    for &(b, wb) in &rule {
                        for &(c, wc) in &rule {
                            s += wa * wb * wc * mol.density(&[a, b, c]);
                        }
                    }
                }
                s
            };
            assert!((mass - 1.0).abs() < 1e-10, "m={m}: {mass}");
            let st: f64 = mol.stencil.iter().map(|n| n.1).sum();
            assert!((st - 1.0).abs() < 1e-14);
            assert!(mol.stencil.iter().all(|n| n.1 >= 0.0));
        }
    }

    #[test]
    fn mollification_preserves_affine_maps() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let u: Field = Arc::new(AffineField::new(a, vec![0.3, -0.1]));
        let ue = mollify(u.clone(), 0.2, 0.4, &Domain::cube(2), MollifyOptions::for_dim(2)).unwrap();
        for x in [[0.1, 0.2], [-0.77, 0.9], [0.0, -1.0]] {
            let (p, q) = (ue.eval(&x).unwrap(), u.eval(&x).unwrap());
            assert!(dist2(&p, &q) < 1e-10, "{p:?} {q:?}");
        }
        assert!(matches!(ue.eval(&[1.5, 0.0]), Err(Error::Domain(_))));
        let ud = mollify(u.clone(), 0.2, 0.4, &Domain::cube(2), MollifyOptions::direct(2)).unwrap();
        let j = ud.jacobian(&[0.1, -0.3]).unwrap();
        let err = (j.clone() - u.jacobian(&[0.1, -0.3]).unwrap()).norm();
        assert!(err < 1e-8, "{err} {j}");
    }

    #[test]
    fn mollified_jump_has_the_marginal_slope() {
        let u: Field = Arc::new(crate::fields::SignField::new(2, 0));
        let eta = 0.1;
        let ud = mollify(u, eta, 2.0 * eta, &Domain::cube(2), MollifyOptions::direct(4)).unwrap();
        let mol = Mollifier::new(2, 1);
        let marginal: f64 = gauss_rule(-1.0, 1.0, 200).iter().map(|&(t, w)| w * mol.density(&[0.0, t])).sum();
        let j = ud.jacobian(&[0.0, 0.2]).unwrap();
        assert!((j[(0, 0)] / (2.0 * marginal / eta) - 1.0).abs() < 0.02, "{j}");
        assert!(j[(0, 1)].abs() < 1e-9);
    }

    #[test]
    fn mollified_vortex_near_the_field_away_from_core() {
        let u: Field = Arc::new(RadialField::new(2));
        let ue = mollify(u.clone(), 0.1, 0.2, &Domain::cube(2), MollifyOptions::for_dim(2)).unwrap();
        let d = dist2(&ue.eval(&[0.5, 0.0]).unwrap(), &u.eval(&[0.5, 0.0]).unwrap());
        assert!(d <= 0.05, "{d}");
        let v = shifted_projection(Arc::new(ue), &[0.0, 0.0], Target::Sphere(1)).unwrap();
        let pts = v.preimage();
        assert_eq!(pts.len(), 1);
        assert!(norm2(&pts[0]) < 1e-6, "{pts:?}");
    }
}
