//! Quadrature for `L^p` norms, integer Sobolev seminorms and Gagliardo seminorms.
//!
//! Monte Carlo draws from a mixture of the uniform law on the domain and
//! sup-norm boxes of dyadic radii around the singular set, so integrands
//! blowing up like `dist^{-a}` with `a` below the codimension keep finite variance.

use crate::error::{Error, Result};
use crate::fields::{hessian_norm, DifferenceField, Field, JetField, MapField};
use crate::geom::union_volume;
use crate::io::CsvRow;
use crate::sets::{Piece, SingularSet};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    /// Disjoint union of boxes.
    Boxes(Vec<(Vec<f64>, Vec<f64>)>),
}

impl Domain {
    pub fn cube(m: usize) -> Self {
        Domain::Box { lo: vec![-1.0; m], hi: vec![1.0; m] }
    }

    pub fn unit_ball(m: usize) -> Self {
        Domain::Ball { center: vec![0.0; m], radius: 1.0 }
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Box { lo, .. } => lo.len(),
            Domain::Ball { center, .. } => center.len(),
            Domain::Boxes(b) => b.first().map_or(0, |b| b.0.len()),
        }
    }

    pub fn volume(&self) -> f64 {
        match self {
            Domain::Box { lo, hi } => lo.iter().zip(hi).map(|(a, b)| b - a).product(),
            Domain::Ball { center, radius } => ball_volume(center.len()) * radius.powi(center.len() as i32),
            Domain::Boxes(b) => union_volume(b),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let in_box = |lo: &[f64], hi: &[f64]| x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| *a <= *v && *v <= *b);
        match self {
            Domain::Box { lo, hi } => in_box(lo, hi),
            Domain::Ball { center, radius } => crate::scalar::dist2(x, center) <= *radius,
            Domain::Boxes(b) => b.iter().any(|(lo, hi)| in_box(lo, hi)),
        }
    }

    pub fn bbox(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Domain::Box { lo, hi } => (lo.clone(), hi.clone()),
            Domain::Ball { center, radius } => (center.iter().map(|c| c - radius).collect(), center.iter().map(|c| c + radius).collect()),
            Domain::Boxes(b) => {
                let m = self.dim();
                let mut lo = vec![f64::INFINITY; m];
                let mut hi = vec![f64::NEG_INFINITY; m];
                for (l, h) in b {
                    for i in 0..m {
                        lo[i] = lo[i].min(l[i]);
                        hi[i] = hi[i].max(h[i]);
                    }
                }
                (lo, hi)
            }
        }
    }

    pub fn diameter(&self) -> f64 {
        let (lo, hi) = self.bbox();
        crate::scalar::dist2(&lo, &hi)
    }

    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Domain::Box { lo, hi } => lo.iter().zip(hi).map(|(a, b)| a + (b - a) * rng.gen::<f64>()).collect(),
            Domain::Ball { center, radius } => {
                let z = crate::rng::in_ball(rng, center.len(), *radius);
                center.iter().zip(&z).map(|(c, v)| c + v).collect()
            }
            Domain::Boxes(b) => {
                let vols: Vec<f64> = b.iter().map(|(l, h)| l.iter().zip(h).map(|(p, q)| q - p).product()).collect();
                let total: f64 = vols.iter().sum();
                let mut t = rng.gen::<f64>() * total;
                let mut k = 0;
                while k + 1 < vols.len() && t > vols[k] {
                    t -= vols[k];
                    k += 1;
                }
                let (l, h) = &b[k];
                l.iter().zip(h).map(|(p, q)| p + (q - p) * rng.gen::<f64>()).collect()
            }
        }
    }
}

/// Volume of the euclidean unit ball in `R^m`.
pub fn ball_volume(m: usize) -> f64 {
    match m {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * PI / m as f64 * ball_volume(m - 2),
    }
}

/// Area of the unit sphere `S^{m-1} ⊂ R^m`.
pub fn sphere_area(m: usize) -> f64 {
    m as f64 * ball_volume(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    TensorGrid,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyOptions {
    pub estimator: Estimator,
    pub samples: usize,
    pub seed: u64,
    /// Coarsest grid resolution per axis; two refinements follow.
    pub grid_n: usize,
}

impl Default for EnergyOptions {
    fn default() -> Self {
        Self { estimator: Estimator::MonteCarlo, samples: 200_000, seed: 0, grid_n: 0 }
    }
}

impl EnergyOptions {
    pub fn mc(samples: usize, seed: u64) -> Self {
        Self { estimator: Estimator::MonteCarlo, samples, seed, grid_n: 0 }
    }

    pub fn grid(n: usize) -> Self {
        Self { estimator: Estimator::TensorGrid, samples: 0, seed: 0, grid_n: n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub k: i32,
    pub mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub value: f64,
    pub estimator: Estimator,
    pub samples: usize,
    /// Standard error of the mean (Monte Carlo).
    pub stderr: f64,
    /// Change made by extrapolation (grid).
    pub richardson_delta: Option<f64>,
    pub s: f64,
    pub p: f64,
    pub sigma: f64,
    pub k: usize,
    /// Nodes or samples on the exclusion zone of the singular set, counted as zero.
    pub excluded: usize,
    pub strata: Vec<Stratum>,
}

impl EnergyReport {
    /// Error bar: `stderr` or the Richardson correction.
    pub fn uncertainty(&self) -> f64 {
        self.richardson_delta.unwrap_or(self.stderr)
    }

    pub fn csv_row(&self, experiment_id: &str, quantity: &str, seed: u64) -> CsvRow {
        CsvRow {
            experiment_id: experiment_id.to_string(),
            quantity: quantity.to_string(),
            s: self.s,
            p: self.p,
            sigma: self.sigma,
            value: self.value,
            stderr: self.uncertainty(),
            samples: self.samples as u64,
            seed,
        }
    }

    fn with_order(mut self, s: f64, p: f64) -> Self {
        self.s = s;
        self.p = p;
        self.k = s.floor() as usize;
        self.sigma = s - s.floor();
        self
    }
}

const EXCLUSION: f64 = 1e-9;
const LEVELS: usize = 30;
const DELTA0: f64 = 0.5;
const UNIFORM_WEIGHT: f64 = 0.3;
const DIVERGENCE_GROWTH: f64 = 4.0;
const DIVERGENCE_RUN: usize = 3;
const MIN_STRATUM: usize = 30;

/// Importance law on a domain concentrated near a singular set.
pub struct Mixture {
    domain: Domain,
    set: SingularSet,
    cum: Vec<f64>,
    weights: Vec<f64>,
    volume: f64,
    m: usize,
}

impl Mixture {
    pub fn new(domain: &Domain, set: &SingularSet) -> Self {
        let (blo, bhi) = domain.bbox();
        let m = domain.dim();
        let mut pieces = Vec::new();
        for p in &set.pieces {
            match p {
                Piece::Flat { lo, hi } => {
                    let lo2: Vec<f64> = lo.iter().zip(&blo).map(|(a, b)| a.max(*b)).collect();
                    let hi2: Vec<f64> = hi.iter().zip(&bhi).map(|(a, b)| a.min(*b)).collect();
                    if lo2.iter().zip(&hi2).any(|(a, b)| a > b) {
                        continue;
                    }
                    let clipped = Piece::Flat { lo: lo2, hi: hi2 };
                    if clipped.dim() == p.dim() {
                        pieces.push(clipped);
                    }
                }
                Piece::Polyline { .. } => pieces.push(p.clone()),
            }
        }
        // equal total weight per piece dimension, by measure within a dimension
        let mut weights = vec![0.0; pieces.len()];
        let dims: std::collections::BTreeSet<usize> = pieces.iter().map(Piece::dim).collect();
        for &d in &dims {
            let idx: Vec<usize> = (0..pieces.len()).filter(|&j| pieces[j].dim() == d).collect();
            let total: f64 = idx.iter().map(|&j| if d == 0 { 1.0 } else { pieces[j].measure() }).sum();
            for &j in &idx {
                let w = if d == 0 { 1.0 } else { pieces[j].measure() };
                weights[j] = w / total / dims.len() as f64;
            }
        }
        let mut acc = 0.0;
        let cum = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Self { domain: domain.clone(), set: SingularSet::with_crossings(m, pieces, Vec::new()), cum, weights, volume: domain.volume(), m }
    }

    fn has_set(&self) -> bool {
        !self.set.is_empty()
    }

    fn uniform_weight(&self) -> f64 {
        if self.has_set() {
            UNIFORM_WEIGHT
        } else {
            1.0
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        if !self.has_set() || rng.gen::<f64>() < UNIFORM_WEIGHT {
            return self.domain.sample_uniform(rng);
        }
        let level = rng.gen_range(0..LEVELS);
        let delta = DELTA0 * 0.5f64.powi(level as i32);
        let t = rng.gen::<f64>() * self.cum[self.cum.len() - 1];
        let j = self.cum.partition_point(|&c| c < t).min(self.cum.len() - 1);
        let base = self.set.pieces[j].sample(rng);
        base.iter().map(|b| b + delta * (2.0 * rng.gen::<f64>() - 1.0)).collect()
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        let mut q = if self.domain.contains(x) { self.uniform_weight() / self.volume } else { 0.0 };
        if self.has_set() {
            let w = (1.0 - UNIFORM_WEIGHT) / LEVELS as f64;
            let mut delta = DELTA0;
            for _ in 0..LEVELS {
                let loc = self.set.local_density(x, delta, &self.weights);
                if loc == 0.0 {
                    break;
                }
                q += w * loc / (2.0 * delta).powi(self.m as i32);
                delta *= 0.5;
            }
        }
        q
    }
}

fn stratum_of(d: f64) -> i32 {
    if d.is_finite() && d > 0.0 {
        (-d.log2()).floor() as i32
    } else {
        i32::MIN
    }
}

struct Accum {
    sum: f64,
    sumsq: f64,
    n: usize,
    excluded: usize,
    strata: std::collections::BTreeMap<i32, (f64, usize)>,
}

impl Accum {
    fn new() -> Self {
        Self { sum: 0.0, sumsq: 0.0, n: 0, excluded: 0, strata: Default::default() }
    }

    fn merge(mut self, o: Accum) -> Self {
        self.sum += o.sum;
        self.sumsq += o.sumsq;
        self.n += o.n;
        self.excluded += o.excluded;
        for (k, (s, c)) in o.strata {
            let e = self.strata.entry(k).or_insert((0.0, 0));
            e.0 += s;
            e.1 += c;
        }
        self
    }
}

/// `f(x, rng)` returns `(weighted sample, raw integrand)`, or `None` on the singular set, which counts as zero.
fn monte_carlo<F>(domain: &Domain, set: &SingularSet, n: usize, seed: u64, f: F) -> Result<EnergyReport>
where
    F: Fn(&[f64], f64, &mut ChaCha8Rng) -> Result<Option<(f64, f64)>> + Sync,
{
    if n < 2 {
        return Err(Error::Domain("Monte Carlo needs at least two samples".into()));
    }
    let mix = Mixture::new(domain, set);
    let parts = crate::rng::blocks(seed, n, |rng, _, len| -> Result<Accum> {
        let mut acc = Accum::new();
        let mut done = 0;
        while done < len {
            let x = mix.sample(rng);
            if !domain.contains(&x) {
                acc.n += 1;
                acc.strata.entry(i32::MIN).or_insert((0.0, 0)).1 += 1;
                done += 1;
                continue;
            }
            let d = set.dist(&x);
            let hit = if d < EXCLUSION { None } else { f(&x, d, rng)? };
            let Some((val, raw)) = hit else {
                acc.excluded += 1;
                acc.n += 1;
                done += 1;
                continue;
            };
            let q = mix.density(&x);
            if !val.is_finite() {
                return Err(Error::NonFinite(x));
            }
            let w = val / q;
            acc.sum += w;
            acc.sumsq += w * w;
            acc.n += 1;
            let e = acc.strata.entry(stratum_of(d)).or_insert((0.0, 0));
            e.0 += raw;
            e.1 += 1;
            done += 1;
        }
        Ok(acc)
    });
    let mut acc = Accum::new();
    for p in parts {
        acc = acc.merge(p?);
    }
    let nf = acc.n as f64;
    let mean = acc.sum / nf;
    let var = ((acc.sumsq / nf - mean * mean) * nf / (nf - 1.0)).max(0.0);
    let strata: Vec<Stratum> = acc
        .strata
        .iter()
        .filter(|(k, _)| **k != i32::MIN)
        .map(|(&k, &(s, c))| Stratum { k, mean: s / c as f64, count: c })
        .collect();
    check_divergence(&strata)?;
    Ok(EnergyReport {
        value: mean.max(0.0),
        estimator: Estimator::MonteCarlo,
        samples: acc.n,
        stderr: (var / nf).sqrt(),
        richardson_delta: None,
        s: 0.0,
        p: 0.0,
        sigma: 0.0,
        k: 0,
        excluded: acc.excluded,
        strata,
    })
}

/// Fails when stratum means grow by more than 4× over each of the three
/// deepest consecutive dyadic strata, so the growth persists down to the finest resolved scale.
pub fn check_divergence(strata: &[Stratum]) -> Result<()> {
    let usable: Vec<&Stratum> = strata.iter().filter(|s| s.count >= MIN_STRATUM).collect();
    if usable.len() <= DIVERGENCE_RUN {
        return Ok(());
    }
    let tail = &usable[usable.len() - DIVERGENCE_RUN - 1..];
    let growing = tail.windows(2).all(|w| w[1].k == w[0].k + 1 && w[0].mean > 0.0 && w[1].mean > DIVERGENCE_GROWTH * w[0].mean);
    if growing {
        let last = tail[DIVERGENCE_RUN];
        return Err(Error::Divergence(format!(
            "stratum means grow geometrically near the singular set (strata {}..{}, last ratio {:.2})",
            tail[0].k,
            last.k,
            last.mean / tail[DIVERGENCE_RUN - 1].mean
        )));
    }
    Ok(())
}

/// Maps the unit cube onto the domain; returns `(point, jacobian determinant)`.
fn chart(domain: &Domain, t: &[f64], out: &mut Vec<f64>) -> f64 {
    out.clear();
    match domain {
        Domain::Box { lo, hi } => {
            out.extend(t.iter().zip(lo.iter().zip(hi)).map(|(s, (a, b))| a + (b - a) * s));
            lo.iter().zip(hi).map(|(a, b)| b - a).product()
        }
        Domain::Ball { center, radius } => {
            // radius r = R s^4 clusters nodes at the center
            let m = center.len();
            let s = t[0];
            let r = radius * s.powi(4);
            let dr = 4.0 * radius * s.powi(3);
            match m {
                1 => {
                    let sign = if t.len() > 1 && t[1] < 0.5 { -1.0 } else { 1.0 };
                    out.push(center[0] + sign * r);
                    2.0 * dr
                }
                2 => {
                    let th = 2.0 * PI * t[1];
                    out.extend([center[0] + r * th.cos(), center[1] + r * th.sin()]);
                    dr * r * 2.0 * PI
                }
                _ => {
                    let ct = 2.0 * t[1] - 1.0;
                    let st = (1.0 - ct * ct).max(0.0).sqrt();
                    let ph = 2.0 * PI * t[2];
                    out.extend([center[0] + r * st * ph.cos(), center[1] + r * st * ph.sin(), center[2] + r * ct]);
                    dr * r * r * 2.0 * 2.0 * PI
                }
            }
        }
        Domain::Boxes(_) => unreachable!("boxes are integrated one at a time"),
    }
}

fn midpoint(domain: &Domain, n: usize, f: &(dyn Fn(&[f64]) -> Result<Option<f64>> + Sync)) -> Result<(f64, usize, usize)> {
    let m = domain.dim();
    let gdim = match domain {
        Domain::Ball { center, .. } if center.len() == 1 => 2,
        _ => m,
    };
    let total = n.pow(gdim as u32);
    let h = 1.0 / n as f64;
    let cell = h.powi(gdim as i32);
    let chunk = 4096;
    let parts: Vec<Result<(f64, usize)>> = (0..total.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut t = vec![0.0; gdim];
            let mut x = Vec::with_capacity(m);
            let mut acc = 0.0;
            let mut skipped = 0;
            for idx in c * chunk..((c + 1) * chunk).min(total) {
                let mut r = idx;
                for ti in t.iter_mut() {
                    *ti = ((r % n) as f64 + 0.5) * h;
                    r /= n;
                }
                let jac = chart(domain, &t, &mut x);
                match f(&x)? {
                    Some(v) if v.is_finite() => acc += v * jac,
                    Some(_) => return Err(Error::NonFinite(x.clone())),
                    None => skipped += 1,
                }
            }
            Ok((acc * cell, skipped))
        })
        .collect();
    let mut sum = 0.0;
    let mut skipped = 0;
    for p in parts {
        let (a, s) = p?;
        sum += a;
        skipped += s;
    }
    Ok((sum, total, skipped))
}

/// Midpoint rule at `n, 2n, 4n`, extrapolated by Aitken's Δ² (unknown order) or
/// by Richardson with the midpoint order 2 when the differences are not geometric.
fn grid_integrate(domain: &Domain, n0: usize, f: &(dyn Fn(&[f64]) -> Result<Option<f64>> + Sync)) -> Result<EnergyReport> {
    let parts: Vec<Domain> = match domain {
        Domain::Boxes(b) => b.iter().map(|(lo, hi)| Domain::Box { lo: lo.clone(), hi: hi.clone() }).collect(),
        d => vec![d.clone()],
    };
    let mut levels = [0.0; 3];
    let mut samples = 0;
    let mut skipped = 0;
    for d in &parts {
        for (l, lv) in levels.iter_mut().enumerate() {
            let (v, n, s) = midpoint(d, n0 << l, f)?;
            *lv += v;
            samples += n;
            skipped += s;
        }
    }
    let [i1, i2, i4] = levels;
    let (d1, d2) = (i2 - i1, i4 - i2);
    let value = if d1 != 0.0 && d2 != 0.0 && d2 / d1 > 0.0 && d2 / d1 < 0.9 {
        i4 - d2 * d2 / (d2 - d1)
    } else {
        i4 + d2 / 3.0
    };
    Ok(EnergyReport {
        value: value.max(0.0),
        estimator: Estimator::TensorGrid,
        samples,
        stderr: 0.0,
        richardson_delta: Some((value - i4).abs().max(d2.abs() * 1e-3)),
        s: 0.0,
        p: 0.0,
        sigma: 0.0,
        k: 0,
        excluded: skipped,
        strata: Vec::new(),
    })
}

fn default_grid_n(m: usize) -> usize {
    match m {
        1 => 1024,
        2 => 64,
        _ => 12,
    }
}

/// Integrates a pointwise quantity of `u`, choosing the estimator from `opts`.
fn integrate<G>(u: &dyn MapField, domain: &Domain, opts: &EnergyOptions, g: G) -> Result<EnergyReport>
where
    G: Fn(&[f64]) -> Result<f64> + Sync,
{
    if domain.dim() != u.domain_dim() {
        return Err(Error::Domain(format!("domain dimension {} but field dimension {}", domain.dim(), u.domain_dim())));
    }
    let set = u.singular_set();
    let eval = |x: &[f64]| match g(x) {
        Ok(v) => Ok(Some(v)),
        Err(Error::Singular { .. }) => Ok(None),
        Err(e) => Err(e),
    };
    match opts.estimator {
        Estimator::MonteCarlo => monte_carlo(domain, set, opts.samples, opts.seed, |x, _, _| Ok(eval(x)?.map(|v| (v, v)))),
        Estimator::TensorGrid => {
            let n = if opts.grid_n == 0 { default_grid_n(domain.dim()) } else { opts.grid_n };
            grid_integrate(domain, n, &|x| if set.dist(x) < EXCLUSION { Ok(None) } else { eval(x) })
        }
    }
}

/// `∫_D |u|^p`.
pub fn lp_norm_p(u: &dyn MapField, p: f64, domain: &Domain, opts: &EnergyOptions) -> Result<EnergyReport> {
    check_p(p)?;
    Ok(integrate(u, domain, opts, |x| Ok(crate::scalar::norm2(&u.eval(x)?).powf(p)))?.with_order(0.0, p))
}

/// `∫_D |u − v|^p`.
pub fn lp_distance_p(u: Field, v: Field, p: f64, domain: &Domain, opts: &EnergyOptions) -> Result<EnergyReport> {
    lp_norm_p(&DifferenceField::new(u, v)?, p, domain, opts)
}

/// `∫_D |D^j u|^p` with the Frobenius norm of the `j`-th differential.
pub fn grad_energy(u: &dyn MapField, j: usize, p: f64, domain: &Domain, opts: &EnergyOptions) -> Result<EnergyReport> {
    check_p(p)?;
    let rep = match j {
        1 => integrate(u, domain, opts, |x| Ok(u.jacobian(x)?.norm().powf(p)))?,
        2 => integrate(u, domain, opts, |x| Ok(hessian_norm(u, x)?.powf(p)))?,
        _ => return Err(Error::Unsupported(format!("derivatives of order {j}"))),
    };
    Ok(rep.with_order(j as f64, p))
}

fn check_p(p: f64) -> Result<()> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::Domain(format!("need p >= 1, got {p}")));
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(Error::Domain(format!("need 0 < sigma < 1, got {sigma}")));
    }
    Ok(())
}

/// Radial proposal for `h = y − x`: an equal mixture of `|h| = R U^{1/δ}` and
/// `|h| = 2d U^{1/δ}` with `d = dist(x, 𝒮)`, uniform direction.
struct PairKernel {
    m: usize,
    radius: f64,
    delta: f64,
    area: f64,
    exponent: f64,
}

impl PairKernel {
    fn new(m: usize, radius: f64, sigma: f64, p: f64) -> Self {
        let delta = (p * (1.0 - sigma)).min(1.0) / 2.0;
        Self { m, radius, delta, area: sphere_area(m), exponent: m as f64 + sigma * p }
    }

    /// Density of `|h| = r` under the mixture.
    fn radial_density(&self, r: f64, local: Option<f64>) -> f64 {
        let law = |cap: f64| if r <= cap { self.delta * r.powf(self.delta - 1.0) / cap.powf(self.delta) } else { 0.0 };
        match local {
            Some(c) => 0.5 * law(self.radius) + 0.5 * law(c),
            None => law(self.radius),
        }
    }

    /// `|v(x) − v(y)|^p / |x−y|^{m+σp}` divided by the proposal density, for one draw.
    fn draw<R: Rng>(&self, v: &dyn MapField, domain: &Domain, x: &[f64], vx: &[f64], d: f64, p: f64, rng: &mut R) -> Result<Option<f64>> {
        let local = (d.is_finite() && 2.0 * d < self.radius).then_some(2.0 * d);
        let cap = match local {
            Some(c) if rng.gen::<bool>() => c,
            _ => self.radius,
        };
        let r = cap * rng.gen::<f64>().max(1e-300).powf(1.0 / self.delta);
        if r <= 0.0 {
            return Ok(Some(0.0));
        }
        let dir = crate::rng::unit_vector(rng, self.m);
        let y: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + r * b).collect();
        if !domain.contains(&y) {
            return Ok(Some(0.0));
        }
        let vy = match v.eval(&y) {
            Ok(vy) => vy,
            Err(Error::Singular { .. }) => return Ok(Some(0.0)),
            Err(e) => return Err(e),
        };
        let diff = crate::scalar::dist2(vx, &vy).powf(p);
        if diff == 0.0 {
            return Ok(Some(0.0));
        }
        // density of h is radial_density(r) / (|S| r^{m−1})
        Ok(Some(diff * r.powf(-self.exponent) * self.area * r.powi(self.m as i32 - 1) / self.radial_density(r, local)))
    }
}

/// `∫_D ∫_D |v(x) − v(y)|^p / |x − y|^{m+σp} dy dx` by pair sampling.
pub fn gagliardo_seminorm_p(v: &dyn MapField, sigma: f64, p: f64, domain: &Domain, opts: &EnergyOptions) -> Result<EnergyReport> {
    check_p(p)?;
    check_sigma(sigma)?;
    let m = domain.dim();
    if m != v.domain_dim() {
        return Err(Error::Domain("domain and field dimensions differ".into()));
    }
    let kern = PairKernel::new(m, domain.diameter(), sigma, p);
    let rep = monte_carlo(domain, v.singular_set(), opts.samples.max(2), opts.seed, |x, d, rng| {
        let vx = match v.eval(x) {
            Ok(vx) => vx,
            Err(Error::Singular { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        Ok(kern.draw(v, domain, x, &vx, d, p, rng)?.map(|w| (w, w)))
    })?;
    Ok(rep.with_order(sigma, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointEstimate {
    /// `D^{σ,p} v(x)`.
    pub value: f64,
    /// Its `p`-th power, the inner integral.
    pub power: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// `D^{σ,p} v(x) = (∫_D |v(x) − v(y)|^p / |x − y|^{m+σp} dy)^{1/p}`.
pub fn fractional_derivative_at(v: &dyn MapField, sigma: f64, p: f64, x: &[f64], domain: &Domain, samples: usize, seed: u64) -> Result<PointEstimate> {
    check_p(p)?;
    check_sigma(sigma)?;
    let vx = v.eval(x)?;
    let kern = PairKernel::new(x.len(), domain.diameter(), sigma, p);
    let d = v.singular_set().dist(x);
    let parts = crate::rng::blocks(seed, samples, |rng, _, len| -> Result<(f64, f64, usize)> {
        let (mut s, mut s2, mut n) = (0.0, 0.0, 0);
        while n < len {
            if let Some(w) = kern.draw(v, domain, x, &vx, d, p, rng)? {
                s += w;
                s2 += w * w;
                n += 1;
            }
        }
        Ok((s, s2, n))
    });
    let (mut s, mut s2, mut n) = (0.0, 0.0, 0usize);
    for part in parts {
        let (a, b, c) = part?;
        s += a;
        s2 += b;
        n += c;
    }
    let nf = n as f64;
    let mean = s / nf;
    let var = ((s2 / nf - mean * mean) * nf / (nf - 1.0).max(1.0)).max(0.0);
    Ok(PointEstimate { value: mean.powf(1.0 / p), power: mean, stderr: (var / nf).sqrt(), samples: n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WspReport {
    pub distance: f64,
    pub stderr: f64,
    pub s: f64,
    pub p: f64,
    pub terms: Vec<(String, EnergyReport)>,
}

impl WspReport {
    pub fn total_p(&self) -> f64 {
        self.terms.iter().map(|t| t.1.value).sum()
    }
}

/// `‖u − v‖_{W^{s,p}(D)}`: `L^p` term, integer seminorms up to `⌊s⌋` and the
/// Gagliardo seminorm of `D^{⌊s⌋}(u − v)` when `s` is not an integer.
pub fn wsp_distance(u: Field, v: Field, s: f64, p: f64, domain: &Domain, opts: &EnergyOptions) -> Result<WspReport> {
    if !(0.0..3.0).contains(&s) {
        return Err(Error::Unsupported(format!("smoothness s = {s}")));
    }
    let diff: Field = Arc::new(DifferenceField::new(u, v)?);
    let k = s.floor() as usize;
    let sigma = s - k as f64;
    let mut terms = vec![("lp".to_string(), lp_norm_p(diff.as_ref(), p, domain, opts)?)];
    for j in 1..=k {
        let sub = EnergyOptions { seed: opts.seed.wrapping_add(j as u64), ..*opts };
        terms.push((format!("grad{j}"), grad_energy(diff.as_ref(), j, p, domain, &sub)?));
    }
    if sigma > 1e-12 {
        let top: Field = if k == 0 { diff.clone() } else { Arc::new(JetField { u: diff.clone() }) };
        let sub = EnergyOptions { seed: opts.seed.wrapping_add(101), estimator: Estimator::MonteCarlo, samples: opts.samples.max(20_000), ..*opts };
        if k > 1 {
            return Err(Error::Unsupported("fractional part above first order".into()));
        }
        terms.push(("gagliardo".to_string(), gagliardo_seminorm_p(top.as_ref(), sigma, p, domain, &sub)?));
    }
    let total: f64 = terms.iter().map(|t| t.1.value).sum();
    let var: f64 = terms.iter().map(|t| t.1.uncertainty().powi(2)).sum();
    let distance = total.powf(1.0 / p);
    let stderr = if total > 0.0 { distance / (p * total) * var.sqrt() } else { var.sqrt().powf(1.0 / p) };
    Ok(WspReport { distance, stderr, s, p, terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{AffineField, ConstantField, RadialField, SignField};
    use nalgebra::DMatrix;

    #[test]
    fn constant_lp() {
        let u = ConstantField::new(2, vec![1.0, 0.0], None);
        let r = lp_norm_p(&u, 2.0, &Domain::cube(2), &EnergyOptions::grid(8)).unwrap();
        assert!((r.value - 4.0).abs() < 1e-6);
        let r = lp_norm_p(&u, 2.0, &Domain::cube(2), &EnergyOptions::mc(1000, 1)).unwrap();
        assert!((r.value - 4.0).abs() < 1e-9);
        let z = ConstantField::new(2, vec![0.0, 0.0], None);
        assert_eq!(lp_norm_p(&z, 2.0, &Domain::cube(2), &EnergyOptions::mc(1000, 1)).unwrap().value, 0.0);
        let g = grad_energy(&u, 1, 2.0, &Domain::cube(2), &EnergyOptions::mc(1000, 1)).unwrap();
        assert_eq!(g.value, 0.0);
    }

    #[test]
    fn radial_lp_on_disk() {
        let u = RadialField::new(2);
        let r = lp_norm_p(&u, 1.5, &Domain::unit_ball(2), &EnergyOptions::grid(32)).unwrap();
        assert!((r.value - PI).abs() < 1e-6, "{}", r.value);
    }

    #[test]
    fn vortex_energy_grid_and_mc() {
        let u = RadialField::new(2);
        for p in [1.25, 1.5, 1.75] {
            let exact = 2.0 * PI / (2.0 - p);
            let g = grad_energy(&u, 1, p, &Domain::unit_ball(2), &EnergyOptions::grid(32)).unwrap();
            assert!((g.value / exact - 1.0).abs() < 0.02, "grid p={p}: {} vs {exact}", g.value);
            let m = grad_energy(&u, 1, p, &Domain::unit_ball(2), &EnergyOptions::mc(100_000, 3)).unwrap();
            assert!((m.value / exact - 1.0).abs() < 0.02, "mc p={p}: {} ± {} vs {exact}", m.value, m.stderr);
            assert!((m.value - exact).abs() < 4.0 * m.stderr, "mc p={p} biased: {} ± {} vs {exact}", m.value, m.stderr);
        }
    }

    #[test]
    fn affine_gradient_energy() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 3.0]);
        let u = AffineField::new(a.clone(), vec![0.0, 0.0]);
        let r = grad_energy(&u, 1, 2.0, &Domain::cube(2), &EnergyOptions::mc(2000, 0)).unwrap();
        assert!((r.value - a.norm_squared() * 4.0).abs() < 1e-9);
    }

    #[test]
    fn divergent_energy_is_flagged() {
        let u = RadialField::new(2);
        let r = grad_energy(&u, 1, 2.6, &Domain::unit_ball(2), &EnergyOptions::mc(100_000, 1));
        assert!(matches!(r, Err(Error::Divergence(_))), "{r:?}");
    }

    #[test]
    fn gagliardo_of_constant_and_lipschitz() {
        let u = ConstantField::new(2, vec![1.0, 0.0], None);
        assert_eq!(gagliardo_seminorm_p(&u, 0.5, 2.0, &Domain::cube(2), &EnergyOptions::mc(1000, 0)).unwrap().value, 0.0);
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        let lin = AffineField::new(a, vec![0.0]);
        let r = gagliardo_seminorm_p(&lin, 0.5, 2.0, &Domain::cube(1), &EnergyOptions::mc(200_000, 0)).unwrap();
        // |x−y|^2/|x−y|^2 integrates to |Q|^2 = 4
        assert!((r.value - 4.0).abs() < 4.0 * r.stderr.max(0.02), "{r:?}");
    }

    #[test]
    fn fractional_derivative_of_sign() {
        let u = SignField::new(1, 0);
        let d = Domain::cube(1);
        let est = fractional_derivative_at(&u, 0.5, 1.0, &[0.5], &d, 400_000, 2).unwrap();
        // 2 ∫_{-1}^{0} (0.5 − y)^{-1.5} dy = 4 (0.5^{-1/2} − 1.5^{-1/2})
        let exact = 4.0 * (0.5f64.powf(-0.5) - 1.5f64.powf(-0.5));
        assert!((est.power - exact).abs() < 4.0 * est.stderr + 1e-3, "{est:?} vs {exact}");
    }

    #[test]
    fn wsp_of_shifted_field() {
        let u: Field = Arc::new(RadialField::new(2));
        let shifted: Field = Arc::new(AffineField::new(DMatrix::zeros(2, 2), vec![0.5, 0.0]));
        let sum: Field = Arc::new(SumField(u.clone(), shifted));
        let r = wsp_distance(sum, u.clone(), 1.0, 2.0, &Domain::cube(2), &EnergyOptions::grid(16)).unwrap();
        assert!((r.distance.powi(2) - 0.25 * 4.0).abs() < 1e-9, "{r:?}");
        let z = wsp_distance(u.clone(), u, 1.0, 1.5, &Domain::cube(2), &EnergyOptions::mc(4000, 0)).unwrap();
        assert_eq!(z.distance, 0.0);
    }

    struct SumField(Field, Field);

    impl MapField for SumField {
        fn domain_dim(&self) -> usize {
            self.0.domain_dim()
        }
        fn ambient_dim(&self) -> usize {
            self.0.ambient_dim()
        }
        fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(self.0.eval(x)?.iter().zip(self.1.eval(x)?).map(|(a, b)| a + b).collect())
        }
        fn singular_set(&self) -> &SingularSet {
            self.0.singular_set()
        }
        fn descriptor(&self) -> serde_json::Value {
            serde_json::json!({})
        }
        fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
            Ok(self.0.jacobian(x)? + self.1.jacobian(x)?)
        }
    }
}
