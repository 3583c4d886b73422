//! Wells, apex projections and the uncrossing diffeomorphisms for dual skeletons.

use crate::diffeo::{DiffeoPiece, GaugePush, Pipeline, Profile, Stage, ThetaBlock};
use crate::error::{Error, Result};
use crate::grid::{crossing_points, dual_skeleton, Cubication, Face};
use crate::io::ObjWriter;
use crate::scalar::{dist2, sup_norm};
use crate::sets::{Piece, SingularSet};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

const APEX_HEIGHT: f64 = 0.25;

/// Radial projection of `Q³` from `(0, 0, 5/4)` onto its lateral and bottom faces,
/// followed by the face-center projections onto the edges.
#[derive(Debug, Clone)]
pub struct ModelRetraction {
    pub h: GaugePush,
    pub set: SingularSet,
}

pub fn model_retraction_g() -> ModelRetraction {
    let apex = vec![0.0, 0.0, 1.0 + APEX_HEIGHT];
    let h = GaugePush::new(3, apex.clone(), 2, vec![(0, 1.0), (1, 1.0)], -1.0, Profile::Hard).expect("fixed geometry");
    let centers = [[0.0, 0.0, -1.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]];
    let pieces = centers
        .iter()
        .map(|c| {
            // the ray from the apex through the face center enters Q³ through the top face
            let t = APEX_HEIGHT / (apex[2] - c[2]);
            let entry: Vec<f64> = (0..3).map(|i| apex[i] + t * (c[i] - apex[i])).collect();
            Piece::segment(entry, c.to_vec())
        })
        .collect();
    ModelRetraction { h, set: SingularSet::new(3, pieces) }
}

impl ModelRetraction {
    /// `g(x) ∈ 𝒦¹`, the edge set of `Q³`.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if sup_norm(x) > 1.0 + 1e-12 {
            return Err(Error::Domain(format!("{x:?} is outside the cube")));
        }
        let y = self.h.apply(x);
        // face of ∂Q³ ∖ top containing y, by largest gauge term
        let terms = [(y[0].abs(), 0usize), (y[1].abs(), 1), ((-y[2]).max(-1.0), 2)];
        let tight: Vec<usize> = terms.iter().filter(|t| (t.0 - 1.0).abs() <= 1e-12).map(|t| t.1).collect();
        let on_edge = (0..3).filter(|&i| (y[i].abs() - 1.0).abs() <= 1e-12).count() >= 2;
        if on_edge {
            return Ok(y);
        }
        let axis = *tight.first().ok_or_else(|| Error::Domain(format!("projection of {x:?} left the boundary")))?;
        let free: Vec<usize> = (0..3).filter(|&i| i != axis).collect();
        let s = free.iter().fold(0.0f64, |a, &i| a.max(y[i].abs()));
        if s <= 1e-12 {
            return Err(Error::Singular { dist: self.set.dist(x) });
        }
        let mut z = y.clone();
        for &i in &free {
            z[i] = y[i] / s;
        }
        Ok(z)
    }
}

/// Hard apex projection of a box onto its non-top boundary (in the non-dummy axes).
/// The apex must sit above the box, centered over it in every lateral axis.
pub fn radial_projection_piece(lo: &[f64], hi: &[f64], apex: &[f64], push_axis: usize, dummy_axes: &[usize]) -> Result<GaugePush> {
    let m = lo.len();
    if apex.len() != m || hi.len() != m {
        return Err(Error::Construction("apex and region dimensions differ".into()));
    }
    if !(apex[push_axis] > hi[push_axis]) {
        return Err(Error::Construction(format!("apex {apex:?} is not strictly above the region along axis {push_axis}")));
    }
    let mut lateral = Vec::new();
    for i in 0..m {
        if i == push_axis || dummy_axes.contains(&i) {
            continue;
        }
        let c = 0.5 * (lo[i] + hi[i]);
        if (apex[i] - c).abs() > 1e-12 {
            return Err(Error::Construction(format!("apex must be centered over the region in axis {i}")));
        }
        lateral.push((i, 0.5 * (hi[i] - lo[i])));
    }
    GaugePush::new(m, apex.to_vec(), push_axis, lateral, lo[push_axis], Profile::Hard)
}

/// `Θ_d` centered at the origin of `R^d`.
pub fn theta_block(d: usize, mu: f64, eta: f64, rho_under: f64, rho_over: f64) -> Result<ThetaBlock> {
    ThetaBlock::new(d, (0..d).collect(), vec![0.0; d], mu, eta, rho_under, rho_over)
}

fn check_mu(mu: f64) -> Result<()> {
    if !(mu > 0.0 && mu < 0.5) {
        return Err(Error::Domain(format!("mu must lie in (0, 1/2), got {mu}")));
    }
    Ok(())
}

/// Sup-norm neighbourhood of the truncated vertical part of a dual skeleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Well {
    pub m: usize,
    pub mu: f64,
    pub eta: f64,
    /// Truncated vertical pieces as boxes.
    pub base: Vec<(Vec<f64>, Vec<f64>)>,
    /// `(base + Q_{μη}) ∩ Q^m`, one box per piece.
    pub region: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Well {
    pub fn new(c: &Cubication, l: usize, mu: f64) -> Result<Self> {
        check_mu(mu)?;
        let m = c.dim();
        let eta = c.eta_f64();
        let dual = dual_skeleton(c, l)?;
        let mut base = Vec::new();
        let mut region = Vec::new();
        for f in dual.pieces.iter().filter(|f| f.axes.contains(&(m - 1))) {
            let (mut lo, hi) = f.bounds::<f64>();
            lo[m - 1] = -1.0 + eta;
            let rlo: Vec<f64> = lo.iter().map(|v| (v - mu * eta).max(-1.0)).collect();
            let rhi: Vec<f64> = hi.iter().map(|v| (v + mu * eta).min(1.0)).collect();
            base.push((lo, hi));
            region.push((rlo, rhi));
        }
        Ok(Self { m, mu, eta, base, region })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.region.iter().any(|(lo, hi)| x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| *a < *v && *v < *b))
    }

    /// Whether every crossing involving a non-vertical piece lies in the well.
    pub fn contains_crossings(&self, faces: &[Face]) -> Result<bool> {
        for cr in crossing_points(faces)? {
            if cr.pieces.iter().all(|&i| faces[i].axes.contains(&(self.m - 1))) {
                continue;
            }
            let (lo, hi) = cr.bounds();
            let mid: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
            if !self.contains(&lo) || !self.contains(&hi) || !self.contains(&mid) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Soft push in a slab or column: apex `μη/2` above the top, bottom `μη` below the
/// lowest truncation level, inner level halfway between the deepest crossing gauge and 1.
fn column_push(m: usize, center: &[(usize, f64)], push_axis: usize, width: f64, floor: f64, top: f64) -> Result<GaugePush> {
    let mut apex = vec![0.0; m];
    for &(i, c) in center {
        apex[i] = c;
    }
    apex[push_axis] = top + width / 2.0;
    let bottom = floor - width;
    let g0 = (apex[push_axis] - floor) / (apex[push_axis] - bottom);
    GaugePush::new(m, apex, push_axis, center.iter().map(|&(i, _)| (i, width)).collect(), bottom, Profile::soft(0.5 * (1.0 + g0))?)
}

/// `Φ^top_μ` for the dual 1-skeleton of a cubication of `Q³`: one apex push per vertical column.
pub fn build_phi_top_lines(c: &Cubication, mu: f64) -> Result<Pipeline> {
    check_mu(mu)?;
    if c.dim() != 3 {
        return Err(Error::Unsupported(format!("line uncrossing is implemented in dimension 3, got {}", c.dim())));
    }
    let eta = c.eta_f64();
    let n = c.cubes_per_axis() as f64;
    let mut pieces: Vec<Arc<dyn DiffeoPiece>> = Vec::new();
    for &a in &c.center_coords() {
        for &b in &c.center_coords() {
            let g = column_push(3, &[(0, a as f64 / n), (1, b as f64 / n)], 2, mu * eta, -1.0 + eta, 1.0)?;
            pieces.push(Arc::new(g));
        }
    }
    Pipeline::new(3, vec![Stage::new("top", pieces)?])
}

/// Two-pass uncrossing of the dual 2-skeleton of a cubication of `Q³`.
#[derive(Debug, Clone)]
pub struct PlanePipelines {
    /// Vertical slabs only: vertical–horizontal crossings removed.
    pub pass1: Pipeline,
    /// Pass 1 preceded by the thin `x₂`-slabs that separate vertical planes.
    pub full: Pipeline,
    pub rho: f64,
    pub clearance: f64,
}

pub fn build_phi_planes(c: &Cubication, mu: f64) -> Result<PlanePipelines> {
    check_mu(mu)?;
    if c.dim() != 3 {
        return Err(Error::Unsupported(format!("plane uncrossing is implemented in dimension 3, got {}", c.dim())));
    }
    let eta = c.eta_f64();
    let n = c.cubes_per_axis() as f64;
    let centers: Vec<f64> = c.center_coords().iter().map(|&v| v as f64 / n).collect();
    let slabs = |axis: usize| -> Result<Stage> {
        let mut pieces: Vec<Arc<dyn DiffeoPiece>> = Vec::new();
        for &v in &centers {
            pieces.push(Arc::new(column_push(3, &[(axis, v)], 2, mu * eta, -1.0 + eta, 1.0)?));
        }
        Stage::new(if axis == 0 { "vertical-x1" } else { "vertical-x2" }, pieces)
    };
    let pass1 = Pipeline::new(3, vec![slabs(1)?, slabs(0)?])?;
    let clearance = plane_clearance(&pass1, c, mu)?;
    let rho = 0.5 * clearance / (mu * eta);
    let width = rho * mu * eta;
    let mut thin: Vec<Arc<dyn DiffeoPiece>> = Vec::new();
    for &v in &centers {
        thin.push(Arc::new(column_push(3, &[(1, v)], 0, width, -1.0 + eta, 1.0)?));
    }
    let full = Pipeline::new(3, vec![Stage::new("separate-x2", thin)?, pass1.stages[0].clone(), pass1.stages[1].clone()])?;
    Ok(PlanePipelines { pass1, full, rho, clearance })
}

/// Smallest `|x₂ − c₂|` over pulled-back horizontal planes inside `Q³`, with `c₂` a
/// vertical-plane level, measured on a sample of each horizontal plane near the slabs.
fn plane_clearance(pass1: &Pipeline, c: &Cubication, mu: f64) -> Result<f64> {
    let eta = c.eta_f64();
    let n = c.cubes_per_axis() as f64;
    let centers: Vec<f64> = c.center_coords().iter().map(|&v| v as f64 / n).collect();
    let w = mu * eta;
    let k = 400;
    let mut best = f64::INFINITY;
    for &h in &centers {
        for &c2 in &centers {
            for i in 0..=k {
                // lateral offset within the slab
                let t = -w + 2.0 * w * i as f64 / k as f64;
                for j in 0..=40 {
                    let x1 = -1.0 + 2.0 * j as f64 / 40.0;
                    let y = [x1, c2 + t, h];
                    if let Some(x) = pass1.inverse(&y) {
                        if sup_norm(&x) <= 1.0 {
                            best = best.min((x[1] - c2).abs());
                        }
                    }
                }
            }
        }
    }
    if !(best.is_finite() && best > 0.0) {
        return Err(Error::Construction("no clearance between vertical planes and pulled-back horizontal planes".into()));
    }
    Ok(best)
}

/// `Φ` for the supported cases `(m, ℓ) = (3, 1)` (lines) and `(3, 0)` (planes).
pub fn build_phi_general(c: &Cubication, l: usize, mu: f64) -> Result<Pipeline> {
    match (c.dim(), l) {
        (3, 1) => build_phi_top_lines(c, mu),
        (3, 0) => Ok(build_phi_planes(c, mu)?.full),
        (m, l) => Err(Error::Unsupported(format!("uncrossing for m = {m}, l = {l}; supported: (3, 1) and (3, 0)"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindCount {
    pub kind: String,
    pub before: usize,
    pub after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingReport {
    pub before: usize,
    pub after: usize,
    pub by_kind: Vec<KindCount>,
    /// Pairs of pulled-back pieces closer than `1e-7` (curves only).
    pub proximity_pairs: usize,
    pub pieces: usize,
    /// Shortest segment of the pulled-back polylines (tangent non-degeneracy proxy).
    pub min_segment: f64,
}

fn kind_of(faces: &[Face], pieces: &[usize], m: usize) -> &'static str {
    let vertical = pieces.iter().filter(|&&i| faces[i].axes.contains(&(m - 1))).count();
    if vertical == pieces.len() {
        "vertical-vertical"
    } else if vertical == 0 {
        "horizontal-horizontal"
    } else {
        "vertical-horizontal"
    }
}

/// Crossings of the dual skeleton before and after pulling back by `Φ`.
/// `Φ` is injective, so pulled-back pieces meet exactly at preimages of the original crossings.
pub fn crossing_report(phi: &Pipeline, c: &Cubication, l: usize) -> Result<(CrossingReport, Option<SingularSet>)> {
    let dual = dual_skeleton(c, l)?;
    let faces = &dual.pieces;
    let crossings = crossing_points(faces)?;
    let mut kinds: Vec<KindCount> = ["vertical-vertical", "vertical-horizontal", "horizontal-horizontal"]
        .iter()
        .map(|k| KindCount { kind: k.to_string(), before: 0, after: 0 })
        .collect();
    let mut after = 0;
    for cr in &crossings {
        let k = kind_of(faces, &cr.pieces, c.dim());
        let e = kinds.iter_mut().find(|e| e.kind == k).expect("known kind");
        e.before += 1;
        let (lo, hi) = cr.bounds();
        if phi.pulled_crossing(&lo, &hi).is_some() {
            e.after += 1;
            after += 1;
        }
    }
    let (pulled, proximity, pieces, min_segment) = if dual.star_dim <= 1 {
        let s = phi.pullback(&SingularSet::from_faces(c.dim(), faces))?;
        let prox = s.proximity_pairs(1e-7).len();
        let min_seg = s
            .pieces
            .iter()
            .flat_map(|p| p.segments())
            .map(|(a, b)| dist2(&a, &b))
            .fold(f64::INFINITY, f64::min);
        let n = s.pieces.len();
        (Some(s), prox, n, min_seg)
    } else {
        (None, 0, faces.len(), f64::NAN)
    };
    let report = CrossingReport { before: crossings.len(), after, by_kind: kinds, proximity_pairs: proximity, pieces, min_segment };
    Ok((report, pulled))
}

/// OBJ of the pulled-back 2-dimensional pieces, meshed on a `res × res` grid per piece.
pub fn planes_pullback_obj(phi: &Pipeline, faces: &[Face], res: usize, name: &str) -> String {
    let mut w = ObjWriter::new(name);
    for (k, f) in faces.iter().enumerate() {
        w.group(&format!("piece_{k}"));
        let (lo, hi) = f.bounds::<f64>();
        let free: Vec<usize> = (0..lo.len()).filter(|&i| lo[i] < hi[i]).collect();
        if free.len() != 2 {
            continue;
        }
        let node = |i: usize, j: usize| -> Option<Vec<f64>> {
            let mut y = lo.clone();
            y[free[0]] = lo[free[0]] + (hi[free[0]] - lo[free[0]]) * i as f64 / res as f64;
            y[free[1]] = lo[free[1]] + (hi[free[1]] - lo[free[1]]) * j as f64 / res as f64;
            phi.inverse(&y).filter(|x| sup_norm(x) <= 1.0 + 1e-12)
        };
        let grid: Vec<Vec<Option<Vec<f64>>>> = (0..=res).map(|i| (0..=res).map(|j| node(i, j)).collect()).collect();
        for i in 0..res {
            for j in 0..res {
                if let (Some(a), Some(b), Some(c), Some(d)) = (&grid[i][j], &grid[i + 1][j], &grid[i + 1][j + 1], &grid[i][j + 1]) {
                    w.quad([a, b, c, d]);
                }
            }
        }
    }
    w.finish()
}

/// `sup |DΦ(x)| dist(x, 𝒮̃) / dist(Φ(x), 𝒮)` over uniform samples and samples near `𝒮̃`.
pub fn distortion_constant(phi: &Pipeline, pulled: &SingularSet, set: &SingularSet, samples: usize, seed: u64) -> f64 {
    let m = phi.m;
    let parts = crate::rng::blocks(seed, samples, |rng, _, len| {
        let mut sup = 0.0f64;
        for k in 0..len {
            let x: Vec<f64> = if k % 2 == 0 || pulled.is_empty() {
                (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()
            } else {
                let p = &pulled.pieces[rng.gen_range(0..pulled.pieces.len())];
                let base = p.sample(rng);
                let r = 0.5f64.powi(rng.gen_range(1..12));
                let dir = crate::rng::unit_vector(rng, m);
                base.iter().zip(&dir).map(|(b, d)| b + r * d).collect()
            };
            if sup_norm(&x) >= 1.0 {
                continue;
            }
            let (d0, d1) = (pulled.dist(&x), set.dist(&phi.apply(&x)));
            if !(d0 > 1e-9 && d1 > 1e-12) {
                continue;
            }
            let j = phi.jacobian(&x);
            sup = sup.max(j.norm() * d0 / d1);
        }
        sup
    });
    parts.into_iter().fold(0.0, f64::max)
}
