//! Cubications of `[-1, 1]^m`, their skeletons and dual skeletons.
//!
//! Coordinates are stored on the integer lattice `η Z^m` with `η = 1/n`, so
//! incidence and intersection tests are exact.

use crate::error::{Error, Result};
use crate::geom::{dist_point_box, Norm};
use crate::scalar::Real;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cubication {
    m: usize,
    n: i64,
}

impl Cubication {
    /// `n` cubes per axis, inradius `η = 1/n`. `n = 1` is the single unit cube.
    pub fn new(m: usize, n: i64) -> Result<Self> {
        if m == 0 {
            return Err(Error::Domain("dimension m must be positive".into()));
        }
        if n < 1 || (n != 1 && n % 2 != 0) {
            return Err(Error::Domain(format!(
                "cubes per axis must be 1 or even (eta in 1/(2N)), got {n}"
            )));
        }
        Ok(Self { m, n })
    }

    pub fn unit_cube(m: usize) -> Self {
        Self { m, n: 1 }
    }

    pub fn from_eta(m: usize, eta: Ratio<i64>) -> Result<Self> {
        if *eta.numer() != 1 || *eta.denom() <= 0 {
            return Err(Error::Domain(format!("eta must be 1/n, got {eta}")));
        }
        Self::new(m, *eta.denom())
    }

    pub fn from_eta_f64(m: usize, eta: f64) -> Result<Self> {
        let n = (1.0 / eta).round();
        if !(eta > 0.0) || ((1.0 / eta) - n).abs() > 1e-9 {
            return Err(Error::Domain(format!("eta must be 1/n, got {eta}")));
        }
        Self::new(m, n as i64)
    }

    pub fn with_offset(m: usize, n: i64, offset: &[f64]) -> Result<Self> {
        if offset.iter().any(|&a| a != 0.0) {
            return Err(Error::Domain("nonzero cubication offset is not supported".into()));
        }
        Self::new(m, n)
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn cubes_per_axis(&self) -> i64 {
        self.n
    }

    pub fn eta(&self) -> Ratio<i64> {
        Ratio::new(1, self.n)
    }

    pub fn eta_f64(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Lattice coordinates of cube centers along one axis.
    pub fn center_coords(&self) -> Vec<i64> {
        (0..self.n).map(|k| -self.n + 1 + 2 * k).collect()
    }

    /// Lattice coordinates of cube walls along one axis.
    pub fn wall_coords(&self) -> Vec<i64> {
        (0..=self.n).map(|k| -self.n + 2 * k).collect()
    }

    /// Lattice coordinate of the center of the cube containing `x_i` (walls go up).
    pub fn cube_center_of(&self, xi: f64) -> i64 {
        let n = self.n as f64;
        let k = (((xi + 1.0) * n / 2.0).floor() as i64).clamp(0, self.n - 1);
        -self.n + 1 + 2 * k
    }
}

/// An open face: product of open intervals along `axes` and singletons elsewhere.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Face {
    /// Center in lattice units of `η`.
    pub center: Vec<i64>,
    /// Directions in which the face extends, sorted.
    pub axes: Vec<usize>,
    /// Halfwidth in lattice units.
    pub half: i64,
    /// Lattice denominator: real coordinate = lattice / n.
    pub n: i64,
}

impl Face {
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn ambient_dim(&self) -> usize {
        self.center.len()
    }

    /// Closed lattice interval occupied along axis `i`.
    pub fn interval(&self, i: usize) -> (i64, i64) {
        if self.axes.contains(&i) {
            (self.center[i] - self.half, self.center[i] + self.half)
        } else {
            (self.center[i], self.center[i])
        }
    }

    pub fn halfwidth(&self) -> Ratio<i64> {
        Ratio::new(self.half, self.n)
    }

    pub fn center_real<T: Real>(&self) -> Vec<T> {
        let n = T::lit(self.n as f64);
        self.center.iter().map(|&c| T::lit(c as f64) / n).collect()
    }

    /// Closure of the face as a real box.
    pub fn bounds<T: Real>(&self) -> (Vec<T>, Vec<T>) {
        let n = T::lit(self.n as f64);
        let (mut lo, mut hi) = (Vec::new(), Vec::new());
        for i in 0..self.ambient_dim() {
            let (a, b) = self.interval(i);
            lo.push(T::lit(a as f64) / n);
            hi.push(T::lit(b as f64) / n);
        }
        (lo, hi)
    }

    pub fn dist<T: Real>(&self, x: &[T], norm: Norm) -> T {
        let (lo, hi) = self.bounds::<T>();
        dist_point_box(x, &lo, &hi, norm)
    }

    /// Corners of the closed face, ordered by the binary index over `axes`.
    pub fn corners(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        let c = self.center_real::<f64>();
        let h = self.half as f64 / self.n as f64;
        (0..1usize << d)
            .map(|mask| {
                let mut p = c.clone();
                for (k, &ax) in self.axes.iter().enumerate() {
                    p[ax] += if mask >> k & 1 == 1 { h } else { -h };
                }
                p
            })
            .collect()
    }
}

fn combinations(m: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, m: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            cur.push(i);
            rec(i + 1, m, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, m, k, &mut Vec::new(), &mut out);
    out
}

fn cartesian(choices: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for c in choices {
        let mut next = Vec::with_capacity(out.len() * c.len());
        for p in &out {
            for &v in c {
                let mut q = p.clone();
                q.push(v);
                next.push(q);
            }
        }
        out = next;
    }
    out
}

/// Every ℓ-face of every cube, deduplicated and sorted.
pub fn enumerate_skeleton(c: &Cubication, l: usize) -> Result<Vec<Face>> {
    if l > c.m {
        return Err(Error::Domain(format!("skeleton dimension {l} exceeds m = {}", c.m)));
    }
    let centers = c.center_coords();
    let walls = c.wall_coords();
    let mut out = Vec::new();
    for axes in combinations(c.m, l) {
        let choices: Vec<Vec<i64>> = (0..c.m)
            .map(|i| if axes.contains(&i) { centers.clone() } else { walls.clone() })
            .collect();
        for center in cartesian(&choices) {
            out.push(Face { center, axes: axes.clone(), half: 1, n: c.n });
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualSkeleton {
    pub star_dim: usize,
    pub pieces: Vec<Face>,
    pub source: Cubication,
    pub l: usize,
}

/// Dual skeleton of the ℓ-skeleton, consolidated into maximal affine pieces.
pub fn dual_skeleton(c: &Cubication, l: usize) -> Result<DualSkeleton> {
    if l >= c.m {
        return Err(Error::Domain(format!("dual skeleton undefined for l = {l} >= m = {}", c.m)));
    }
    let star = c.m - l - 1;
    let centers = c.center_coords();
    let mut pieces = Vec::new();
    for axes in combinations(c.m, star) {
        let choices: Vec<Vec<i64>> = (0..c.m)
            .map(|i| if axes.contains(&i) { vec![0] } else { centers.clone() })
            .collect();
        for center in cartesian(&choices) {
            let half = if star == 0 { 0 } else { c.n };
            pieces.push(Face { center, axes: axes.clone(), half, n: c.n });
        }
    }
    pieces.sort();
    Ok(DualSkeleton { star_dim: star, pieces, source: *c, l })
}

/// Per-cube dual faces (not consolidated): the ℓ*-faces through each cube center.
pub fn dual_cells(c: &Cubication, l: usize) -> Result<Vec<Face>> {
    if l >= c.m {
        return Err(Error::Domain(format!("dual skeleton undefined for l = {l} >= m = {}", c.m)));
    }
    let star = c.m - l - 1;
    let centers = c.center_coords();
    let mut out = Vec::new();
    let cubes = cartesian(&vec![centers; c.m]);
    for axes in combinations(c.m, star) {
        for cc in &cubes {
            out.push(Face { center: cc.clone(), axes: axes.clone(), half: if star == 0 { 0 } else { 1 }, n: c.n });
        }
    }
    out.sort();
    Ok(out)
}

/// Membership in the dual skeleton by counting vanishing cube-local coordinates.
pub fn in_dual(c: &Cubication, l: usize, x: &[f64], tol: f64) -> bool {
    let n = c.n as f64;
    let zeros = x
        .iter()
        .filter(|&&xi| {
            let zc = c.cube_center_of(xi) as f64;
            (xi * n - zc).abs() <= tol * n
        })
        .count();
    zeros > l
}

/// Exact distance to the closed union of faces; `+∞` for the empty set.
pub fn dist_to_set<T: Real>(x: &[T], faces: &[Face], norm: Norm) -> T {
    faces.iter().fold(T::infinity(), |a, f| a.min(f.dist(x, norm)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crossing {
    pub lo: Vec<i64>,
    pub hi: Vec<i64>,
    pub n: i64,
    pub pieces: Vec<usize>,
}

impl Crossing {
    pub fn dim(&self) -> usize {
        self.lo.iter().zip(&self.hi).filter(|(a, b)| a != b).count()
    }

    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n as f64;
        (
            self.lo.iter().map(|&v| v as f64 / n).collect(),
            self.hi.iter().map(|&v| v as f64 / n).collect(),
        )
    }
}

/// Nonempty pairwise intersections of distinct pieces, restricted to the open
/// cube `(-1, 1)^m`, grouped by intersection set.
pub fn crossing_points(faces: &[Face]) -> Result<Vec<Crossing>> {
    if let Some(f0) = faces.first() {
        if faces.iter().any(|f| f.dim() != f0.dim()) {
            return Err(Error::Domain("crossing_points requires faces of equal dimension".into()));
        }
        if faces.iter().any(|f| f.n != f0.n) {
            return Err(Error::Domain("faces come from different lattices".into()));
        }
    }
    let mut groups: BTreeMap<(Vec<i64>, Vec<i64>), Vec<usize>> = BTreeMap::new();
    for i in 0..faces.len() {
        for j in i + 1..faces.len() {
            let (a, b) = (&faces[i], &faces[j]);
            let m = a.ambient_dim();
            let n = a.n;
            let mut lo = Vec::with_capacity(m);
            let mut hi = Vec::with_capacity(m);
            let mut ok = true;
            for k in 0..m {
                let (a0, a1) = a.interval(k);
                let (b0, b1) = b.interval(k);
                let (l, h) = (a0.max(b0), a1.min(b1));
                if l > h || l >= n || h <= -n {
                    ok = false;
                    break;
                }
                lo.push(l);
                hi.push(h);
            }
            if ok {
                let e = groups.entry((lo, hi)).or_default();
                e.push(i);
                e.push(j);
            }
        }
    }
    Ok(groups
        .into_iter()
        .map(|((lo, hi), mut pieces)| {
            pieces.sort();
            pieces.dedup();
            let n = faces[pieces[0]].n;
            Crossing { lo, hi, n, pieces }
        })
        .collect())
}

#[derive(Serialize)]
struct PieceJson {
    center: Vec<f64>,
    axes: Vec<usize>,
    halfwidth: f64,
}

#[derive(Serialize)]
struct FacesJson {
    dimension: usize,
    pieces: Vec<PieceJson>,
}

/// Flat JSON descriptor `{dimension, pieces: [{center, axes, halfwidth}]}`.
pub fn faces_to_json(faces: &[Face]) -> serde_json::Value {
    let doc = FacesJson {
        dimension: faces.first().map_or(0, |f| f.dim()),
        pieces: faces
            .iter()
            .map(|f| PieceJson {
                center: f.center_real(),
                axes: f.axes.iter().map(|a| a + 1).collect(),
                halfwidth: f.half as f64 / f.n as f64,
            })
            .collect(),
    };
    serde_json::to_value(doc).expect("serializable")
}

/// OBJ text with one group per face: points, segments or quads.
pub fn faces_to_obj(faces: &[Face], name: &str) -> String {
    let mut w = crate::io::ObjWriter::new(name);
    for (k, f) in faces.iter().enumerate() {
        let corners = f.corners();
        w.group(&format!("piece_{k}"));
        match f.dim() {
            0 => w.point(&corners[0]),
            1 => w.polyline(&corners),
            2 => w.quad([&corners[0], &corners[1], &corners[3], &corners[2]]),
            _ => {
                for (a, b) in box_edges(f.dim()) {
                    w.polyline(&[corners[a].clone(), corners[b].clone()]);
                }
            }
        }
    }
    w.finish()
}

fn box_edges(d: usize) -> Vec<(usize, usize)> {
    let mut e = Vec::new();
    for a in 0..1usize << d {
        for k in 0..d {
            let b = a | (1 << k);
            if b != a {
                e.push((a, b));
            }
        }
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn binom(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn unit_cube_edges_and_faces() {
        let c = Cubication::unit_cube(3);
        assert_eq!(enumerate_skeleton(&c, 1).unwrap().len(), 12);
        assert_eq!(enumerate_skeleton(&c, 2).unwrap().len(), 6);
        assert!(enumerate_skeleton(&c, 4).is_err());
    }

    #[test]
    fn face_counts_per_cube() {
        for m in 1..=5 {
            let c = Cubication::unit_cube(m);
            for l in 0..=m {
                let n = enumerate_skeleton(&c, l).unwrap().len();
                assert_eq!(n, (1 << (m - l)) * binom(m, l), "m={m} l={l}");
            }
        }
    }

    #[test]
    fn vertices_of_eta_half_grid_match_brute_force() {
        let c = Cubication::new(3, 2).unwrap();
        let fast = enumerate_skeleton(&c, 0).unwrap();
        let mut brute = BTreeSet::new();
        for cx in c.center_coords() {
            for cy in c.center_coords() {
                for cz in c.center_coords() {
                    for mask in 0..8 {
                        let v = [
                            cx + if mask & 1 == 1 { 1 } else { -1 },
                            cy + if mask & 2 == 2 { 1 } else { -1 },
                            cz + if mask & 4 == 4 { 1 } else { -1 },
                        ];
                        brute.insert(v.to_vec());
                    }
                }
            }
        }
        assert_eq!(brute.len(), 27);
        let c4 = Cubication::new(3, 4).unwrap();
        assert_eq!(enumerate_skeleton(&c4, 0).unwrap().len(), 125);
        assert_eq!(fast.len(), brute.len());
    }

    #[test]
    fn four_cubed_grid_has_125_vertices() {
        let c = Cubication::from_eta(3, Ratio::new(1, 4)).unwrap();
        let v = enumerate_skeleton(&c, 0).unwrap();
        let mut brute = BTreeSet::new();
        for cube in cartesian(&vec![c.center_coords(); 3]) {
            for mask in 0..8 {
                let p: Vec<i64> = (0..3).map(|i| cube[i] + if mask >> i & 1 == 1 { 1 } else { -1 }).collect();
                brute.insert(p);
            }
        }
        assert_eq!(v.len(), brute.len());
        assert_eq!(v.len(), 125);
    }

    #[test]
    fn output_is_sorted() {
        let c = Cubication::new(2, 2).unwrap();
        let f = enumerate_skeleton(&c, 1).unwrap();
        let mut g = f.clone();
        g.sort();
        assert_eq!(f, g);
    }

    #[test]
    fn dual_of_unit_cube_lines() {
        let c = Cubication::unit_cube(3);
        let d = dual_skeleton(&c, 1).unwrap();
        assert_eq!(d.star_dim, 1);
        assert_eq!(d.pieces.len(), 3);
        assert!(dual_skeleton(&c, 3).is_err());
        let x = [1.0, 1.0, 1.0];
        let dist: f64 = dist_to_set(&x, &d.pieces, Norm::Euclidean);
        assert!((dist - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(dist_to_set(&[0.3, 0.0, 0.0], &d.pieces, Norm::Euclidean), 0.0);
    }

    #[test]
    fn dual_of_unit_square_is_plus_shape() {
        let c = Cubication::unit_cube(2);
        let d = dual_skeleton(&c, 0).unwrap();
        for i in 0..=100 {
            for j in 0..=100 {
                let x = [-1.0 + 0.02 * i as f64, -1.0 + 0.02 * j as f64];
                let member = x[0].abs() < 1e-12 || x[1].abs() < 1e-12;
                let on = dist_to_set(&x, &d.pieces, Norm::Euclidean) < 1e-12;
                assert_eq!(member, on);
                assert_eq!(in_dual(&c, 0, &x, 1e-12), member);
            }
        }
    }

    #[test]
    fn dual_planes_of_unit_cube() {
        let c = Cubication::unit_cube(3);
        let d = dual_skeleton(&c, 0).unwrap();
        assert_eq!(d.star_dim, 2);
        assert_eq!(d.pieces.len(), 3);
        assert!(in_dual(&c, 0, &[0.0, 0.4, -0.7], 1e-12));
        assert!(!in_dual(&c, 0, &[0.1, 0.4, -0.7], 1e-12));
    }

    #[test]
    fn crossings_unit_cube_axes() {
        let c = Cubication::unit_cube(3);
        let d = dual_skeleton(&c, 1).unwrap();
        let x = crossing_points(&d.pieces).unwrap();
        assert_eq!(x.len(), 1);
        assert_eq!(x[0].pieces, vec![0, 1, 2]);
        assert_eq!(x[0].lo, vec![0, 0, 0]);
    }

    #[test]
    fn parallel_segments_do_not_cross() {
        let a = Face { center: vec![-1, 0], axes: vec![1], half: 2, n: 2 };
        let b = Face { center: vec![1, 0], axes: vec![1], half: 2, n: 2 };
        assert!(crossing_points(&[a, b]).unwrap().is_empty());
    }

    #[test]
    fn mixed_dimensions_rejected() {
        let a = Face { center: vec![0, 0], axes: vec![1], half: 1, n: 1 };
        let b = Face { center: vec![0, 0], axes: vec![], half: 0, n: 1 };
        assert!(crossing_points(&[a, b]).is_err());
    }

    #[test]
    fn crossing_count_matches_cellwise_oracle() {
        let c = Cubication::new(3, 2).unwrap();
        let d = dual_skeleton(&c, 1).unwrap();
        let fast: BTreeSet<Vec<i64>> = crossing_points(&d.pieces).unwrap().into_iter().map(|x| x.lo).collect();
        let cells = dual_cells(&c, 1).unwrap();
        let mut brute = BTreeSet::new();
        for i in 0..cells.len() {
            for j in 0..cells.len() {
                if cells[i].axes == cells[j].axes {
                    continue;
                }
                let mut p = Vec::new();
                let mut ok = true;
                for k in 0..3 {
                    let (a0, a1) = cells[i].interval(k);
                    let (b0, b1) = cells[j].interval(k);
                    let (l, h) = (a0.max(b0), a1.min(b1));
                    if l > h {
                        ok = false;
                        break;
                    }
                    assert_eq!(l, h);
                    p.push(l);
                }
                if ok && p.iter().all(|&v| v.abs() < 2) {
                    brute.insert(p);
                }
            }
        }
        assert_eq!(fast, brute);
        assert_eq!(fast.len(), 8);
    }

    #[test]
    fn offset_and_eta_validation() {
        assert!(Cubication::with_offset(3, 2, &[0.1, 0.0, 0.0]).is_err());
        assert!(Cubication::with_offset(3, 2, &[0.0; 3]).is_ok());
        assert!(Cubication::new(3, 3).is_err());
        assert!(Cubication::from_eta(2, Ratio::new(2, 3)).is_err());
        assert!(Cubication::from_eta_f64(2, 0.25).is_ok());
    }

    #[test]
    fn exports() {
        let c = Cubication::unit_cube(3);
        let d = dual_skeleton(&c, 1).unwrap();
        let obj = faces_to_obj(&d.pieces, "dual");
        assert_eq!(obj.matches("\nl ").count(), 3);
        assert_eq!(obj.matches("\ng ").count(), 3);
        let j = faces_to_json(&d.pieces);
        assert_eq!(j["dimension"], 1);
        assert_eq!(j["pieces"].as_array().unwrap().len(), 3);
    }
}
