//! Singular-set descriptors: flat lattice pieces and sampled curves.

use crate::geom::{clip_segment_to_box, dist_box_box, dist_point_box, dist_point_segment, dist_segment_segment, Norm};
use crate::scalar::dist2;
use crate::grid::{crossing_points, Face};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Piece {
    /// Closed axis-aligned box; degenerate axes give lower-dimensional pieces.
    Flat { lo: Vec<f64>, hi: Vec<f64> },
    /// Piecewise-linear curve.
    Polyline { pts: Vec<Vec<f64>> },
}

impl Piece {
    pub fn point(p: Vec<f64>) -> Self {
        Piece::Flat { lo: p.clone(), hi: p }
    }

    pub fn segment(a: Vec<f64>, b: Vec<f64>) -> Self {
        Piece::Polyline { pts: vec![a, b] }
    }

    pub fn dim(&self) -> usize {
        match self {
            Piece::Flat { lo, hi } => lo.iter().zip(hi).filter(|(a, b)| a < b).count(),
            Piece::Polyline { pts } => usize::from(pts.len() > 1),
        }
    }

    pub fn measure(&self) -> f64 {
        match self {
            Piece::Flat { lo, hi } => lo.iter().zip(hi).filter(|(a, b)| a < b).map(|(a, b)| b - a).product(),
            Piece::Polyline { pts } => pts.windows(2).map(|w| crate::scalar::dist2(&w[0], &w[1])).sum(),
        }
    }

    pub fn dist(&self, x: &[f64]) -> f64 {
        match self {
            Piece::Flat { lo, hi } => dist_point_box(x, lo, hi, Norm::Euclidean),
            Piece::Polyline { pts } => {
                if pts.len() == 1 {
                    return crate::scalar::dist2(x, &pts[0]);
                }
                pts.windows(2).map(|w| dist_point_segment(x, &w[0], &w[1]).0).fold(f64::INFINITY, f64::min)
            }
        }
    }

    /// Uniform sample with respect to the piece's own measure.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Piece::Flat { lo, hi } => lo.iter().zip(hi).map(|(a, b)| if a < b { a + (b - a) * rng.gen::<f64>() } else { *a }).collect(),
            Piece::Polyline { pts } => {
                if pts.len() == 1 {
                    return pts[0].clone();
                }
                let total = self.measure();
                let mut target = total * rng.gen::<f64>();
                for w in pts.windows(2) {
                    let l = crate::scalar::dist2(&w[0], &w[1]);
                    if target <= l || l == total {
                        let t = if l > 0.0 { target / l } else { 0.0 };
                        return w[0].iter().zip(&w[1]).map(|(a, b)| a + t * (b - a)).collect();
                    }
                    target -= l;
                }
                pts[pts.len() - 1].clone()
            }
        }
    }

    /// The piece as a list of segments; flat pieces must be at most 1-dimensional.
    pub fn segments(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        match self {
            Piece::Flat { lo, hi } => vec![(lo.clone(), hi.clone())],
            Piece::Polyline { pts } if pts.len() == 1 => vec![(pts[0].clone(), pts[0].clone())],
            Piece::Polyline { pts } => pts.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect(),
        }
    }

    fn bbox(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Piece::Flat { lo, hi } => (lo.clone(), hi.clone()),
            Piece::Polyline { pts } => {
                let m = pts[0].len();
                let mut lo = vec![f64::INFINITY; m];
                let mut hi = vec![f64::NEG_INFINITY; m];
                for p in pts {
                    for i in 0..m {
                        lo[i] = lo[i].min(p[i]);
                        hi[i] = hi[i].max(p[i]);
                    }
                }
                (lo, hi)
            }
        }
    }
}

fn dist_segment_box(a: &[f64], b: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let f = |t: f64| {
        let p: Vec<f64> = a.iter().zip(b).map(|(u, v)| u + t * (v - u)).collect();
        dist_point_box(&p, lo, hi, Norm::Euclidean)
    };
    let (mut l, mut r) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let m1 = l + (r - l) / 3.0;
        let m2 = r - (r - l) / 3.0;
        if f(m1) <= f(m2) {
            r = m2;
        } else {
            l = m1;
        }
    }
    f(0.5 * (l + r)).min(f(0.0)).min(f(1.0))
}

fn piece_distance(p: &Piece, q: &Piece) -> f64 {
    match (p, q) {
        (Piece::Flat { lo: a, hi: b }, Piece::Flat { lo: c, hi: d }) => dist_box_box(a, b, c, d),
        (Piece::Flat { lo, hi }, Piece::Polyline { pts }) | (Piece::Polyline { pts }, Piece::Flat { lo, hi }) => {
            if pts.len() == 1 {
                return dist_point_box(&pts[0], lo, hi, Norm::Euclidean);
            }
            pts.windows(2).map(|w| dist_segment_box(&w[0], &w[1], lo, hi)).fold(f64::INFINITY, f64::min)
        }
        (Piece::Polyline { pts: a }, Piece::Polyline { pts: b }) => {
            let sa: Vec<(&[f64], &[f64])> = if a.len() == 1 { vec![(&a[0], &a[0])] } else { a.windows(2).map(|w| (&w[0][..], &w[1][..])).collect() };
            let sb: Vec<(&[f64], &[f64])> = if b.len() == 1 { vec![(&b[0], &b[0])] } else { b.windows(2).map(|w| (&w[0][..], &w[1][..])).collect() };
            let mut best = f64::INFINITY;
            for (p0, p1) in &sa {
                for (q0, q1) in &sb {
                    best = best.min(dist_segment_segment(p0, p1, q0, q1));
                }
            }
            best
        }
    }
}

/// Contiguous run of segments of one piece with its bounding box.
#[derive(Debug, Clone)]
struct Chunk {
    piece: usize,
    ids: std::ops::Range<u32>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    length: f64,
}

const CHUNK: usize = 32;

#[derive(Debug, Clone, Default)]
struct SegIndex {
    h: f64,
    segs: Vec<(usize, usize)>,
    cells: HashMap<u64, Vec<u32>>,
    chunks: Vec<Chunk>,
}

impl SegIndex {
    fn build(pieces: &[Piece], h: f64) -> Self {
        let mut idx = SegIndex { h, ..Default::default() };
        for (j, p) in pieces.iter().enumerate() {
            if let Piece::Polyline { pts } = p {
                for s in 0..pts.len().saturating_sub(1) {
                    let id = idx.segs.len() as u32;
                    idx.segs.push((j, s));
                    let m = pts[s].len();
                    let lo: Vec<i64> = (0..m).map(|i| (pts[s][i].min(pts[s + 1][i]) / h).floor() as i64).collect();
                    let hi: Vec<i64> = (0..m).map(|i| (pts[s][i].max(pts[s + 1][i]) / h).floor() as i64).collect();
                    for_cells(&lo, &hi, |c| idx.cells.entry(c).or_default().push(id));
                }
                let first = idx.segs.len() - pts.len().saturating_sub(1);
                for start in (0..pts.len().saturating_sub(1)).step_by(CHUNK) {
                    let end = (start + CHUNK).min(pts.len() - 1);
                    let m = pts[start].len();
                    let mut lo = pts[start].clone();
                    let mut hi = pts[start].clone();
                    let mut length = 0.0;
                    for k in start..end {
                        for i in 0..m {
                            lo[i] = lo[i].min(pts[k + 1][i]);
                            hi[i] = hi[i].max(pts[k + 1][i]);
                        }
                        length += dist2(&pts[k], &pts[k + 1]);
                    }
                    idx.chunks.push(Chunk { piece: j, ids: (first + start) as u32..(first + end) as u32, lo, hi, length });
                }
            }
        }
        idx
    }

    fn near(&self, x: &[f64], r: f64, out: &mut Vec<u32>) {
        out.clear();
        let lo: Vec<i64> = x.iter().map(|v| ((v - r) / self.h).floor() as i64).collect();
        let hi: Vec<i64> = x.iter().map(|v| ((v + r) / self.h).floor() as i64).collect();
        for_cells(&lo, &hi, |c| {
            if let Some(v) = self.cells.get(&c) {
                out.extend_from_slice(v);
            }
        });
        out.sort_unstable();
        out.dedup();
    }
}

/// Packs up to three cell coordinates of 21 bits each.
fn cell_key(c: &[i64]) -> u64 {
    c.iter().fold(0u64, |k, &v| (k << 21) | ((v + (1 << 20)) as u64 & ((1 << 21) - 1)))
}

fn for_cells<F: FnMut(u64)>(lo: &[i64], hi: &[i64], mut f: F) {
    let mut cur = lo.to_vec();
    loop {
        f(cell_key(&cur));
        let mut i = 0;
        loop {
            if i == cur.len() {
                return;
            }
            if cur[i] < hi[i] {
                cur[i] += 1;
                break;
            }
            cur[i] = lo[i];
            i += 1;
        }
    }
}

/// A finite union of pieces with a recorded crossing count.
#[derive(Debug, Clone)]
pub struct SingularSet {
    pub m: usize,
    pub pieces: Vec<Piece>,
    /// Bounding boxes of the pairwise intersections of pieces, grouped.
    pub crossing_sets: Vec<(Vec<f64>, Vec<f64>)>,
    index: SegIndex,
    measures: Vec<f64>,
}

const INDEX_CELL: f64 = 1.0 / 16.0;

impl SingularSet {
    pub fn empty(m: usize) -> Self {
        Self::with_crossings(m, Vec::new(), Vec::new())
    }

    /// Crossings detected by proximity (`< 1e-9`) inside the open cube.
    pub fn new(m: usize, pieces: Vec<Piece>) -> Self {
        let mut s = Self::with_crossings(m, pieces, Vec::new());
        s.crossing_sets = s.detect_crossings(1e-9);
        s
    }

    pub fn with_crossings(m: usize, pieces: Vec<Piece>, crossing_sets: Vec<(Vec<f64>, Vec<f64>)>) -> Self {
        let index = SegIndex::build(&pieces, INDEX_CELL);
        let measures = pieces.iter().map(Piece::measure).collect();
        Self { m, pieces, crossing_sets, index, measures }
    }

    pub fn crossing_count(&self) -> usize {
        self.crossing_sets.len()
    }

    /// Flat pieces from lattice faces; crossings computed exactly.
    pub fn from_faces(m: usize, faces: &[Face]) -> Self {
        let crossings = crossing_points(faces).map(|cs| cs.iter().map(|c| c.bounds()).collect()).unwrap_or_default();
        let pieces = faces
            .iter()
            .map(|f| {
                let (lo, hi) = f.bounds::<f64>();
                Piece::Flat { lo, hi }
            })
            .collect();
        Self::with_crossings(m, pieces, crossings)
    }

    fn detect_crossings(&self, tol: f64) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut boxes: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for (i, j, _) in self.proximity_pairs(tol) {
            let (a, b) = (self.pieces[i].segments(), self.pieces[j].segments());
            for (p0, p1) in &a {
                for (q0, q1) in &b {
                    if dist_segment_segment(p0, p1, q0, q1) > tol {
                        continue;
                    }
                    let lo: Vec<f64> = (0..self.m).map(|k| p0[k].min(p1[k]).max(q0[k].min(q1[k])) - tol).collect();
                    let hi: Vec<f64> = (0..self.m).map(|k| p0[k].max(p1[k]).min(q0[k].max(q1[k])) + tol).collect();
                    if (0..self.m).any(|k| lo[k] >= 1.0 - 2.0 * tol || hi[k] <= -1.0 + 2.0 * tol) {
                        continue;
                    }
                    boxes.push((lo, hi));
                }
            }
        }
        merge_boxes(boxes)
    }

    /// Both sets' pieces; crossing boxes are concatenated without re-detection.
    pub fn union(&self, other: &SingularSet) -> SingularSet {
        let pieces = self.pieces.iter().chain(&other.pieces).cloned().collect();
        let crossings = self.crossing_sets.iter().chain(&other.crossing_sets).cloned().collect();
        Self::with_crossings(self.m, pieces, crossings)
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    /// Euclidean distance to the closed set; `+∞` when empty.
    pub fn dist(&self, x: &[f64]) -> f64 {
        let mut best = f64::INFINITY;
        let mut has_curves = false;
        for p in &self.pieces {
            match p {
                Piece::Flat { .. } => best = best.min(p.dist(x)),
                Piece::Polyline { pts } if pts.len() == 1 => best = best.min(p.dist(x)),
                _ => has_curves = true,
            }
        }
        if !has_curves {
            return best;
        }
        let mut cand = Vec::new();
        self.index.near(x, self.index.h, &mut cand);
        let mut curve_best = f64::INFINITY;
        for &id in &cand {
            curve_best = curve_best.min(self.seg_dist(id, x));
        }
        if curve_best > self.index.h {
            let bounds: Vec<f64> = self.index.chunks.iter().map(|c| dist_point_box(x, &c.lo, &c.hi, Norm::Euclidean)).collect();
            if let Some(k0) = (0..bounds.len()).min_by(|&a, &b| bounds[a].total_cmp(&bounds[b])) {
                for id in self.index.chunks[k0].ids.clone() {
                    curve_best = curve_best.min(self.seg_dist(id, x));
                }
            }
            for (c, &d) in self.index.chunks.iter().zip(&bounds) {
                if d < curve_best {
                    for id in c.ids.clone() {
                        curve_best = curve_best.min(self.seg_dist(id, x));
                    }
                }
            }
        }
        best.min(curve_best)
    }

    fn seg(&self, id: u32) -> (&[f64], &[f64], usize) {
        let (j, s) = self.index.segs[id as usize];
        match &self.pieces[j] {
            Piece::Polyline { pts } => (&pts[s], &pts[s + 1], j),
            Piece::Flat { .. } => unreachable!("segment index only covers curves"),
        }
    }

    fn seg_dist(&self, id: u32, x: &[f64]) -> f64 {
        let (a, b, _) = self.seg(id);
        dist_point_segment(x, a, b).0
    }

    /// `Σ_j w_j |S_j ∩ B_∞(x, δ)| / |S_j|`, the building block of the
    /// importance density around the set.
    pub fn local_density(&self, x: &[f64], delta: f64, weights: &[f64]) -> f64 {
        let mut acc = 0.0;
        let mut any_curve = false;
        for (j, p) in self.pieces.iter().enumerate() {
            match p {
                Piece::Flat { lo, hi } => {
                    let mut meas = 1.0;
                    for i in 0..self.m {
                        let a = lo[i].max(x[i] - delta);
                        let b = hi[i].min(x[i] + delta);
                        if a > b {
                            meas = 0.0;
                            break;
                        }
                        if lo[i] < hi[i] {
                            meas *= b - a;
                        }
                    }
                    if meas > 0.0 {
                        acc += weights[j] * meas / self.measures[j];
                    }
                }
                Piece::Polyline { pts } if pts.len() == 1 => {
                    if crate::scalar::dist_sup(x, &pts[0]) <= delta {
                        acc += weights[j];
                    }
                }
                _ => any_curve = true,
            }
        }
        if any_curve {
            let lo: Vec<f64> = x.iter().map(|v| v - delta).collect();
            let hi: Vec<f64> = x.iter().map(|v| v + delta).collect();
            let mut cand = Vec::new();
            let mut lengths: HashMap<usize, f64> = HashMap::new();
            if delta <= self.index.h {
                self.index.near(x, delta, &mut cand);
            } else {
                for c in &self.index.chunks {
                    let outside = (0..self.m).any(|i| c.hi[i] < lo[i] || c.lo[i] > hi[i]);
                    if outside {
                        continue;
                    }
                    if (0..self.m).all(|i| lo[i] <= c.lo[i] && c.hi[i] <= hi[i]) {
                        *lengths.entry(c.piece).or_default() += c.length;
                    } else {
                        cand.extend(c.ids.clone());
                    }
                }
            }
            for &id in &cand {
                let (a, b, j) = self.seg(id);
                if let Some((t0, t1)) = clip_segment_to_box(a, b, &lo, &hi) {
                    *lengths.entry(j).or_default() += (t1 - t0) * crate::scalar::dist2(a, b);
                }
            }
            for (j, l) in lengths {
                let total = self.measures[j];
                if total > 0.0 {
                    acc += weights[j] * l / total;
                }
            }
        }
        acc
    }

    /// Number of connected components, joining pieces closer than `tol`.
    pub fn components(&self, tol: f64) -> usize {
        let n = self.pieces.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], i: usize) -> usize {
            let mut r = i;
            while p[r] != r {
                r = p[r];
            }
            p[i] = r;
            r
        }
        for i in 0..n {
            for j in i + 1..n {
                let (li, hi_) = self.pieces[i].bbox();
                let (lj, hj) = self.pieces[j].bbox();
                if dist_box_box(&li, &hi_, &lj, &hj) > tol {
                    continue;
                }
                if piece_distance(&self.pieces[i], &self.pieces[j]) <= tol {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
        (0..n).filter(|&i| find(&mut parent, i) == i).count()
    }

    /// Pairwise piece distances below `tol` (proximity crossing report).
    pub fn proximity_pairs(&self, tol: f64) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.pieces.len() {
            for j in i + 1..self.pieces.len() {
                let (li, hi_) = self.pieces[i].bbox();
                let (lj, hj) = self.pieces[j].bbox();
                if dist_box_box(&li, &hi_, &lj, &hj) > tol {
                    continue;
                }
                let d = piece_distance(&self.pieces[i], &self.pieces[j]);
                if d <= tol {
                    out.push((i, j, d));
                }
            }
        }
        out
    }

    pub fn max_piece_dim(&self) -> usize {
        self.pieces.iter().map(Piece::dim).max().unwrap_or(0)
    }

    pub fn to_obj(&self, name: &str) -> String {
        let mut w = crate::io::ObjWriter::new(name);
        for (k, p) in self.pieces.iter().enumerate() {
            w.group(&format!("piece_{k}"));
            match p {
                Piece::Polyline { pts } => w.polyline(pts),
                Piece::Flat { lo, hi } => {
                    let free: Vec<usize> = (0..self.m).filter(|&i| lo[i] < hi[i]).collect();
                    let corner = |mask: usize| -> Vec<f64> {
                        let mut c = lo.clone();
                        for (k, &ax) in free.iter().enumerate() {
                            if mask >> k & 1 == 1 {
                                c[ax] = hi[ax];
                            }
                        }
                        c
                    };
                    match free.len() {
                        0 => w.point(lo),
                        1 => w.polyline(&[corner(0), corner(1)]),
                        _ => w.quad([&corner(0), &corner(1), &corner(3), &corner(2)]),
                    }
                }
            }
        }
        w.finish()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "dimension": self.max_piece_dim(),
            "crossing_count": self.crossing_count(),
            "pieces": self.pieces,
        })
    }
}

fn merge_boxes(mut boxes: Vec<(Vec<f64>, Vec<f64>)>) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut merged = true;
    while merged {
        merged = false;
        'outer: for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                let touch = (0..boxes[i].0.len()).all(|k| boxes[i].0[k].max(boxes[j].0[k]) <= boxes[i].1[k].min(boxes[j].1[k]));
                if touch {
                    let b = boxes.swap_remove(j);
                    for k in 0..b.0.len() {
                        boxes[i].0[k] = boxes[i].0[k].min(b.0[k]);
                        boxes[i].1[k] = boxes[i].1[k].max(b.1[k]);
                    }
                    merged = true;
                    break 'outer;
                }
            }
        }
    }
    boxes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{dual_skeleton, Cubication};
    use rand::SeedableRng;

    #[test]
    fn flat_and_curve_distances_agree() {
        let flat = SingularSet::new(3, vec![Piece::Flat { lo: vec![0.0, 0.0, -1.0], hi: vec![0.0, 0.0, 1.0] }]);
        let curve = SingularSet::new(3, vec![Piece::Polyline { pts: (0..=40).map(|k| vec![0.0, 0.0, -1.0 + 0.05 * k as f64]).collect() }]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect();
            assert!((flat.dist(&x) - curve.dist(&x)).abs() < 1e-12);
            for &d in &[0.01, 0.1, 0.5] {
                let a = flat.local_density(&x, d, &[1.0]);
                let b = curve.local_density(&x, d, &[1.0]);
                assert!((a - b).abs() < 1e-9, "{a} {b}");
            }
        }
    }

    #[test]
    fn dual_lines_form_one_component() {
        let c = Cubication::new(3, 2).unwrap();
        let d = dual_skeleton(&c, 1).unwrap();
        let s = SingularSet::from_faces(3, &d.pieces);
        assert_eq!(s.crossing_count(), 8);
        assert_eq!(s.components(1e-12), 1);
    }

    #[test]
    fn separated_segments_components() {
        let s = SingularSet::new(3, vec![Piece::segment(vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]), Piece::segment(vec![0.0, 1.0, 0.0], vec![1.0, 1.0, 0.0])]);
        assert_eq!(s.components(1e-9), 2);
        assert!(s.proximity_pairs(1e-7).is_empty());
    }

    #[test]
    fn samples_lie_on_pieces() {
        let s = Piece::Polyline { pts: vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 2.0]] };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            assert!(s.dist(&s.sample(&mut rng)) < 1e-12);
        }
        assert!((s.measure() - 3.0).abs() < 1e-15);
    }
}
