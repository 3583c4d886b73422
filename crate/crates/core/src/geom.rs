//! Axis-aligned boxes, segments and small exact-geometry helpers.

use crate::scalar::Real;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    Euclidean,
    Sup,
}

/// Distance from `x` to the closed box `[lo, hi]`.
pub fn dist_point_box<T: Real>(x: &[T], lo: &[T], hi: &[T], norm: Norm) -> T {
    let mut acc = T::zero();
    for i in 0..x.len() {
        let d = if x[i] < lo[i] {
            lo[i] - x[i]
        } else if x[i] > hi[i] {
            x[i] - hi[i]
        } else {
            T::zero()
        };
        acc = match norm {
            Norm::Euclidean => acc + d * d,
            Norm::Sup => acc.max(d),
        };
    }
    match norm {
        Norm::Euclidean => acc.sqrt(),
        Norm::Sup => acc,
    }
}

/// Distance between two closed boxes.
pub fn dist_box_box(lo1: &[f64], hi1: &[f64], lo2: &[f64], hi2: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..lo1.len() {
        let d = (lo2[i] - hi1[i]).max(lo1[i] - hi2[i]).max(0.0);
        acc += d * d;
    }
    acc.sqrt()
}

/// Euclidean distance from `x` to segment `[a, b]` and the closest parameter.
pub fn dist_point_segment(x: &[f64], a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut ab2 = 0.0;
    let mut dot = 0.0;
    for i in 0..x.len() {
        let e = b[i] - a[i];
        ab2 += e * e;
        dot += (x[i] - a[i]) * e;
    }
    let t = if ab2 > 0.0 { (dot / ab2).clamp(0.0, 1.0) } else { 0.0 };
    let mut d2 = 0.0;
    for i in 0..x.len() {
        let p = a[i] + t * (b[i] - a[i]);
        d2 += (x[i] - p) * (x[i] - p);
    }
    (d2.sqrt(), t)
}

/// Euclidean distance between segments `[p0, p1]` and `[q0, q1]`.
pub fn dist_segment_segment(p0: &[f64], p1: &[f64], q0: &[f64], q1: &[f64]) -> f64 {
    let n = p0.len();
    let d1: Vec<f64> = (0..n).map(|i| p1[i] - p0[i]).collect();
    let d2: Vec<f64> = (0..n).map(|i| q1[i] - q0[i]).collect();
    let r: Vec<f64> = (0..n).map(|i| p0[i] - q0[i]).collect();
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let a = dot(&d1, &d1);
    let e = dot(&d2, &d2);
    let f = dot(&d2, &r);
    let (s, t);
    if a <= 1e-300 && e <= 1e-300 {
        return crate::scalar::dist2(p0, q0);
    }
    if a <= 1e-300 {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = dot(&d1, &r);
        if e <= 1e-300 {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = dot(&d1, &d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > 1e-300 { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    let mut d = 0.0;
    for i in 0..n {
        let u = p0[i] + s * d1[i] - q0[i] - t * d2[i];
        d += u * u;
    }
    d.sqrt()
}

/// Parameter interval of the segment `a + t (b - a)`, `t` in [0, 1], inside
/// the closed box.
pub fn clip_segment_to_box(a: &[f64], b: &[f64], lo: &[f64], hi: &[f64]) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for i in 0..a.len() {
        let d = b[i] - a[i];
        if d.abs() < 1e-300 {
            if a[i] < lo[i] || a[i] > hi[i] {
                return None;
            }
            continue;
        }
        let mut u = (lo[i] - a[i]) / d;
        let mut v = (hi[i] - a[i]) / d;
        if u > v {
            std::mem::swap(&mut u, &mut v);
        }
        t0 = t0.max(u);
        t1 = t1.min(v);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Exact volume of a union of boxes by coordinate compression.
pub fn union_volume(boxes: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    if boxes.is_empty() {
        return 0.0;
    }
    let m = boxes[0].0.len();
    let mut cuts: Vec<Vec<f64>> = vec![Vec::new(); m];
    for (lo, hi) in boxes {
        for i in 0..m {
            cuts[i].push(lo[i]);
            cuts[i].push(hi[i]);
        }
    }
    for c in cuts.iter_mut() {
        c.sort_by(|a, b| a.partial_cmp(b).unwrap());
        c.dedup();
    }
    let dims: Vec<usize> = cuts.iter().map(|c| c.len().saturating_sub(1)).collect();
    if dims.contains(&0) {
        return 0.0;
    }
    let total: usize = dims.iter().product();
    let mut vol = 0.0;
    let mut idx = vec![0usize; m];
    let mut mid = vec![0.0; m];
    for _ in 0..total {
        let mut cell = 1.0;
        for i in 0..m {
            mid[i] = 0.5 * (cuts[i][idx[i]] + cuts[i][idx[i] + 1]);
            cell *= cuts[i][idx[i] + 1] - cuts[i][idx[i]];
        }
        if boxes
            .iter()
            .any(|(lo, hi)| (0..m).all(|i| lo[i] < mid[i] && mid[i] < hi[i]))
        {
            vol += cell;
        }
        for i in 0..m {
            idx[i] += 1;
            if idx[i] < dims[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    vol
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_distance_closed_form() {
        let d = dist_point_box(&[2.0, 2.0], &[-1.0, -1.0], &[1.0, 1.0], Norm::Euclidean);
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
        let s = dist_point_box(&[2.0, 3.0], &[-1.0, -1.0], &[1.0, 1.0], Norm::Sup);
        assert_eq!(s, 2.0);
        let f = dist_point_box(&[2.0f32, 0.0], &[-1.0, -1.0], &[1.0, 1.0], Norm::Sup);
        assert_eq!(f, 1.0);
    }

    #[test]
    fn skew_segments() {
        let d = dist_segment_segment(&[-1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, -1.0, 1.0], &[0.0, 1.0, 1.0]);
        assert!((d - 1.0).abs() < 1e-15);
        let c = dist_segment_segment(&[0.0, 0.0], &[1.0, 1.0], &[0.0, 1.0], &[1.0, 0.0]);
        assert!(c < 1e-15);
        let p = dist_segment_segment(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]);
        assert!((p - 1.0).abs() < 1e-15);
    }

    #[test]
    fn union_of_overlapping_squares() {
        let b = vec![
            (vec![0.0, 0.0], vec![2.0, 2.0]),
            (vec![1.0, 1.0], vec![3.0, 3.0]),
        ];
        assert!((union_volume(&b) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn clipping() {
        let r = clip_segment_to_box(&[-2.0, 0.0], &[2.0, 0.0], &[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        assert!((r.0 - 0.25).abs() < 1e-15 && (r.1 - 0.75).abs() < 1e-15);
        assert!(clip_segment_to_box(&[-2.0, 2.0], &[2.0, 2.0], &[-1.0, -1.0], &[1.0, 1.0]).is_none());
    }
}
