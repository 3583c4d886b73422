//! Target manifolds with nearest-point and singular projections.

use crate::error::{Error, Result};
use crate::scalar::norm2;
use crate::sets::{Piece, SingularSet};
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

pub const TORUS_MAJOR: f64 = 2.0;
pub const TORUS_MINOR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    /// The unit sphere `S^N ⊂ R^{N+1}`.
    Sphere(usize),
    /// Torus of revolution about the third axis, radii (2, 1).
    Torus,
}

impl Target {
    /// Parses `"sphere:N"` or `"torus"`.
    pub fn parse(name: &str) -> Result<Self> {
        let name = name.trim();
        if name == "torus" {
            return Ok(Target::Torus);
        }
        if let Some(n) = name.strip_prefix("sphere:") {
            return n
                .parse::<usize>()
                .map(Target::Sphere)
                .map_err(|_| Error::Domain(format!("bad sphere dimension in {name:?}")));
        }
        Err(Error::Domain(format!("unknown target {name:?}; expected sphere:N or torus")))
    }

    pub fn name(&self) -> String {
        match self {
            Target::Sphere(n) => format!("sphere:{n}"),
            Target::Torus => "torus".into(),
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match self {
            Target::Sphere(n) => n + 1,
            Target::Torus => 3,
        }
    }

    pub fn tubular_radius(&self) -> f64 {
        0.5
    }

    /// `dist(Σ, 𝒩)`.
    pub fn sep(&self) -> f64 {
        1.0
    }

    /// Largest `j` with `π_0 .. π_j` trivial; `-1` when disconnected.
    pub fn connectivity_order(&self) -> i64 {
        match self {
            Target::Sphere(n) => *n as i64 - 1,
            Target::Torus => 0,
        }
    }

    pub fn dist_to_manifold(&self, x: &[f64]) -> f64 {
        match self {
            Target::Sphere(_) => (norm2(x) - 1.0).abs(),
            Target::Torus => {
                let rho = x[0].hypot(x[1]);
                ((rho - TORUS_MAJOR).hypot(x[2]) - TORUS_MINOR).abs()
            }
        }
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.ambient_dim() && self.dist_to_manifold(x) <= tol
    }

    /// Distance to the singular set Σ.
    pub fn sigma_dist(&self, x: &[f64]) -> f64 {
        match self {
            Target::Sphere(_) => norm2(x),
            Target::Torus => {
                let rho = x[0].hypot(x[1]);
                rho.min((rho - TORUS_MAJOR).hypot(x[2]))
            }
        }
    }

    /// `y − π_Σ(y)`: the normal residual to the nearest point of Σ.
    pub fn sigma_residual(&self, y: &[f64]) -> Vec<f64> {
        match self {
            Target::Sphere(_) => y.to_vec(),
            Target::Torus => {
                let rho = y[0].hypot(y[1]);
                let dc = (rho - TORUS_MAJOR).hypot(y[2]);
                if rho <= dc || rho == 0.0 {
                    vec![y[0], y[1], 0.0]
                } else {
                    let s = TORUS_MAJOR / rho;
                    vec![y[0] - s * y[0], y[1] - s * y[1], y[2]]
                }
            }
        }
    }

    /// Dimension of Σ.
    pub fn sigma_dim(&self) -> usize {
        match self {
            Target::Sphere(_) => 0,
            Target::Torus => 1,
        }
    }

    /// Σ as a piece list; the torus axis is truncated to `|x_3| ≤ 4`.
    pub fn sigma_set(&self) -> SingularSet {
        match self {
            Target::Sphere(n) => SingularSet::new(n + 1, vec![Piece::point(vec![0.0; n + 1])]),
            Target::Torus => {
                let k = 4096;
                let circle = (0..=k)
                    .map(|i| {
                        let t = TAU * i as f64 / k as f64;
                        vec![TORUS_MAJOR * t.cos(), TORUS_MAJOR * t.sin(), 0.0]
                    })
                    .collect();
                SingularSet::new(
                    3,
                    vec![Piece::Polyline { pts: circle }, Piece::segment(vec![0.0, 0.0, -4.0], vec![0.0, 0.0, 4.0])],
                )
            }
        }
    }

    /// Nearest-point projection Π, defined inside the tubular neighbourhood.
    pub fn nearest_projection(&self, x: &[f64]) -> Option<Vec<f64>> {
        if self.dist_to_manifold(x) < self.tubular_radius() {
            self.project(x).ok()
        } else {
            None
        }
    }

    /// Singular projection `P: R^ν ∖ Σ → 𝒩`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.sigma_dist(x);
        if d <= 1e-12 {
            return Err(Error::Singular { dist: d });
        }
        Ok(match self {
            Target::Sphere(_) => x.iter().map(|v| v / d).collect(),
            Target::Torus => {
                let rho = x[0].hypot(x[1]);
                let (e0, e1) = (x[0] / rho, x[1] / rho);
                let q = (rho - TORUS_MAJOR, x[2]);
                let ql = q.0.hypot(q.1);
                let r = TORUS_MAJOR + TORUS_MINOR * q.0 / ql;
                vec![r * e0, r * e1, TORUS_MINOR * q.1 / ql]
            }
        })
    }

    /// `DP(x)` as a `ν × ν` matrix.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.sigma_dist(x);
        if d <= 1e-12 {
            return Err(Error::Singular { dist: d });
        }
        let n = self.ambient_dim();
        match self {
            Target::Sphere(_) => Ok(DMatrix::from_fn(n, n, |i, j| {
                let delta = if i == j { 1.0 } else { 0.0 };
                (delta - x[i] * x[j] / (d * d)) / d
            })),
            Target::Torus => {
                let h = 1e-5 * d;
                let mut jm = DMatrix::zeros(n, n);
                let mut xp = x.to_vec();
                for k in 0..n {
                    xp[k] = x[k] + h;
                    let a = self.project(&xp)?;
                    xp[k] = x[k] - h;
                    let b = self.project(&xp)?;
                    xp[k] = x[k];
                    for i in 0..n {
                        jm[(i, k)] = (a[i] - b[i]) / (2.0 * h);
                    }
                }
                Ok(jm)
            }
        }
    }

    /// Norm of `D^j P(x)`: operator norm for `j = 1`, Frobenius norm of the
    /// finite-difference tensor for `j = 2`.
    pub fn derivative_norm(&self, x: &[f64], j: usize) -> Result<f64> {
        match j {
            1 => Ok(self.jacobian(x)?.singular_values().max()),
            2 => Ok(self.second_derivative(x)?.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt()),
            _ => Err(Error::Domain(format!("derivative order {j} not in {{1, 2}}"))),
        }
    }

    fn second_derivative(&self, x: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        let h = 1e-4 * self.sigma_dist(x);
        let mut xp = x.to_vec();
        let mut out = Vec::new();
        for k in 0..x.len() {
            xp[k] = x[k] + h;
            let a = self.jacobian(&xp)?;
            xp[k] = x[k] - h;
            let b = self.jacobian(&xp)?;
            xp[k] = x[k];
            out.push((a - b) / (2.0 * h));
        }
        Ok(out)
    }

    fn derivative_diff(&self, x: &[f64], y: &[f64], j: usize) -> Result<f64> {
        match j {
            1 => Ok((self.jacobian(x)? - self.jacobian(y)?).norm()),
            _ => {
                let a = self.second_derivative(x)?;
                let b = self.second_derivative(y)?;
                Ok(a.iter().zip(&b).map(|(p, q)| (p - q).norm_squared()).sum::<f64>().sqrt())
            }
        }
    }

    /// Random point near Σ or in the ball of radius `sample_radius`.
    fn sample_point<R: Rng>(&self, rng: &mut R, sigma: &SingularSet) -> Vec<f64> {
        let n = self.ambient_dim();
        let r_ball = self.sample_radius();
        loop {
            let x = if rng.gen_bool(0.5) {
                let piece = &sigma.pieces[rng.gen_range(0..sigma.pieces.len())];
                let base = piece.sample(rng);
                let r = 10f64.powf(rng.gen_range(-3.0..0.3));
                let dir = crate::rng::unit_vector(rng, n);
                base.iter().zip(&dir).map(|(b, d)| b + r * d).collect()
            } else {
                crate::rng::in_ball(rng, n, r_ball)
            };
            if norm2(&x) < r_ball && self.sigma_dist(&x) > 1e-6 {
                return x;
            }
        }
    }

    fn sample_radius(&self) -> f64 {
        match self {
            Target::Sphere(_) => 2.0,
            Target::Torus => 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeBound {
    /// `sup |D^jP(x)| dist(x, Σ)^j`.
    pub c: f64,
    /// `sup |D^jP(x) − D^jP(y)| dist(x, Σ)^{j+1} / |x − y|` over pairs with `dist(x,Σ) ≤ dist(y,Σ)`.
    pub c_mean_value: f64,
    pub samples: usize,
}

/// Fits the blow-up constants of `D^j P` near Σ on a bounded ball.
pub fn projection_derivative_bound_check(t: &Target, j: usize, samples: usize, seed: u64) -> Result<DerivativeBound> {
    if samples < 100 {
        return Err(Error::Domain("at least 100 samples required".into()));
    }
    if !(1..=2).contains(&j) {
        return Err(Error::Domain(format!("derivative order {j} not in {{1, 2}}")));
    }
    let sigma = t.sigma_set();
    let parts = crate::rng::blocks(seed, samples, |rng, _, len| {
        let (mut c, mut cm) = (0.0f64, 0.0f64);
        for _ in 0..len {
            let x = t.sample_point(rng, &sigma);
            let dx = t.sigma_dist(&x);
            c = c.max(t.derivative_norm(&x, j).unwrap_or(0.0) * dx.powi(j as i32));
            let step = dx * 10f64.powf(rng.gen_range(-3.0..1.0));
            let dir = crate::rng::unit_vector(rng, x.len());
            let y: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let dy = t.sigma_dist(&y);
            if dy <= 1e-6 || norm2(&y) >= t.sample_radius() {
                continue;
            }
            let (p, q, dp) = if dx <= dy { (&x, &y, dx) } else { (&y, &x, dy) };
            if let Ok(diff) = t.derivative_diff(p, q, j) {
                cm = cm.max(diff * dp.powi(j as i32 + 1) / step);
            }
        }
        (c, cm)
    });
    let (c, c_mean_value) = parts.into_iter().fold((0.0f64, 0.0f64), |(a, b), (x, y)| (a.max(x), b.max(y)));
    Ok(DerivativeBound { c, c_mean_value, samples })
}

/// `x ↦ f(x / |x|_∞)`.
pub fn homogeneous_extension<F: Fn(&[f64]) -> Vec<f64>>(f: F, x: &[f64]) -> Result<Vec<f64>> {
    let s = crate::scalar::sup_norm(x);
    if s == 0.0 {
        return Err(Error::Singular { dist: 0.0 });
    }
    let y: Vec<f64> = x.iter().map(|v| v / s).collect();
    Ok(f(&y))
}

/// Winding number of a closed planar loop given by consecutive samples.
pub fn winding_number(loop_values: &[[f64; 2]]) -> f64 {
    let mut total = 0.0;
    for k in 0..loop_values.len() {
        let a = loop_values[k];
        let b = loop_values[(k + 1) % loop_values.len()];
        let cross = a[0] * b[1] - a[1] * b[0];
        let dot = a[0] * b[0] + a[1] * b[1];
        total += cross.atan2(dot);
    }
    total / TAU
}

/// Points of the sup-norm circle of radius `r` around `c` in the `(i, j)` plane, counter-clockwise.
pub fn square_loop(c: &[f64], i: usize, j: usize, r: f64, per_side: usize) -> Vec<Vec<f64>> {
    let mut pts = Vec::with_capacity(4 * per_side);
    let corners = [(r, -r), (r, r), (-r, r), (-r, -r)];
    for s in 0..4 {
        let (a, b) = (corners[(s + 3) % 4], corners[s]);
        for k in 0..per_side {
            let t = k as f64 / per_side as f64;
            let mut p = c.to_vec();
            p[i] += a.0 + t * (b.0 - a.0);
            p[j] += a.1 + t * (b.1 - a.1);
            pts.push(p);
        }
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sphere_projection_examples() {
        let s = Target::Sphere(1);
        let p = s.project(&[3.0, 4.0]).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        assert!(matches!(s.project(&[0.0, 0.0]), Err(Error::Singular { .. })));
    }

    #[test]
    fn torus_nearest_point_in_meridian_plane() {
        let t = Target::Torus;
        let p = t.project(&[4.0, 0.0, 0.0]).unwrap();
        assert!((p[0] - 3.0).abs() < 1e-15 && p[1].abs() < 1e-15 && p[2].abs() < 1e-15);
        // brute-force minimisation in the (ρ, x₃) half plane
        let x = [1.3f64, -2.2, 0.7];
        let rho = x[0].hypot(x[1]);
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..200_000 {
            let th = TAU * k as f64 / 200_000.0;
            let (r, z) = (2.0 + th.cos(), th.sin());
            let d = (r - rho).hypot(z - x[2]);
            if d < best.0 {
                best = (d, th);
            }
        }
        let p = t.project(&x).unwrap();
        let r = 2.0 + best.1.cos();
        let q = [r * x[0] / rho, r * x[1] / rho, best.1.sin()];
        assert!(crate::scalar::dist2(&p, &q) < 1e-4);
    }

    #[test]
    fn projection_is_identity_on_manifold_and_idempotent() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for t in [Target::Sphere(1), Target::Sphere(2), Target::Torus] {
            for _ in 0..500 {
                let x: Vec<f64> = (0..t.ambient_dim()).map(|_| rng.gen_range(-3.5..3.5)).collect();
                if t.sigma_dist(&x) < 1e-6 {
                    continue;
                }
                let p = t.project(&x).unwrap();
                assert!(t.contains(&p, 1e-10));
                let pp = t.project(&p).unwrap();
                assert!(crate::scalar::dist2(&p, &pp) <= 1e-9);
            }
        }
    }

    #[test]
    fn sphere_radial_invariance() {
        let s = Target::Sphere(2);
        let x = [0.3, -0.2, 0.9];
        for lam in [0.01, 0.5, 7.0, 1e3] {
            let y: Vec<f64> = x.iter().map(|v| v * lam).collect();
            let (a, b) = (s.project(&x).unwrap(), s.project(&y).unwrap());
            assert!(crate::scalar::dist2(&a, &b) < 1e-12);
        }
    }

    #[test]
    fn torus_sigma_separation_is_one() {
        let t = Target::Torus;
        let mut best = f64::INFINITY;
        for a in 0..400 {
            for b in 0..400 {
                let (u, v) = (TAU * a as f64 / 400.0, TAU * b as f64 / 400.0);
                let p = [(2.0 + v.cos()) * u.cos(), (2.0 + v.cos()) * u.sin(), v.sin()];
                best = best.min(t.sigma_dist(&p));
            }
        }
        assert!((best - 1.0).abs() < 1e-6);
        assert_eq!(t.sigma_set().components(1e-9), 2);
    }

    #[test]
    fn derivative_constants_match_analytic_values() {
        let c1 = projection_derivative_bound_check(&Target::Sphere(1), 1, 2000, 1).unwrap();
        let c1b = projection_derivative_bound_check(&Target::Sphere(1), 1, 20_000, 2).unwrap();
        assert!((c1.c - 1.0).abs() < 1e-9);
        assert!(c1b.c / c1.c <= 1.2);
        let c2 = projection_derivative_bound_check(&Target::Sphere(2), 1, 2000, 1).unwrap();
        assert!((1.0..=1.5).contains(&c2.c));
        let t = projection_derivative_bound_check(&Target::Torus, 1, 2000, 1).unwrap();
        let tb = projection_derivative_bound_check(&Target::Torus, 1, 20_000, 2).unwrap();
        assert!(t.c.is_finite() && tb.c / t.c <= 1.2, "{} {}", t.c, tb.c);
        assert!(t.c_mean_value.is_finite() && t.c_mean_value > 0.0);
    }

    #[test]
    fn homogeneous_extension_examples() {
        let y = homogeneous_extension(|p| p.to_vec(), &[0.2, 0.1]).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-15 && (y[1] - 0.5).abs() < 1e-15);
        assert_eq!(homogeneous_extension(|_| vec![0.3, 0.4], &[0.01, -0.7]).unwrap(), vec![0.3, 0.4]);
        assert!(homogeneous_extension(|p| p.to_vec(), &[0.0, 0.0]).is_err());
        let f = |p: &[f64]| {
            let n = norm2(p);
            vec![p[0] / n, p[1] / n]
        };
        for r in [0.3, 0.7] {
            let vals: Vec<[f64; 2]> = square_loop(&[0.0, 0.0], 0, 1, r, 200)
                .iter()
                .map(|x| {
                    let v = homogeneous_extension(f, x).unwrap();
                    [v[0], v[1]]
                })
                .collect();
            assert!((winding_number(&vals) - 1.0).abs() < 1e-9);
        }
    }
}
