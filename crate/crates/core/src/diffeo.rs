//! Local diffeomorphisms of `Q^m` with exact identity outside their supports,
//! and ordered pipelines of them.

use crate::error::{Error, Result};
use crate::scalar::{dist2, sup_norm};
use crate::sets::{Piece, SingularSet};
use nalgebra::DMatrix;
use serde_json::json;
use std::fmt::Debug;
use std::sync::Arc;

pub trait DiffeoPiece: Send + Sync + Debug {
    fn dim(&self) -> usize;
    /// Open region outside of which the piece is the identity.
    fn in_support(&self, x: &[f64]) -> bool;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    /// Preimage of `y`; `None` when `y` is not in the image.
    fn inverse(&self, y: &[f64]) -> Option<Vec<f64>>;
    /// Bounding box of the support (may be unbounded along dummy axes).
    fn support_box(&self) -> (Vec<f64>, Vec<f64>);
    fn describe(&self) -> serde_json::Value;

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        fd_jacobian(|p| self.apply(p), x, 1e-7)
    }
}

pub fn fd_jacobian<F: Fn(&[f64]) -> Vec<f64>>(f: F, x: &[f64], h: f64) -> DMatrix<f64> {
    let m = x.len();
    let mut xp = x.to_vec();
    let mut cols = Vec::with_capacity(m);
    for k in 0..m {
        xp[k] = x[k] + h;
        let a = f(&xp);
        xp[k] = x[k] - h;
        let b = f(&xp);
        xp[k] = x[k];
        cols.push(a.iter().zip(&b).map(|(u, v)| (u - v) / (2.0 * h)).collect::<Vec<f64>>());
    }
    DMatrix::from_fn(cols[0].len(), m, |i, k| cols[k][i])
}

/// Radial profile `F` on `[0, ∞)`: identity for `t ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Profile {
    /// `F ≡ 1` on `[0, 1)`: the hard radial retraction onto the unit level.
    Hard,
    /// `C¹` increasing profile with `F(0) = q`, linear then quadratic.
    Soft { q: f64 },
}

impl Profile {
    pub fn soft(q: f64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Domain(format!("profile inner level must lie in (0, 1), got {q}")));
        }
        Ok(Profile::Soft { q })
    }

    fn coeffs(q: f64) -> (f64, f64, f64) {
        let a = (1.0 - q) / (1.0 + q);
        let b = (1.0 - a) / (2.0 * (1.0 - q));
        (a, b, q + a * q)
    }

    pub fn value(&self, t: f64) -> f64 {
        if t >= 1.0 {
            return t;
        }
        match *self {
            Profile::Hard => 1.0,
            Profile::Soft { q } => {
                let (a, b, fq) = Self::coeffs(q);
                if t <= q {
                    q + a * t
                } else {
                    let u = t - q;
                    fq + a * u + b * u * u
                }
            }
        }
    }

    pub fn deriv(&self, t: f64) -> f64 {
        if t >= 1.0 {
            return 1.0;
        }
        match *self {
            Profile::Hard => 0.0,
            Profile::Soft { q } => {
                let (a, b, _) = Self::coeffs(q);
                if t <= q {
                    a
                } else {
                    a + 2.0 * b * (t - q)
                }
            }
        }
    }

    /// Inner level below which nothing is hit.
    pub fn floor(&self) -> f64 {
        match *self {
            Profile::Hard => 1.0,
            Profile::Soft { q } => q,
        }
    }

    pub fn inverse(&self, s: f64) -> Option<f64> {
        if s >= 1.0 {
            return Some(s);
        }
        match *self {
            Profile::Hard => None,
            Profile::Soft { q } => {
                if s < q {
                    return None;
                }
                let (a, b, fq) = Self::coeffs(q);
                if s <= fq {
                    Some((s - q) / a)
                } else {
                    let c = s - fq;
                    Some(q + 2.0 * c / (a + (a * a + 4.0 * b * c).sqrt()))
                }
            }
        }
    }
}

/// Radial push away from an apex, measured in a box gauge.
///
/// With `r(x) = max(max_i |x_i − A_i| / w_i, (A_k − x_k) / (A_k − z_bot))`
/// over the lateral axes `i` and the push axis `k`, the piece maps
/// `x ↦ A + (x − A) F(r) / r` on `{r < 1}` and leaves dummy axes untouched.
#[derive(Debug, Clone)]
pub struct GaugePush {
    pub m: usize,
    pub apex: Vec<f64>,
    pub push_axis: usize,
    /// Lateral axes with their half-widths.
    pub lateral: Vec<(usize, f64)>,
    pub bottom: f64,
    pub profile: Profile,
}

impl GaugePush {
    pub fn new(m: usize, apex: Vec<f64>, push_axis: usize, lateral: Vec<(usize, f64)>, bottom: f64, profile: Profile) -> Result<Self> {
        if apex.len() != m || push_axis >= m || lateral.iter().any(|&(i, w)| i >= m || i == push_axis || !(w > 0.0)) {
            return Err(Error::Construction("malformed gauge push axes".into()));
        }
        if !(apex[push_axis] > bottom) {
            return Err(Error::Construction("apex must lie above the bottom of the region".into()));
        }
        Ok(Self { m, apex, push_axis, lateral, bottom, profile })
    }

    pub fn gauge(&self, x: &[f64]) -> f64 {
        let k = self.push_axis;
        let mut r = (self.apex[k] - x[k]) / (self.apex[k] - self.bottom);
        for &(i, w) in &self.lateral {
            r = r.max((x[i] - self.apex[i]).abs() / w);
        }
        r
    }

    fn scale(&self, x: &[f64], f: f64) -> Vec<f64> {
        let mut y = x.to_vec();
        let k = self.push_axis;
        y[k] = self.apex[k] + (x[k] - self.apex[k]) * f;
        for &(i, _) in &self.lateral {
            y[i] = self.apex[i] + (x[i] - self.apex[i]) * f;
        }
        y
    }

    /// `det DΦ = (F/r)^{d−1} F′` with `d` the number of non-dummy axes.
    pub fn det(&self, x: &[f64]) -> f64 {
        let r = self.gauge(x);
        if !(r < 1.0) {
            return 1.0;
        }
        let d = self.lateral.len() as i32 + 1;
        (self.profile.value(r) / r).powi(d - 1) * self.profile.deriv(r)
    }
}

impl DiffeoPiece for GaugePush {
    fn dim(&self) -> usize {
        self.m
    }

    fn in_support(&self, x: &[f64]) -> bool {
        let r = self.gauge(x);
        r < 1.0 && r > 0.0
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let r = self.gauge(x);
        if !(r < 1.0) || r <= 0.0 {
            return x.to_vec();
        }
        self.scale(x, self.profile.value(r) / r)
    }

    fn inverse(&self, y: &[f64]) -> Option<Vec<f64>> {
        let r = self.gauge(y);
        if !(r < 1.0) || r <= 0.0 {
            return Some(y.to_vec());
        }
        let rx = self.profile.inverse(r)?;
        Some(self.scale(y, rx / r))
    }

    fn support_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::NEG_INFINITY; self.m];
        let mut hi = vec![f64::INFINITY; self.m];
        lo[self.push_axis] = self.bottom;
        for &(i, w) in &self.lateral {
            lo[i] = self.apex[i] - w;
            hi[i] = self.apex[i] + w;
        }
        (lo, hi)
    }

    fn describe(&self) -> serde_json::Value {
        json!({
            "kind": "gauge_push",
            "apex": self.apex,
            "push_axis": self.push_axis,
            "lateral": self.lateral,
            "bottom": self.bottom,
            "profile": match self.profile { Profile::Hard => json!("hard"), Profile::Soft { q } => json!({"soft": q}) },
        })
    }

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        fd_jacobian(|p| self.apply(p), x, 1e-7)
    }
}

/// `Θ_d(x) = λ(x) x` on `d` chosen axes around `center`.
#[derive(Debug, Clone)]
pub struct ThetaBlock {
    pub m: usize,
    pub axes: Vec<usize>,
    pub center: Vec<f64>,
    pub mu_eta: f64,
    pub under: f64,
    pub over: f64,
    profile: Profile,
}

impl ThetaBlock {
    /// Radii are given as `ρ̲ η`, `ρ̄ η`, `μ η`.
    pub fn new(m: usize, axes: Vec<usize>, center: Vec<f64>, mu: f64, eta: f64, rho_under: f64, rho_over: f64) -> Result<Self> {
        if !(mu / 2.0 < rho_under && rho_under < rho_over && rho_over < mu) {
            return Err(Error::Domain(format!(
                "theta block needs mu/2 < rho_under < rho_over < mu, got mu={mu}, rho_under={rho_under}, rho_over={rho_over}"
            )));
        }
        if axes.len() != center.len() || axes.iter().any(|&a| a >= m) {
            return Err(Error::Domain("theta block axes out of range".into()));
        }
        Ok(Self {
            m,
            axes,
            center,
            mu_eta: mu * eta,
            under: rho_under * eta,
            over: rho_over * eta,
            profile: Profile::soft(rho_under / rho_over)?,
        })
    }

    fn local(&self, x: &[f64]) -> Vec<f64> {
        self.axes.iter().zip(&self.center).map(|(&a, c)| x[a] - c).collect()
    }

    fn rescale(&self, x: &[f64], f: f64) -> Vec<f64> {
        let mut y = x.to_vec();
        for (&a, c) in self.axes.iter().zip(&self.center) {
            y[a] = c + (x[a] - c) * f;
        }
        y
    }

    /// `λ(x) ≥ 1`.
    pub fn lambda(&self, x: &[f64]) -> f64 {
        let t = sup_norm(&self.local(x)) / self.over;
        if t >= 1.0 || t == 0.0 {
            1.0
        } else {
            self.profile.value(t) / t
        }
    }
}

impl DiffeoPiece for ThetaBlock {
    fn dim(&self) -> usize {
        self.m
    }

    fn in_support(&self, x: &[f64]) -> bool {
        let s = sup_norm(&self.local(x));
        s < self.over && s > 0.0
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        if !self.in_support(x) {
            return x.to_vec();
        }
        self.rescale(x, self.lambda(x))
    }

    fn inverse(&self, y: &[f64]) -> Option<Vec<f64>> {
        if !self.in_support(y) {
            return Some(y.to_vec());
        }
        let t = sup_norm(&self.local(y)) / self.over;
        let tx = self.profile.inverse(t)?;
        Some(self.rescale(y, tx / t))
    }

    fn support_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::NEG_INFINITY; self.m];
        let mut hi = vec![f64::INFINITY; self.m];
        for (&a, c) in self.axes.iter().zip(&self.center) {
            lo[a] = c - self.over;
            hi[a] = c + self.over;
        }
        (lo, hi)
    }

    fn describe(&self) -> serde_json::Value {
        json!({"kind": "theta_block", "axes": self.axes, "center": self.center,
               "mu_eta": self.mu_eta, "rho_under_eta": self.under, "rho_over_eta": self.over})
    }
}

/// Sup-norm shrink around a column `{x′ = c′}`: contracts `R_{τμ}` onto
/// `R_μ`, stretches the annulus up to `R_{2μ}`, identity beyond.
#[derive(Debug, Clone)]
pub struct ShrinkColumn {
    pub m: usize,
    pub axes: Vec<usize>,
    pub center: Vec<f64>,
    pub mu_eta: f64,
    pub tau: f64,
}

impl ShrinkColumn {
    pub fn new(m: usize, axes: Vec<usize>, center: Vec<f64>, mu: f64, eta: f64, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 0.5) {
            return Err(Error::Domain(format!("tau must lie in (0, 1/2), got {tau}")));
        }
        if !(mu > 0.0 && mu < 0.5) {
            return Err(Error::Domain(format!("mu must lie in (0, 1/2), got {mu}")));
        }
        if axes.len() != center.len() || axes.is_empty() || axes.len() > 2 || axes.iter().any(|&a| a >= m) {
            return Err(Error::Domain("shrink columns support codimension 1 or 2".into()));
        }
        Ok(Self { m, axes, center, mu_eta: mu * eta, tau })
    }

    fn radius(&self, x: &[f64]) -> f64 {
        self.axes.iter().zip(&self.center).fold(0.0f64, |s, (&a, c)| s.max((x[a] - c).abs()))
    }

    fn rescale(&self, x: &[f64], f: f64) -> Vec<f64> {
        let mut y = x.to_vec();
        for (&a, c) in self.axes.iter().zip(&self.center) {
            y[a] = c + (x[a] - c) * f;
        }
        y
    }

    /// Radius map `s ↦ |Ψ(x)′ − c′|_∞` for `s = |x′ − c′|_∞`.
    pub fn radial(&self, s: f64) -> f64 {
        let (tm, m) = (self.tau * self.mu_eta, self.mu_eta);
        if s < tm {
            s / self.tau
        } else if s < 2.0 * m {
            (s - tm) / (2.0 - self.tau) + m
        } else {
            s
        }
    }

    fn radial_inverse(&self, r: f64) -> f64 {
        let (tm, m) = (self.tau * self.mu_eta, self.mu_eta);
        if r < m {
            r * self.tau
        } else if r < 2.0 * m {
            (r - m) * (2.0 - self.tau) + tm
        } else {
            r
        }
    }
}

impl DiffeoPiece for ShrinkColumn {
    fn dim(&self) -> usize {
        self.m
    }

    fn in_support(&self, x: &[f64]) -> bool {
        self.radius(x) < 2.0 * self.mu_eta
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let s = self.radius(x);
        if !(s < 2.0 * self.mu_eta) {
            return x.to_vec();
        }
        if s < self.tau * self.mu_eta {
            return self.rescale(x, 1.0 / self.tau);
        }
        self.rescale(x, self.radial(s) / s)
    }

    fn inverse(&self, y: &[f64]) -> Option<Vec<f64>> {
        let r = self.radius(y);
        if !(r < 2.0 * self.mu_eta) {
            return Some(y.to_vec());
        }
        if r < self.mu_eta {
            return Some(self.rescale(y, self.tau));
        }
        Some(self.rescale(y, self.radial_inverse(r) / r))
    }

    fn support_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::NEG_INFINITY; self.m];
        let mut hi = vec![f64::INFINITY; self.m];
        for (&a, c) in self.axes.iter().zip(&self.center) {
            lo[a] = c - 2.0 * self.mu_eta;
            hi[a] = c + 2.0 * self.mu_eta;
        }
        (lo, hi)
    }

    fn describe(&self) -> serde_json::Value {
        json!({"kind": "shrink_column", "axes": self.axes, "center": self.center, "mu_eta": self.mu_eta, "tau": self.tau})
    }
}

/// Smooth perturbation of the identity that keeps every face of `Q^m` invariant:
/// `W(x)_i = x_i + (a/π) sin(π x_i) cos(π x_{i+1} + φ_i)`.
#[derive(Debug, Clone)]
pub struct Wiggle {
    pub m: usize,
    pub amplitude: f64,
    pub phases: Vec<f64>,
}

impl Wiggle {
    pub fn new(m: usize, amplitude: f64, phases: Vec<f64>) -> Result<Self> {
        if !(amplitude.abs() < 0.5) || phases.len() != m {
            return Err(Error::Domain("wiggle amplitude must be below 1/2".into()));
        }
        Ok(Self { m, amplitude, phases })
    }

    fn jac(&self, x: &[f64]) -> DMatrix<f64> {
        let pi = std::f64::consts::PI;
        let mut j = DMatrix::identity(self.m, self.m);
        for i in 0..self.m {
            let k = (i + 1) % self.m;
            let arg = pi * x[k] + self.phases[i];
            j[(i, i)] += self.amplitude * (pi * x[i]).cos() * arg.cos();
            if k != i {
                j[(i, k)] -= self.amplitude * (pi * x[i]).sin() * arg.sin();
            } else {
                j[(i, i)] -= self.amplitude * (pi * x[i]).sin() * arg.sin();
            }
        }
        j
    }
}

impl DiffeoPiece for Wiggle {
    fn dim(&self) -> usize {
        self.m
    }

    fn in_support(&self, _x: &[f64]) -> bool {
        true
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let pi = std::f64::consts::PI;
        (0..self.m)
            .map(|i| {
                let k = (i + 1) % self.m;
                x[i] + self.amplitude / pi * (pi * x[i]).sin() * (pi * x[k] + self.phases[i]).cos()
            })
            .collect()
    }

    fn inverse(&self, y: &[f64]) -> Option<Vec<f64>> {
        let mut x = y.to_vec();
        for _ in 0..60 {
            let fx = self.apply(&x);
            let r: Vec<f64> = fx.iter().zip(y).map(|(a, b)| a - b).collect();
            if sup_norm(&r) < 1e-15 {
                break;
            }
            let step = self.jac(&x).lu().solve(&nalgebra::DVector::from_vec(r))?;
            for i in 0..self.m {
                x[i] -= step[i];
            }
        }
        let back = self.apply(&x);
        (dist2(&back, y) < 1e-12).then_some(x)
    }

    fn support_box(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-1.0; self.m], vec![1.0; self.m])
    }

    fn describe(&self) -> serde_json::Value {
        json!({"kind": "wiggle", "amplitude": self.amplitude, "phases": self.phases})
    }

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        self.jac(x)
    }
}

/// Pieces with pairwise disjoint supports, applied as one map.
#[derive(Debug, Clone)]
pub struct Stage {
    pub name: String,
    pub pieces: Vec<Arc<dyn DiffeoPiece>>,
}

fn open_boxes_overlap(a: &(Vec<f64>, Vec<f64>), b: &(Vec<f64>, Vec<f64>)) -> bool {
    a.0.iter().zip(&a.1).zip(b.0.iter().zip(&b.1)).all(|((l1, h1), (l2, h2))| l1.max(*l2) < h1.min(*h2))
}

impl Stage {
    pub fn new(name: &str, pieces: Vec<Arc<dyn DiffeoPiece>>) -> Result<Self> {
        let boxes: Vec<_> = pieces.iter().map(|p| p.support_box()).collect();
        for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                if open_boxes_overlap(&boxes[i], &boxes[j]) {
                    return Err(Error::Construction(format!("stage {name}: supports of pieces {i} and {j} overlap")));
                }
            }
        }
        Ok(Self { name: name.into(), pieces })
    }

    fn piece_at(&self, x: &[f64]) -> Option<&Arc<dyn DiffeoPiece>> {
        self.pieces.iter().find(|p| p.in_support(x))
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self.piece_at(x) {
            Some(p) => p.apply(x),
            None => x.to_vec(),
        }
    }

    pub fn inverse(&self, y: &[f64]) -> Option<Vec<f64>> {
        match self.piece_at(y) {
            Some(p) => p.inverse(y),
            None => Some(y.to_vec()),
        }
    }

    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        match self.piece_at(x) {
            Some(p) => p.jacobian(x),
            None => DMatrix::identity(x.len(), x.len()),
        }
    }
}

/// `Φ = S_{k−1} ∘ … ∘ S_0`.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub m: usize,
    pub stages: Vec<Stage>,
}

const HMAX: f64 = 2e-3;

impl Pipeline {
    pub fn identity(m: usize) -> Self {
        Self { m, stages: Vec::new() }
    }

    pub fn new(m: usize, stages: Vec<Stage>) -> Result<Self> {
        if stages.iter().flat_map(|s| &s.pieces).any(|p| p.dim() != m) {
            return Err(Error::Construction("pipeline pieces of mixed dimension".into()));
        }
        Ok(Self { m, stages })
    }

    pub fn then(mut self, stage: Stage) -> Self {
        self.stages.push(stage);
        self
    }

    pub fn is_identity(&self) -> bool {
        self.stages.iter().all(|s| s.pieces.is_empty())
    }

    pub fn in_support(&self, x: &[f64]) -> bool {
        let mut y = x.to_vec();
        for s in &self.stages {
            if s.piece_at(&y).is_some() {
                return true;
            }
            y = s.apply(&y);
        }
        false
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.stages {
            y = s.apply(&y);
        }
        y
    }

    pub fn inverse(&self, y: &[f64]) -> Option<Vec<f64>> {
        let mut x = y.to_vec();
        for s in self.stages.iter().rev() {
            x = s.inverse(&x)?;
        }
        Some(x)
    }

    /// `DΦ(x)` by the chain rule over stages.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut y = x.to_vec();
        let mut j = DMatrix::identity(self.m, self.m);
        for s in &self.stages {
            j = s.jacobian(&y) * j;
            y = s.apply(&y);
        }
        j
    }

    /// Finite-difference Jacobian determinant with step `h`.
    pub fn det_fd(&self, x: &[f64], h: f64) -> f64 {
        fd_jacobian(|p| self.apply(p), x, h).determinant()
    }

    /// Preimage inside the closed cube, if any.
    fn preimage_in_cube(&self, y: &[f64]) -> Option<Vec<f64>> {
        self.inverse(y).filter(|x| sup_norm(x) <= 1.0 + 1e-12)
    }

    fn pull_segment(&self, a: &[f64], b: &[f64], out: &mut Vec<Vec<Vec<f64>>>, cur: &mut Vec<Vec<f64>>) {
        let at = |t: f64| -> Vec<f64> { a.iter().zip(b).map(|(u, v)| u + t * (v - u)).collect() };
        let len = dist2(a, b);
        let n = ((len / HMAX).ceil() as usize).max(8);
        let mut prev_t = 0.0;
        let mut prev = self.preimage_in_cube(&at(0.0));
        if let Some(p) = &prev {
            if cur.is_empty() {
                cur.push(p.clone());
            }
        } else if !cur.is_empty() {
            out.push(std::mem::take(cur));
        }
        for k in 1..=n {
            let t = k as f64 / n as f64;
            let next = self.preimage_in_cube(&at(t));
            match (&prev, &next) {
                (Some(p), Some(q)) => self.refine(&at, prev_t, t, p.clone(), q.clone(), cur, 0),
                (Some(_), None) => {
                    let (tb, pb) = self.boundary(&at, prev_t, t, true);
                    self.refine(&at, prev_t, tb, prev.clone().unwrap(), pb, cur, 0);
                    out.push(std::mem::take(cur));
                }
                (None, Some(q)) => {
                    let (tb, pb) = self.boundary(&at, prev_t, t, false);
                    cur.push(pb.clone());
                    self.refine(&at, tb, t, pb, q.clone(), cur, 0);
                }
                (None, None) => {}
            }
            prev = next;
            prev_t = t;
        }
    }

    /// Last valid point on the valid side of a validity switch in `[t0, t1]`.
    fn boundary<F: Fn(f64) -> Vec<f64>>(&self, at: &F, t0: f64, t1: f64, valid_left: bool) -> (f64, Vec<f64>) {
        let (mut good, mut bad) = if valid_left { (t0, t1) } else { (t1, t0) };
        let mut best = self.preimage_in_cube(&at(good)).expect("valid endpoint");
        for _ in 0..60 {
            let mid = 0.5 * (good + bad);
            match self.preimage_in_cube(&at(mid)) {
                Some(p) => {
                    good = mid;
                    best = p;
                }
                None => bad = mid,
            }
        }
        (good, best)
    }

    #[allow(clippy::too_many_arguments)]
    fn refine<F: Fn(f64) -> Vec<f64>>(&self, at: &F, t0: f64, t1: f64, p0: Vec<f64>, p1: Vec<f64>, cur: &mut Vec<Vec<f64>>, depth: usize) {
        if dist2(&p0, &p1) > HMAX && depth < 40 {
            let mid = 0.5 * (t0 + t1);
            if let Some(pm) = self.preimage_in_cube(&at(mid)) {
                self.refine(at, t0, mid, p0, pm.clone(), cur, depth + 1);
                self.refine(at, mid, t1, pm, p1, cur, depth + 1);
                return;
            }
        }
        cur.push(p1);
    }

    /// `Φ^{-1}(S)` inside `Q^m`, with crossings tracked exactly through the
    /// recorded crossing sets of `S`.
    pub fn pullback(&self, s: &SingularSet) -> Result<SingularSet> {
        if self.is_identity() {
            return Ok(s.clone());
        }
        let mut pieces = Vec::new();
        for p in &s.pieces {
            match p {
                Piece::Flat { lo, hi } if p.dim() == 0 => {
                    if let Some(x) = self.preimage_in_cube(lo) {
                        let _ = hi;
                        pieces.push(Piece::point(x));
                    }
                }
                Piece::Flat { lo, hi } if p.dim() == 1 => {
                    let mut out = Vec::new();
                    let mut cur = Vec::new();
                    self.pull_segment(lo, hi, &mut out, &mut cur);
                    if !cur.is_empty() {
                        out.push(cur);
                    }
                    pieces.extend(out.into_iter().filter(|c| c.len() > 1).map(|pts| Piece::Polyline { pts }));
                }
                Piece::Polyline { pts } => {
                    let mut out = Vec::new();
                    let mut cur = Vec::new();
                    for w in pts.windows(2) {
                        self.pull_segment(&w[0], &w[1], &mut out, &mut cur);
                    }
                    if !cur.is_empty() {
                        out.push(cur);
                    }
                    pieces.extend(out.into_iter().filter(|c| c.len() > 1).map(|pts| Piece::Polyline { pts }));
                }
                Piece::Flat { .. } => {
                    return Err(Error::Unsupported(format!("pullback of {}-dimensional pieces as a point set", p.dim())))
                }
            }
        }
        let crossings = s
            .crossing_sets
            .iter()
            .filter_map(|(lo, hi)| self.pulled_crossing(lo, hi))
            .collect::<Vec<_>>();
        Ok(SingularSet::with_crossings(s.m, pieces, crossings))
    }

    /// Preimage bounding box of a crossing set, if any of it survives in the open cube.
    pub fn pulled_crossing(&self, lo: &[f64], hi: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let free: Vec<usize> = (0..lo.len()).filter(|&i| lo[i] < hi[i]).collect();
        let per: usize = match free.len() {
            0 => 1,
            1 => 4001,
            _ => 161,
        };
        let total = per.pow(free.len() as u32);
        let mut bb: Option<(Vec<f64>, Vec<f64>)> = None;
        for idx in 0..total {
            let mut y = lo.to_vec();
            let mut rem = idx;
            for &ax in &free {
                let k = rem % per;
                rem /= per;
                y[ax] = lo[ax] + (hi[ax] - lo[ax]) * k as f64 / (per - 1) as f64;
            }
            if let Some(x) = self.inverse(&y) {
                if sup_norm(&x) < 1.0 - 1e-12 {
                    let b = bb.get_or_insert_with(|| (x.clone(), x.clone()));
                    for (i, &xi) in x.iter().enumerate() {
                        b.0[i] = b.0[i].min(xi);
                        b.1[i] = b.1[i].max(xi);
                    }
                }
            }
        }
        bb
    }

    pub fn describe(&self) -> serde_json::Value {
        json!({
            "m": self.m,
            "stages": self.stages.iter().map(|s| json!({
                "name": s.name,
                "pieces": s.pieces.iter().map(|p| p.describe()).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        })
    }
}
