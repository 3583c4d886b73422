//! Evaluable maps `Q^m → R^ν` with declared singular sets.

use crate::diffeo::Pipeline;
use crate::error::{Error, Result};
use crate::grid::{dual_skeleton, Cubication};
use crate::scalar::{norm2, sup_norm};
use crate::sets::{Piece, SingularSet};
use crate::targets::Target;
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::f64::consts::TAU;
use std::sync::Arc;

pub trait MapField: Send + Sync {
    fn domain_dim(&self) -> usize;
    fn ambient_dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn singular_set(&self) -> &SingularSet;
    fn descriptor(&self) -> serde_json::Value;

    fn target(&self) -> Option<Target> {
        None
    }

    /// `Du(x)` as a `ν × m` matrix; central differences by default.
    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        fd_jacobian(self, x)
    }

    /// Whether `jacobian` is exact rather than a difference quotient.
    fn analytic_jacobian(&self) -> bool {
        false
    }

    fn is_rigid(&self) -> bool {
        false
    }
}

pub type Field = Arc<dyn MapField>;

/// Step `min(1e-6, dist(x, 𝒮)/4)`.
pub fn fd_step(s: &SingularSet, x: &[f64]) -> f64 {
    let d = s.dist(x);
    if d.is_finite() {
        (d / 4.0).min(1e-6)
    } else {
        1e-6
    }
}

pub fn fd_jacobian<F: MapField + ?Sized>(u: &F, x: &[f64]) -> Result<DMatrix<f64>> {
    let h = fd_step(u.singular_set(), x);
    if h <= 0.0 {
        return Err(Error::Singular { dist: 0.0 });
    }
    let (m, nu) = (u.domain_dim(), u.ambient_dim());
    let mut j = DMatrix::zeros(nu, m);
    let mut xp = x.to_vec();
    for k in 0..m {
        xp[k] = x[k] + h;
        let a = u.eval(&xp)?;
        xp[k] = x[k] - h;
        let b = u.eval(&xp)?;
        xp[k] = x[k];
        for i in 0..nu {
            j[(i, k)] = (a[i] - b[i]) / (2.0 * h);
        }
    }
    Ok(j)
}

/// Frobenius norm of `D²u(x)` by differencing the Jacobian.
pub fn hessian_norm(u: &dyn MapField, x: &[f64]) -> Result<f64> {
    let h = fd_step(u.singular_set(), x) * 10.0;
    let mut xp = x.to_vec();
    let mut acc = 0.0;
    for k in 0..x.len() {
        xp[k] = x[k] + h;
        let a = u.jacobian(&xp)?;
        xp[k] = x[k] - h;
        let b = u.jacobian(&xp)?;
        xp[k] = x[k];
        acc += ((a - b) / (2.0 * h)).norm_squared();
    }
    Ok(acc.sqrt())
}

#[derive(Debug, Clone)]
pub struct ConstantField {
    pub m: usize,
    pub value: Vec<f64>,
    pub target: Option<Target>,
    empty: SingularSet,
}

impl ConstantField {
    pub fn new(m: usize, value: Vec<f64>, target: Option<Target>) -> Self {
        Self { m, value, target, empty: SingularSet::empty(m) }
    }
}

impl MapField for ConstantField {
    fn domain_dim(&self) -> usize {
        self.m
    }
    fn ambient_dim(&self) -> usize {
        self.value.len()
    }
    fn eval(&self, _x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value.clone())
    }
    fn singular_set(&self) -> &SingularSet {
        &self.empty
    }
    fn descriptor(&self) -> serde_json::Value {
        json!({"field": "constant", "m": self.m, "value": self.value})
    }
    fn target(&self) -> Option<Target> {
        self.target
    }
    fn jacobian(&self, _x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::zeros(self.value.len(), self.m))
    }
    fn analytic_jacobian(&self) -> bool {
        true
    }
}

/// `x ↦ A x + b`.
#[derive(Debug, Clone)]
pub struct AffineField {
    pub a: DMatrix<f64>,
    pub b: Vec<f64>,
    empty: SingularSet,
}

impl AffineField {
    pub fn new(a: DMatrix<f64>, b: Vec<f64>) -> Self {
        let m = a.ncols();
        Self { a, b, empty: SingularSet::empty(m) }
    }
}

impl MapField for AffineField {
    fn domain_dim(&self) -> usize {
        self.a.ncols()
    }
    fn ambient_dim(&self) -> usize {
        self.a.nrows()
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok((0..self.a.nrows()).map(|i| self.b[i] + (0..x.len()).map(|k| self.a[(i, k)] * x[k]).sum::<f64>()).collect())
    }
    fn singular_set(&self) -> &SingularSet {
        &self.empty
    }
    fn descriptor(&self) -> serde_json::Value {
        json!({"field": "affine", "a": self.a.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(), "b": self.b})
    }
    fn jacobian(&self, _x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.a.clone())
    }
    fn analytic_jacobian(&self) -> bool {
        true
    }
}

/// `x ↦ x/|x|` into `S^{m−1}`.
#[derive(Debug, Clone)]
pub struct RadialField {
    pub m: usize,
    set: SingularSet,
}

impl RadialField {
    pub fn new(m: usize) -> Self {
        Self { m, set: SingularSet::new(m, vec![Piece::point(vec![0.0; m])]) }
    }
}

impl MapField for RadialField {
    fn domain_dim(&self) -> usize {
        self.m
    }
    fn ambient_dim(&self) -> usize {
        self.m
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        Target::Sphere(self.m - 1).project(x)
    }
    fn singular_set(&self) -> &SingularSet {
        &self.set
    }
    fn descriptor(&self) -> serde_json::Value {
        json!({"field": "radial", "m": self.m})
    }
    fn target(&self) -> Option<Target> {
        Some(Target::Sphere(self.m - 1))
    }
    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Target::Sphere(self.m - 1).jacobian(x)
    }
    fn analytic_jacobian(&self) -> bool {
        true
    }
}

/// Degree-`d` vortex `(cos dθ, sin dθ)` of the angle in the `(a, b)` plane around `center`.
/// In dimension 3 the singular set is the line through `center` along the remaining axis.
#[derive(Debug, Clone)]
pub struct VortexField {
    pub m: usize,
    pub axes: [usize; 2],
    pub center: Vec<f64>,
    pub degree: i32,
    set: SingularSet,
}

impl VortexField {
    pub fn new(m: usize, axes: [usize; 2], center: Vec<f64>, degree: i32) -> Result<Self> {
        if !(2..=3).contains(&m) || axes[0] == axes[1] || axes.iter().any(|&a| a >= m) || center.len() != m {
            return Err(Error::Domain("vortex needs m in {2, 3} and two distinct axes".into()));
        }
        let piece = if m == 2 {
            Piece::point(center.clone())
        } else {
            let free = (0..3).find(|k| !axes.contains(k)).unwrap();
            let (mut lo, mut hi) = (center.clone(), center.clone());
            lo[free] = -2.0;
            hi[free] = 2.0;
            Piece::Flat { lo, hi }
        };
        Ok(Self { m, axes, center, degree, set: SingularSet::new(m, vec![piece]) })
    }

    fn polar(&self, x: &[f64]) -> (f64, f64, f64) {
        let u = x[self.axes[0]] - self.center[self.axes[0]];
        let v = x[self.axes[1]] - self.center[self.axes[1]];
        (u, v, u.hypot(v))
    }
}

impl MapField for VortexField {
    fn domain_dim(&self) -> usize {
        self.m
    }
    fn ambient_dim(&self) -> usize {
        2
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (u, v, r) = self.polar(x);
        if r <= 1e-12 {
            return Err(Error::Singular { dist: r });
        }
        let th = self.degree as f64 * v.atan2(u);
        Ok(vec![th.cos(), th.sin()])
    }
    fn singular_set(&self) -> &SingularSet {
        &self.set
    }
    fn descriptor(&self) -> serde_json::Value {
        json!({"field": "vortex", "m": self.m, "axes": self.axes, "center": self.center, "degree": self.degree})
    }
    fn target(&self) -> Option<Target> {
        Some(Target::Sphere(1))
    }
    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let (u, v, r) = self.polar(x);
        if r <= 1e-12 {
            return Err(Error::Singular { dist: r });
        }
        let d = self.degree as f64;
        let th = d * v.atan2(u);
        let (gu, gv) = (-v / (r * r), u / (r * r));
        let mut j = DMatrix::zeros(2, self.m);
        j[(0, self.axes[0])] = -th.sin() * d * gu;
        j[(0, self.axes[1])] = -th.sin() * d * gv;
        j[(1, self.axes[0])] = th.cos() * d * gu;
        j[(1, self.axes[1])] = th.cos() * d * gv;
        Ok(j)
    }
    fn analytic_jacobian(&self) -> bool {
        true
    }
}

/// `x ↦ sign(x_axis)` into `S^0 ⊂ R`.
#[derive(Debug, Clone)]
pub struct SignField {
    pub m: usize,
    pub axis: usize,
    set: SingularSet,
}

impl SignField {
    pub fn new(m: usize, axis: usize) -> Self {
        let mut lo = vec![-2.0; m];
        let mut hi = vec![2.0; m];
        lo[axis] = 0.0;
        hi[axis] = 0.0;
        Self { m, axis, set: SingularSet::with_crossings(m, vec![Piece::Flat { lo, hi }], Vec::new()) }
    }
}

impl MapField for SignField {
    fn domain_dim(&self) -> usize {
        self.m
    }
    fn ambient_dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let v = x[self.axis];
        if v.abs() <= 1e-12 {
            return Err(Error::Singular { dist: v.abs() });
        }
        Ok(vec![v.signum()])
    }
    fn singular_set(&self) -> &SingularSet {
        &self.set
    }
    fn descriptor(&self) -> serde_json::Value {
        json!({"field": "sign", "m": self.m, "axis": self.axis})
    }
    fn target(&self) -> Option<Target> {
        Some(Target::Sphere(0))
    }
    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.eval(x)?;
        Ok(DMatrix::zeros(1, self.m))
    }
    fn analytic_jacobian(&self) -> bool {
        true
    }
}

/// Boundary data on the ℓ-skeleton of a cubication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Seed {
    /// Degree-`d` circle map on every 2-cell boundary; needs ℓ = 1 and an `S^1` target.
    Vortex { degree: i32 },
    /// `±1` alternating on the vertices; needs ℓ = 0 and an `S^0` target.
    Checker,
    Constant(Vec<f64>),
}

impl Seed {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "checker" => Ok(Seed::Checker),
            "vortex" => Ok(Seed::Vortex { degree: 1 }),
            _ => {
                if let Some(d) = name.strip_prefix("vortex:") {
                    return d.parse().map(|degree| Seed::Vortex { degree }).map_err(|_| Error::Domain(format!("bad vortex degree in {name:?}")));
                }
                Err(Error::Unsupported(format!("boundary seed {name:?}")))
            }
        }
    }
}

/// A map of class ℛ^rig: seed data on the ℓ-skeleton extended by successive
/// homogeneous extensions cube by cube. Its singular set is the dual skeleton.
#[derive(Debug, Clone)]
pub struct RigidField {
    pub cubication: Cubication,
    pub l: usize,
    pub seed: Seed,
    pub target: Target,
    set: SingularSet,
}

impl RigidField {
    pub fn new(c: Cubication, l: usize, target: Target, seed: Seed) -> Result<Self> {
        let m = c.dim();
        if l + 1 > m {
            return Err(Error::Domain(format!("need l <= m-1, got l={l}, m={m}")));
        }
        let first_cell = || {
            let n = c.cubes_per_axis();
            format!("cell at lattice center {:?} (eta = 1/{n})", vec![-n + 1; m])
        };
        match &seed {
            Seed::Vortex { .. } if l != 1 || target != Target::Sphere(1) => {
                return Err(Error::Construction(format!(
                    "vortex seed is defined on 1-cells with values in S^1; got l={l}, target {} at {}",
                    target.name(),
                    first_cell()
                )))
            }
            Seed::Checker if l != 0 || target != Target::Sphere(0) => {
                return Err(Error::Construction(format!(
                    "checker seed is defined on vertices with values in S^0; got l={l}, target {} at {}",
                    target.name(),
                    first_cell()
                )))
            }
            Seed::Constant(v) if !target.contains(v, 1e-12) => {
                return Err(Error::Construction(format!("constant seed {v:?} is not on {} at {}", target.name(), first_cell())))
            }
            _ => {}
        }
        let set = match seed {
            Seed::Constant(_) => SingularSet::empty(m),
            _ => SingularSet::from_faces(m, &dual_skeleton(&c, l)?.pieces),
        };
        Ok(Self { cubication: c, l, seed, target, set })
    }

    /// Cube center and local coordinates `y ∈ [-1, 1]^m` (lattice units).
    fn local(&self, x: &[f64]) -> (Vec<i64>, Vec<f64>) {
        let n = self.cubication.cubes_per_axis() as f64;
        let c: Vec<i64> = x.iter().map(|&v| self.cubication.cube_center_of(v)).collect();
        let y = x.iter().zip(&c).map(|(&v, &ci)| v * n - ci as f64).collect();
        (c, y)
    }

    /// Iterated homogeneous retraction onto the ℓ-skeleton of the cube `[-1,1]^m`.
    /// Returns the retracted point and the index set of free coordinates.
    pub fn retract(&self, y: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
        let m = y.len();
        let k = m - self.l;
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| y[b].abs().total_cmp(&y[a].abs()).then(a.cmp(&b)));
        let t = y[order[k - 1]].abs();
        if t <= 1e-14 {
            return Err(Error::Singular { dist: t });
        }
        let mut z = vec![0.0; m];
        for (rank, &i) in order.iter().enumerate() {
            z[i] = if rank < k { if y[i] >= 0.0 { 1.0 } else { -1.0 } } else { y[i] / t };
        }
        Ok((z, order[k..].to_vec()))
    }

    /// `Θ(v) = (d/8) Σ_{j<k} δ_j δ_k` with `δ = v − v_0`.
    fn theta_vertex(&self, delta: &[f64], d: f64) -> f64 {
        let mut acc = 0.0;
        let mut prefix = 0.0;
        for &dk in delta {
            acc += dk * prefix;
            prefix += dk;
        }
        d / 8.0 * acc
    }

    /// `A_i(v) = (d/8)(Σ_{j<i} δ_j − Σ_{j>i} δ_j)`.
    fn theta_slope(&self, delta: &[f64], i: usize, d: f64) -> f64 {
        let below: f64 = delta[..i].iter().sum();
        let above: f64 = delta[i + 1..].iter().sum();
        d / 8.0 * (below - above)
    }

    fn seed_value(&self, c: &[i64], z: &[f64], free: &[usize]) -> Vec<f64> {
        let n = self.cubication.cubes_per_axis() as f64;
        match &self.seed {
            Seed::Constant(v) => v.clone(),
            Seed::Checker => {
                let s: i64 = c.iter().zip(z).map(|(&ci, &zi)| (ci + zi as i64 + self.cubication.cubes_per_axis()) / 2).sum();
                vec![if s % 2 == 0 { 1.0 } else { -1.0 }]
            }
            Seed::Vortex { degree } => {
                let d = *degree as f64;
                let i = free[0];
                let mut delta: Vec<f64> = c.iter().zip(z).map(|(&ci, &zi)| ci as f64 + zi + n).collect();
                let zi = delta[i];
                delta[i] = c[i] as f64 - 1.0 + n;
                let th = self.theta_vertex(&delta, d) + self.theta_slope(&delta, i, d) * (zi - delta[i]);
                let a = TAU * th;
                vec![a.cos(), a.sin()]
            }
        }
    }
}

impl MapField for RigidField {
    fn domain_dim(&self) -> usize {
        self.cubication.dim()
    }
    fn ambient_dim(&self) -> usize {
        self.target.ambient_dim()
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if let Seed::Constant(v) = &self.seed {
            return Ok(v.clone());
        }
        let (c, y) = self.local(x);
        let (z, free) = self.retract(&y).map_err(|_| Error::Singular { dist: self.set.dist(x) })?;
        Ok(self.seed_value(&c, &z, &free))
    }
    fn singular_set(&self) -> &SingularSet {
        &self.set
    }
    fn descriptor(&self) -> serde_json::Value {
        json!({"field": "rigid", "m": self.cubication.dim(), "eta": format!("1/{}", self.cubication.cubes_per_axis()),
               "l": self.l, "seed": self.seed, "target": self.target.name()})
    }
    fn target(&self) -> Option<Target> {
        Some(self.target)
    }
    fn is_rigid(&self) -> bool {
        true
    }
}

/// `u − v`, singular on the union of both sets.
pub struct DifferenceField {
    pub u: Field,
    pub v: Field,
    set: SingularSet,
}

impl DifferenceField {
    pub fn new(u: Field, v: Field) -> Result<Self> {
        if u.domain_dim() != v.domain_dim() || u.ambient_dim() != v.ambient_dim() {
            return Err(Error::Domain("difference of fields with different shapes".into()));
        }
        let set = u.singular_set().union(v.singular_set());
        Ok(Self { u, v, set })
    }
}

impl MapField for DifferenceField {
    fn domain_dim(&self) -> usize {
        self.u.domain_dim()
    }
    fn ambient_dim(&self) -> usize {
        self.u.ambient_dim()
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (a, b) = (self.u.eval(x)?, self.v.eval(x)?);
        Ok(a.iter().zip(&b).map(|(p, q)| p - q).collect())
    }
    fn singular_set(&self) -> &SingularSet {
        &self.set
    }
    fn descriptor(&self) -> serde_json::Value {
        json!({"field": "difference", "u": self.u.descriptor(), "v": self.v.descriptor()})
    }
    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.u.jacobian(x)? - self.v.jacobian(x)?)
    }
    fn analytic_jacobian(&self) -> bool {
        self.u.analytic_jacobian() && self.v.analytic_jacobian()
    }
}

/// `Du` flattened row-major, as a field with values in `R^{νm}`.
pub struct JetField {
    pub u: Field,
}

impl MapField for JetField {
    fn domain_dim(&self) -> usize {
        self.u.domain_dim()
    }
    fn ambient_dim(&self) -> usize {
        self.u.domain_dim() * self.u.ambient_dim()
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let j = self.u.jacobian(x)?;
        Ok(j.transpose().iter().copied().collect())
    }
    fn singular_set(&self) -> &SingularSet {
        self.u.singular_set()
    }
    fn descriptor(&self) -> serde_json::Value {
        json!({"field": "jet", "u": self.u.descriptor()})
    }
}

/// `u ∘ Φ` with singular set `Φ^{-1}(𝒮_u)`.
pub struct ComposedField {
    pub u: Field,
    pub phi: Arc<Pipeline>,
    set: SingularSet,
}

pub fn compose_with_diffeo(u: Field, phi: Arc<Pipeline>) -> Result<ComposedField> {
    if phi.m != u.domain_dim() {
        return Err(Error::Pipeline("diffeomorphism and field dimensions differ".into()));
    }
    let set = phi.pullback(u.singular_set())?;
    Ok(ComposedField { u, phi, set })
}

impl MapField for ComposedField {
    fn domain_dim(&self) -> usize {
        self.u.domain_dim()
    }
    fn ambient_dim(&self) -> usize {
        self.u.ambient_dim()
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.u.eval(&self.phi.apply(x))
    }
    fn singular_set(&self) -> &SingularSet {
        &self.set
    }
    fn descriptor(&self) -> serde_json::Value {
        json!({"field": "composed", "u": self.u.descriptor(), "phi": self.phi.describe()})
    }
    fn target(&self) -> Option<Target> {
        self.u.target()
    }
    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let y = self.phi.apply(x);
        Ok(self.u.jacobian(&y)? * self.phi.jacobian(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassTag {
    Rig,
    Cros,
    Uncr,
    Smooth,
}

impl ClassTag {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rig" => Ok(ClassTag::Rig),
            "cros" => Ok(ClassTag::Cros),
            "uncr" => Ok(ClassTag::Uncr),
            "smooth" => Ok(ClassTag::Smooth),
            _ => Err(Error::Domain(format!("unknown class tag {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub k: usize,
    pub sup: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub tag: ClassTag,
    pub pass: bool,
    /// `sup |Du| dist(x, 𝒮)` over all bands.
    pub c1: f64,
    /// `sup |D²u| dist(x, 𝒮)²`, only for fields with exact Jacobians.
    pub c2: Option<f64>,
    pub bands: Vec<Band>,
    pub crossing_count: usize,
    pub samples_used: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassOptions {
    pub per_band: usize,
    pub bands: usize,
    pub seed: u64,
}

impl Default for ClassOptions {
    fn default() -> Self {
        Self { per_band: 1000, bands: 11, seed: 0 }
    }
}

/// Samples `|Du| dist(x,𝒮)` in dyadic distance bands inside `Q^m`.
pub fn verify_class(u: &dyn MapField, claimed: ClassTag, opts: ClassOptions) -> Result<ClassReport> {
    let s = u.singular_set();
    let m = u.domain_dim();
    let crossing_count = s.crossing_count();
    if claimed == ClassTag::Uncr && crossing_count > 0 {
        return Err(Error::Classification(format!("claimed uncrossed but the singular set has {crossing_count} crossings")));
    }
    if s.is_empty() {
        let parts = crate::rng::blocks(opts.seed, opts.per_band, |rng, _, len| {
            let mut sup = 0.0f64;
            for _ in 0..len {
                let x: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
                if let Ok(j) = u.jacobian(&x) {
                    sup = sup.max(j.norm());
                }
            }
            sup
        });
        let sup = parts.into_iter().fold(0.0, f64::max);
        return Ok(ClassReport { tag: claimed, pass: sup.is_finite(), c1: sup, c2: None, bands: Vec::new(), crossing_count, samples_used: opts.per_band });
    }
    let weights: Vec<f64> = s.pieces.iter().map(|p| if p.dim() == 0 { 1.0 } else { p.measure() }).collect();
    let total: f64 = weights.iter().sum();
    let diam = 2.0 * (m as f64).sqrt();
    let nb = opts.bands;
    let with_c2 = u.analytic_jacobian();
    // (band sup, count, c2 sup) per band, gathered from independent draws
    let draws = nb * opts.per_band;
    let parts = crate::rng::blocks(opts.seed, draws, |rng, start, len| {
        let mut sups = vec![(0.0f64, 0usize, 0.0f64); nb];
        for idx in start..start + len {
            let kb = idx % nb;
            let mut tries = 0;
            loop {
                tries += 1;
                if tries > 50 {
                    break;
                }
                let mut pick = rng.gen::<f64>() * total;
                let mut j = 0;
                while j + 1 < weights.len() && pick > weights[j] {
                    pick -= weights[j];
                    j += 1;
                }
                let base = s.pieces[j].sample(rng);
                let r = 0.5f64.powi(kb as i32) * rng.gen_range(0.5..1.0);
                let dir = crate::rng::unit_vector(rng, m);
                let x: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + r * d).collect();
                if sup_norm(&x) > 1.0 {
                    continue;
                }
                let d = s.dist(&x);
                if !(d > 1e-12) {
                    continue;
                }
                let band = (-d.log2()).floor() as i64 - 1;
                if band < 0 || band as usize >= nb {
                    continue;
                }
                let band = band as usize;
                let Ok(jac) = u.jacobian(&x) else { continue };
                let e = &mut sups[band];
                e.0 = e.0.max(jac.norm() * d);
                e.1 += 1;
                if with_c2 {
                    if let Ok(h) = hessian_norm(u, &x) {
                        e.2 = e.2.max(h * d * d);
                    }
                }
                break;
            }
        }
        sups
    });
    let mut bands: Vec<(f64, usize, f64)> = vec![(0.0, 0, 0.0); nb];
    for p in parts {
        for (b, e) in bands.iter_mut().zip(p) {
            b.0 = b.0.max(e.0);
            b.1 += e.1;
            b.2 = b.2.max(e.2);
        }
    }
    let report_bands: Vec<Band> = bands.iter().enumerate().map(|(k, b)| Band { k, sup: b.0, count: b.1 }).collect();
    let active: Vec<f64> = report_bands
        .iter()
        .filter(|b| b.count > 0 && 0.5f64.powi(b.k as i32 + 1) <= diam / 2.0)
        .map(|b| b.sup)
        .collect();
    let mut sorted = active.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.is_empty() { 0.0 } else { sorted[sorted.len() / 2] };
    let stable = active.iter().all(|&v| v <= 2.0 * median + 1e-12);
    let c1 = active.iter().copied().fold(0.0, f64::max);
    let c2 = with_c2.then(|| bands.iter().map(|b| b.2).fold(0.0, f64::max));
    let pass = stable
        && match claimed {
            ClassTag::Rig => u.is_rigid(),
            ClassTag::Smooth => false,
            ClassTag::Cros | ClassTag::Uncr => true,
        };
    Ok(ClassReport {
        tag: claimed,
        pass,
        c1,
        c2,
        bands: report_bands,
        crossing_count,
        samples_used: bands.iter().map(|b| b.1).sum(),
    })
}

/// Winding number of the first two components of `u` around the sup-norm
/// square of radius `r` centered at `c` in the `(i, j)` plane.
pub fn winding_around(u: &dyn MapField, c: &[f64], i: usize, j: usize, r: f64) -> Result<f64> {
    let loop_pts = crate::targets::square_loop(c, i, j, r, 400);
    let mut vals = Vec::with_capacity(loop_pts.len());
    for p in &loop_pts {
        let v = u.eval(p)?;
        let n = norm2(&v[..2]);
        vals.push([v[0] / n, v[1] / n]);
    }
    Ok(crate::targets::winding_number(&vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rigid_vortex(m: usize, n: i64) -> RigidField {
        RigidField::new(Cubication::new(m, n).unwrap(), 1, Target::Sphere(1), Seed::Vortex { degree: 1 }).unwrap()
    }

    #[test]
    fn single_square_vortex_has_degree_one() {
        let u = rigid_vortex(2, 1);
        assert_eq!(u.singular_set().pieces.len(), 1);
        let w = winding_around(&u, &[0.0, 0.0], 0, 1, 0.5).unwrap();
        assert!((w - 1.0).abs() < 1e-9, "{w}");
        assert!(u.eval(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn rigid_vortex_is_continuous_and_manifold_valued() {
        let u = rigid_vortex(3, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5000 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let Ok(v) = u.eval(&x) else { continue };
            assert!((norm2(&v) - 1.0).abs() < 1e-12);
            let d = u.singular_set().dist(&x);
            if d < 1e-3 {
                continue;
            }
            let dir = crate::rng::unit_vector(&mut rng, 3);
            let y: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + 1e-9 * b).collect();
            let w = u.eval(&y).unwrap();
            assert!(crate::scalar::dist2(&v, &w) < 1e-9 / d * 20.0, "jump at {x:?}");
        }
    }

    #[test]
    fn winding_equals_degree_around_every_dual_line() {
        for d in [1, 2] {
            let u = RigidField::new(Cubication::new(3, 2).unwrap(), 1, Target::Sphere(1), Seed::Vortex { degree: d }).unwrap();
            for p in &u.singular_set().pieces {
                let Piece::Flat { lo, hi } = p else { unreachable!() };
                let axis = (0..3).find(|&k| lo[k] < hi[k]).unwrap();
                let (i, j) = match axis {
                    0 => (1, 2),
                    1 => (2, 0),
                    _ => (0, 1),
                };
                for t in [-0.8, -0.25, 0.3, 0.9] {
                    let mut c = lo.clone();
                    c[axis] = t;
                    let w = winding_around(&u, &c, i, j, 0.2).unwrap();
                    assert!((w.abs() - d as f64).abs() < 1e-6, "degree {d} axis {axis}: {w}");
                }
            }
        }
    }

    #[test]
    fn rigid_cell_homogeneity() {
        let u = rigid_vortex(3, 2);
        let c = [0.5, -0.5, 0.5];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let y: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.45..0.45)).collect();
            let x: Vec<f64> = c.iter().zip(&y).map(|(a, b)| a + b).collect();
            let x2: Vec<f64> = c.iter().zip(&y).map(|(a, b)| a + 0.3 * b).collect();
            let (Ok(a), Ok(b)) = (u.eval(&x), u.eval(&x2)) else { continue };
            assert!(crate::scalar::dist2(&a, &b) < 1e-12);
        }
    }

    #[test]
    fn seeds_and_targets_must_match() {
        let c = Cubication::new(3, 2).unwrap();
        assert!(matches!(RigidField::new(c, 1, Target::Sphere(2), Seed::Vortex { degree: 1 }), Err(Error::Construction(_))));
        assert!(matches!(Seed::parse("spiral"), Err(Error::Unsupported(_))));
        let k = RigidField::new(Cubication::unit_cube(2), 1, Target::Sphere(1), Seed::Constant(vec![1.0, 0.0])).unwrap();
        assert!(k.singular_set().is_empty());
        assert_eq!(k.eval(&[0.0, 0.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn checker_seed_alternates() {
        let u = RigidField::new(Cubication::new(2, 2).unwrap(), 0, Target::Sphere(0), Seed::Checker).unwrap();
        let a = u.eval(&[-0.9, -0.9]).unwrap();
        let b = u.eval(&[-0.1, -0.9]).unwrap();
        assert_eq!(a[0], -b[0]);
    }

    #[test]
    fn verify_class_examples() {
        let opts = ClassOptions { per_band: 300, bands: 11, seed: 1 };
        let r = verify_class(&RadialField::new(2), ClassTag::Uncr, opts).unwrap();
        assert!(r.pass);
        for b in r.bands.iter().filter(|b| b.count > 0) {
            assert!((b.sup - 1.0).abs() < 1e-6, "{b:?}");
        }
        let k = ConstantField::new(2, vec![1.0, 0.0], Some(Target::Sphere(1)));
        for tag in [ClassTag::Rig, ClassTag::Cros, ClassTag::Uncr, ClassTag::Smooth] {
            let r = verify_class(&k, tag, opts).unwrap();
            assert!(r.pass && r.c1 == 0.0);
        }
        let u = rigid_vortex(3, 2);
        assert!(matches!(verify_class(&u, ClassTag::Uncr, opts), Err(Error::Classification(_))));
        let r = verify_class(&u, ClassTag::Rig, opts).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.crossing_count > 0);
    }

    #[test]
    fn identity_composition_is_pointwise_equal() {
        let u: Field = Arc::new(rigid_vortex(3, 2));
        let c = compose_with_diffeo(u.clone(), Arc::new(Pipeline::identity(3))).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if let Ok(a) = u.eval(&x) {
                assert_eq!(a, c.eval(&x).unwrap());
            }
        }
        assert_eq!(c.singular_set().crossing_count(), u.singular_set().crossing_count());
    }
}
