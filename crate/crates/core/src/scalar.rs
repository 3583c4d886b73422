//! Scalar abstraction shared by the geometric kernels.

use num_traits::{Float, FromPrimitive, NumAssign};

pub trait Real: Float + FromPrimitive + NumAssign + Copy + Send + Sync + std::fmt::Debug + 'static {
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits the scalar type")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Cubic smoothstep clamped to [0, 1].
pub fn smoothstep3<T: Real>(t: T) -> T {
    let t = t.max(T::zero()).min(T::one());
    t * t * (T::lit(3.0) - T::lit(2.0) * t)
}

pub fn smoothstep3_deriv<T: Real>(t: T) -> T {
    if t <= T::zero() || t >= T::one() {
        return T::zero();
    }
    T::lit(6.0) * t * (T::one() - t)
}

/// Quintic smoothstep clamped to [0, 1].
pub fn smoothstep5<T: Real>(t: T) -> T {
    let t = t.max(T::zero()).min(T::one());
    t * t * t * (t * (t * T::lit(6.0) - T::lit(15.0)) + T::lit(10.0))
}

pub fn sup_norm<T: Real>(x: &[T]) -> T {
    x.iter().fold(T::zero(), |a, &v| a.max(v.abs()))
}

pub fn norm2<T: Real>(x: &[T]) -> T {
    x.iter().fold(T::zero(), |a, &v| a + v * v).sqrt()
}

pub fn dist2<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + (x - y) * (x - y)).sqrt()
}

pub fn dist_sup<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothsteps_hit_plateaus() {
        assert_eq!(smoothstep3(-1.0f64), 0.0);
        assert_eq!(smoothstep3(2.0f64), 1.0);
        assert_eq!(smoothstep5(0.5f32), 0.5);
        assert!((smoothstep3(0.5f64) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn norms_agree_across_precisions() {
        let a = [3.0f32, -4.0];
        let b = [3.0f64, -4.0];
        assert_eq!(norm2(&a), 5.0);
        assert_eq!(norm2(&b), 5.0);
        assert_eq!(sup_norm(&b), 4.0);
    }
}
