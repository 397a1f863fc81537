//! Poincaré-ball primitives for a ball of radius √k.
//!
//! Points live in `{x : ‖x‖² < k}` where `k = -1/c` for sectional curvature `c < 0`.
//! All maps are taken at the origin. Every ball-producing operation projects its
//! result onto `‖x‖ ≤ √k (1 - BALL_EPS)`.
//!
//! The radial kernels (`exp_radial`, `log_radial`, `mobius_radial`) are shared with
//! the autodiff tape: each returns the scale `h(r)` such that `f(v) = h(‖v‖) v`
//! together with `h'(r) / r`, which is all the adjoint needs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Relative margin kept between any produced point and the ball boundary.
pub const BALL_EPS: f64 = 1e-5;
/// Upper clamp applied to artanh arguments.
pub const ARTANH_MAX: f64 = 1.0 - 1e-7;

/// Ball parameter `k > 0` (negative reciprocal of the curvature).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Curvature(f64);

impl Curvature {
    pub const ONE: Curvature = Curvature(1.0);

    pub fn new(k: f64) -> Result<Self> {
        if k.is_finite() && k > 0.0 {
            Ok(Curvature(k))
        } else {
            Err(Error::invalid(format!("curvature parameter must be finite and > 0, got {k}")))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn sqrt(self) -> f64 {
        self.0.sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Curvature::ONE
    }
}

impl TryFrom<f64> for Curvature {
    type Error = Error;

    fn try_from(k: f64) -> Result<Self> {
        Curvature::new(k)
    }
}

impl From<Curvature> for f64 {
    fn from(k: Curvature) -> f64 {
        k.0
    }
}

/// A point strictly inside the Poincaré ball of parameter `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint {
    coords: Vec<f64>,
    k: Curvature,
}

impl BallPoint {
    /// Validates `‖coords‖² < k` and projects onto the boundary margin.
    pub fn new(coords: Vec<f64>, k: Curvature) -> Result<Self> {
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("ball point has non-finite coordinates"));
        }
        let sq = sq_norm(&coords);
        if sq >= k.get() {
            return Err(Error::invalid(format!(
                "point outside the ball: ‖x‖² = {sq} ≥ k = {}",
                k.get()
            )));
        }
        Ok(Self::projected(coords, k))
    }

    pub fn origin(dim: usize, k: Curvature) -> Self {
        BallPoint {
            coords: vec![0.0; dim],
            k,
        }
    }

    fn projected(mut coords: Vec<f64>, k: Curvature) -> Self {
        project(&mut coords, k.sqrt());
        BallPoint { coords, k }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn curvature(&self) -> Curvature {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm(&self) -> f64 {
        sq_norm(&self.coords).sqrt()
    }

    fn check(&self, k: Curvature) -> Result<()> {
        if self.k != k {
            return Err(Error::invalid(format!(
                "point belongs to ball k = {}, operation uses k = {}",
                self.k.get(),
                k.get()
            )));
        }
        Ok(())
    }
}

/// A vector in the tangent space at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentVec(pub Vec<f64>);

impl TangentVec {
    pub fn zeros(dim: usize) -> Self {
        TangentVec(vec![0.0; dim])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        sq_norm(&self.0).sqrt()
    }
}

impl From<Vec<f64>> for TangentVec {
    fn from(v: Vec<f64>) -> Self {
        TangentVec(v)
    }
}

#[inline]
pub(crate) fn sq_norm<T: Real>(x: &[T]) -> T {
    x.iter().fold(T::zero(), |acc, &v| acc + v * v)
}

/// Scales `x` in place so that `‖x‖ ≤ √k (1 - BALL_EPS)`.
pub(crate) fn project<T: Real>(x: &mut [T], sqrt_k: T) {
    let max = sqrt_k * (T::one() - T::of(BALL_EPS));
    let norm = sq_norm(x).sqrt();
    if norm > max {
        let s = max / norm;
        x.iter_mut().for_each(|v| *v = *v * s);
    }
}

/// `f(v) = scale · v` with `dscale_over_r = h'(‖v‖) / ‖v‖`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Radial<T> {
    pub scale: T,
    pub dscale_over_r: T,
}

fn clamped_artanh<T: Real>(rho: T) -> (T, bool) {
    let max = T::of(ARTANH_MAX);
    if rho > max {
        (max.atanh(), true)
    } else {
        (rho.atanh(), false)
    }
}

/// exp_o: `h(r) = √k tanh(r/√k) / r`.
pub(crate) fn exp_radial<T: Real>(r: T, sqrt_k: T) -> Radial<T> {
    let k = sqrt_k * sqrt_k;
    let rho = r / sqrt_k;
    if rho < T::series_cutoff() {
        // tanh(ρ)/ρ = 1 - ρ²/3 + 2ρ⁴/15
        let r2 = r * r;
        return Radial {
            scale: T::one() - r2 / (T::of(3.0) * k) + T::of(2.0 / 15.0) * r2 * r2 / (k * k),
            dscale_over_r: -T::of(2.0 / 3.0) / k + T::of(8.0 / 15.0) * r2 / (k * k),
        };
    }
    let th = rho.tanh();
    let max = T::one() - T::of(BALL_EPS);
    let (t, dt) = if th > max {
        (max, T::zero())
    } else {
        (th, (T::one() - th * th) / sqrt_k)
    };
    Radial {
        scale: sqrt_k * t / r,
        dscale_over_r: sqrt_k * (dt * r - t) / (r * r * r),
    }
}

/// log_o: `h(r) = √k artanh(r/√k) / r`.
pub(crate) fn log_radial<T: Real>(r: T, sqrt_k: T) -> Radial<T> {
    let k = sqrt_k * sqrt_k;
    let rho = r / sqrt_k;
    if rho < T::series_cutoff() {
        // artanh(ρ)/ρ = 1 + ρ²/3 + ρ⁴/5
        let r2 = r * r;
        return Radial {
            scale: T::one() + r2 / (T::of(3.0) * k) + r2 * r2 / (T::of(5.0) * k * k),
            dscale_over_r: T::of(2.0 / 3.0) / k + T::of(4.0 / 5.0) * r2 / (k * k),
        };
    }
    let (u, clamped) = clamped_artanh(rho);
    let du = if clamped {
        T::zero()
    } else {
        T::one() / (sqrt_k * (T::one() - rho * rho))
    };
    Radial {
        scale: sqrt_k * u / r,
        dscale_over_r: sqrt_k * (du * r - u) / (r * r * r),
    }
}

/// Möbius scalar multiplication: `h(r) = √k tanh(a artanh(r/√k)) / r`.
pub(crate) fn mobius_radial<T: Real>(a: T, r: T, sqrt_k: T) -> Radial<T> {
    let k = sqrt_k * sqrt_k;
    let rho = r / sqrt_k;
    if rho < T::series_cutoff() {
        let a3 = a * a * a;
        let c2 = (a - a3) / T::of(3.0);
        let c4 = a / T::of(5.0) - a3 / T::of(3.0) + T::of(2.0 / 15.0) * a3 * a * a;
        let r2 = r * r;
        return Radial {
            scale: a + c2 * r2 / k + c4 * r2 * r2 / (k * k),
            dscale_over_r: T::of(2.0) * c2 / k + T::of(4.0) * c4 * r2 / (k * k),
        };
    }
    let (u, clamped) = clamped_artanh(rho);
    let du = if clamped {
        T::zero()
    } else {
        T::one() / (sqrt_k * (T::one() - rho * rho))
    };
    let th = (a * u).tanh();
    let max = T::one() - T::of(BALL_EPS);
    let (t, dt) = if th.abs() > max {
        (max.copysign(th), T::zero())
    } else {
        (th, a * (T::one() - th * th) * du)
    };
    Radial {
        scale: sqrt_k * t / r,
        dscale_over_r: sqrt_k * (dt * r - t) / (r * r * r),
    }
}

/// `λ(k, x) = 2 / (1 - ‖x‖²/k)` evaluated from the squared norm.
#[inline]
pub(crate) fn conformal_from_sq<T: Real>(sq: T, k: T) -> T {
    let max = T::one() - T::of(BALL_EPS);
    let sq = sq.min(k * max * max);
    T::of(2.0) / (T::one() - sq / k)
}

/// `arcosh(1 + z)` without cancellation for small `z`.
#[inline]
pub(crate) fn arcosh1p<T: Real>(z: T) -> T {
    (z + (z * z + T::of(2.0) * z).sqrt()).ln_1p()
}

/// Terms of the distance formula: `z`, `k - ‖x‖²`, `k - ‖y‖²`, `‖x - y‖²`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DistTerms<T> {
    pub z: T,
    pub alpha: T,
    pub beta: T,
    pub diff_sq: T,
}

pub(crate) fn dist_terms<T: Real>(x: &[T], y: &[T], k: T) -> DistTerms<T> {
    let floor = k * (T::one() - (T::one() - T::of(BALL_EPS)).powi(2));
    let alpha = (k - sq_norm(x)).max(floor);
    let beta = (k - sq_norm(y)).max(floor);
    let diff_sq = x
        .iter()
        .zip(y)
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    DistTerms {
        z: T::of(2.0) * k * diff_sq / (alpha * beta),
        alpha,
        beta,
        diff_sq,
    }
}

pub(crate) fn dist_raw<T: Real>(x: &[T], y: &[T], k: T) -> T {
    k.sqrt() * arcosh1p(dist_terms(x, y, k).z)
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("dimension mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Geodesic distance between two points of the same ball.
pub fn dist(x: &BallPoint, y: &BallPoint, k: Curvature) -> Result<f64> {
    x.check(k)?;
    y.check(k)?;
    check_dims(x.dim(), y.dim())?;
    Ok(dist_raw(&x.coords, &y.coords, k.get()))
}

/// Exponential map at the origin; `exp_o(0) = o`.
pub fn exp_o(v: &TangentVec, k: Curvature) -> BallPoint {
    let r = v.norm();
    let h = exp_radial(r, k.sqrt()).scale;
    BallPoint::projected(v.0.iter().map(|c| c * h).collect(), k)
}

/// Logarithmic map at the origin; `log_o(o) = 0`.
pub fn log_o(y: &BallPoint, k: Curvature) -> Result<TangentVec> {
    y.check(k)?;
    let h = log_radial(y.norm(), k.sqrt()).scale;
    Ok(TangentVec(y.coords.iter().map(|c| c * h).collect()))
}

/// Möbius scalar multiplication `a ⊗ₖ y`.
pub fn mobius_scalar(a: f64, y: &BallPoint, k: Curvature) -> Result<BallPoint> {
    y.check(k)?;
    if !a.is_finite() {
        return Err(Error::invalid("Möbius scalar must be finite"));
    }
    let h = mobius_radial(a, y.norm(), k.sqrt()).scale;
    Ok(BallPoint::projected(y.coords.iter().map(|c| c * h).collect(), k))
}

/// Conformal factor `λ(k, x) = 2 (1 - ‖x‖²/k)⁻¹`, always ≥ 2.
pub fn conformal_factor(x: &BallPoint, k: Curvature) -> Result<f64> {
    x.check(k)?;
    Ok(conformal_from_sq(sq_norm(&x.coords), k.get()))
}

/// Weighted gyromidpoint
/// `½ ⊗ₖ [Σᵢ νᵢ λᵢ xᵢ / Σⱼ νⱼ (λⱼ - 1)]`.
///
/// The bracketed point is a convex combination of the inputs' Klein coordinates,
/// so it stays inside the ball and the half-scaling maps it back to Poincaré
/// coordinates.
pub fn gyromidpoint(points: &[BallPoint], weights: &[f64], k: Curvature) -> Result<BallPoint> {
    let first = points
        .first()
        .ok_or_else(|| Error::invalid("gyromidpoint of an empty point set"))?;
    if weights.len() != points.len() {
        return Err(Error::invalid(format!(
            "{} weights for {} points",
            weights.len(),
            points.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::invalid(format!("gyromidpoint weights must be > 0, got {w}")));
    }
    let dim = first.dim();
    let mut num = vec![0.0; dim];
    let mut den = 0.0;
    for (p, &w) in points.iter().zip(weights) {
        p.check(k)?;
        check_dims(dim, p.dim())?;
        let lambda = conformal_from_sq(sq_norm(&p.coords), k.get());
        for (n, c) in num.iter_mut().zip(&p.coords) {
            *n += w * lambda * c;
        }
        den += w * (lambda - 1.0);
    }
    num.iter_mut().for_each(|n| *n /= den);
    let h = mobius_radial(0.5, sq_norm(&num).sqrt(), k.sqrt()).scale;
    Ok(BallPoint::projected(num.iter().map(|c| c * h).collect(), k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bp(c: &[f64]) -> BallPoint {
        BallPoint::new(c.to_vec(), Curvature::ONE).unwrap()
    }

    #[test]
    fn dist_examples() {
        let k = Curvature::ONE;
        assert_eq!(dist(&bp(&[0.0, 0.0]), &bp(&[0.0, 0.0]), k).unwrap(), 0.0);
        let d = dist(&bp(&[0.5, 0.0]), &bp(&[-0.5, 0.0]), k).unwrap();
        assert_abs_diff_eq!(d, 9f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(d, 4.0 * 0.5f64.atanh(), epsilon = 1e-12);
    }

    #[test]
    fn dist_rejects_mismatch() {
        let k2 = Curvature::new(2.0).unwrap();
        let a = bp(&[0.1, 0.0]);
        let b = BallPoint::new(vec![0.1, 0.0], k2).unwrap();
        assert!(dist(&a, &b, Curvature::ONE).is_err());
        assert!(dist(&a, &bp(&[0.1]), Curvature::ONE).is_err());
    }

    #[test]
    fn outside_ball_rejected() {
        assert!(BallPoint::new(vec![1.0, 0.0], Curvature::ONE).is_err());
        assert!(BallPoint::new(vec![0.8, 0.8], Curvature::ONE).is_err());
        assert!(Curvature::new(0.0).is_err());
        assert!(Curvature::new(f64::NAN).is_err());
    }

    #[test]
    fn exp_log_examples() {
        let k = Curvature::ONE;
        let o = exp_o(&TangentVec::zeros(3), k);
        assert_eq!(o.coords(), &[0.0, 0.0, 0.0]);
        let p = exp_o(&TangentVec(vec![0.5, 0.0]), k);
        assert_abs_diff_eq!(p.coords()[0], 0.5f64.tanh(), epsilon = 1e-15);
        assert_abs_diff_eq!(p.coords()[0], 0.462117, epsilon = 1e-6);
        assert_eq!(log_o(&o, k).unwrap().0, vec![0.0; 3]);
        let v = log_o(&bp(&[0.462117, 0.0]), k).unwrap();
        assert_abs_diff_eq!(v.0[0], 0.5, epsilon = 1e-6);
        let v = TangentVec(vec![0.3, -0.7]);
        let back = log_o(&exp_o(&v, k), k).unwrap();
        assert_abs_diff_eq!(back.0[0], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(back.0[1], -0.7, epsilon = 1e-12);
    }

    #[test]
    fn exp_saturates_inside_ball() {
        let k = Curvature::new(2.5).unwrap();
        let p = exp_o(&TangentVec(vec![40.0, -3.0]), k);
        assert!(sq_norm(p.coords()) < k.get());
    }

    #[test]
    fn mobius_examples() {
        let k = Curvature::ONE;
        let y = bp(&[0.3, -0.2]);
        let same = mobius_scalar(1.0, &y, k).unwrap();
        assert_abs_diff_eq!(same.coords()[0], 0.3, epsilon = 1e-14);
        assert_abs_diff_eq!(same.coords()[1], -0.2, epsilon = 1e-14);
        let o = BallPoint::origin(2, k);
        assert_eq!(mobius_scalar(0.7, &o, k).unwrap().coords(), &[0.0, 0.0]);
        let half = mobius_scalar(0.5, &bp(&[1f64.tanh(), 0.0]), k).unwrap();
        assert_abs_diff_eq!(half.coords()[0], 0.5f64.tanh(), epsilon = 1e-12);
    }

    #[test]
    fn conformal_examples() {
        let k = Curvature::ONE;
        assert_eq!(conformal_factor(&BallPoint::origin(2, k), k).unwrap(), 2.0);
        assert_abs_diff_eq!(
            conformal_factor(&bp(&[0.5, 0.0]), k).unwrap(),
            2.0 / 0.75,
            epsilon = 1e-12
        );
        let small = conformal_factor(&bp(&[0.2, 0.1]), k).unwrap();
        let large = conformal_factor(&bp(&[0.5, 0.1]), k).unwrap();
        assert!(small < large);
    }

    #[test]
    fn gyromidpoint_examples() {
        let k = Curvature::ONE;
        let x = bp(&[0.4, -0.3]);
        let m = gyromidpoint(std::slice::from_ref(&x), &[1.0], k).unwrap();
        assert_abs_diff_eq!(m.coords()[0], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(m.coords()[1], -0.3, epsilon = 1e-12);
        let neg = bp(&[-0.4, 0.3]);
        let m = gyromidpoint(&[x, neg], &[1.0, 1.0], k).unwrap();
        assert!(m.norm() < 1e-12);
        assert!(gyromidpoint(&[], &[], k).is_err());
        assert!(gyromidpoint(&[bp(&[0.1, 0.1])], &[0.0], k).is_err());
    }

    #[test]
    fn radial_series_matches_closed_form_near_cutoff() {
        let sk = 1.3f64;
        let cut = f64::series_cutoff() * sk;
        for (below, above) in [
            (exp_radial(cut * 0.999, sk), exp_radial(cut * 1.001, sk)),
            (log_radial(cut * 0.999, sk), log_radial(cut * 1.001, sk)),
            (mobius_radial(0.5, cut * 0.999, sk), mobius_radial(0.5, cut * 1.001, sk)),
        ] {
            assert_abs_diff_eq!(below.scale, above.scale, epsilon = 1e-8);
            assert_abs_diff_eq!(below.dscale_over_r, above.dscale_over_r, epsilon = 1e-6);
        }
    }

    fn vec2() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-2.0f64..2.0, 2..6)
    }

    proptest! {
        #[test]
        fn roundtrip_small_vectors(v in vec2(), kk in 0.2f64..4.0) {
            let k = Curvature::new(kk).unwrap();
            let v = TangentVec(v);
            prop_assume!(v.norm() <= 3.0);
            let back = log_o(&exp_o(&v, k), k).unwrap();
            for (a, b) in back.0.iter().zip(&v.0) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn dist_symmetric(a in vec2(), b in vec2()) {
            let k = Curvature::ONE;
            let dim = a.len().min(b.len());
            let x = exp_o(&TangentVec(a[..dim].to_vec()), k);
            let y = exp_o(&TangentVec(b[..dim].to_vec()), k);
            let dxy = dist(&x, &y, k).unwrap();
            prop_assert!(dxy >= 0.0);
            prop_assert_eq!(dxy, dist(&y, &x, k).unwrap());
            prop_assert_eq!(dist(&x, &x, k).unwrap(), 0.0);
        }

        #[test]
        fn gyromidpoint_permutation_invariant(pts in prop::collection::vec(vec2(), 1..8), seed in 0u64..1000) {
            let k = Curvature::ONE;
            let dim = pts.iter().map(Vec::len).min().unwrap();
            let pts: Vec<_> = pts.iter().map(|p| exp_o(&TangentVec(p[..dim].to_vec()), k)).collect();
            let w = vec![1.0; pts.len()];
            let m1 = gyromidpoint(&pts, &w, k).unwrap();
            let mut shuffled = pts.clone();
            shuffled.rotate_left((seed as usize) % pts.len());
            shuffled.reverse();
            let m2 = gyromidpoint(&shuffled, &w, k).unwrap();
            for (a, b) in m1.coords().iter().zip(m2.coords()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!(sq_norm(m1.coords()) < 1.0);
        }

        #[test]
        fn conformal_coefficient_grows_with_norm(r1 in 0.0f64..0.99, r2 in 0.0f64..0.99, kk in 0.5f64..3.0) {
            prop_assume!((r1 - r2).abs() > 1e-6);
            let k = Curvature::new(kk).unwrap();
            let s = k.sqrt();
            let a = BallPoint::new(vec![r1 * s, 0.0], k).unwrap();
            let b = BallPoint::new(vec![0.0, r2 * s], k).unwrap();
            let la = conformal_factor(&a, k).unwrap();
            let lb = conformal_factor(&b, k).unwrap();
            prop_assert_eq!(r1 < r2, la < lb);
        }

        #[test]
        fn dist_scales_with_sqrt_k(a in vec2(), b in vec2(), kk in 0.2f64..5.0) {
            let k = Curvature::new(kk).unwrap();
            let dim = a.len().min(b.len());
            let x = exp_o(&TangentVec(a[..dim].to_vec()), k);
            let y = exp_o(&TangentVec(b[..dim].to_vec()), k);
            let s = k.sqrt();
            let x1 = BallPoint::new(x.coords().iter().map(|c| c / s).collect(), Curvature::ONE).unwrap();
            let y1 = BallPoint::new(y.coords().iter().map(|c| c / s).collect(), Curvature::ONE).unwrap();
            let dk = dist(&x, &y, k).unwrap();
            let d1 = dist(&x1, &y1, Curvature::ONE).unwrap();
            prop_assert!((dk - s * d1).abs() < 1e-9 * (1.0 + dk));
        }
    }
}
