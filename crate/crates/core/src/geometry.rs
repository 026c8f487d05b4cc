//! Probabilistic keep-out geometry.
//!
//! A non-ego vehicle center `o ~ N(mu, Sigma)` collides with the ego center `x`
//! iff `x - o` lies in the overlap rectangle `R`. The region the ego must avoid
//! so that `Pr(no collision) >= p` is the Minkowski sum of the `p`-coverage
//! Mahalanobis ellipse and `R`. After mapping by `Sigma^{-1/2}` the ellipse
//! becomes a disk of radius `sqrt(beta)` and `R` becomes a parallelogram, so the
//! test reduces to a point-to-parallelogram distance compared against
//! `sqrt(beta)`.

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Mat2 = Matrix2<f64>;

/// Eigenvalue floor (m^2) applied before any inversion of a covariance.
pub const EIGEN_FLOOR: f64 = 1e-9;

/// Generators with `|det[v1 v2]|` below this are rejected.
const DEGENERATE_DET: f64 = 1e-14;

/// Symmetric positive definite 2x2 covariance (m^2).
///
/// Eigenvalues below [`EIGEN_FLOOR`] are lifted to the floor at construction, so
/// every stored value is strictly positive definite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance2 {
    m: Mat2,
}

impl Covariance2 {
    /// Builds from the packed upper triangle `(xx, xy, yy)`.
    pub fn new(xx: f64, xy: f64, yy: f64) -> Result<Self> {
        Self::from_matrix(Mat2::new(xx, xy, xy, yy))
    }

    pub fn isotropic(variance: f64) -> Result<Self> {
        Self::new(variance, 0.0, variance)
    }

    pub fn identity() -> Self {
        Self { m: Mat2::identity() }
    }

    pub fn from_matrix(m: Mat2) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("covariance has non-finite entries"));
        }
        let scale = m.amax().max(1.0);
        if (m[(0, 1)] - m[(1, 0)]).abs() > 1e-12 * scale {
            return Err(Error::numeric("covariance is not symmetric"));
        }
        let sym = 0.5 * (m + m.transpose());
        let eig = SymmetricEigen::new(sym);
        let min_eig = eig.eigenvalues.min();
        if min_eig < -EIGEN_FLOOR * scale {
            return Err(Error::numeric(format!(
                "covariance is not positive definite (min eigenvalue {min_eig:e})"
            )));
        }
        if min_eig >= EIGEN_FLOOR {
            return Ok(Self { m: sym });
        }
        let floored = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR));
        let m = eig.eigenvectors * Mat2::from_diagonal(&floored) * eig.eigenvectors.transpose();
        Ok(Self {
            m: 0.5 * (m + m.transpose()),
        })
    }

    pub fn matrix(&self) -> &Mat2 {
        &self.m
    }

    /// Packed `(xx, xy, yy)`.
    pub fn packed(&self) -> [f64; 3] {
        [self.m[(0, 0)], self.m[(0, 1)], self.m[(1, 1)]]
    }

    pub fn determinant(&self) -> f64 {
        self.m.determinant()
    }

    /// Multiplies every entry by `alpha`. The floor is re-applied.
    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::domain(format!("scale factor must be > 0, got {alpha}")));
        }
        Self::from_matrix(self.m * alpha)
    }

    fn eigen(&self) -> SymmetricEigen<f64, nalgebra::U2> {
        SymmetricEigen::new(self.m)
    }

    /// Symmetric square root `S` with `S S = Sigma`.
    pub fn sqrt(&self) -> Mat2 {
        let eig = self.eigen();
        let d = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR).sqrt());
        eig.eigenvectors * Mat2::from_diagonal(&d) * eig.eigenvectors.transpose()
    }

    /// Closed-form inverse via the adjugate; the floor keeps `det > 0`.
    pub fn inverse(&self) -> Mat2 {
        let (a, b, c) = (self.m[(0, 0)], self.m[(0, 1)], self.m[(1, 1)]);
        let det = a * c - b * b;
        Mat2::new(c, -b, -b, a) / det
    }

    /// Squared Mahalanobis distance of `d` (an offset from the mean).
    pub fn mahalanobis_sq(&self, d: &Vec2) -> f64 {
        d.dot(&(self.inverse() * d))
    }
}

/// Symmetric `M` with `M Sigma M = I`, via eigendecomposition.
pub fn inv_sqrt(cov: &Covariance2) -> Result<Mat2> {
    let eig = cov.eigen();
    if eig.eigenvalues.iter().any(|l| !(l.is_finite())) {
        return Err(Error::numeric("eigendecomposition produced non-finite values"));
    }
    let d = eig.eigenvalues.map(|l| 1.0 / l.max(EIGEN_FLOOR).sqrt());
    let m = eig.eigenvectors * Mat2::from_diagonal(&d) * eig.eigenvectors.transpose();
    Ok(0.5 * (m + m.transpose()))
}

/// Chi-square quantile with two degrees of freedom, `-2 ln(1 - p)`.
pub fn chi2_quantile_2dof(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!(
            "coverage probability must lie in (0, 1), got {p}"
        )));
    }
    Ok(-2.0 * (-p).ln_1p())
}

/// Chi-square CDF with two degrees of freedom, `1 - exp(-x / 2)`.
pub fn chi2_cdf_2dof(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        -(-0.5 * x).exp_m1()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageLevel {
    pub p: f64,
    pub beta: f64,
}

impl CoverageLevel {
    pub fn new(p: f64) -> Result<Self> {
        Ok(Self {
            p,
            beta: chi2_quantile_2dof(p)?,
        })
    }

    pub fn radius(&self) -> f64 {
        self.beta.sqrt()
    }
}

/// Center-to-center overlap set `{r : |r_x| <= r_long, |r_y| <= r_lat}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapRect {
    pub r_long: f64,
    pub r_lat: f64,
}

impl OverlapRect {
    pub fn new(r_long: f64, r_lat: f64) -> Result<Self> {
        if !(r_long > 0.0 && r_lat > 0.0) || !r_long.is_finite() || !r_lat.is_finite() {
            return Err(Error::domain(format!(
                "overlap half-extents must be positive, got ({r_long}, {r_lat})"
            )));
        }
        Ok(Self { r_long, r_lat })
    }

    pub fn contains(&self, r: &Vec2) -> bool {
        r.x.abs() <= self.r_long && r.y.abs() <= self.r_lat
    }
}

/// Minkowski sum of two axis-aligned half-size rectangles given as `[long, lat]`.
pub fn overlap_rect(ev_half: [f64; 2], nev_half: [f64; 2]) -> Result<OverlapRect> {
    if ev_half.iter().chain(nev_half.iter()).any(|h| !(*h > 0.0)) {
        return Err(Error::domain(format!(
            "half-extents must be positive, got {ev_half:?} and {nev_half:?}"
        )));
    }
    OverlapRect::new(ev_half[0] + nev_half[0], ev_half[1] + nev_half[1])
}

/// Parallelogram `{s1 v1 + s2 v2 : |s1|, |s2| <= 1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Zonotope2 {
    v1: Vec2,
    v2: Vec2,
    inv: Mat2,
}

impl Zonotope2 {
    pub fn new(v1: Vec2, v2: Vec2) -> Result<Self> {
        let basis = Mat2::from_columns(&[v1, v2]);
        let det = basis.determinant();
        let scale = (v1.norm() * v2.norm()).max(f64::MIN_POSITIVE);
        if !det.is_finite() || det.abs() <= DEGENERATE_DET * scale.max(1.0) {
            return Err(Error::numeric(format!("degenerate zonotope generators (det {det:e})")));
        }
        let inv = basis
            .try_inverse()
            .ok_or_else(|| Error::numeric("zonotope generator matrix is singular"))?;
        Ok(Self { v1, v2, inv })
    }

    /// Image of `rect` under the linear map `m`.
    pub fn from_rect(rect: &OverlapRect, m: &Mat2) -> Result<Self> {
        Self::new(m * Vec2::new(rect.r_long, 0.0), m * Vec2::new(0.0, rect.r_lat))
    }

    pub fn generators(&self) -> (Vec2, Vec2) {
        (self.v1, self.v2)
    }

    /// Generator coordinates `[v1 v2]^{-1} z`.
    pub fn coordinates(&self, z: &Vec2) -> Vec2 {
        self.inv * z
    }

    pub fn contains(&self, z: &Vec2) -> bool {
        let s = self.coordinates(z);
        s.x.abs() <= 1.0 && s.y.abs() <= 1.0
    }

    pub fn corners(&self) -> [Vec2; 4] {
        [
            self.v1 + self.v2,
            self.v1 - self.v2,
            -self.v1 - self.v2,
            -self.v1 + self.v2,
        ]
    }

    /// Nearest points of `z` on the four edges (clamped projections).
    pub fn edge_projections(&self, z: &Vec2) -> [Vec2; 4] {
        let proj = |anchor: Vec2, dir: Vec2| {
            let t = (dir.dot(&(z - anchor)) / dir.norm_squared()).clamp(-1.0, 1.0);
            anchor + dir * t
        };
        [
            proj(self.v1, self.v2),
            proj(-self.v1, self.v2),
            proj(self.v2, self.v1),
            proj(-self.v2, self.v1),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub distance: f64,
    pub nearest: Vec2,
}

/// Euclidean distance from `z` to the parallelogram `b`, with the attaining point.
///
/// Nine candidates: the interior (coordinate inversion), four clamped edge
/// projections and four corners.
pub fn dist_to_zonotope(z: &Vec2, b: &Zonotope2) -> Projection {
    if b.contains(z) {
        return Projection {
            distance: 0.0,
            nearest: *z,
        };
    }
    let edges = b.edge_projections(z);
    let corners = b.corners();
    edges
        .iter()
        .chain(corners.iter())
        .map(|p| Projection {
            distance: (z - p).norm(),
            nearest: *p,
        })
        .fold(
            Projection {
                distance: f64::INFINITY,
                nearest: *z,
            },
            |best, c| if c.distance < best.distance { c } else { best },
        )
}

/// Signed distance to the boundary of `b`: positive outside, minus the
/// distance to the nearest edge inside. Agrees with [`dist_to_zonotope`]
/// outside the set.
pub fn signed_dist_to_zonotope(z: &Vec2, b: &Zonotope2) -> Projection {
    if !b.contains(z) {
        return dist_to_zonotope(z, b);
    }
    let nearest = b
        .edge_projections(z)
        .into_iter()
        .min_by(|a, c| (z - a).norm().total_cmp(&(z - c).norm()))
        .unwrap_or(*z);
    Projection {
        distance: -(z - nearest).norm(),
        nearest,
    }
}

/// Collision-avoidance margin `dist(Sigma^{-1/2}(x - mu), Sigma^{-1/2} R) - sqrt(beta)`.
/// Non-negative iff the chance constraint holds.
pub fn constraint_value(x: &Vec2, mu: &Vec2, cov: &Covariance2, rect: &OverlapRect, beta: f64) -> Result<f64> {
    Ok(KeepOut::new(*mu, cov, *rect, beta)?.margin(x))
}

/// Pre-transformed keep-out region for one (agent, mode, step).
#[derive(Debug, Clone, Copy)]
pub struct KeepOut {
    pub mu: Vec2,
    pub whitening: Mat2,
    pub zonotope: Zonotope2,
    pub radius: f64,
}

impl KeepOut {
    pub fn new(mu: Vec2, cov: &Covariance2, rect: OverlapRect, beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::domain(format!("beta must be positive, got {beta}")));
        }
        let whitening = inv_sqrt(cov)?;
        let zonotope = Zonotope2::from_rect(&rect, &whitening)?;
        Ok(Self {
            mu,
            whitening,
            zonotope,
            radius: beta.sqrt(),
        })
    }

    pub fn whiten(&self, x: &Vec2) -> Vec2 {
        self.whitening * (x - self.mu)
    }

    /// Exact margin.
    pub fn margin(&self, x: &Vec2) -> f64 {
        dist_to_zonotope(&self.whiten(x), &self.zonotope).distance - self.radius
    }

    /// Margin with the signed distance and its gradient in `x`.
    pub fn signed_margin_grad(&self, x: &Vec2) -> (f64, Vec2) {
        let z = self.whiten(x);
        let proj = signed_dist_to_zonotope(&z, &self.zonotope);
        let diff = z - proj.nearest;
        let n = diff.norm();
        let grad_z = if n > 0.0 {
            diff * (proj.distance.signum() / n)
        } else {
            Vec2::zeros()
        };
        (proj.distance - self.radius, self.whitening.transpose() * grad_z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn chi2_closed_form_values() {
        assert_relative_eq!(
            chi2_quantile_2dof(0.5).unwrap(),
            1.386_294_361_119_890_6,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            chi2_quantile_2dof(0.95).unwrap(),
            5.991_464_547_107_979,
            epsilon = 1e-12
        );
        assert!(chi2_quantile_2dof(0.0).is_err());
        assert!(chi2_quantile_2dof(1.0).is_err());
        assert!(chi2_quantile_2dof(f64::NAN).is_err());
    }

    #[test]
    fn chi2_cdf_inverts_quantile() {
        for p in [0.1, 0.5, 0.9, 0.99] {
            assert_relative_eq!(chi2_cdf_2dof(chi2_quantile_2dof(p).unwrap()), p, epsilon = 1e-14);
        }
    }

    #[test]
    fn inv_sqrt_closed_forms() {
        let m = inv_sqrt(&Covariance2::identity()).unwrap();
        assert_relative_eq!(m, Mat2::identity(), epsilon = 1e-14);
        let m = inv_sqrt(&Covariance2::new(4.0, 0.0, 0.25).unwrap()).unwrap();
        assert_relative_eq!(m, Mat2::new(0.5, 0.0, 0.0, 2.0), epsilon = 1e-14);
    }

    #[test]
    fn covariance_floor_and_rejection() {
        let c = Covariance2::new(0.0, 0.0, 0.0).unwrap();
        assert_relative_eq!(c.matrix()[(0, 0)], EIGEN_FLOOR, epsilon = 1e-20);
        assert!(Covariance2::new(1.0, 0.0, -1.0).is_err());
        assert!(Covariance2::new(1.0, f64::NAN, 1.0).is_err());
        assert!(Covariance2::from_matrix(Mat2::new(1.0, 0.5, 0.2, 1.0)).is_err());
    }

    #[test]
    fn overlap_rect_sums() {
        let r = overlap_rect([2.5, 1.0], [2.5, 1.0]).unwrap();
        assert_eq!((r.r_long, r.r_lat), (5.0, 2.0));
        let r = overlap_rect([2.0, 0.9], [2.3, 1.1]).unwrap();
        assert_relative_eq!(r.r_long, 4.3, epsilon = 1e-12);
        assert_relative_eq!(r.r_lat, 2.0, epsilon = 1e-12);
        let r = overlap_rect([2.5, 1.0], [1e-12, 1e-12]).unwrap();
        assert_relative_eq!(r.r_long, 2.5, epsilon = 1e-9);
        assert!(overlap_rect([0.0, 1.0], [1.0, 1.0]).is_err());
        assert!(overlap_rect([1.0, 1.0], [1.0, -1.0]).is_err());
    }

    fn unit_square() -> Zonotope2 {
        Zonotope2::new(Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)).unwrap()
    }

    #[test]
    fn distance_axis_corner_interior() {
        let b = unit_square();
        let p = dist_to_zonotope(&Vec2::new(3.0, 0.0), &b);
        assert_relative_eq!(p.distance, 2.0, epsilon = 1e-14);
        assert_relative_eq!(p.nearest, Vec2::new(1.0, 0.0), epsilon = 1e-14);

        let p = dist_to_zonotope(&Vec2::new(2.0, 2.0), &b);
        assert_relative_eq!(p.distance, 2f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(p.nearest, Vec2::new(1.0, 1.0), epsilon = 1e-14);

        let p = dist_to_zonotope(&Vec2::new(0.5, -0.25), &b);
        assert_eq!(p.distance, 0.0);
    }

    #[test]
    fn degenerate_generators_rejected() {
        assert!(Zonotope2::new(Vec2::new(1.0, 1.0), Vec2::new(2.0, 2.0)).is_err());
        assert!(Zonotope2::new(Vec2::new(1.0, 0.0), Vec2::zeros()).is_err());
    }

    #[test]
    fn signed_distance_inside_is_negative_depth() {
        let b = unit_square();
        let p = signed_dist_to_zonotope(&Vec2::new(0.5, 0.1), &b);
        assert_relative_eq!(p.distance, -0.5, epsilon = 1e-14);
        assert_relative_eq!(p.nearest, Vec2::new(1.0, 0.1), epsilon = 1e-14);
        let outside = Vec2::new(1.5, 0.2);
        assert_eq!(
            signed_dist_to_zonotope(&outside, &b).distance,
            dist_to_zonotope(&outside, &b).distance
        );
    }

    #[test]
    fn constraint_value_examples() {
        let rect = OverlapRect::new(1.0, 1.0).unwrap();
        let cov = Covariance2::identity();
        let g = constraint_value(&Vec2::new(4.0, 0.0), &Vec2::zeros(), &cov, &rect, 1.0).unwrap();
        assert_relative_eq!(g, 2.0, epsilon = 1e-14);
        let beta = chi2_quantile_2dof(0.9).unwrap();
        let mu = Vec2::new(3.0, -2.0);
        let g = constraint_value(&mu, &mu, &cov, &rect, beta).unwrap();
        assert_relative_eq!(g, -beta.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn signed_gradient_matches_finite_difference() {
        let cov = Covariance2::new(0.7, 0.2, 0.4).unwrap();
        let rect = OverlapRect::new(2.0, 1.0).unwrap();
        let ko = KeepOut::new(Vec2::new(0.3, -0.1), &cov, rect, 4.6).unwrap();
        let h = 1e-6;
        for x in [Vec2::new(5.0, 1.0), Vec2::new(-3.0, 2.5), Vec2::new(0.5, 0.2)] {
            let (_, g) = ko.signed_margin_grad(&x);
            for i in 0..2 {
                let mut e = Vec2::zeros();
                e[i] = h;
                let fd = (ko.signed_margin_grad(&(x + e)).0 - ko.signed_margin_grad(&(x - e)).0) / (2.0 * h);
                assert_relative_eq!(g[i], fd, epsilon = 1e-6);
            }
        }
    }
}
