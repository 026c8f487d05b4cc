//! Arc-length parameterized polylines.

use crate::error::{Error, Result};
use crate::geometry::Vec2;

/// Waypoint spacing (m) reference routes are resampled to.
pub const ROUTE_SPACING: f64 = 0.1;
/// Waypoints in a reference window (100 m of lookahead at 0.1 m).
pub const ROUTE_WINDOW_POINTS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<Vec2>,
    /// Cumulative arc length at each waypoint; strictly increasing.
    arc: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouteProjection {
    pub s: f64,
    pub point: Vec2,
    pub distance: f64,
    /// Signed lateral offset, positive to the left of the direction of travel.
    pub lateral: f64,
}

impl Polyline {
    pub fn new(points: Vec<Vec2>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::domain(format!(
                "a route needs >= 2 waypoints, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::domain("route has non-finite waypoints"));
        }
        let mut arc = Vec::with_capacity(points.len());
        arc.push(0.0);
        for w in points.windows(2) {
            let seg = (w[1] - w[0]).norm();
            if !(seg > 0.0) {
                return Err(Error::domain(
                    "route arc length must be strictly increasing (repeated waypoint)",
                ));
            }
            arc.push(arc[arc.len() - 1] + seg);
        }
        Ok(Self { points, arc })
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        self.arc[self.arc.len() - 1]
    }

    fn segment_at(&self, s: f64) -> usize {
        let i = self.arc.partition_point(|a| *a <= s);
        i.clamp(1, self.points.len() - 1) - 1
    }

    /// Point at arc length `s`, clamped to the ends.
    pub fn point_at(&self, s: f64) -> Vec2 {
        let s = s.clamp(0.0, self.length());
        let i = self.segment_at(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let t = (s - self.arc[i]) / (self.arc[i + 1] - self.arc[i]);
        a + (b - a) * t
    }

    /// Unit tangent at arc length `s`.
    pub fn tangent_at(&self, s: f64) -> Vec2 {
        let i = self.segment_at(s.clamp(0.0, self.length()));
        (self.points[i + 1] - self.points[i]).normalize()
    }

    /// Nearest point on the polyline to `p`.
    pub fn project(&self, p: &Vec2) -> RouteProjection {
        let mut best = RouteProjection {
            s: 0.0,
            point: self.points[0],
            distance: f64::INFINITY,
            lateral: 0.0,
        };
        for i in 0..self.points.len() - 1 {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let d = b - a;
            let t = ((p - a).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
            let q = a + d * t;
            let dist = (p - q).norm();
            if dist < best.distance {
                let tangent = d / d.norm();
                let off = p - q;
                best = RouteProjection {
                    s: self.arc[i] + t * (self.arc[i + 1] - self.arc[i]),
                    point: q,
                    distance: dist,
                    lateral: tangent.x * off.y - tangent.y * off.x,
                };
            }
        }
        best
    }

    /// Resamples at `spacing` (the final point is always kept).
    pub fn resample(&self, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(Error::domain(format!("spacing must be positive, got {spacing}")));
        }
        let count = (self.length() / spacing).floor() as usize;
        let mut pts: Vec<Vec2> = (0..=count).map(|k| self.point_at(k as f64 * spacing)).collect();
        let end = self.points[self.points.len() - 1];
        if (pts[pts.len() - 1] - end).norm() > 1e-9 * self.length().max(1.0) {
            pts.push(end);
        }
        Self::new(pts)
    }

    /// Sub-polyline starting at arc length `s0` with at most `max_points`
    /// waypoints at `spacing`.
    pub fn window(&self, s0: f64, spacing: f64, max_points: usize) -> Result<Self> {
        let s0 = s0.clamp(0.0, self.length());
        let remaining = self.length() - s0;
        let count = ((remaining / spacing).floor() as usize + 1).min(max_points).max(2);
        let pts: Vec<Vec2> = (0..count)
            .map(|k| self.point_at(s0 + (k as f64 * spacing).min(remaining)))
            .collect();
        let mut dedup: Vec<Vec2> = Vec::with_capacity(pts.len());
        for p in pts {
            if dedup.last().map_or(true, |q| (p - q).norm() > 0.0) {
                dedup.push(p);
            }
        }
        if dedup.len() < 2 {
            // At the very end of the route: extend along the final tangent.
            let end = self.point_at(self.length());
            dedup = vec![end, end + self.tangent_at(self.length()) * spacing];
        }
        Self::new(dedup)
    }
}
