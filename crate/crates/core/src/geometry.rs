//! Planar oriented-rectangle geometry.
//!
//! Rectangles are stored canonically: `length >= width` and `yaw` in `[0, pi)`.
//! A square has two equivalent yaws a quarter turn apart; the smaller one wins.

use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Quads with less area than this (m²) cannot be fitted.
pub const MIN_QUAD_AREA: f64 = 1e-10;

/// Relative tolerance under which length and width count as equal.
const SQUARE_REL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate quad: area {0:e} m² is below the fitting floor")]
    DegenerateQuad(f64),
    #[error("non-finite or non-positive extent ({length}, {width})")]
    InvalidExtent { length: f64, width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Counter-clockwise quarter turn.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn from_angle(theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c, s)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2D {
    pub const fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent2D {
    /// Along the local x-axis.
    pub length: f64,
    pub width: f64,
}

impl Extent2D {
    /// Builds an extent, swapping the sides if needed so that `length >= width`.
    pub fn new(a: f64, b: f64) -> Result<Self, GeometryError> {
        if !(a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0) {
            return Err(GeometryError::InvalidExtent { length: a, width: b });
        }
        Ok(Self {
            length: a.max(b),
            width: a.min(b),
        })
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }
}

/// Wraps an angle into `[0, period)`.
pub fn wrap_angle(theta: f64, period: f64) -> f64 {
    let mut t = theta.rem_euclid(period);
    if t >= period {
        t -= period;
    }
    t
}

/// Smallest distance between two yaws under rectangle (half-turn) symmetry.
pub fn yaw_distance(a: f64, b: f64) -> f64 {
    let d = wrap_angle(a - b, PI);
    d.min(PI - d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedRect {
    pub pose: Pose2D,
    pub extent: Extent2D,
}

impl OrientedRect {
    /// Builds a canonical rectangle from a center, a yaw, and the side lengths
    /// along the yaw direction (`along`) and across it (`across`).
    pub fn new(x: f64, y: f64, yaw: f64, along: f64, across: f64) -> Result<Self, GeometryError> {
        let extent = Extent2D::new(along, across)?;
        let yaw = if along >= across { yaw } else { yaw + FRAC_PI_2 };
        Ok(Self::canonical(Pose2D::new(x, y, yaw), extent))
    }

    fn canonical(pose: Pose2D, extent: Extent2D) -> Self {
        let square = (extent.length - extent.width) <= SQUARE_REL_TOL * extent.length;
        let yaw = if square {
            wrap_angle(pose.yaw, FRAC_PI_2)
        } else {
            wrap_angle(pose.yaw, PI)
        };
        Self {
            pose: Pose2D::new(pose.x, pose.y, yaw),
            extent,
        }
    }

    pub fn center(&self) -> Vec2 {
        self.pose.center()
    }

    pub fn area(&self) -> f64 {
        self.extent.area()
    }

    /// Unit vector along the length axis.
    pub fn axis_length(&self) -> Vec2 {
        Vec2::from_angle(self.pose.yaw)
    }

    /// Unit vector along the width axis.
    pub fn axis_width(&self) -> Vec2 {
        self.axis_length().perp()
    }

    pub fn translated(&self, d: Vec2) -> Self {
        let mut r = *self;
        r.pose.x += d.x;
        r.pose.y += d.y;
        r
    }

    pub fn corners(&self) -> KeypointQuad {
        corners(self)
    }

    /// Half extents of the axis-aligned bounding box.
    pub fn aabb_half(&self) -> Vec2 {
        let (s, c) = self.pose.yaw.sin_cos();
        let (hl, hw) = (0.5 * self.extent.length, 0.5 * self.extent.width);
        Vec2::new(hl * c.abs() + hw * s.abs(), hl * s.abs() + hw * c.abs())
    }

    /// Closed point-in-rectangle test in the rectangle's own frame.
    pub fn contains(&self, p: Vec2) -> bool {
        let d = p - self.center();
        d.dot(self.axis_length()).abs() <= 0.5 * self.extent.length
            && d.dot(self.axis_width()).abs() <= 0.5 * self.extent.width
    }
}

/// Four keypoints, counter-clockwise, starting at local `(+l/2, +w/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointQuad(pub [Vec2; 4]);

impl KeypointQuad {
    pub fn points(&self) -> &[Vec2; 4] {
        &self.0
    }

    pub fn centroid(&self) -> Vec2 {
        let s = self.0.iter().fold(Vec2::default(), |acc, &p| acc + p);
        s * 0.25
    }

    /// Signed shoelace area; positive for counter-clockwise order.
    pub fn signed_area(&self) -> f64 {
        polygon_signed_area(&self.0)
    }
}

pub fn corners(rect: &OrientedRect) -> KeypointQuad {
    let c = rect.center();
    let u = rect.axis_length() * (0.5 * rect.extent.length);
    let v = rect.axis_width() * (0.5 * rect.extent.width);
    KeypointQuad([c + u + v, c - u + v, c - u - v, c + u - v])
}

/// Least-squares rectangle through four keypoints given in the documented
/// corner order.
///
/// For a fixed yaw the optimal center is the keypoint mean and the optimal half
/// extents are signed averages of the local coordinates, so the residual is
/// minimised by maximising `a² + b²`. That maximisation has a closed form in
/// the doubled angle.
pub fn fit_rect(quad: &KeypointQuad) -> Result<OrientedRect, GeometryError> {
    let area = quad.signed_area().abs();
    if !(area >= MIN_QUAD_AREA) {
        return Err(GeometryError::DegenerateQuad(area));
    }
    let c = quad.centroid();
    let [q0, q1, q2, q3] = quad.0.map(|p| p - c);
    // d ≈ (l/2)·u, e ≈ (w/2)·u⊥ for an exact rectangle.
    let d = (q0 - q1 - q2 + q3) * 0.25;
    let e = (q0 + q1 - q2 - q3) * 0.25;
    let alpha = d.y.atan2(d.x);
    let gamma = e.y.atan2(e.x) - FRAC_PI_2;
    let (nd, ne) = (d.dot(d), e.dot(e));
    let zx = nd * (2.0 * alpha).cos() + ne * (2.0 * gamma).cos();
    let zy = nd * (2.0 * alpha).sin() + ne * (2.0 * gamma).sin();
    let theta = 0.5 * zy.atan2(zx);
    let u = Vec2::from_angle(theta);
    let a = d.dot(u).abs();
    let b = e.dot(u.perp()).abs();
    OrientedRect::new(c.x, c.y, theta, 2.0 * a, 2.0 * b)
        .map_err(|_| GeometryError::DegenerateQuad(area))
}

fn project(points: &[Vec2], axis: Vec2) -> (f64, f64) {
    points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let t = p.dot(axis);
        (lo.min(t), hi.max(t))
    })
}

/// Edge normals of a convex polygon (not normalised).
fn edge_axes(poly: &[Vec2]) -> impl Iterator<Item = Vec2> + '_ {
    (0..poly.len()).map(move |i| (poly[(i + 1) % poly.len()] - poly[i]).perp())
}

/// Separating-axis test for two closed convex polygons. Touching counts.
pub fn convex_intersects(a: &[Vec2], b: &[Vec2]) -> bool {
    for axis in edge_axes(a).chain(edge_axes(b)) {
        if axis.dot(axis) == 0.0 {
            continue;
        }
        let (alo, ahi) = project(a, axis);
        let (blo, bhi) = project(b, axis);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}

pub fn intersects(a: &OrientedRect, b: &OrientedRect) -> bool {
    let (ca, cb) = (corners(a), corners(b));
    // Two distinct axes per rectangle suffice.
    let axes = [
        a.axis_length(),
        a.axis_width(),
        b.axis_length(),
        b.axis_width(),
    ];
    axes.iter().all(|&axis| {
        let (alo, ahi) = project(&ca.0, axis);
        let (blo, bhi) = project(&cb.0, axis);
        ahi >= blo && bhi >= alo
    })
}

fn point_segment_distance(p: Vec2, s0: Vec2, s1: Vec2) -> f64 {
    let d = s1 - s0;
    let len2 = d.dot(d);
    let t = if len2 > 0.0 {
        ((p - s0).dot(d) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (s0 + d * t)).norm()
}

fn vertex_edge_min(a: &[Vec2], b: &[Vec2]) -> f64 {
    let mut best = f64::INFINITY;
    for &p in a {
        for i in 0..b.len() {
            best = best.min(point_segment_distance(p, b[i], b[(i + 1) % b.len()]));
        }
    }
    best
}

/// Minimum distance between two disjoint convex polygons; 0 if they intersect.
pub fn convex_clearance(a: &[Vec2], b: &[Vec2]) -> f64 {
    if convex_intersects(a, b) {
        return 0.0;
    }
    vertex_edge_min(a, b).min(vertex_edge_min(b, a))
}

pub fn clearance(a: &OrientedRect, b: &OrientedRect) -> f64 {
    if intersects(a, b) {
        return 0.0;
    }
    let (ca, cb) = (corners(a), corners(b));
    vertex_edge_min(&ca.0, &cb.0).min(vertex_edge_min(&cb.0, &ca.0))
}

/// Clearance when disjoint, minus the minimum SAT overlap depth otherwise.
pub fn signed_separation(a: &OrientedRect, b: &OrientedRect) -> f64 {
    if !intersects(a, b) {
        return clearance(a, b);
    }
    let (ca, cb) = (corners(a), corners(b));
    let depth = [a.axis_length(), a.axis_width(), b.axis_length(), b.axis_width()]
        .iter()
        .map(|&axis| {
            let (alo, ahi) = project(&ca.0, axis);
            let (blo, bhi) = project(&cb.0, axis);
            (ahi - blo).min(bhi - alo)
        })
        .fold(f64::INFINITY, f64::min);
    -depth
}

/// Smallest `t >= 0` such that `moving` translated by `t * dir` no longer
/// overlaps `fixed` on some separating axis. `None` if no such `t` exists.
pub fn separating_translation(fixed: &[Vec2], moving: &[Vec2], dir: Vec2) -> Option<f64> {
    let mut best: Option<f64> = None;
    for axis in edge_axes(fixed).chain(edge_axes(moving)) {
        let rate = axis.dot(dir);
        if rate.abs() < 1e-15 {
            continue;
        }
        let (flo, fhi) = project(fixed, axis);
        let (mlo, mhi) = project(moving, axis);
        let t = if rate > 0.0 {
            (fhi - mlo) / rate
        } else {
            (flo - mhi) / rate
        };
        let t = t.max(0.0);
        best = Some(best.map_or(t, |b: f64| b.min(t)));
    }
    best
}

pub fn polygon_signed_area(poly: &[Vec2]) -> f64 {
    let n = poly.len();
    0.5 * (0..n).map(|i| poly[i].cross(poly[(i + 1) % n])).sum::<f64>()
}

/// Sutherland–Hodgman clip of a convex polygon against a convex CCW clipper.
pub fn clip_convex(subject: &[Vec2], clipper: &[Vec2]) -> Vec<Vec2> {
    let mut out = subject.to_vec();
    let n = clipper.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clipper[i], clipper[(i + 1) % n]);
        let edge = b - a;
        let inside = |p: Vec2| edge.cross(p - a) >= 0.0;
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (ci, pi) = (inside(cur), inside(prev));
            if ci != pi {
                let dp = cur - prev;
                let denom = edge.cross(dp);
                if denom != 0.0 {
                    let t = edge.cross(a - prev) / denom;
                    out.push(prev + dp * t);
                }
            }
            if ci {
                out.push(cur);
            }
        }
    }
    out
}

/// Area of the intersection of two rectangles.
pub fn overlap_area(a: &OrientedRect, b: &OrientedRect) -> f64 {
    if !intersects(a, b) {
        return 0.0;
    }
    let clipped = clip_convex(&corners(a).0, &corners(b).0);
    if clipped.len() < 3 {
        0.0
    } else {
        polygon_signed_area(&clipped).abs()
    }
}

/// Andrew's monotone chain; returns the hull counter-clockwise without
/// repeating the first point.
pub fn convex_hull(points: &[Vec2]) -> Vec<Vec2> {
    let mut pts = points.to_vec();
    pts.sort_by(|p, q| p.x.total_cmp(&q.x).then(p.y.total_cmp(&q.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Vec2> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Vec2>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 {
                let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
                if (b - a).cross(p - a) <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Minimum-area enclosing rectangle of a point set (rotating calipers over
/// hull edges).
pub fn min_area_rect(points: &[Vec2]) -> Result<OrientedRect, GeometryError> {
    let hull = convex_hull(points);
    if hull.len() < 3 {
        return Err(GeometryError::DegenerateQuad(0.0));
    }
    let mut best: Option<(f64, OrientedRect)> = None;
    for i in 0..hull.len() {
        let edge = hull[(i + 1) % hull.len()] - hull[i];
        if edge.norm() == 0.0 {
            continue;
        }
        let u = edge * (1.0 / edge.norm());
        let v = u.perp();
        let (ulo, uhi) = project(&hull, u);
        let (vlo, vhi) = project(&hull, v);
        let area = (uhi - ulo) * (vhi - vlo);
        if best.as_ref().is_some_and(|(a, _)| *a <= area) {
            continue;
        }
        let c = u * (0.5 * (ulo + uhi)) + v * (0.5 * (vlo + vhi));
        let rect = OrientedRect::new(c.x, c.y, u.y.atan2(u.x), uhi - ulo, vhi - vlo)?;
        best = Some((area, rect));
    }
    best.map(|(_, r)| r).ok_or(GeometryError::DegenerateQuad(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rect(x: f64, y: f64, yaw: f64, l: f64, w: f64) -> OrientedRect {
        OrientedRect::new(x, y, yaw, l, w).unwrap()
    }

    fn close(a: Vec2, b: Vec2, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn axis_aligned_corners() {
        let q = corners(&rect(0.0, 0.0, 0.0, 0.04, 0.02));
        let want = [(0.02, 0.01), (-0.02, 0.01), (-0.02, -0.01), (0.02, -0.01)];
        for (p, (x, y)) in q.0.iter().zip(want) {
            assert!(close(*p, Vec2::new(x, y), 1e-15), "{p:?}");
        }
        assert!(q.signed_area() > 0.0);
    }

    #[test]
    fn quarter_turn_swaps_extents() {
        let r = rect(0.0, 0.0, FRAC_PI_2, 0.04, 0.02);
        let q = corners(&r);
        let xs = q.0.iter().map(|p| p.x.abs()).fold(0.0, f64::max);
        let ys = q.0.iter().map(|p| p.y.abs()).fold(0.0, f64::max);
        assert!((xs - 0.01).abs() < 1e-12 && (ys - 0.02).abs() < 1e-12);
    }

    #[test]
    fn canonicalization() {
        let r = rect(0.0, 0.0, -0.3, 0.02, 0.05);
        assert!(r.extent.length >= r.extent.width);
        assert!((0.0..PI).contains(&r.pose.yaw));
        assert!((r.pose.yaw - wrap_angle(-0.3 + FRAC_PI_2, PI)).abs() < 1e-12);

        // square: smaller of the two equivalent yaws
        let s = rect(0.0, 0.0, 2.0, 0.03, 0.03);
        assert!((s.pose.yaw - (2.0 - FRAC_PI_2)).abs() < 1e-12);
    }

    #[test]
    fn fit_recovers_square_with_tie_break() {
        let s = rect(0.1, -0.2, 1.9, 0.03, 0.03);
        let f = fit_rect(&s.corners()).unwrap();
        assert!(f.pose.yaw < FRAC_PI_2);
        assert!((f.pose.yaw - s.pose.yaw).abs() < 1e-9);
    }

    #[test]
    fn fit_rejects_degenerate() {
        let p = Vec2::new(0.1, 0.1);
        let q = KeypointQuad([p, p, p, p]);
        assert!(matches!(fit_rect(&q), Err(GeometryError::DegenerateQuad(_))));
        let line = KeypointQuad([
            Vec2::new(0.0, 0.0),
            Vec2::new(0.01, 0.0),
            Vec2::new(0.02, 0.0),
            Vec2::new(0.03, 0.0),
        ]);
        assert!(fit_rect(&line).is_err());
    }

    #[test]
    fn identical_and_far() {
        let a = rect(0.3, 0.1, 0.7, 0.05, 0.02);
        assert!(intersects(&a, &a));
        assert_eq!(clearance(&a, &a), 0.0);
        let b = rect(1.3, 0.1, 2.0, 0.06, 0.06);
        assert!(!intersects(&a, &b));
    }

    #[test]
    fn axis_aligned_gap_is_exact() {
        let a = rect(0.0, 0.0, 0.0, 0.04, 0.02);
        let b = rect(0.05, 0.0, 0.0, 0.04, 0.02);
        assert!((clearance(&a, &b) - 0.01).abs() < 1e-15);
        // touching edges intersect
        let c = rect(0.04, 0.0, 0.0, 0.04, 0.02);
        assert!(intersects(&a, &c));
    }

    #[test]
    fn overlap_area_cases() {
        let a = rect(0.0, 0.0, 0.0, 0.04, 0.02);
        assert!((overlap_area(&a, &a) - a.area()).abs() < 1e-15);
        let b = rect(0.02, 0.0, 0.0, 0.04, 0.02);
        assert!((overlap_area(&a, &b) - 0.02 * 0.02).abs() < 1e-15);
        let far = rect(1.0, 0.0, 0.0, 0.04, 0.02);
        assert_eq!(overlap_area(&a, &far), 0.0);
    }

    #[test]
    fn overlap_area_matches_grid_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = rect(0.0, 0.0, rng.random_range(0.0..PI), 0.05, 0.03);
            let b = rect(
                rng.random_range(-0.03..0.03),
                rng.random_range(-0.03..0.03),
                rng.random_range(0.0..PI),
                0.04,
                0.02,
            );
            let h = 2.5e-4;
            let mut count = 0usize;
            for i in 0..400 {
                for j in 0..400 {
                    let p = Vec2::new(-0.05 + (i as f64 + 0.5) * h, -0.05 + (j as f64 + 0.5) * h);
                    if a.contains(p) && b.contains(p) {
                        count += 1;
                    }
                }
            }
            let est = count as f64 * h * h;
            assert!((overlap_area(&a, &b) - est).abs() < 2e-5, "{} vs {est}", overlap_area(&a, &b));
        }
    }

    #[test]
    fn min_area_rect_of_rect_corners_is_itself() {
        let r = rect(0.2, 0.1, 0.4, 0.05, 0.02);
        let m = min_area_rect(&r.corners().0).unwrap();
        assert!((m.area() - r.area()).abs() < 1e-15);
        assert!(yaw_distance(m.pose.yaw, r.pose.yaw) < 1e-9);
        assert!(close(m.center(), r.center(), 1e-12));
    }

    #[test]
    fn min_area_rect_beats_angle_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let pts: Vec<Vec2> = (0..8)
                .map(|_| Vec2::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)))
                .collect();
            let m = min_area_rect(&pts).unwrap();
            for p in &pts {
                let d = *p - m.center();
                assert!(d.dot(m.axis_length()).abs() <= 0.5 * m.extent.length + 1e-12);
                assert!(d.dot(m.axis_width()).abs() <= 0.5 * m.extent.width + 1e-12);
            }
            let scan = (0..2000)
                .map(|k| {
                    let u = Vec2::from_angle(k as f64 * FRAC_PI_2 / 2000.0);
                    let (a, b) = project(&pts, u);
                    let (c, d) = project(&pts, u.perp());
                    (b - a) * (d - c)
                })
                .fold(f64::INFINITY, f64::min);
            assert!(m.area() <= scan + 1e-15);
        }
    }

    #[test]
    fn separating_translation_clears_overlap() {
        let a = rect(0.0, 0.0, 0.3, 0.05, 0.03);
        let b = rect(0.01, 0.005, 1.1, 0.04, 0.02);
        let dir = Vec2::new(1.0, 0.0);
        let t = separating_translation(&a.corners().0, &b.corners().0, dir).unwrap();
        let moved = b.translated(dir * (t + 1e-9));
        assert!(!intersects(&a, &moved));
        let short = b.translated(dir * (t - 1e-6));
        assert!(intersects(&a, &short));
    }
}
