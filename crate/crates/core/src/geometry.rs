//! Planar polygons in either world meters or pixel coordinates.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// A ring of vertices; the closing edge back to the first vertex is implicit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub points: Vec<Point>,
}

impl Polygon {
    pub fn new(points: Vec<Point>) -> Self {
        let mut points = points;
        if points.len() > 1 && points.first() == points.last() {
            points.pop();
        }
        Polygon { points }
    }

    /// Rectangle of size `w` x `h` centred on `c`, rotated by `angle` radians.
    pub fn rotated_rect(c: Point, w: f64, h: f64, angle: f64) -> Self {
        let (s, co) = angle.sin_cos();
        let corners = [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)];
        Polygon::new(
            corners
                .iter()
                .map(|&(u, v)| {
                    let (dx, dy) = (u * w, v * h);
                    Point::new(c.x + dx * co - dy * s, c.y + dx * s + dy * co)
                })
                .collect(),
        )
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.points.len();
        (0..n).map(move |i| (self.points[i], self.points[(i + 1) % n]))
    }

    pub fn signed_area(&self) -> f64 {
        0.5 * self.edges().map(|(a, b)| a.x * b.y - b.x * a.y).sum::<f64>()
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn centroid(&self) -> Point {
        let a = self.signed_area();
        if a.abs() < 1e-15 {
            let n = self.points.len().max(1) as f64;
            let (sx, sy) = self.points.iter().fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
            return Point::new(sx / n, sy / n);
        }
        let (mut cx, mut cy) = (0.0, 0.0);
        for (p, q) in self.edges() {
            let f = p.x * q.y - q.x * p.y;
            cx += (p.x + q.x) * f;
            cy += (p.y + q.y) * f;
        }
        Point::new(cx / (6.0 * a), cy / (6.0 * a))
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Polygon { points: self.points.iter().map(|p| Point::new(p.x + dx, p.y + dy)).collect() }
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Self {
        Polygon { points: self.points.iter().map(|&p| f(p)).collect() }
    }

    /// `(min_x, min_y, max_x, max_y)`.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        self.points.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), p| (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y)),
        )
    }

    /// Non-zero winding rule point-in-polygon test.
    pub fn contains(&self, p: Point) -> bool {
        let mut wn = 0i32;
        for (a, b) in self.edges() {
            if a.y <= p.y {
                if b.y > p.y && cross(a, b, p) > 0.0 {
                    wn += 1;
                }
            } else if b.y <= p.y && cross(a, b, p) < 0.0 {
                wn -= 1;
            }
        }
        wn != 0
    }

    /// At least three vertices, positive area and no two non-adjacent edges touching.
    pub fn is_simple(&self) -> bool {
        let n = self.points.len();
        if n < 3 || self.area() <= 0.0 || self.points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return false;
        }
        let e: Vec<_> = self.edges().collect();
        for i in 0..n {
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if !adjacent && segments_intersect(e[i].0, e[i].1, e[j].0, e[j].1) {
                    return false;
                }
            }
        }
        true
    }

    pub fn is_convex(&self) -> bool {
        let n = self.points.len();
        let mut sign = 0.0f64;
        for i in 0..n {
            let c = cross(self.points[i], self.points[(i + 1) % n], self.points[(i + 2) % n]);
            if c.abs() > 1e-12 {
                if sign != 0.0 && c.signum() != sign {
                    return false;
                }
                sign = c.signum();
            }
        }
        true
    }

    /// Separating-axis overlap test for convex polygons; touching counts as overlap.
    pub fn convex_overlaps(&self, other: &Polygon) -> bool {
        for poly in [self, other] {
            for (a, b) in poly.edges() {
                let axis = (b.y - a.y, a.x - b.x);
                let proj = |p: &Polygon| {
                    p.points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| {
                        let d = q.x * axis.0 + q.y * axis.1;
                        (lo.min(d), hi.max(d))
                    })
                };
                let (a0, a1) = proj(self);
                let (b0, b1) = proj(other);
                if a1 < b0 || b1 < a0 {
                    return false;
                }
            }
        }
        true
    }

    /// Grows a convex polygon outward by `d` (approximately, by scaling about the centroid).
    pub fn inflate(&self, d: f64) -> Self {
        let c = self.centroid();
        self.map(|p| {
            let (dx, dy) = (p.x - c.x, p.y - c.y);
            let r = (dx * dx + dy * dy).sqrt();
            if r < 1e-12 {
                p
            } else {
                let f = (r + d) / r;
                Point::new(c.x + dx * f, c.y + dy * f)
            }
        })
    }
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) - 1e-12 && p.x <= a.x.max(b.x) + 1e-12 && p.y >= a.y.min(b.y) - 1e-12 && p.y <= a.y.max(b.y) + 1e-12
}

pub fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// Andrew's monotone chain; returns the hull counter-clockwise without repeats.
pub fn convex_hull(points: &[Point]) -> Polygon {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return Polygon::new(pts);
    }
    let mut lower: Vec<Point> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    Polygon::new(lower)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square() -> Polygon {
        Polygon::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(1.0, 1.0), Point::new(0.0, 1.0)])
    }

    #[test]
    fn square_area_centroid_containment() {
        let s = unit_square();
        assert_eq!(s.area(), 1.0);
        assert_eq!(s.centroid(), Point::new(0.5, 0.5));
        assert!(s.contains(Point::new(0.5, 0.5)));
        assert!(!s.contains(Point::new(1.5, 0.5)));
        assert!(s.is_simple() && s.is_convex());
    }

    #[test]
    fn bowtie_is_not_simple() {
        let b = Polygon::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 1.0), Point::new(1.0, 0.0), Point::new(0.0, 1.0)]);
        assert!(!b.is_simple());
    }

    #[test]
    fn rotated_rect_keeps_area() {
        let r = Polygon::rotated_rect(Point::new(3.0, 4.0), 2.0, 5.0, 0.7);
        assert!((r.area() - 10.0).abs() < 1e-12);
        let c = r.centroid();
        assert!((c.x - 3.0).abs() < 1e-12 && (c.y - 4.0).abs() < 1e-12);
    }

    #[test]
    fn sat_overlap() {
        let a = unit_square();
        assert!(a.convex_overlaps(&a.translate(0.5, 0.5)));
        assert!(!a.convex_overlaps(&a.translate(1.5, 0.0)));
        let diamond = Polygon::rotated_rect(Point::new(2.2, 0.5), 1.0, 1.0, std::f64::consts::FRAC_PI_4);
        assert!(!a.convex_overlaps(&diamond));
    }

    #[test]
    fn hull_of_square_and_shift() {
        let s = unit_square();
        let mut pts = s.points.clone();
        pts.extend(s.translate(2.0, 0.0).points);
        let h = convex_hull(&pts);
        assert!((h.area() - 3.0).abs() < 1e-12);
        assert_eq!(h.points.len(), 4);
    }
}
