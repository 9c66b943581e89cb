//! Planar geometry for bird's-eye-view scenes: points, oriented rectangles,
//! polygons, signed distances (with gradients where losses need them),
//! overlap tests, and rotated-rectangle intersection-over-union.
//!
//! Conventions: x forward, y left, yaw counterclockwise from +x. Signed
//! distance to a rectangle is negative inside; signed distance to a polygon
//! is positive inside (matching how the drivable-area penalty is phrased).

/// 2-D vector / point in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }

    pub fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    pub fn scale(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Vec2) -> f64 {
        self.sub(o).norm()
    }

    /// Rotate counterclockwise by `angle` radians.
    pub fn rot(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

/// Oriented rectangle: center, half-extents along its local axes, yaw.
#[derive(Clone, Copy, Debug)]
pub struct Obb {
    pub center: Vec2,
    pub half_len: f64,
    pub half_wid: f64,
    pub yaw: f64,
}

impl Obb {
    pub fn new(center: Vec2, length: f64, width: f64, yaw: f64) -> Self {
        Obb {
            center,
            half_len: length / 2.0,
            half_wid: width / 2.0,
            yaw,
        }
    }

    /// Corners in counterclockwise order.
    pub fn corners(&self) -> [Vec2; 4] {
        let ex = Vec2::new(self.yaw.cos(), self.yaw.sin()).scale(self.half_len);
        let ey = Vec2::new(-self.yaw.sin(), self.yaw.cos()).scale(self.half_wid);
        [
            self.center.add(ex).add(ey),
            self.center.sub(ex).add(ey),
            self.center.sub(ex).sub(ey),
            self.center.add(ex).sub(ey),
        ]
    }

    /// Grow both half-extents by `margin`.
    pub fn inflate(&self, margin: f64) -> Obb {
        Obb {
            half_len: self.half_len + margin,
            half_wid: self.half_wid + margin,
            ..*self
        }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let local = p.sub(self.center).rot(-self.yaw);
        local.x.abs() <= self.half_len && local.y.abs() <= self.half_wid
    }
}

/// Signed distance from a point to an oriented rectangle, negative inside,
/// plus its gradient with respect to the point (world frame). The gradient
/// is the unit direction of increasing distance; on the rectangle skeleton
/// (kinks) an arbitrary subgradient is returned.
pub fn obb_sdf_grad(p: Vec2, b: &Obb) -> (f64, Vec2) {
    let local = p.sub(b.center).rot(-b.yaw);
    let qx = local.x.abs() - b.half_len;
    let qy = local.y.abs() - b.half_wid;
    let (d, g_local) = if qx > 0.0 || qy > 0.0 {
        // Outside: distance to the nearest edge/corner.
        let ox = qx.max(0.0);
        let oy = qy.max(0.0);
        let d = (ox * ox + oy * oy).sqrt();
        let inv = if d > 0.0 { 1.0 / d } else { 0.0 };
        (
            d,
            Vec2::new(ox * inv * local.x.signum(), oy * inv * local.y.signum()),
        )
    } else {
        // Inside: negative clearance to the closest side.
        if qx >= qy {
            (qx, Vec2::new(local.x.signum(), 0.0))
        } else {
            (qy, Vec2::new(0.0, local.y.signum()))
        }
    };
    (d, g_local.rot(b.yaw))
}

pub fn obb_sdf(p: Vec2, b: &Obb) -> f64 {
    obb_sdf_grad(p, b).0
}

/// Separating-axis overlap test for two oriented rectangles. Touching
/// counts as overlap.
pub fn obb_overlap(a: &Obb, b: &Obb) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    let axes = [
        Vec2::new(a.yaw.cos(), a.yaw.sin()),
        Vec2::new(-a.yaw.sin(), a.yaw.cos()),
        Vec2::new(b.yaw.cos(), b.yaw.sin()),
        Vec2::new(-b.yaw.sin(), b.yaw.cos()),
    ];
    for axis in axes {
        let proj = |cs: &[Vec2; 4]| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for c in cs {
                let v = c.dot(axis);
                lo = lo.min(v);
                hi = hi.max(v);
            }
            (lo, hi)
        };
        let (alo, ahi) = proj(&ca);
        let (blo, bhi) = proj(&cb);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}

/// Distance from a point to a segment.
pub fn dist_point_segment(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a.add(ab.scale(t)))
}

/// Distance from a point to an open polyline.
pub fn dist_point_polyline(p: Vec2, line: &[Vec2]) -> f64 {
    line.windows(2)
        .map(|w| dist_point_segment(p, w[0], w[1]))
        .fold(f64::INFINITY, f64::min)
}

/// Even-odd (crossing-number) point-in-polygon test on a closed polygon
/// given without a repeated last vertex.
pub fn point_in_polygon(p: Vec2, poly: &[Vec2]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x_int = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < x_int {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Signed distance from a point to a polygon boundary: positive inside,
/// negative outside, with the gradient w.r.t. the point.
pub fn polygon_sdf_grad(p: Vec2, poly: &[Vec2]) -> (f64, Vec2) {
    let n = poly.len();
    let mut best = f64::INFINITY;
    let mut closest = poly[0];
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let ab = b.sub(a);
        let len2 = ab.dot(ab);
        let t = if len2 == 0.0 {
            0.0
        } else {
            (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0)
        };
        let q = a.add(ab.scale(t));
        let d = p.dist(q);
        if d < best {
            best = d;
            closest = q;
        }
    }
    let inside = point_in_polygon(p, poly);
    let dir = p.sub(closest);
    let norm = dir.norm();
    let unit = if norm > 0.0 {
        dir.scale(1.0 / norm)
    } else {
        Vec2::new(0.0, 0.0)
    };
    if inside {
        // Deeper inside (away from the boundary) increases the distance.
        (best, unit)
    } else {
        (-best, unit.scale(-1.0))
    }
}

pub fn polygon_sdf(p: Vec2, poly: &[Vec2]) -> f64 {
    polygon_sdf_grad(p, poly).0
}

fn segments_properly_intersect(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let d1 = b.sub(a).cross(c.sub(a));
    let d2 = b.sub(a).cross(d.sub(a));
    let d3 = d.sub(c).cross(a.sub(c));
    let d4 = d.sub(c).cross(b.sub(c));
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}

/// A polygon is simple when no two non-adjacent edges properly intersect.
pub fn polygon_is_simple(poly: &[Vec2]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        for j in i + 1..n {
            // Skip adjacent edges (sharing a vertex), including the wrap pair.
            if j == i || (j + 1) % n == i || (i + 1) % n == j {
                continue;
            }
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            let (c, d) = (poly[j], poly[(j + 1) % n]);
            if segments_properly_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

pub fn polygon_area(poly: &[Vec2]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        acc += poly[i].cross(poly[(i + 1) % n]);
    }
    acc.abs() / 2.0
}

/// Clip a convex polygon to the half-plane left of the directed line a→b
/// (Sutherland–Hodgman step).
fn clip_halfplane(subject: &[Vec2], a: Vec2, b: Vec2) -> Vec<Vec2> {
    let mut out = Vec::with_capacity(subject.len() + 1);
    let n = subject.len();
    for i in 0..n {
        let cur = subject[i];
        let nxt = subject[(i + 1) % n];
        let cur_in = b.sub(a).cross(cur.sub(a)) >= 0.0;
        let nxt_in = b.sub(a).cross(nxt.sub(a)) >= 0.0;
        if cur_in {
            out.push(cur);
        }
        if cur_in != nxt_in {
            let dir = nxt.sub(cur);
            let denom = b.sub(a).cross(dir);
            if denom.abs() > 1e-12 {
                let t = b.sub(a).cross(a.sub(cur)) / denom;
                out.push(cur.add(dir.scale(t.clamp(0.0, 1.0))));
            }
        }
    }
    out
}

/// Intersection area of two oriented rectangles (convex clipping).
pub fn obb_intersection_area(a: &Obb, b: &Obb) -> f64 {
    // Ensure counterclockwise order for the clip convention.
    let mut subject: Vec<Vec2> = a.corners().to_vec();
    let clip = b.corners();
    for i in 0..4 {
        if subject.len() < 3 {
            return 0.0;
        }
        subject = clip_halfplane(&subject, clip[i], clip[(i + 1) % 4]);
    }
    if subject.len() < 3 {
        0.0
    } else {
        polygon_area(&subject)
    }
}

/// Intersection-over-union of two oriented rectangles.
pub fn obb_iou(a: &Obb, b: &Obb) -> f64 {
    let inter = obb_intersection_area(a, b);
    let area_a = 4.0 * a.half_len * a.half_wid;
    let area_b = 4.0 * b.half_len * b.half_wid;
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use uwm_core::DetRng;

    /// Independent winding-number point-in-polygon implementation, used only
    /// to cross-check the crossing-number version.
    fn winding_number_inside(p: Vec2, poly: &[Vec2]) -> bool {
        let n = poly.len();
        let mut winding = 0i32;
        for i in 0..n {
            let a = poly[i];
            let b = poly[(i + 1) % n];
            if a.y <= p.y {
                if b.y > p.y && b.sub(a).cross(p.sub(a)) > 0.0 {
                    winding += 1;
                }
            } else if b.y <= p.y && b.sub(a).cross(p.sub(a)) < 0.0 {
                winding -= 1;
            }
        }
        winding != 0
    }

    fn unit_square() -> Vec<Vec2> {
        vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(1.0, 1.0),
            Vec2::new(0.0, 1.0),
        ]
    }

    #[test]
    fn sdf_rectangle_center_and_outside() {
        // 4 x 2 box at origin: center clearance is min(2,1) = 1 inside.
        let b = Obb::new(Vec2::new(0.0, 0.0), 4.0, 2.0, 0.0);
        let (d, _) = obb_sdf_grad(Vec2::new(0.0, 0.0), &b);
        assert!((d + 1.0).abs() < 1e-12);
        // 3 m to the side: 3 - 1 = 2 outside.
        let (d, g) = obb_sdf_grad(Vec2::new(0.0, 3.0), &b);
        assert!((d - 2.0).abs() < 1e-12);
        assert!((g.y - 1.0).abs() < 1e-12 && g.x.abs() < 1e-12);
    }

    #[test]
    fn sdf_rotation_equivariance() {
        let mut rng = DetRng::new(3, "geo");
        for _ in 0..50 {
            let b = Obb::new(
                Vec2::new(rng.normal(), rng.normal()),
                1.0 + rng.uniform() * 4.0,
                0.5 + rng.uniform() * 2.0,
                rng.uniform() * 6.0 - 3.0,
            );
            let p = Vec2::new(rng.normal() * 4.0, rng.normal() * 4.0);
            let (d0, _) = obb_sdf_grad(p, &b);
            let angle = rng.uniform() * 6.0 - 3.0;
            let shift = Vec2::new(rng.normal(), rng.normal());
            let b2 = Obb {
                center: b.center.rot(angle).add(shift),
                yaw: b.yaw + angle,
                ..b
            };
            let p2 = p.rot(angle).add(shift);
            let (d1, _) = obb_sdf_grad(p2, &b2);
            assert!((d0 - d1).abs() < 1e-9, "sdf not rigid-invariant");
        }
    }

    #[test]
    fn sdf_gradient_matches_finite_differences() {
        let mut rng = DetRng::new(4, "geo");
        let h = 1e-6;
        let mut checked = 0;
        while checked < 20 {
            let b = Obb::new(
                Vec2::new(rng.normal(), rng.normal()),
                2.0 + rng.uniform() * 3.0,
                1.0 + rng.uniform(),
                rng.uniform() * 3.0,
            );
            let p = Vec2::new(rng.normal() * 3.0, rng.normal() * 3.0);
            let local = p.sub(b.center).rot(-b.yaw);
            // Skip near kinks: the box skeleton and corner diagonals.
            if (local.x.abs() - b.half_len).abs() < 0.05
                || (local.y.abs() - b.half_wid).abs() < 0.05
                || ((local.x.abs() - b.half_len) - (local.y.abs() - b.half_wid)).abs() < 0.05
            {
                continue;
            }
            let (_, g) = obb_sdf_grad(p, &b);
            let fx = (obb_sdf(Vec2::new(p.x + h, p.y), &b) - obb_sdf(Vec2::new(p.x - h, p.y), &b))
                / (2.0 * h);
            let fy = (obb_sdf(Vec2::new(p.x, p.y + h), &b) - obb_sdf(Vec2::new(p.x, p.y - h), &b))
                / (2.0 * h);
            assert!((g.x - fx).abs() < 1e-5 && (g.y - fy).abs() < 1e-5);
            checked += 1;
        }
    }

    #[test]
    fn polygon_sdf_signs_and_gradient() {
        let poly = unit_square();
        let (d_in, _) = polygon_sdf_grad(Vec2::new(0.5, 0.5), &poly);
        assert!((d_in - 0.5).abs() < 1e-12);
        let (d_out, g_out) = polygon_sdf_grad(Vec2::new(0.5, -1.0), &poly);
        assert!((d_out + 1.0).abs() < 1e-12);
        // Moving further down decreases the signed distance.
        assert!((g_out.y - 1.0).abs() < 1e-12);

        let h = 1e-6;
        let p = Vec2::new(0.31, 0.74);
        let (_, g) = polygon_sdf_grad(p, &poly);
        let fx = (polygon_sdf(Vec2::new(p.x + h, p.y), &poly)
            - polygon_sdf(Vec2::new(p.x - h, p.y), &poly))
            / (2.0 * h);
        let fy = (polygon_sdf(Vec2::new(p.x, p.y + h), &poly)
            - polygon_sdf(Vec2::new(p.x, p.y - h), &poly))
            / (2.0 * h);
        assert!((g.x - fx).abs() < 1e-5 && (g.y - fy).abs() < 1e-5);
    }

    #[test]
    fn overlap_detects_separation_and_touch() {
        let a = Obb::new(Vec2::new(0.0, 0.0), 4.0, 2.0, 0.0);
        let b = Obb::new(Vec2::new(10.0, 0.0), 4.0, 2.0, 0.0);
        assert!(!obb_overlap(&a, &b));
        let c = Obb::new(Vec2::new(3.0, 0.0), 4.0, 2.0, 0.0);
        assert!(obb_overlap(&a, &c));
        // Rotated thin box slicing across the corner.
        let d = Obb::new(Vec2::new(0.0, 1.5), 10.0, 0.5, 0.3);
        assert!(obb_overlap(&a, &d));
        // Same box shifted up barely clears the corner.
        let e = Obb::new(Vec2::new(0.0, 2.4), 10.0, 0.5, 0.3);
        assert!(!obb_overlap(&a, &e));
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = Obb::new(Vec2::new(1.0, 2.0), 4.0, 2.0, 0.7);
        assert!((obb_iou(&a, &a) - 1.0).abs() < 1e-9);
        let b = Obb::new(Vec2::new(50.0, 2.0), 4.0, 2.0, 0.7);
        assert!(obb_iou(&a, &b) == 0.0);
    }

    #[test]
    fn iou_half_overlap_axis_aligned() {
        // Two 2x2 squares offset by 1 in x: intersection 2, union 6.
        let a = Obb::new(Vec2::new(0.0, 0.0), 2.0, 2.0, 0.0);
        let b = Obb::new(Vec2::new(1.0, 0.0), 2.0, 2.0, 0.0);
        assert!((obb_iou(&a, &b) - 2.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn simple_polygon_detection() {
        assert!(polygon_is_simple(&unit_square()));
        let bowtie = vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 1.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(0.0, 1.0),
        ];
        assert!(!polygon_is_simple(&bowtie));
    }

    proptest! {
        /// Crossing-number inclusion agrees with an independent
        /// winding-number implementation on random convex-ish polygons.
        #[test]
        fn point_in_polygon_matches_winding_oracle(
            seed in 0u64..500,
            px in -3.0f64..3.0,
            py in -3.0f64..3.0,
        ) {
            let mut rng = DetRng::new(seed, "pip");
            // Random star-shaped polygon around the origin.
            let k = 5 + rng.below(6) as usize;
            let mut poly = Vec::with_capacity(k);
            for i in 0..k {
                let ang = i as f64 / k as f64 * std::f64::consts::TAU;
                let r = 0.5 + rng.uniform() * 2.0;
                poly.push(Vec2::new(r * ang.cos(), r * ang.sin()));
            }
            let p = Vec2::new(px, py);
            // Skip points essentially on the boundary, where the two
            // conventions may legitimately differ.
            if polygon_sdf(p, &poly).abs() > 1e-9 {
                prop_assert_eq!(point_in_polygon(p, &poly), winding_number_inside(p, &poly));
            }
        }

        /// IoU is symmetric and bounded.
        #[test]
        fn iou_symmetric_bounded(seed in 0u64..300) {
            let mut rng = DetRng::new(seed, "iou");
            let a = Obb::new(
                Vec2::new(rng.normal(), rng.normal()),
                1.0 + rng.uniform() * 3.0,
                0.5 + rng.uniform() * 2.0,
                rng.uniform() * 3.0,
            );
            let b = Obb::new(
                Vec2::new(rng.normal(), rng.normal()),
                1.0 + rng.uniform() * 3.0,
                0.5 + rng.uniform() * 2.0,
                rng.uniform() * 3.0,
            );
            let ab = obb_iou(&a, &b);
            let ba = obb_iou(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-7);
            prop_assert!((0.0..=1.0 + 1e-9).contains(&ab));
            // Overlap predicate consistent with positive intersection area.
            if ab > 1e-9 {
                prop_assert!(obb_overlap(&a, &b));
            }
        }
    }
}
