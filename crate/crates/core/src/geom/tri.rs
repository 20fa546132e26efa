//! Per-triangle predicates: ray intersection, closest point, box overlap.

use crate::model::Vec3;

/// Slack on barycentric bounds so rays through shared edges and vertices
/// are not lost to rounding on every adjacent triangle.
const BARY_EPS: f64 = 1e-12;

/// Möller–Trumbore. Returns `(t, u, v)` with barycentric `u, v` for hits with `t > t_min`.
pub fn ray_triangle(origin: &Vec3, dir: &Vec3, tri: &[Vec3; 3], t_min: f64) -> Option<(f64, f64, f64)> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(-BARY_EPS..=1.0 + BARY_EPS).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < -BARY_EPS || u + v > 1.0 + BARY_EPS {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > t_min).then_some((t, u, v))
}

/// Closest point on a triangle to `p` (Ericson, Real-Time Collision Detection 5.1.5).
pub fn closest_point_on_triangle(p: &Vec3, tri: &[Vec3; 3]) -> Vec3 {
    let [a, b, c] = tri;
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Separating-axis overlap test between a triangle and an axis-aligned box
/// given by center and half extents (Akenine-Möller). Touching counts as overlap.
pub fn triangle_box_overlap(center: &Vec3, half: &Vec3, tri: &[Vec3; 3]) -> bool {
    let v = [tri[0] - center, tri[1] - center, tri[2] - center];
    let e = [v[1] - v[0], v[2] - v[1], v[0] - v[2]];
    // rounding slack so a triangle lying on a shared box face touches both boxes
    let slack = 1e-9 * half.max();

    // 9 edge cross-product axes
    for edge in &e {
        for axis_i in 0..3 {
            let mut axis = Vec3::zeros();
            axis[axis_i] = 1.0;
            let a = axis.cross(edge);
            if a.norm_squared() < 1e-30 {
                continue;
            }
            let p0 = a.dot(&v[0]);
            let p1 = a.dot(&v[1]);
            let p2 = a.dot(&v[2]);
            let r = half.x * a.x.abs() + half.y * a.y.abs() + half.z * a.z.abs() + slack * a.norm();
            let lo = p0.min(p1).min(p2);
            let hi = p0.max(p1).max(p2);
            if lo > r || hi < -r {
                return false;
            }
        }
    }
    // box face normals
    for i in 0..3 {
        let lo = v[0][i].min(v[1][i]).min(v[2][i]);
        let hi = v[0][i].max(v[1][i]).max(v[2][i]);
        if lo > half[i] + slack || hi < -half[i] - slack {
            return false;
        }
    }
    // triangle plane
    let n = e[0].cross(&e[1]);
    let d = n.dot(&v[0]);
    let r = half.x * n.x.abs() + half.y * n.y.abs() + half.z * n.z.abs() + slack * n.norm();
    d.abs() <= r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri() -> [Vec3; 3] {
        [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ]
    }

    #[test]
    fn ray_hits_and_misses() {
        let t = tri();
        let hit = ray_triangle(&Vec3::new(0.2, 0.2, 1.0), &Vec3::new(0.0, 0.0, -1.0), &t, 0.0);
        assert!((hit.unwrap().0 - 1.0).abs() < 1e-12);
        assert!(ray_triangle(&Vec3::new(0.8, 0.8, 1.0), &Vec3::new(0.0, 0.0, -1.0), &t, 0.0).is_none());
        assert!(ray_triangle(&Vec3::new(0.2, 0.2, 1.0), &Vec3::new(0.0, 0.0, 1.0), &t, 0.0).is_none());
    }

    #[test]
    fn closest_point_regions() {
        let t = tri();
        let cases = [
            (Vec3::new(0.2, 0.2, 3.0), Vec3::new(0.2, 0.2, 0.0)),
            (Vec3::new(-1.0, -1.0, 0.0), Vec3::new(0.0, 0.0, 0.0)),
            (Vec3::new(2.0, -0.5, 0.0), Vec3::new(1.0, 0.0, 0.0)),
            (Vec3::new(0.5, -1.0, 0.5), Vec3::new(0.5, 0.0, 0.0)),
            (Vec3::new(1.0, 1.0, 0.0), Vec3::new(0.5, 0.5, 0.0)),
        ];
        for (p, want) in cases {
            assert!((closest_point_on_triangle(&p, &t) - want).norm() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn box_overlap_cases() {
        let t = tri();
        let half = Vec3::new(0.1, 0.1, 0.1);
        assert!(triangle_box_overlap(&Vec3::new(0.2, 0.2, 0.0), &half, &t));
        assert!(triangle_box_overlap(&Vec3::new(0.2, 0.2, 0.1), &half, &t));
        assert!(!triangle_box_overlap(&Vec3::new(0.2, 0.2, 0.2), &half, &t));
        // beyond the hypotenuse
        assert!(!triangle_box_overlap(&Vec3::new(0.7, 0.7, 0.0), &half, &t));
        // large box containing the triangle
        assert!(triangle_box_overlap(&Vec3::new(0.0, 0.0, 0.0), &Vec3::new(5.0, 5.0, 5.0), &t));
    }

    #[test]
    fn triangle_on_a_shared_face_touches_both_boxes() {
        let t = [
            Vec3::new(0.5, -0.5, -0.5),
            Vec3::new(0.5, 0.5, -0.5),
            Vec3::new(0.5, 0.5, 0.5),
        ];
        let half = Vec3::repeat(0.025);
        // 0.5 - 0.475 rounds above 0.025
        assert!(triangle_box_overlap(&Vec3::new(0.475, 0.275, 0.025), &half, &t));
        assert!(triangle_box_overlap(&Vec3::new(0.525, 0.275, 0.025), &half, &t));
        assert!(!triangle_box_overlap(&Vec3::new(0.575, 0.275, 0.025), &half, &t));
    }
}
