//! Bounding-volume hierarchy over triangles, shared by the renderer, the
//! voxelizer, registration scoring and gripper collision checks.

use super::tri::{closest_point_on_triangle, ray_triangle, triangle_box_overlap};
use crate::model::{RigidTransform, TexturedMesh, Vec3};

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriRef {
    /// Index of the mesh this triangle came from.
    pub owner: u32,
    /// Face index within the owner mesh.
    pub face: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub t: f64,
    pub u: f64,
    pub v: f64,
    /// Index into the BVH's triangle storage.
    pub slot: usize,
    pub tri: TriRef,
}

#[derive(Debug, Clone, Copy)]
pub struct Closest {
    pub point: Vec3,
    pub dist_sq: f64,
    pub slot: usize,
    pub tri: TriRef,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    lo: Vec3,
    hi: Vec3,
    /// Leaf: first triangle slot. Interior: index of left child (right is `left + 1`).
    first: u32,
    count: u32,
}

#[derive(Debug, Clone)]
pub struct TriangleBvh {
    tris: Vec<[Vec3; 3]>,
    refs: Vec<TriRef>,
    nodes: Vec<Node>,
}

impl TriangleBvh {
    pub fn from_mesh(mesh: &TexturedMesh) -> Self {
        Self::from_meshes(std::iter::once((mesh, None)))
    }

    /// Build over several meshes, each optionally posed. Owner ids follow iteration order.
    pub fn from_meshes<'a>(meshes: impl IntoIterator<Item = (&'a TexturedMesh, Option<&'a RigidTransform>)>) -> Self {
        let mut tris = Vec::new();
        let mut refs = Vec::new();
        for (owner, (mesh, pose)) in meshes.into_iter().enumerate() {
            for (fi, f) in mesh.faces.iter().enumerate() {
                let mut t = [
                    mesh.vertices[f[0] as usize],
                    mesh.vertices[f[1] as usize],
                    mesh.vertices[f[2] as usize],
                ];
                if let Some(p) = pose {
                    for v in &mut t {
                        *v = p.apply_point(v);
                    }
                }
                tris.push(t);
                refs.push(TriRef {
                    owner: owner as u32,
                    face: fi as u32,
                });
            }
        }
        Self::build(tris, refs)
    }

    fn build(tris: Vec<[Vec3; 3]>, refs: Vec<TriRef>) -> Self {
        let n = tris.len();
        let centroids: Vec<Vec3> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<usize> = (0..n).collect();
        let mut nodes = Vec::with_capacity(2 * n / LEAF_SIZE + 1);
        nodes.push(Node {
            lo: Vec3::zeros(),
            hi: Vec3::zeros(),
            first: 0,
            count: 0,
        });
        if n > 0 {
            // (node index, start, end)
            let mut stack = vec![(0usize, 0usize, n)];
            while let Some((node, start, end)) = stack.pop() {
                let (lo, hi) = bounds_of(&tris, &order[start..end]);
                nodes[node].lo = lo;
                nodes[node].hi = hi;
                let count = end - start;
                if count <= LEAF_SIZE {
                    nodes[node].first = start as u32;
                    nodes[node].count = count as u32;
                    continue;
                }
                let (clo, chi) = order[start..end].iter().fold(
                    (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
                    |(l, h), &i| (l.inf(&centroids[i]), h.sup(&centroids[i])),
                );
                let ext = chi - clo;
                let axis = if ext.x >= ext.y && ext.x >= ext.z {
                    0
                } else if ext.y >= ext.z {
                    1
                } else {
                    2
                };
                let mid = start + count / 2;
                order[start..end].select_nth_unstable_by(count / 2, |&a, &b| {
                    centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
                });
                let left = nodes.len();
                nodes.push(Node {
                    lo: Vec3::zeros(),
                    hi: Vec3::zeros(),
                    first: 0,
                    count: 0,
                });
                nodes.push(Node {
                    lo: Vec3::zeros(),
                    hi: Vec3::zeros(),
                    first: 0,
                    count: 0,
                });
                nodes[node].first = left as u32;
                nodes[node].count = 0;
                stack.push((left + 1, mid, end));
                stack.push((left, start, mid));
            }
        }
        let tris_sorted = order.iter().map(|&i| tris[i]).collect();
        let refs_sorted = order.iter().map(|&i| refs[i]).collect();
        TriangleBvh {
            tris: tris_sorted,
            refs: refs_sorted,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.tris.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tris.is_empty()
    }

    pub fn triangle(&self, slot: usize) -> &[Vec3; 3] {
        &self.tris[slot]
    }

    pub fn tri_ref(&self, slot: usize) -> TriRef {
        self.refs[slot]
    }

    pub fn normal(&self, slot: usize) -> Vec3 {
        let t = &self.tris[slot];
        (t[1] - t[0]).cross(&(t[2] - t[0])).normalize()
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        (!self.is_empty()).then(|| (self.nodes[0].lo, self.nodes[0].hi))
    }

    /// Nearest intersection with `t` in `(t_min, t_max)`.
    pub fn nearest_hit(&self, origin: &Vec3, dir: &Vec3, t_min: f64, t_max: f64) -> Option<Hit> {
        if self.is_empty() {
            return None;
        }
        let inv = dir.map(|d| 1.0 / d);
        let mut best: Option<Hit> = None;
        let mut limit = t_max;
        let mut stack = Vec::with_capacity(64);
        stack.push(0usize);
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            match slab(origin, &inv, &node.lo, &node.hi) {
                Some((enter, _)) if enter <= limit => {}
                _ => continue,
            }
            if node.count > 0 {
                let start = node.first as usize;
                for slot in start..start + node.count as usize {
                    if let Some((t, u, v)) = ray_triangle(origin, dir, &self.tris[slot], t_min) {
                        let closer = match &best {
                            None => t < limit,
                            // equal distances resolve to the lower original ordering
                            Some(b) => t < b.t || (t == b.t && self.refs[slot].key() < b.tri.key()),
                        };
                        if closer {
                            limit = t;
                            best = Some(Hit {
                                t,
                                u,
                                v,
                                slot,
                                tri: self.refs[slot],
                            });
                        }
                    }
                }
            } else {
                let l = node.first as usize;
                let (dl, dr) = (
                    slab(origin, &inv, &self.nodes[l].lo, &self.nodes[l].hi).map(|s| s.0),
                    slab(origin, &inv, &self.nodes[l + 1].lo, &self.nodes[l + 1].hi).map(|s| s.0),
                );
                // push the farther child first so the nearer one is visited first
                match (dl, dr) {
                    (Some(a), Some(b)) if a <= b => {
                        stack.push(l + 1);
                        stack.push(l);
                    }
                    (Some(_), Some(_)) => {
                        stack.push(l);
                        stack.push(l + 1);
                    }
                    (Some(_), None) => stack.push(l),
                    (None, Some(_)) => stack.push(l + 1),
                    (None, None) => {}
                }
            }
        }
        best
    }

    /// Every intersection with `t > t_min`, unordered.
    pub fn all_hits(&self, origin: &Vec3, dir: &Vec3, t_min: f64) -> Vec<Hit> {
        let mut hits = Vec::new();
        if self.is_empty() {
            return hits;
        }
        let inv = dir.map(|d| 1.0 / d);
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if slab(origin, &inv, &node.lo, &node.hi).is_none() {
                continue;
            }
            if node.count > 0 {
                let start = node.first as usize;
                for slot in start..start + node.count as usize {
                    if let Some((t, u, v)) = ray_triangle(origin, dir, &self.tris[slot], t_min) {
                        hits.push(Hit {
                            t,
                            u,
                            v,
                            slot,
                            tri: self.refs[slot],
                        });
                    }
                }
            } else {
                stack.push(node.first as usize);
                stack.push(node.first as usize + 1);
            }
        }
        hits
    }

    /// Closest surface point to `p`.
    pub fn closest_point(&self, p: &Vec3) -> Option<Closest> {
        self.closest_point_within(p, f64::INFINITY)
    }

    /// Closest surface point no farther than `max_dist`.
    pub fn closest_point_within(&self, p: &Vec3, max_dist: f64) -> Option<Closest> {
        if self.is_empty() {
            return None;
        }
        let mut best: Option<Closest> = None;
        let mut limit = max_dist * max_dist;
        let mut stack = Vec::with_capacity(64);
        stack.push(0usize);
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if box_dist_sq(p, &node.lo, &node.hi) > limit {
                continue;
            }
            if node.count > 0 {
                let start = node.first as usize;
                for slot in start..start + node.count as usize {
                    let q = closest_point_on_triangle(p, &self.tris[slot]);
                    let d = (q - p).norm_squared();
                    if d < limit || (best.is_none() && d <= limit) {
                        limit = d;
                        best = Some(Closest {
                            point: q,
                            dist_sq: d,
                            slot,
                            tri: self.refs[slot],
                        });
                    }
                }
            } else {
                let l = node.first as usize;
                let dl = box_dist_sq(p, &self.nodes[l].lo, &self.nodes[l].hi);
                let dr = box_dist_sq(p, &self.nodes[l + 1].lo, &self.nodes[l + 1].hi);
                if dl <= dr {
                    stack.push(l + 1);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(l + 1);
                }
            }
        }
        best
    }

    /// Visit triangles whose bounds overlap the query box; the visitor returns
    /// `true` to stop early. Returns whether the traversal was stopped.
    pub fn visit_box(&self, lo: &Vec3, hi: &Vec3, mut visit: impl FnMut(usize, &[Vec3; 3]) -> bool) -> bool {
        if self.is_empty() {
            return false;
        }
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if !boxes_overlap(lo, hi, &node.lo, &node.hi) {
                continue;
            }
            if node.count > 0 {
                let start = node.first as usize;
                for slot in start..start + node.count as usize {
                    let t = &self.tris[slot];
                    let tlo = t[0].inf(&t[1]).inf(&t[2]);
                    let thi = t[0].sup(&t[1]).sup(&t[2]);
                    if boxes_overlap(lo, hi, &tlo, &thi) && visit(slot, t) {
                        return true;
                    }
                }
            } else {
                stack.push(node.first as usize);
                stack.push(node.first as usize + 1);
            }
        }
        false
    }

    /// True if any triangle (optionally filtered by owner) touches the oriented box
    /// `frame * [-half, half]`.
    pub fn intersects_obb(&self, frame: &RigidTransform, half: &Vec3, skip_owner: Option<u32>) -> bool {
        let corners = obb_corners(frame, half);
        let lo = corners.iter().fold(Vec3::repeat(f64::INFINITY), |a, c| a.inf(c));
        let hi = corners.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |a, c| a.sup(c));
        let to_local = frame.inverse();
        self.visit_box(&lo, &hi, |slot, t| {
            if Some(self.refs[slot].owner) == skip_owner {
                return false;
            }
            let local = [
                to_local.apply_point(&t[0]),
                to_local.apply_point(&t[1]),
                to_local.apply_point(&t[2]),
            ];
            triangle_box_overlap(&Vec3::zeros(), half, &local)
        })
    }

    /// Signed crossing count along a ray for triangles of one owner: +1 for
    /// each exit (ray leaving through the outward side), -1 for each entry.
    /// Positive means the origin is enclosed.
    pub fn winding_along(&self, origin: &Vec3, dir: &Vec3, owner: Option<u32>) -> i32 {
        self.all_hits(origin, dir, 0.0)
            .into_iter()
            .filter(|h| owner.is_none_or(|o| h.tri.owner == o))
            .map(|h| if self.normal(h.slot).dot(dir) > 0.0 { 1 } else { -1 })
            .sum()
    }

    /// Majority vote over six near-axis rays, robust to small holes.
    pub fn contains(&self, p: &Vec3, owner: Option<u32>) -> bool {
        let inside = PROBE_DIRS
            .iter()
            .filter(|d| self.winding_along(p, &Vec3::new(d[0], d[1], d[2]), owner) > 0)
            .count();
        inside >= 4
    }
}

/// Axis directions tilted slightly so rays avoid passing exactly through
/// shared edges and vertices of axis-aligned geometry.
pub(crate) const PROBE_DIRS: [[f64; 3]; 6] = [
    [1.0, 1.3e-4, 2.9e-4],
    [-1.0, -2.3e-4, 1.7e-4],
    [3.1e-4, 1.0, 1.1e-4],
    [-1.9e-4, -1.0, -2.7e-4],
    [1.3e-4, 2.1e-4, 1.0],
    [-2.6e-4, 1.5e-4, -1.0],
];

impl TriRef {
    fn key(&self) -> (u32, u32) {
        (self.owner, self.face)
    }
}

pub fn obb_corners(frame: &RigidTransform, half: &Vec3) -> [Vec3; 8] {
    let mut out = [Vec3::zeros(); 8];
    for (i, c) in out.iter_mut().enumerate() {
        let local = Vec3::new(
            if i & 1 == 0 { -half.x } else { half.x },
            if i & 2 == 0 { -half.y } else { half.y },
            if i & 4 == 0 { -half.z } else { half.z },
        );
        *c = frame.apply_point(&local);
    }
    out
}

fn bounds_of(tris: &[[Vec3; 3]], idx: &[usize]) -> (Vec3, Vec3) {
    idx.iter().fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), &i| {
            let t = &tris[i];
            (lo.inf(&t[0]).inf(&t[1]).inf(&t[2]), hi.sup(&t[0]).sup(&t[1]).sup(&t[2]))
        },
    )
}

fn slab(origin: &Vec3, inv: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        if inv[i].is_infinite() {
            // parallel to this slab: inside or never
            if origin[i] < lo[i] || origin[i] > hi[i] {
                return None;
            }
            continue;
        }
        let a = (lo[i] - origin[i]) * inv[i];
        let b = (hi[i] - origin[i]) * inv[i];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    // small slack keeps rays grazing a face inside
    let slack = 1e-12 * (1.0 + t1.abs().min(1e12));
    (t1 + slack >= t0.max(0.0)).then_some((t0.max(0.0), t1))
}

fn box_dist_sq(p: &Vec3, lo: &Vec3, hi: &Vec3) -> f64 {
    let mut d = 0.0;
    for i in 0..3 {
        let v = if p[i] < lo[i] {
            lo[i] - p[i]
        } else if p[i] > hi[i] {
            p[i] - hi[i]
        } else {
            0.0
        };
        d += v * v;
    }
    d
}

fn boxes_overlap(alo: &Vec3, ahi: &Vec3, blo: &Vec3, bhi: &Vec3) -> bool {
    (0..3).all(|i| alo[i] <= bhi[i] && blo[i] <= ahi[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::shapes;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_nearest(mesh: &TexturedMesh, o: &Vec3, d: &Vec3) -> Option<f64> {
        (0..mesh.faces.len())
            .filter_map(|f| ray_triangle(o, d, &mesh.triangle(f), 0.0).map(|h| h.0))
            .min_by(f64::total_cmp)
    }

    #[test]
    fn axis_parallel_ray_through_box_planes() {
        // the ray runs exactly along split planes of the subdivided sphere
        let mesh = shapes::icosphere(0.2, 5)
            .transformed(&RigidTransform::from_translation(Vec3::new(0.0, 0.0, 1.0)));
        let bvh = TriangleBvh::from_mesh(&mesh);
        let hit = bvh.nearest_hit(&Vec3::zeros(), &Vec3::z(), 0.0, f64::INFINITY).unwrap();
        assert!((hit.t - 0.8).abs() < 1e-9);
        assert!(bvh.nearest_hit(&Vec3::new(0.3, 0.0, 0.0), &Vec3::z(), 0.0, f64::INFINITY).is_none());
    }

    #[test]
    fn nearest_hit_matches_brute_force() {
        let mesh = shapes::icosphere(0.5, 3);
        let bvh = TriangleBvh::from_mesh(&mesh);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let o = Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let d = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let got = bvh.nearest_hit(&o, &d, 0.0, f64::INFINITY).map(|h| h.t);
            let want = brute_nearest(&mesh, &o, &d);
            match (got, want) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (None, None) => {}
                other => panic!("mismatch {other:?}"),
            }
        }
    }

    #[test]
    fn closest_point_matches_brute_force() {
        let mesh = shapes::box_mesh(Vec3::new(0.3, 0.2, 0.1), 3);
        let bvh = TriangleBvh::from_mesh(&mesh);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..300 {
            let p = Vec3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            );
            let want = (0..mesh.faces.len())
                .map(|f| (closest_point_on_triangle(&p, &mesh.triangle(f)) - p).norm_squared())
                .fold(f64::INFINITY, f64::min);
            let got = bvh.closest_point(&p).unwrap().dist_sq;
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn containment_of_closed_and_open_meshes() {
        let cube = shapes::box_mesh(Vec3::new(1.0, 1.0, 1.0), 2);
        let bvh = TriangleBvh::from_mesh(&cube);
        assert!(bvh.contains(&Vec3::new(0.1, -0.2, 0.3), None));
        assert!(!bvh.contains(&Vec3::new(0.6, 0.0, 0.0), None));
        let plane = shapes::quad(1.0, 1.0);
        let pb = TriangleBvh::from_mesh(&plane);
        assert!(!pb.contains(&Vec3::new(0.0, 0.0, -0.01), None));
    }

    #[test]
    fn obb_intersection() {
        let cube = shapes::box_mesh(Vec3::new(1.0, 1.0, 1.0), 1);
        let bvh = TriangleBvh::from_mesh(&cube);
        let half = Vec3::new(0.1, 0.1, 0.1);
        assert!(bvh.intersects_obb(&RigidTransform::from_translation(Vec3::new(0.55, 0.0, 0.0)), &half, None));
        assert!(!bvh.intersects_obb(&RigidTransform::from_translation(Vec3::new(0.7, 0.0, 0.0)), &half, None));
        // fully inside: no triangle touched
        assert!(!bvh.intersects_obb(&RigidTransform::identity(), &half, None));
        assert!(!bvh.intersects_obb(&RigidTransform::from_translation(Vec3::new(0.55, 0.0, 0.0)), &half, Some(0)));
    }
}
