//! Occupancy grids of mesh-enclosed volume.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::tri::triangle_box_overlap;
use crate::geom::TriangleBvh;
use crate::model::{TexturedMesh, Vec3};

/// Placement of a voxel grid: cell `(i, j, k)` spans `origin + cell * [i, i+1] x ...`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub origin: Vec3,
    pub cell: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn new(origin: Vec3, cell: f64, dims: [usize; 3]) -> Result<Self> {
        if !(cell > 0.0 && cell.is_finite()) || dims.contains(&0) {
            return Err(Error::Precondition(format!("invalid grid: cell {cell}, dims {dims:?}")));
        }
        Ok(GridSpec { origin, cell, dims })
    }

    /// Grid over `[lo, hi]` with `resolution` cells along the longest axis and `pad` extra cells per side.
    pub fn covering(lo: &Vec3, hi: &Vec3, resolution: usize, pad: usize) -> Result<Self> {
        let ext = hi - lo;
        let longest = ext.max();
        if !(longest > 0.0) || resolution == 0 {
            return Err(Error::Degenerate("cannot grid a zero-extent region".into()));
        }
        let cell = longest / resolution as f64;
        let dims = [0, 1, 2].map(|i| (ext[i] / cell).ceil().max(1.0) as usize + 2 * pad);
        GridSpec::new(lo - Vec3::repeat(pad as f64 * cell), cell, dims)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.cell
    }

    pub fn upper(&self) -> Vec3 {
        self.origin + Vec3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * self.cell
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell.powi(3)
    }

    /// Cell index range along `axis` touched by coordinate interval `[a, b]`, widened by `margin`.
    fn span(&self, axis: usize, a: f64, b: f64, margin: usize) -> (usize, usize) {
        let to = |x: f64| ((x - self.origin[axis]) / self.cell).floor() as i64;
        let max = self.dims[axis] as i64 - 1;
        let lo = (to(a) - margin as i64).clamp(0, max);
        let hi = (to(b) + margin as i64).clamp(0, max);
        (lo as usize, hi as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    bits: Vec<u64>,
}

impl VoxelGrid {
    pub fn empty(spec: GridSpec) -> Self {
        VoxelGrid {
            spec,
            bits: vec![0; spec.len().div_ceil(64)],
        }
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        let n = self.spec.index(i, j, k);
        self.bits[n / 64] >> (n % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize) {
        let n = self.spec.index(i, j, k);
        self.bits[n / 64] |= 1 << (n % 64);
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn volume(&self) -> f64 {
        self.count() as f64 * self.spec.cell_volume()
    }

    fn check(&self, other: &VoxelGrid) {
        assert_eq!(self.spec, other.spec, "voxel grids must share a grid spec");
    }

    pub fn union_with(&mut self, other: &VoxelGrid) {
        self.check(other);
        self.bits.iter_mut().zip(&other.bits).for_each(|(a, b)| *a |= b);
    }

    pub fn intersection_count(&self, other: &VoxelGrid) -> usize {
        self.check(other);
        self.bits.iter().zip(&other.bits).map(|(a, b)| (a & b).count_ones() as usize).sum()
    }

    pub fn union_count(&self, other: &VoxelGrid) -> usize {
        self.check(other);
        self.bits.iter().zip(&other.bits).map(|(a, b)| (a | b).count_ones() as usize).sum()
    }

    /// Intersection over union; 0 when both are empty.
    pub fn iou(&self, other: &VoxelGrid) -> f64 {
        let u = self.union_count(other);
        if u == 0 {
            0.0
        } else {
            self.intersection_count(other) as f64 / u as f64
        }
    }
}

/// Enclosed volume of a mesh. Cells reachable from outside without crossing
/// the surface are exterior; cells strictly enclosed are occupied; cells the
/// surface passes through are occupied when their center is inside by a
/// winding-number vote.
pub fn voxelize_watertight(mesh: &TexturedMesh, spec: &GridSpec) -> Result<VoxelGrid> {
    if mesh.is_empty() {
        return Err(Error::Precondition("cannot voxelize an empty mesh".into()));
    }
    let (lo, hi) = mesh.bounds().expect("nonempty");
    let up = spec.upper();
    if (0..3).any(|a| lo[a] < spec.origin[a] || hi[a] > up[a]) {
        return Err(Error::OutOfBounds(format!(
            "mesh bounds {lo:?}..{hi:?} exceed grid {:?}..{up:?}",
            spec.origin
        )));
    }
    // sub-box around the mesh, one cell of exterior margin where the grid allows
    let r: [(usize, usize); 3] = [0, 1, 2].map(|a| spec.span(a, lo[a], hi[a], 1));
    let sd = [0, 1, 2].map(|a| r[a].1 - r[a].0 + 1);
    let local = |i: usize, j: usize, k: usize| (i - r[0].0) + sd[0] * ((j - r[1].0) + sd[1] * (k - r[2].0));

    const UNKNOWN: u8 = 0;
    const SURFACE: u8 = 1;
    const EXTERIOR: u8 = 2;
    let mut state = vec![UNKNOWN; sd[0] * sd[1] * sd[2]];
    let half = Vec3::repeat(spec.cell / 2.0);
    for f in 0..mesh.faces.len() {
        let tri = mesh.triangle(f);
        let tlo = tri[0].inf(&tri[1]).inf(&tri[2]);
        let thi = tri[0].sup(&tri[1]).sup(&tri[2]);
        let s: [(usize, usize); 3] = [0, 1, 2].map(|a| spec.span(a, tlo[a], thi[a], 1));
        for k in s[2].0.max(r[2].0)..=s[2].1.min(r[2].1) {
            for j in s[1].0.max(r[1].0)..=s[1].1.min(r[1].1) {
                for i in s[0].0.max(r[0].0)..=s[0].1.min(r[0].1) {
                    let n = local(i, j, k);
                    if state[n] != SURFACE && triangle_box_overlap(&spec.center(i, j, k), &half, &tri) {
                        state[n] = SURFACE;
                    }
                }
            }
        }
    }

    let mut queue = VecDeque::new();
    for k in 0..sd[2] {
        for j in 0..sd[1] {
            for i in 0..sd[0] {
                let boundary = i == 0 || j == 0 || k == 0 || i + 1 == sd[0] || j + 1 == sd[1] || k + 1 == sd[2];
                let n = i + sd[0] * (j + sd[1] * k);
                if boundary && state[n] == UNKNOWN {
                    state[n] = EXTERIOR;
                    queue.push_back((i, j, k));
                }
            }
        }
    }
    while let Some((i, j, k)) = queue.pop_front() {
        let mut visit = |i: usize, j: usize, k: usize| {
            let n = i + sd[0] * (j + sd[1] * k);
            if state[n] == UNKNOWN {
                state[n] = EXTERIOR;
                queue.push_back((i, j, k));
            }
        };
        if i > 0 {
            visit(i - 1, j, k);
        }
        if i + 1 < sd[0] {
            visit(i + 1, j, k);
        }
        if j > 0 {
            visit(i, j - 1, k);
        }
        if j + 1 < sd[1] {
            visit(i, j + 1, k);
        }
        if k > 0 {
            visit(i, j, k - 1);
        }
        if k + 1 < sd[2] {
            visit(i, j, k + 1);
        }
    }

    let bvh = TriangleBvh::from_mesh(mesh);
    let surface: Vec<(usize, usize, usize)> = (0..state.len())
        .filter(|&n| state[n] == SURFACE)
        .map(|n| (n % sd[0] + r[0].0, (n / sd[0]) % sd[1] + r[1].0, n / (sd[0] * sd[1]) + r[2].0))
        .collect();
    let inside: Vec<bool> = surface
        .par_iter()
        .map(|&(i, j, k)| bvh.contains(&spec.center(i, j, k), None))
        .collect();

    let mut grid = VoxelGrid::empty(*spec);
    for (n, s) in state.iter().enumerate() {
        if *s == UNKNOWN {
            grid.set(n % sd[0] + r[0].0, (n / sd[0]) % sd[1] + r[1].0, n / (sd[0] * sd[1]) + r[2].0);
        }
    }
    for (&(i, j, k), &inside) in surface.iter().zip(&inside) {
        if inside {
            grid.set(i, j, k);
        }
    }
    Ok(grid)
}

/// Union of the voxelized meshes on one grid.
pub fn voxelize_union(meshes: &[TexturedMesh], spec: &GridSpec) -> Result<VoxelGrid> {
    let grids: Vec<VoxelGrid> = meshes
        .par_iter()
        .map(|m| voxelize_watertight(m, spec))
        .collect::<Result<_>>()?;
    let mut out = VoxelGrid::empty(*spec);
    for g in &grids {
        out.union_with(g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::shapes;
    use crate::model::RigidTransform;

    fn spec_for(mesh: &TexturedMesh, cell: f64, offset: f64) -> GridSpec {
        let (lo, hi) = mesh.bounds().unwrap();
        let origin = lo - Vec3::repeat(2.0 * cell - offset);
        let dims = [0, 1, 2].map(|a| ((hi[a] - origin[a]) / cell).ceil() as usize + 2);
        GridSpec::new(origin, cell, dims).unwrap()
    }

    #[test]
    fn unit_cube_volume() {
        let cube = shapes::unit_cube();
        for offset in [0.0, 0.013, 0.025] {
            let g = voxelize_watertight(&cube, &spec_for(&cube, 0.05, offset)).unwrap();
            assert!((g.volume() - 1.0).abs() < 0.05, "offset {offset}: {}", g.volume());
        }
    }

    #[test]
    fn small_hole_is_closed() {
        let closed = shapes::box_mesh(Vec3::repeat(1.0), 20);
        let mut open = closed.clone();
        open.faces.remove(17);
        let spec = spec_for(&closed, 0.05, 0.0171);
        let a = voxelize_watertight(&closed, &spec).unwrap();
        let b = voxelize_watertight(&open, &spec).unwrap();
        assert_eq!(a, b);
        assert!((a.volume() - 1.0).abs() < 0.05);
    }

    #[test]
    fn plane_has_no_volume() {
        let plane = shapes::quad(0.5, 0.3);
        let cell = 0.01;
        let (lo, hi) = plane.bounds().unwrap();
        let spec = GridSpec::covering(&(lo - Vec3::repeat(0.05)), &(hi + Vec3::repeat(0.05)), 70, 2).unwrap();
        let g = voxelize_watertight(&plane, &GridSpec { cell, ..spec }).unwrap();
        assert!(g.volume() <= cell * 0.15 * 1.1);
    }

    #[test]
    fn overlapping_composite_counts_once() {
        let mug = shapes::mug(0.04, 0.1, 0.006, 48, 0.01);
        let spec = GridSpec::covering(&mug.bounds().unwrap().0, &mug.bounds().unwrap().1, 96, 2).unwrap();
        let g = voxelize_watertight(&mug, &spec).unwrap();
        let v = shapes::signed_volume(&mug);
        // the handle overlaps the wall, so signed volume over-counts slightly
        assert!(g.volume() < v * 1.05 && g.volume() > v * 0.8, "{} vs {v}", g.volume());
    }

    #[test]
    fn mesh_outside_grid_is_an_error() {
        let cube = shapes::unit_cube();
        let spec = GridSpec::new(Vec3::zeros(), 0.1, [5, 5, 5]).unwrap();
        assert!(matches!(voxelize_watertight(&cube, &spec), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn union_of_disjoint_cubes() {
        let a = shapes::unit_cube();
        let b = a.transformed(&RigidTransform::from_translation(Vec3::new(2.0, 0.0, 0.0)));
        let spec = GridSpec::covering(&Vec3::repeat(-0.5), &Vec3::new(2.5, 0.5, 0.5), 60, 2).unwrap();
        let u = voxelize_union(&[a.clone(), b], &spec).unwrap();
        let one = voxelize_watertight(&a, &spec).unwrap();
        assert!((u.volume() - 2.0).abs() < 0.1);
        assert!((one.iou(&u) - 0.5).abs() < 0.01);
    }
}
