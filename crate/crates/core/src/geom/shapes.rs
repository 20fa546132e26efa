//! Closed parametric meshes: lattice solids (boxes, L-blocks), surfaces of
//! revolution (cylinders, spheres, capsules, cups) and icospheres.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::model::{TexturedMesh, Vec3};

/// Axis-aligned box centered at the origin with `n` subdivisions per edge.
pub fn box_mesh(size: Vec3, n: usize) -> TexturedMesh {
    box_grid(size, [n, n, n])
}

/// The 8-vertex, 12-triangle cube `[-0.5, 0.5]^3`.
pub fn unit_cube() -> TexturedMesh {
    box_mesh(Vec3::new(1.0, 1.0, 1.0), 1)
}

/// Box with a per-axis subdivision count, centered at the origin.
pub fn box_grid(size: Vec3, n: [usize; 3]) -> TexturedMesh {
    let n = n.map(|v| v.max(1));
    let cell = Vec3::new(size.x / n[0] as f64, size.y / n[1] as f64, size.z / n[2] as f64);
    lattice_solid(n, cell, -size / 2.0, |_, _, _| true)
}

/// Box subdivided so that no cell edge exceeds `spacing`.
pub fn box_with_spacing(size: Vec3, spacing: f64) -> TexturedMesh {
    let n = [0, 1, 2].map(|i| (size[i] / spacing).ceil().max(1.0) as usize);
    box_grid(size, n)
}

/// Surface of the union of occupied lattice cells. Cells `(i, j, k)` span
/// `origin + cell * [i, i+1] x [j, j+1] x [k, k+1]`.
pub fn lattice_solid(
    dims: [usize; 3],
    cell: Vec3,
    origin: Vec3,
    occupied: impl Fn(usize, usize, usize) -> bool,
) -> TexturedMesh {
    let occ = |i: i64, j: i64, k: i64| -> bool {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < dims[0]
            && (j as usize) < dims[1]
            && (k as usize) < dims[2]
            && occupied(i as usize, j as usize, k as usize)
    };
    let mut index: HashMap<[i64; 3], u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut vid = |p: [i64; 3], vertices: &mut Vec<Vec3>| -> u32 {
        *index.entry(p).or_insert_with(|| {
            vertices.push(Vec3::new(
                origin.x + cell.x * p[0] as f64,
                origin.y + cell.y * p[1] as f64,
                origin.z + cell.z * p[2] as f64,
            ));
            (vertices.len() - 1) as u32
        })
    };
    for i in 0..dims[0] as i64 {
        for j in 0..dims[1] as i64 {
            for k in 0..dims[2] as i64 {
                if !occ(i, j, k) {
                    continue;
                }
                let c = [i, j, k];
                for axis in 0..3 {
                    for sign in [-1i64, 1] {
                        let mut nb = c;
                        nb[axis] += sign;
                        if occ(nb[0], nb[1], nb[2]) {
                            continue;
                        }
                        let (b, cc) = ((axis + 1) % 3, (axis + 2) % 3);
                        let mut base = c;
                        if sign > 0 {
                            base[axis] += 1;
                        }
                        let corner = |db: i64, dc: i64| {
                            let mut p = base;
                            p[b] += db;
                            p[cc] += dc;
                            p
                        };
                        let q = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
                        let ids = q.map(|p| vid(p, &mut vertices));
                        if sign > 0 {
                            faces.push([ids[0], ids[1], ids[2]]);
                            faces.push([ids[0], ids[2], ids[3]]);
                        } else {
                            faces.push([ids[0], ids[2], ids[1]]);
                            faces.push([ids[0], ids[3], ids[2]]);
                        }
                    }
                }
            }
        }
    }
    TexturedMesh {
        vertices,
        faces,
        vertex_colors: None,
    }
}

/// L-shaped block: a `long x depth x height` slab plus an upright leg of
/// width `leg` and height `tall` at the `-x` end. Base at `z = 0`.
pub fn l_block(long: f64, depth: f64, height: f64, leg: f64, tall: f64, spacing: f64) -> TexturedMesh {
    // lattice with breakpoints at the leg and slab boundaries
    let nx1 = (leg / spacing).ceil().max(1.0) as usize;
    let nx2 = ((long - leg) / spacing).ceil().max(1.0) as usize;
    let ny = (depth / spacing).ceil().max(1.0) as usize;
    let nz1 = (height / spacing).ceil().max(1.0) as usize;
    let nz2 = ((tall - height) / spacing).ceil().max(1.0) as usize;
    // uniform lattice requires equal cells; use a non-uniform map instead
    let xs: Vec<f64> = (0..=nx1)
        .map(|i| leg * i as f64 / nx1 as f64)
        .chain((1..=nx2).map(|i| leg + (long - leg) * i as f64 / nx2 as f64))
        .collect();
    let ys: Vec<f64> = (0..=ny).map(|j| depth * j as f64 / ny as f64 - depth / 2.0).collect();
    let zs: Vec<f64> = (0..=nz1)
        .map(|k| height * k as f64 / nz1 as f64)
        .chain((1..=nz2).map(|k| height + (tall - height) * k as f64 / nz2 as f64))
        .collect();
    let dims = [xs.len() - 1, ys.len() - 1, zs.len() - 1];
    let mut mesh = lattice_solid(dims, Vec3::new(1.0, 1.0, 1.0), Vec3::zeros(), |i, _, k| {
        k < nz1 || i < nx1
    });
    for v in &mut mesh.vertices {
        *v = Vec3::new(xs[v.x as usize], ys[v.y as usize], zs[v.z as usize]);
    }
    mesh.vertices
        .iter_mut()
        .for_each(|v| v.x -= long / 2.0);
    mesh
}

/// Surface of revolution about +Z of a profile of `(radius, z)` points that
/// starts and ends on the axis. Faces are oriented outward.
pub fn lathe(profile: &[(f64, f64)], segments: usize) -> TexturedMesh {
    assert!(profile.len() >= 3 && segments >= 3);
    assert!(profile[0].0 == 0.0 && profile[profile.len() - 1].0 == 0.0);
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let bottom = 0u32;
    vertices.push(Vec3::new(0.0, 0.0, profile[0].1));
    let rings = &profile[1..profile.len() - 1];
    for &(r, z) in rings {
        for s in 0..segments {
            let a = 2.0 * PI * s as f64 / segments as f64;
            vertices.push(Vec3::new(r * a.cos(), r * a.sin(), z));
        }
    }
    let top = vertices.len() as u32;
    vertices.push(Vec3::new(0.0, 0.0, profile[profile.len() - 1].1));
    let ring = |k: usize, s: usize| (1 + k * segments + s % segments) as u32;
    for s in 0..segments {
        faces.push([bottom, ring(0, s + 1), ring(0, s)]);
    }
    for k in 0..rings.len() - 1 {
        for s in 0..segments {
            let (a, b, c, d) = (ring(k, s), ring(k, s + 1), ring(k + 1, s + 1), ring(k + 1, s));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    let last = rings.len() - 1;
    for s in 0..segments {
        faces.push([top, ring(last, s), ring(last, s + 1)]);
    }
    let mut mesh = TexturedMesh {
        vertices,
        faces,
        vertex_colors: None,
    };
    if signed_volume(&mesh) < 0.0 {
        for f in &mut mesh.faces {
            f.swap(1, 2);
        }
    }
    mesh
}

/// Split profile segments so none is longer than `spacing`.
pub fn refine_profile(profile: &[(f64, f64)], spacing: f64) -> Vec<(f64, f64)> {
    let mut out = vec![profile[0]];
    for w in profile.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let n = (len / spacing).ceil().max(1.0) as usize;
        for i in 1..=n {
            let t = i as f64 / n as f64;
            out.push((a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t));
        }
    }
    out
}

/// Closed cylinder with its base at `z = 0`.
pub fn cylinder(radius: f64, height: f64, segments: usize, spacing: f64) -> TexturedMesh {
    let profile = refine_profile(&[(0.0, 0.0), (radius, 0.0), (radius, height), (0.0, height)], spacing);
    lathe(&profile, segments)
}

/// UV sphere centered at the origin.
pub fn uv_sphere(radius: f64, segments: usize, stacks: usize) -> TexturedMesh {
    let profile: Vec<(f64, f64)> = (0..=stacks)
        .map(|i| {
            let a = PI * i as f64 / stacks as f64;
            if i == 0 || i == stacks {
                (0.0, -radius * a.cos())
            } else {
                (radius * a.sin(), -radius * a.cos())
            }
        })
        .collect();
    lathe(&profile, segments)
}

/// Capsule of total height `2 * radius + length`, base at `z = 0`.
pub fn capsule(radius: f64, length: f64, segments: usize, stacks: usize) -> TexturedMesh {
    let half = stacks.max(2);
    let mut profile = Vec::new();
    for i in 0..=half {
        let a = PI / 2.0 * i as f64 / half as f64;
        let r = if i == 0 { 0.0 } else { radius * a.sin() };
        profile.push((r, radius - radius * a.cos()));
    }
    for i in 0..=half {
        let a = PI / 2.0 * i as f64 / half as f64;
        let r = if i == half { 0.0 } else { radius * a.cos() };
        profile.push((r, radius + length + radius * a.sin()));
    }
    lathe(&profile, segments)
}

/// Open-topped cup with a solid stub handle on `+x`. Base at `z = 0`.
pub fn mug(radius: f64, height: f64, wall: f64, segments: usize, spacing: f64) -> TexturedMesh {
    let floor = wall.max(height * 0.08);
    let profile = refine_profile(
        &[
            (0.0, 0.0),
            (radius, 0.0),
            (radius, height),
            (radius - wall, height),
            (radius - wall, floor),
            (0.0, floor),
        ],
        spacing,
    );
    let body = lathe(&profile, segments);
    let hx = radius * 0.45;
    let hy = radius * 0.3;
    let hz = height * 0.55;
    let mut handle = box_with_spacing(Vec3::new(hx, hy, hz), spacing);
    // sink the handle slightly into the wall so the union is closed
    let offset = Vec3::new(radius + hx / 2.0 - wall * 0.5, 0.0, height * 0.5);
    handle.vertices.iter_mut().for_each(|v| *v += offset);
    TexturedMesh::merge(&[body, handle])
}

/// Subdivided icosahedron projected to a sphere centered at the origin.
pub fn icosphere(radius: f64, subdivisions: usize) -> TexturedMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) / 2.0).normalize());
                (verts.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    TexturedMesh {
        vertices: verts.into_iter().map(|v| v * radius).collect(),
        faces,
        vertex_colors: None,
    }
}

/// Flat `w x h` rectangle in the `z = 0` plane facing `+z`, centered at the origin.
pub fn quad(w: f64, h: f64) -> TexturedMesh {
    TexturedMesh {
        vertices: vec![
            Vec3::new(-w / 2.0, -h / 2.0, 0.0),
            Vec3::new(w / 2.0, -h / 2.0, 0.0),
            Vec3::new(w / 2.0, h / 2.0, 0.0),
            Vec3::new(-w / 2.0, h / 2.0, 0.0),
        ],
        faces: vec![[0, 1, 2], [0, 2, 3]],
        vertex_colors: None,
    }
}

/// Enclosed volume by the divergence theorem; negative for inward-facing meshes.
pub fn signed_volume(mesh: &TexturedMesh) -> f64 {
    (0..mesh.faces.len())
        .map(|f| {
            let [a, b, c] = mesh.triangle(f);
            a.dot(&b.cross(&c)) / 6.0
        })
        .sum()
}
