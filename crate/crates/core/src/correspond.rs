//! Dense descriptors, mutual-nearest-neighbor matching and lifting of pixel
//! correspondences into paired 3D points.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Mask, ObjectMask, PointCloud, RgbImage, RgbdFrame};
use crate::raster::RenderedView;

pub const DEFAULT_PATCH: usize = 9;
pub const DEFAULT_STRIDE: usize = 4;
pub const DEFAULT_TOP_K: usize = 128;
pub const DEFAULT_MIN_SCORE: f64 = 0.2;
/// Fewest lifted pairs that still constrain a similarity transform.
pub const MIN_LIFTED_PAIRS: usize = 4;

const TENSOR_HEADER: usize = 8;

/// Grid of descriptors; zero vectors mark cells excluded from matching.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMap {
    /// Cells per row.
    pub width: usize,
    /// Cell rows.
    pub height: usize,
    pub dim: usize,
    /// Row-major `height * width * dim`.
    pub data: Vec<f32>,
    /// Pixels between neighboring cells.
    pub stride: usize,
    /// Pixel `(x, y)` of cell `(0, 0)`.
    pub origin: (usize, usize),
}

impl DescriptorMap {
    pub fn empty(dim: usize) -> Self {
        DescriptorMap {
            width: 0,
            height: 0,
            dim,
            data: Vec::new(),
            stride: 1,
            origin: (0, 0),
        }
    }

    /// Build from raw vectors, normalizing each; vectors with negligible norm become invalid.
    pub fn from_raw(
        width: usize,
        height: usize,
        dim: usize,
        mut data: Vec<f32>,
        stride: usize,
        origin: (usize, usize),
    ) -> Result<Self> {
        if data.len() != width * height * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height}x{dim} descriptor grid",
                data.len()
            )));
        }
        if stride == 0 {
            return Err(Error::Precondition("descriptor stride must be positive".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("descriptor", "non-finite value"));
        }
        if dim > 0 {
            for v in data.chunks_mut(dim) {
                let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                if n > 1e-12 {
                    v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
                } else {
                    v.iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
        Ok(DescriptorMap {
            width,
            height,
            dim,
            data,
            stride,
            origin,
        })
    }

    pub fn get(&self, col: usize, row: usize) -> &[f32] {
        let i = (row * self.width + col) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn is_valid(&self, col: usize, row: usize) -> bool {
        self.get(col, row).iter().any(|x| *x != 0.0)
    }

    /// Source-image pixel of a cell.
    pub fn pixel(&self, col: usize, row: usize) -> (usize, usize) {
        (self.origin.0 + col * self.stride, self.origin.1 + row * self.stride)
    }

    /// Valid cells as `(col, row)` in row-major order.
    pub fn valid_cells(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (c, r)))
            .filter(|&(c, r)| self.is_valid(c, r))
            .collect()
    }

    /// Little-endian tensor: `u16 h, u16 w, u32 D`, then row-major `f32` values.
    pub fn encode_tensor(&self) -> Result<Vec<u8>> {
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize || self.dim > u32::MAX as usize {
            return Err(Error::format("descriptor", "grid too large for the tensor header"));
        }
        let mut out = Vec::with_capacity(TENSOR_HEADER + self.data.len() * 4);
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Parse a tensor; grid placement is not part of the file and must be supplied.
    pub fn decode_tensor(bytes: &[u8], stride: usize, origin: (usize, usize)) -> Result<Self> {
        if bytes.len() < TENSOR_HEADER {
            return Err(Error::format("descriptor", "truncated header"));
        }
        let h = u16::from_le_bytes([bytes[0], bytes[1]]) as usize;
        let w = u16::from_le_bytes([bytes[2], bytes[3]]) as usize;
        let d = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let body = &bytes[TENSOR_HEADER..];
        let expected = h
            .checked_mul(w)
            .and_then(|n| n.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format("descriptor", "header overflows"))?;
        if body.len() != expected {
            return Err(Error::format(
                "descriptor",
                format!("expected {expected} data bytes for {h}x{w}x{d}, found {}", body.len()),
            ));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        DescriptorMap::from_raw(w, h, d, data, stride, origin)
    }

    pub fn save_tensor(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_tensor()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_tensor(path: &Path, stride: usize, origin: (usize, usize)) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_tensor(&bytes, stride, origin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// Pixel `(x, y)` in the observed image.
    pub observed: (usize, usize),
    /// Pixel `(x, y)` in the rendered view.
    pub rendered: (usize, usize),
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet {
    /// Sorted by descending score.
    pub pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn gray(p: &[u8; 3]) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

/// Mean-subtracted, L2-normalized grayscale patches on a grid over the mask's
/// bounding box. A cell is kept only when its whole patch lies on the mask.
pub fn zncc_descriptors(image: &RgbImage, mask: &Mask, patch: usize, stride: usize) -> Result<DescriptorMap> {
    if patch.is_multiple_of(2) {
        return Err(Error::Precondition(format!("patch size {patch} must be odd")));
    }
    if stride == 0 {
        return Err(Error::Precondition("stride must be positive".into()));
    }
    if !image.same_shape(mask) {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{}, mask {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    let dim = patch * patch;
    let Some((x0, y0, x1, y1)) = mask.bounding_box() else {
        return Ok(DescriptorMap::empty(dim));
    };
    let half = patch / 2;
    let width = (x1 - x0) / stride + 1;
    let height = (y1 - y0) / stride + 1;
    let rows: Vec<Vec<f32>> = (0..height)
        .into_par_iter()
        .map(|row| {
            let cy = y0 + row * stride;
            let mut out = vec![0.0f32; width * dim];
            for col in 0..width {
                let cx = x0 + col * stride;
                if cx < half || cy < half || cx + half >= image.width() || cy + half >= image.height() {
                    continue;
                }
                let mut vals = Vec::with_capacity(dim);
                let mut inside = true;
                'patch: for y in cy - half..=cy + half {
                    for x in cx - half..=cx + half {
                        if !*mask.get(x, y) {
                            inside = false;
                            break 'patch;
                        }
                        vals.push(gray(image.get(x, y)));
                    }
                }
                if !inside {
                    continue;
                }
                let mean = vals.iter().sum::<f64>() / dim as f64;
                vals.iter_mut().for_each(|v| *v -= mean);
                let norm = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
                // below this the patch is flat up to rounding
                if norm < 1e-6 {
                    continue;
                }
                for (o, v) in out[col * dim..(col + 1) * dim].iter_mut().zip(&vals) {
                    *o = (v / norm) as f32;
                }
            }
            out
        })
        .collect();
    Ok(DescriptorMap {
        width,
        height,
        dim,
        data: rows.concat(),
        stride,
        origin: (x0, y0),
    })
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Best partner of every query row; ties go to the lowest candidate index.
fn best_partners(queries: &[&[f32]], candidates: &[&[f32]]) -> Vec<(usize, f64)> {
    queries
        .par_iter()
        .map(|q| {
            let mut best = (usize::MAX, f64::NEG_INFINITY);
            for (j, c) in candidates.iter().enumerate() {
                let s = dot(q, c);
                if s > best.1 {
                    best = (j, s);
                }
            }
            best
        })
        .collect()
}

/// Mutual nearest neighbors under cosine similarity, at least `min_score`,
/// truncated to the `top_k` best.
pub fn match_descriptors(
    a: &DescriptorMap,
    b: &DescriptorMap,
    top_k: usize,
    min_score: f64,
) -> Result<CorrespondenceSet> {
    let ca = a.valid_cells();
    let cb = b.valid_cells();
    if ca.is_empty() || cb.is_empty() {
        return Ok(CorrespondenceSet::default());
    }
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch(format!(
            "descriptor dimensions {} and {}",
            a.dim, b.dim
        )));
    }
    let va: Vec<&[f32]> = ca.iter().map(|&(c, r)| a.get(c, r)).collect();
    let vb: Vec<&[f32]> = cb.iter().map(|&(c, r)| b.get(c, r)).collect();
    let ab = best_partners(&va, &vb);
    let ba = best_partners(&vb, &va);
    let mut pairs: Vec<(usize, usize, f64)> = ab
        .iter()
        .enumerate()
        .filter(|&(i, &(j, s))| ba[j].0 == i && s >= min_score)
        .map(|(i, &(j, s))| (i, j, s))
        .collect();
    pairs.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
    pairs.truncate(top_k);
    Ok(CorrespondenceSet {
        pairs: pairs
            .into_iter()
            .map(|(i, j, s)| Correspondence {
                observed: a.pixel(ca[i].0, ca[i].1),
                rendered: b.pixel(cb[j].0, cb[j].1),
                score: s,
            })
            .collect(),
    })
}

/// Index-aligned observed (camera frame) and rendered (mesh frame) points for
/// every pair with valid depth on both sides.
pub fn lift_to_3d(
    corr: &CorrespondenceSet,
    observed: &RgbdFrame,
    mask: &ObjectMask,
    rendered: &RenderedView,
) -> Result<(PointCloud, PointCloud)> {
    if mask.width() != observed.width() || mask.height() != observed.height() {
        return Err(Error::DimensionMismatch("mask does not match the observed frame".into()));
    }
    let to_mesh = rendered.camera_pose.inverse();
    let (rw, rh) = (rendered.depth.width(), rendered.depth.height());
    let mut obs = Vec::new();
    let mut ren = Vec::new();
    for c in &corr.pairs {
        let (ox, oy) = c.observed;
        let (vx, vy) = c.rendered;
        if ox >= observed.width() || oy >= observed.height() || vx >= rw || vy >= rh {
            return Err(Error::OutOfBounds(format!(
                "correspondence {:?} -> {:?} outside its images",
                c.observed, c.rendered
            )));
        }
        if !*mask.bits.get(ox, oy) {
            continue;
        }
        let Some(d_obs) = observed.valid_depth(ox, oy) else { continue };
        let d_ren = *rendered.depth.get(vx, vy) as f64;
        if !(d_ren > 0.0 && d_ren.is_finite()) {
            continue;
        }
        obs.push(observed.intrinsics.backproject(ox as f64, oy as f64, d_obs));
        ren.push(to_mesh.apply_point(&rendered.intrinsics.backproject(vx as f64, vy as f64, d_ren)));
    }
    if obs.len() < MIN_LIFTED_PAIRS {
        return Err(Error::InsufficientCorrespondences {
            found: obs.len(),
            required: MIN_LIFTED_PAIRS,
        });
    }
    Ok((PointCloud::from_points(obs), PointCloud::from_points(ren)))
}
