//! On-disk formats: PNG color / 16-bit depth / masks, JSON intrinsics, binary
//! little-endian PLY and ASCII OBJ meshes.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use super::{CameraIntrinsics, Grid, Mask, PointCloud, RgbImage, RgbdFrame, TexturedMesh, Vec3};
use crate::error::{Error, Result};

pub const COLOR_FILE: &str = "rgb.png";
pub const DEPTH_FILE: &str = "depth.png";
pub const INTRINSICS_FILE: &str = "intrinsics.json";

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let k: CameraIntrinsics = read_json(path)?;
    k.validate()?;
    Ok(k)
}

pub fn load_color(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let rgb = match img {
        DynamicImage::ImageRgb8(rgb) => rgb,
        DynamicImage::ImageRgba8(_) | DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            img.to_rgb8()
        }
        other => {
            return Err(image_err(
                path,
                format!("expected an 8-bit color image, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.pixels().map(|p| p.0).collect();
    Ok(Grid::from_vec(w, h, data).expect("buffer size matches image"))
}

pub fn save_color(path: &Path, img: &RgbImage) -> Result<()> {
    let raw: Vec<u8> = img.data().iter().flatten().copied().collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, raw)
        .expect("buffer size matches image");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

fn load_u16(path: &Path) -> Result<Grid<u16>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    match img {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            Ok(Grid::from_vec(w, h, buf.into_raw()).expect("buffer size matches image"))
        }
        other => Err(image_err(
            path,
            format!("expected a 16-bit single-channel image, found {:?}", other.color()),
        )),
    }
}

fn save_u16(path: &Path, grid: &Grid<u16>) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(grid.width() as u32, grid.height() as u32, grid.data().to_vec())
            .expect("buffer size matches image");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// 16-bit millimeter depth PNG to meters.
pub fn load_depth(path: &Path) -> Result<Grid<f32>> {
    Ok(load_u16(path)?.map(|&mm| mm as f32 / 1000.0))
}

/// Meters to 16-bit millimeters, rounded; invalid or out-of-range depth is stored as 0.
pub fn save_depth(path: &Path, depth: &Grid<f32>) -> Result<()> {
    let mm = depth.map(|&d| {
        if d.is_finite() && d > 0.0 {
            let v = (d as f64 * 1000.0).round();
            if v <= u16::MAX as f64 {
                v as u16
            } else {
                0
            }
        } else {
            0
        }
    });
    save_u16(path, &mm)
}

pub fn load_ids(path: &Path) -> Result<Grid<u16>> {
    load_u16(path)
}

pub fn save_ids(path: &Path, ids: &Grid<u16>) -> Result<()> {
    save_u16(path, ids)
}

/// 8-bit mask PNG; any value above 127 is set.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Grid::from_vec(w, h, img.pixels().map(|p| p.0[0] > 127).collect()).expect("size"))
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let raw: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .expect("buffer size matches image");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

pub fn load_rgbd(color_path: &Path, depth_path: &Path, intrinsics_path: &Path) -> Result<RgbdFrame> {
    let intrinsics = load_intrinsics(intrinsics_path)?;
    let rgb = load_color(color_path)?;
    let depth = load_depth(depth_path)?;
    RgbdFrame::new(rgb, depth, intrinsics)
}

/// Load `rgb.png`, `depth.png` and `intrinsics.json` from a directory.
pub fn load_frame_dir(dir: &Path) -> Result<RgbdFrame> {
    load_rgbd(
        &dir.join(COLOR_FILE),
        &dir.join(DEPTH_FILE),
        &dir.join(INTRINSICS_FILE),
    )
}

pub fn save_frame_dir(dir: &Path, frame: &RgbdFrame) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_color(&dir.join(COLOR_FILE), &frame.rgb)?;
    save_depth(&dir.join(DEPTH_FILE), &frame.depth)?;
    write_json(&dir.join(INTRINSICS_FILE), &frame.intrinsics)
}

// ---------------------------------------------------------------------------
// Meshes

pub fn save_mesh(mesh: &TexturedMesh, path: &Path) -> Result<()> {
    let bytes = match extension(path).as_deref() {
        Some("ply") => encode_ply(mesh),
        Some("obj") => encode_obj(mesh).into_bytes(),
        _ => return Err(Error::format("mesh", format!("unsupported extension: {}", path.display()))),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_mesh(path: &Path) -> Result<TexturedMesh> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mesh = match extension(path).as_deref() {
        Some("ply") => {
            let ply = parse_ply(&bytes)?;
            TexturedMesh::new(ply.vertices, ply.faces, ply.colors)?
        }
        Some("obj") => decode_obj(&bytes)?,
        _ => return Err(Error::format("mesh", format!("unsupported extension: {}", path.display()))),
    };
    Ok(mesh)
}

/// Point clouds are stored as vertex-only PLY files.
pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mesh = TexturedMesh {
        vertices: cloud.points.clone(),
        faces: Vec::new(),
        vertex_colors: cloud.colors.clone(),
    };
    fs::write(path, encode_ply(&mesh)).map_err(|e| Error::io(path, e))
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ply = parse_ply(&bytes)?;
    PointCloud::new(ply.vertices, ply.colors)
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}

pub fn encode_ply(mesh: &TexturedMesh) -> Vec<u8> {
    let colored = mesh.vertex_colors.is_some();
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    let _ = writeln!(header, "element vertex {}", mesh.vertices.len());
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if colored {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    let _ = writeln!(header, "element face {}", mesh.faces.len());
    header.push_str("property list uchar int vertex_indices\nend_header\n");

    let stride = 12 + if colored { 3 } else { 0 };
    let mut out = Vec::with_capacity(header.len() + mesh.vertices.len() * stride + mesh.faces.len() * 13);
    out.extend_from_slice(header.as_bytes());
    for (i, v) in mesh.vertices.iter().enumerate() {
        for c in v.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        if let Some(colors) = &mesh.vertex_colors {
            out.extend_from_slice(&colors[i]);
        }
    }
    for f in &mesh.faces {
        out.push(3);
        for &i in f {
            out.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::format("ply", format!("unknown property type {other}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, Scalar::F32 | Scalar::F64)
    }
}

#[derive(Debug, Clone)]
enum PropKind {
    Scalar(Scalar),
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Property {
    name: String,
    kind: PropKind,
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Encoding {
    Ascii,
    BinaryLe,
    BinaryBe,
}

struct PlyData {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    colors: Option<Vec<[u8; 3]>>,
}

/// Reads scalar values in either text or binary encodings.
struct ValueReader<'a> {
    data: &'a [u8],
    pos: usize,
    encoding: Encoding,
}

impl ValueReader<'_> {
    fn next_token(&mut self) -> Result<&str> {
        while self.pos < self.data.len() && self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format("ply", "unexpected end of ascii body"));
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .map_err(|_| Error::format("ply", "non-utf8 ascii body"))
    }

    fn read(&mut self, ty: Scalar) -> Result<f64> {
        if self.encoding == Encoding::Ascii {
            let tok = self.next_token()?;
            return tok
                .parse::<f64>()
                .map_err(|_| Error::format("ply", format!("bad ascii value {tok:?}")));
        }
        let n = ty.size();
        let bytes = self
            .data
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format("ply", "unexpected end of binary body"))?;
        self.pos += n;
        let mut b = [0u8; 8];
        b[..n].copy_from_slice(bytes);
        if self.encoding == Encoding::BinaryBe {
            b[..n].reverse();
        }
        Ok(match ty {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b),
        })
    }
}

fn parse_ply(bytes: &[u8]) -> Result<PlyData> {
    let mut reader = BufReader::new(bytes);
    let mut line = String::new();
    let mut read_line = |line: &mut String| -> Result<()> {
        line.clear();
        let n = reader
            .read_line(line)
            .map_err(|e| Error::format("ply", e.to_string()))?;
        if n == 0 {
            return Err(Error::format("ply", "header ended before end_header"));
        }
        Ok(())
    };
    read_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(Error::format("ply", "missing ply magic"));
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut header_len = line.len();
    loop {
        read_line(&mut line)?;
        header_len += line.len();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => {
                encoding = Some(match parts.next() {
                    Some("ascii") => Encoding::Ascii,
                    Some("binary_little_endian") => Encoding::BinaryLe,
                    Some("binary_big_endian") => Encoding::BinaryBe,
                    other => return Err(Error::format("ply", format!("unknown format {other:?}"))),
                })
            }
            Some("element") => {
                let name = parts.next().unwrap_or_default().to_string();
                let count = parts
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::format("ply", format!("bad element line {line:?}")))?;
                elements.push(Element {
                    name,
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::format("ply", "property before element"))?;
                let first = parts.next().unwrap_or_default();
                let kind = if first == "list" {
                    let count = Scalar::parse(parts.next().unwrap_or_default())?;
                    let item = Scalar::parse(parts.next().unwrap_or_default())?;
                    PropKind::List { count, item }
                } else {
                    PropKind::Scalar(Scalar::parse(first)?)
                };
                let name = parts
                    .next()
                    .ok_or_else(|| Error::format("ply", "property without name"))?;
                el.props.push(Property {
                    name: name.to_string(),
                    kind,
                });
            }
            Some("end_header") => break,
            Some("comment") | Some("obj_info") | None => {}
            Some(other) => return Err(Error::format("ply", format!("unexpected header keyword {other}"))),
        }
    }
    let encoding = encoding.ok_or_else(|| Error::format("ply", "missing format line"))?;
    let mut values = ValueReader {
        data: bytes,
        pos: header_len,
        encoding,
    };

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut colors: Option<Vec<[u8; 3]>> = None;
    for el in &elements {
        match el.name.as_str() {
            "vertex" => {
                let idx = |n: &str| el.props.iter().position(|p| p.name == n);
                let (xi, yi, zi) = match (idx("x"), idx("y"), idx("z")) {
                    (Some(x), Some(y), Some(z)) => (x, y, z),
                    _ => return Err(Error::format("ply", "vertex element lacks x/y/z")),
                };
                let color_idx = match (idx("red"), idx("green"), idx("blue")) {
                    (Some(r), Some(g), Some(b)) => Some([r, g, b]),
                    _ => None,
                };
                vertices.reserve(el.count);
                let mut cols = Vec::new();
                let mut row = vec![0.0; el.props.len()];
                for _ in 0..el.count {
                    for (k, p) in el.props.iter().enumerate() {
                        row[k] = match p.kind {
                            PropKind::Scalar(ty) => values.read(ty)?,
                            PropKind::List { count, item } => {
                                let n = values.read(count)? as usize;
                                for _ in 0..n {
                                    values.read(item)?;
                                }
                                0.0
                            }
                        };
                    }
                    vertices.push(Vec3::new(row[xi], row[yi], row[zi]));
                    if let Some(ci) = color_idx {
                        let float = matches!(el.props[ci[0]].kind, PropKind::Scalar(t) if t.is_float());
                        let conv = |v: f64| {
                            if float {
                                (v * 255.0).round().clamp(0.0, 255.0) as u8
                            } else {
                                v.clamp(0.0, 255.0) as u8
                            }
                        };
                        cols.push([conv(row[ci[0]]), conv(row[ci[1]]), conv(row[ci[2]])]);
                    }
                }
                if color_idx.is_some() {
                    colors = Some(cols);
                }
            }
            "face" => {
                let target = el
                    .props
                    .iter()
                    .position(|p| p.name == "vertex_indices" || p.name == "vertex_index");
                faces.reserve(el.count);
                for _ in 0..el.count {
                    for (k, p) in el.props.iter().enumerate() {
                        match p.kind {
                            PropKind::Scalar(ty) => {
                                values.read(ty)?;
                            }
                            PropKind::List { count, item } => {
                                let n = values.read(count)? as usize;
                                let mut poly = Vec::with_capacity(n);
                                for _ in 0..n {
                                    let v = values.read(item)?;
                                    if v < 0.0 {
                                        return Err(Error::format("ply", "negative face index"));
                                    }
                                    poly.push(v as u32);
                                }
                                if Some(k) == target {
                                    if n < 3 {
                                        return Err(Error::format("ply", "face with fewer than 3 vertices"));
                                    }
                                    for i in 1..n - 1 {
                                        faces.push([poly[0], poly[i], poly[i + 1]]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            _ => {
                for _ in 0..el.count {
                    for p in &el.props {
                        match p.kind {
                            PropKind::Scalar(ty) => {
                                values.read(ty)?;
                            }
                            PropKind::List { count, item } => {
                                let n = values.read(count)? as usize;
                                for _ in 0..n {
                                    values.read(item)?;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(PlyData {
        vertices,
        faces,
        colors,
    })
}

fn encode_obj(mesh: &TexturedMesh) -> String {
    let mut out = String::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        match &mesh.vertex_colors {
            Some(c) => {
                let [r, g, b] = c[i];
                let _ = writeln!(
                    out,
                    "v {} {} {} {} {} {}",
                    v.x,
                    v.y,
                    v.z,
                    r as f64 / 255.0,
                    g as f64 / 255.0,
                    b as f64 / 255.0
                );
            }
            None => {
                let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
            }
        }
    }
    for f in &mesh.faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

fn decode_obj(bytes: &[u8]) -> Result<TexturedMesh> {
    let mut text = String::new();
    let mut r = bytes;
    r.read_to_string(&mut text)
        .map_err(|_| Error::format("obj", "file is not utf-8"))?;
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let bad = |what: &str| Error::format("obj", format!("line {}: {what}", ln + 1));
        match parts.next() {
            Some("v") => {
                let nums: Vec<f64> = parts
                    .map(|p| p.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("bad vertex coordinate"))?;
                if nums.len() < 3 {
                    return Err(bad("vertex needs three coordinates"));
                }
                vertices.push(Vec3::new(nums[0], nums[1], nums[2]));
                if nums.len() >= 6 {
                    let c = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
                    colors.push(Some([c(nums[3]), c(nums[4]), c(nums[5])]));
                } else {
                    colors.push(None);
                }
            }
            Some("f") => {
                let mut poly = Vec::new();
                for p in parts {
                    let first = p.split('/').next().unwrap_or_default();
                    let idx: i64 = first.parse().map_err(|_| bad("bad face index"))?;
                    let resolved = if idx < 0 {
                        vertices.len() as i64 + idx
                    } else {
                        idx - 1
                    };
                    if resolved < 0 {
                        return Err(bad("face index out of range"));
                    }
                    poly.push(resolved as u32);
                }
                if poly.len() < 3 {
                    return Err(bad("face with fewer than 3 vertices"));
                }
                for i in 1..poly.len() - 1 {
                    faces.push([poly[0], poly[i], poly[i + 1]]);
                }
            }
            _ => {}
        }
    }
    let vertex_colors = if !colors.is_empty() && colors.iter().all(Option::is_some) {
        Some(colors.into_iter().map(Option::unwrap).collect())
    } else {
        None
    };
    TexturedMesh::new(vertices, faces, vertex_colors)
}
