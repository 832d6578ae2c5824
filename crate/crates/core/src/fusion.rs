//! Depth-map filtering, multi-view fusion and PLY clouds.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::CameraModel;
use crate::grid::{Grid, ValidityMask};
use crate::io::{self, IoError};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("fusion needs matching depth, mask, image and camera lists")]
    Inconsistent,
    #[error("invalid filter parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Thresholds for depth-map filtering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterParams {
    pub conf_min: f32,
    /// Round-trip reprojection error in pixels.
    pub reproj_max: f32,
    /// Relative depth difference.
    pub relative_depth_max: f32,
    pub min_consistent_views: usize,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            conf_min: 0.3,
            reproj_max: 1.0,
            relative_depth_max: 0.01,
            min_consistent_views: 2,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(0.0..=1.0).contains(&self.conf_min) {
            return Err(FusionError::BadParams(format!("conf_min {} outside [0, 1]", self.conf_min)));
        }
        if !(self.reproj_max > 0.0) || !(self.relative_depth_max > 0.0) {
            return Err(FusionError::BadParams("thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// Colored points with the number of views that agreed on each.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusedCloud {
    pub points: Vec<[f32; 3]>,
    pub colors: Vec<[u8; 3]>,
    /// Consistent source views per point.
    pub support: Vec<u32>,
}

impl FusedCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn from_points(points: Vec<[f32; 3]>) -> Self {
        let n = points.len();
        Self {
            points,
            colors: vec![[255; 3]; n],
            support: vec![0; n],
        }
    }

    pub fn extend(&mut self, other: FusedCloud) {
        self.points.extend(other.points);
        self.colors.extend(other.colors);
        self.support.extend(other.support);
    }
}

pub fn photometric_filter(depth: &Grid, confidence: &Grid, conf_min: f32) -> ValidityMask {
    assert_eq!(
        (depth.width(), depth.height()),
        (confidence.width(), confidence.height())
    );
    let bits = confidence
        .data()
        .iter()
        .zip(depth.data())
        .map(|(&c, &d)| c >= conf_min && d > 0.0 && d.is_finite())
        .collect();
    ValidityMask::from_vec(depth.width(), depth.height(), bits).expect("same size")
}

/// A pixel of another view that agrees with a reference pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub view: usize,
    pub x: usize,
    pub y: usize,
    /// The partner's 3D point expressed as depth in the reference camera.
    pub depth_in_reference: f32,
}

/// Checks pixel `(x, y)` of view `r` against view `s`: project, look up the
/// nearest source pixel, back-project it, and reproject into `r`.
pub fn check_pair(
    x: usize,
    y: usize,
    depth_r: f32,
    cam_r: &CameraModel,
    depth_s: &Grid,
    cam_s: &CameraModel,
    params: &FilterParams,
) -> Option<(usize, usize, f32)> {
    if !(depth_r > 0.0) {
        return None;
    }
    let world = cam_r.backproject(x as f64, y as f64, depth_r as f64);
    let (u, v, z) = cam_s.project(&world);
    if !(z > 0.0) {
        return None;
    }
    let (qx, qy) = (u.round(), v.round());
    if qx < 0.0 || qy < 0.0 || qx >= depth_s.width() as f64 || qy >= depth_s.height() as f64 {
        return None;
    }
    let (qx, qy) = (qx as usize, qy as usize);
    let ds = depth_s.get(qx, qy, 0);
    if !(ds > 0.0) {
        return None;
    }
    let back = cam_s.backproject(qx as f64, qy as f64, ds as f64);
    let (ru, rv, rz) = cam_r.project(&back);
    let reproj = ((ru - x as f64).powi(2) + (rv - y as f64).powi(2)).sqrt();
    let rel = (rz - depth_r as f64).abs() / depth_r as f64;
    (reproj <= params.reproj_max as f64 && rel <= params.relative_depth_max as f64).then_some((qx, qy, rz as f32))
}

fn partners(
    r: usize,
    x: usize,
    y: usize,
    depths: &[Grid],
    cams: &[CameraModel],
    params: &FilterParams,
) -> Vec<Correspondence> {
    let d = depths[r].get(x, y, 0);
    (0..depths.len())
        .filter(|&s| s != r)
        .filter_map(|s| {
            check_pair(x, y, d, &cams[r], &depths[s], &cams[s], params).map(|(qx, qy, z)| Correspondence {
                view: s,
                x: qx,
                y: qy,
                depth_in_reference: z,
            })
        })
        .collect()
}

/// Keeps pixels consistent with at least `min_consistent_views` other views.
pub fn geometric_filter(depths: &[Grid], cams: &[CameraModel], params: &FilterParams) -> Vec<ValidityMask> {
    (0..depths.len())
        .map(|r| {
            let (w, h) = (depths[r].width(), depths[r].height());
            let bits = (0..w * h)
                .into_par_iter()
                .map(|i| {
                    let n = partners(r, i % w, i / w, depths, cams, params).len();
                    n >= params.min_consistent_views
                })
                .collect();
            ValidityMask::from_vec(w, h, bits).expect("sized")
        })
        .collect()
}

/// Photometric and geometric masks combined per view.
pub fn filter_views(
    depths: &[Grid],
    confidences: &[Grid],
    cams: &[CameraModel],
    params: &FilterParams,
) -> Result<Vec<ValidityMask>, FusionError> {
    params.validate()?;
    if depths.len() != confidences.len() || depths.len() != cams.len() {
        return Err(FusionError::Inconsistent);
    }
    let geo = geometric_filter(depths, cams, params);
    Ok(depths
        .iter()
        .zip(confidences)
        .zip(geo)
        .map(|((d, c), g)| photometric_filter(d, c, params.conf_min).and(&g))
        .collect())
}

/// Back-projects masked pixels into one cloud.
///
/// Views are visited in order. A pixel already claimed as the partner of an
/// earlier point is skipped; otherwise its depth is averaged with the
/// reference-frame depths of its consistent, unclaimed partners, which are
/// then claimed. Colors come from the emitting view.
pub fn fuse(
    depths: &[Grid],
    masks: &[ValidityMask],
    images: &[Grid],
    cams: &[CameraModel],
    params: &FilterParams,
) -> Result<FusedCloud, FusionError> {
    let n = depths.len();
    if masks.len() != n || images.len() != n || cams.len() != n {
        return Err(FusionError::Inconsistent);
    }
    let mut used: Vec<Vec<bool>> = depths.iter().map(|d| vec![false; d.width() * d.height()]).collect();
    let mut cloud = FusedCloud::default();
    for r in 0..n {
        let (w, h) = (depths[r].width(), depths[r].height());
        let snapshot = &used;
        let batch: Vec<(usize, [f32; 3], [u8; 3], u32, Vec<Correspondence>)> = (0..w * h)
            .into_par_iter()
            .filter_map(|i| {
                if !masks[r].bits()[i] || snapshot[r][i] {
                    return None;
                }
                let (x, y) = (i % w, i / w);
                let all = partners(r, x, y, depths, cams, params);
                let support = all.len() as u32;
                let free: Vec<Correspondence> = all
                    .into_iter()
                    .filter(|c| {
                        let wi = depths[c.view].width();
                        masks[c.view].get(c.x, c.y) && !snapshot[c.view][c.y * wi + c.x]
                    })
                    .collect();
                let own = depths[r].get(x, y, 0) as f64;
                let mean = (own + free.iter().map(|c| c.depth_in_reference as f64).sum::<f64>())
                    / (1 + free.len()) as f64;
                let p = cams[r].backproject(x as f64, y as f64, mean);
                let color = pixel_color(&images[r], x, y);
                Some((i, to_f32(&p), color, support, free))
            })
            .collect();
        for (i, p, color, support, free) in batch {
            if used[r][i] {
                continue;
            }
            used[r][i] = true;
            for c in free {
                let wi = depths[c.view].width();
                used[c.view][c.y * wi + c.x] = true;
            }
            cloud.points.push(p);
            cloud.colors.push(color);
            cloud.support.push(support);
        }
    }
    Ok(cloud)
}

fn to_f32(p: &Vector3<f64>) -> [f32; 3] {
    [p.x as f32, p.y as f32, p.z as f32]
}

fn pixel_color(image: &Grid, x: usize, y: usize) -> [u8; 3] {
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let px = image.pixel(x, y);
    if px.len() >= 3 {
        [q(px[0]), q(px[1]), q(px[2])]
    } else {
        [q(px[0]); 3]
    }
}

/// Back-projects every positive depth of one view.
pub fn backproject_depth(depth: &Grid, cam: &CameraModel, mask: Option<&ValidityMask>) -> FusedCloud {
    let (w, h) = (depth.width(), depth.height());
    let points: Vec<[f32; 3]> = (0..w * h)
        .into_par_iter()
        .filter_map(|i| {
            let (x, y) = (i % w, i / w);
            let d = depth.get(x, y, 0);
            let keep = d > 0.0 && d.is_finite() && mask.is_none_or(|m| m.get(x, y));
            keep.then(|| to_f32(&cam.backproject(x as f64, y as f64, d as f64)))
        })
        .collect();
    FusedCloud::from_points(points)
}

/// Binary little-endian PLY with float x/y/z and uchar red/green/blue.
pub fn write_ply(cloud: &FusedCloud, path: impl AsRef<Path>) -> Result<(), FusionError> {
    let path = path.as_ref();
    let mut w = io::create_file(path)?;
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    );
    let mut body = Vec::with_capacity(header.len() + cloud.len() * 15);
    body.extend_from_slice(header.as_bytes());
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        for v in p {
            body.extend_from_slice(&v.to_le_bytes());
        }
        body.extend_from_slice(c);
    }
    w.write_all(&body).map_err(|e| io::write_err(path, e))?;
    io::finish(w, path)?;
    Ok(())
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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8], little: bool) -> f64 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let mut a = [0u8; $n];
                a.copy_from_slice(&b[..$n]);
                (if little { <$t>::from_le_bytes(a) } else { <$t>::from_be_bytes(a) }) as f64
            }};
        }
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => num!(i16, 2),
            Self::U16 => num!(u16, 2),
            Self::I32 => num!(i32, 4),
            Self::U32 => num!(u32, 4),
            Self::F32 => num!(f32, 4),
            Self::F64 => num!(f64, 8),
        }
    }
}

enum PlyFormat {
    Ascii,
    Binary { little: bool },
}

/// Reads the vertex element of a PLY file (ascii or binary). Colors default
/// to white when absent. Elements after the vertices are ignored; elements
/// before them must be fixed-size in binary files.
pub fn read_ply(path: impl AsRef<Path>) -> Result<FusedCloud, FusionError> {
    let bytes = io::read_bytes(path.as_ref())?;
    Ok(decode_ply(&bytes)?)
}

pub fn decode_ply(bytes: &[u8]) -> Result<FusedCloud, IoError> {
    let bad = |m: &str| IoError::MalformedHeader(m.to_string());
    let end = find_subslice(bytes, b"end_header").ok_or_else(|| bad("missing end_header"))?;
    let mut body_start = end + b"end_header".len();
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) != Some(&b'\n') {
        return Err(bad("end_header not followed by newline"));
    }
    body_start += 1;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not text"))?;
    let mut lines = header.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some("ply") {
        return Err(bad("missing ply magic"));
    }
    let mut format = None;
    // (name, count, properties)
    let mut elements: Vec<(String, usize, Vec<(String, Scalar)>)> = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::Binary { little: true }),
            ["format", "binary_big_endian", _] => format = Some(PlyFormat::Binary { little: false }),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count = count.parse().map_err(|_| bad("bad element count"))?;
                elements.push((name.to_string(), count, Vec::new()));
            }
            ["property", "list", ..] => {
                let el = elements.last_mut().ok_or_else(|| bad("property before element"))?;
                if el.0 == "vertex" {
                    return Err(bad("list properties on vertices are unsupported"));
                }
                el.2.push(("list".into(), Scalar::U8));
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| bad("property before element"))?;
                let s = Scalar::parse(ty).ok_or_else(|| bad(&format!("unknown type {ty}")))?;
                el.2.push((name.to_string(), s));
            }
            _ => return Err(bad(&format!("unrecognised header line {line:?}"))),
        }
    }
    let format = format.ok_or_else(|| bad("missing format"))?;
    let vi = elements
        .iter()
        .position(|e| e.0 == "vertex")
        .ok_or_else(|| bad("no vertex element"))?;
    let (_, count, props) = &elements[vi];
    let find = |n: &str| props.iter().position(|p| p.0 == n);
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(bad("vertex lacks x/y/z")),
    };
    let color_idx = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let body = &bytes[body_start..];
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(*count);
    match format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| bad("ascii body is not text"))?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            for e in &elements[..vi] {
                for _ in 0..e.1 {
                    lines.next();
                }
            }
            for _ in 0..*count {
                let line = lines.next().ok_or(IoError::Truncated {
                    expected: *count,
                    found: rows.len(),
                })?;
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| bad("bad ascii value")))
                    .collect::<Result<_, _>>()?;
                if vals.len() < props.len() {
                    return Err(bad("short ascii vertex line"));
                }
                rows.push(vals);
            }
        }
        PlyFormat::Binary { little } => {
            let mut off = 0usize;
            for e in &elements[..vi] {
                if e.2.iter().any(|p| p.0 == "list") {
                    return Err(bad("list element before vertices"));
                }
                off += e.1 * e.2.iter().map(|p| p.1.size()).sum::<usize>();
            }
            let stride: usize = props.iter().map(|p| p.1.size()).sum();
            let expected = off + stride * count;
            if body.len() < expected {
                return Err(IoError::Truncated {
                    expected,
                    found: body.len(),
                });
            }
            for v in 0..*count {
                let mut at = off + v * stride;
                let mut vals = Vec::with_capacity(props.len());
                for (_, s) in props {
                    vals.push(s.read(&body[at..], little));
                    at += s.size();
                }
                rows.push(vals);
            }
        }
    }
    let mut cloud = FusedCloud::default();
    for r in rows {
        cloud.points.push([r[ix] as f32, r[iy] as f32, r[iz] as f32]);
        cloud.colors.push(match color_idx {
            Some([a, b, c]) => [r[a] as u8, r[b] as u8, r[c] as u8],
            None => [255; 3],
        });
        cloud.support.push(0);
    }
    Ok(cloud)
}

fn find_subslice(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}
