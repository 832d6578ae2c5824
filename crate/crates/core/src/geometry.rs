//! Pinhole cameras, relative poses and the per-hypothesis plane-sweep warp.
//!
//! Poses are world-to-camera: `x_cam = R * x_world + t`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::grid::Grid;
use crate::hypothesis::HypothesisVolume;

/// Source depths at or below this are behind (or on) the camera plane.
pub const BEHIND_CAMERA_EPS: f64 = 1e-6;

/// Depth count assumed when a camera file only gives `depth_min interval`.
pub const DEFAULT_DEPTH_SAMPLES: f64 = 192.0;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with det +1 (deviation {0:.2e})")]
    NotARotation(f64),
    #[error("intrinsics must be upper-triangular with positive focal lengths")]
    BadIntrinsics,
    #[error("depth range must satisfy 0 < min < max, got [{0}, {1}]")]
    BadDepthRange(f64, f64),
    #[error("camera file {file}: {message}")]
    Parse { file: String, message: String },
    #[error("i/o error on {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl CameraModel {
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        depth_min: f64,
        depth_max: f64,
    ) -> Result<Self, GeometryError> {
        let ortho = (rotation * rotation.transpose() - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if ortho > 1e-5 || (det - 1.0).abs() > 1e-5 {
            return Err(GeometryError::NotARotation(ortho.max((det - 1.0).abs())));
        }
        let k = &intrinsics;
        let lower = k[(1, 0)].abs() + k[(2, 0)].abs() + k[(2, 1)].abs();
        if lower > 1e-12 || k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 || (k[(2, 2)] - 1.0).abs() > 1e-9 {
            return Err(GeometryError::BadIntrinsics);
        }
        if !(depth_min > 0.0 && depth_min < depth_max && depth_max.is_finite()) {
            return Err(GeometryError::BadDepthRange(depth_min, depth_max));
        }
        Ok(Self {
            intrinsics,
            rotation,
            translation,
            depth_min,
            depth_max,
        })
    }

    /// Camera looking from `eye` towards `target`; image y points along `-up`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        intrinsics: Matrix3<f64>,
        depth_min: f64,
        depth_max: f64,
    ) -> Result<Self, GeometryError> {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -rotation * eye;
        Self::new(intrinsics, rotation, translation, depth_min, depth_max)
    }

    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    /// Intrinsics for pyramid level `level` (each level halves resolution
    /// with coarse pixel `i` centred on fine coordinate `2i + 0.5`).
    pub fn scaled(&self, level: u32) -> CameraModel {
        let mut k = self.intrinsics;
        for _ in 0..level {
            k[(0, 0)] *= 0.5;
            k[(1, 1)] *= 0.5;
            k[(0, 1)] *= 0.5;
            k[(0, 2)] = (k[(0, 2)] + 0.5) * 0.5 - 0.5;
            k[(1, 2)] = (k[(1, 2)] + 0.5) * 0.5 - 0.5;
        }
        CameraModel {
            intrinsics: k,
            ..self.clone()
        }
    }

    /// Maps a world point to `(u, v, z)` in this camera.
    pub fn project(&self, world: &Vector3<f64>) -> (f64, f64, f64) {
        let cam = self.rotation * world + self.translation;
        let h = self.intrinsics * cam;
        (h.x / h.z, h.y / h.z, cam.z)
    }

    /// World point at pixel `(u, v)` with camera-frame depth `depth`.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let k_inv = self.intrinsics_inverse();
        let cam = k_inv * Vector3::new(u, v, 1.0) * depth;
        self.rotation.transpose() * (cam - self.translation)
    }

    pub fn intrinsics_inverse(&self) -> Matrix3<f64> {
        self.intrinsics
            .try_inverse()
            .expect("validated intrinsics are invertible")
    }
}

/// Maps reference-camera coordinates to source-camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -rt * self.translation,
        }
    }

    /// `other` applied after `self`.
    pub fn then(&self, other: &RelativePose) -> Self {
        Self {
            rotation: other.rotation * self.rotation,
            translation: other.rotation * self.translation + other.translation,
        }
    }

    pub fn rotation_angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }
}

pub fn relative_pose(reference: &CameraModel, source: &CameraModel) -> RelativePose {
    let rotation = source.rotation * reference.rotation.transpose();
    RelativePose {
        rotation,
        translation: source.translation - rotation * reference.translation,
    }
}

/// Result of warping one reference pixel into a source view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Warp {
    pub x: f64,
    pub y: f64,
    /// Depth of the point in the source frame.
    pub z: f64,
    pub valid: bool,
}

/// `K_src * (R * (K_ref^-1 * p * d) + t)` with explicit dehomogenisation.
pub fn warp_pixel(
    p: (f64, f64),
    depth: f64,
    reference: &CameraModel,
    rel: &RelativePose,
    k_src: &Matrix3<f64>,
) -> Warp {
    ViewWarp::new(&reference.intrinsics, rel, k_src).warp(p.0, p.1, depth)
}

/// Plane-sweep warp with the matrix products folded once per view pair:
/// `h = A * [x, y, 1] * d + b`.
#[derive(Debug, Clone, Copy)]
pub struct ViewWarp {
    a: Matrix3<f64>,
    b: Vector3<f64>,
}

impl ViewWarp {
    pub fn new(k_ref: &Matrix3<f64>, rel: &RelativePose, k_src: &Matrix3<f64>) -> Self {
        let k_ref_inv = k_ref.try_inverse().expect("intrinsics are invertible");
        Self {
            a: k_src * rel.rotation * k_ref_inv,
            b: k_src * rel.translation,
        }
    }

    pub fn between(reference: &CameraModel, source: &CameraModel) -> Self {
        Self::new(
            &reference.intrinsics,
            &relative_pose(reference, source),
            &source.intrinsics,
        )
    }

    /// The ray direction for pixel `(x, y)`; reuse it across hypotheses.
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        self.a * Vector3::new(x, y, 1.0)
    }

    #[inline]
    pub fn warp_ray(&self, ray: &Vector3<f64>, depth: f64) -> Warp {
        let h = ray * depth + self.b;
        // K has last row (0, 0, 1), so the homogeneous w equals source z
        let z = h.z;
        if z <= BEHIND_CAMERA_EPS {
            return Warp {
                x: f64::NAN,
                y: f64::NAN,
                z,
                valid: false,
            };
        }
        Warp {
            x: h.x / z,
            y: h.y / z,
            z,
            valid: true,
        }
    }

    #[inline]
    pub fn warp(&self, x: f64, y: f64, depth: f64) -> Warp {
        self.warp_ray(&self.ray(x, y), depth)
    }
}

/// Source features resampled onto every reference pixel and hypothesis.
#[derive(Debug, Clone)]
pub struct WarpedFeatures {
    pub width: usize,
    pub height: usize,
    pub depths: usize,
    pub channels: usize,
    /// `[(y * W + x) * D + j] * C + c`
    pub values: Vec<f32>,
    /// `(y * W + x) * D + j`
    pub mask: Vec<bool>,
}

pub fn warp_feature_map(
    source_features: &Grid,
    hypotheses: &HypothesisVolume,
    reference: &CameraModel,
    rel: &RelativePose,
    k_src: &Matrix3<f64>,
) -> Result<WarpedFeatures, GeometryError> {
    let (w, h) = (hypotheses.width(), hypotheses.height());
    let d = hypotheses.count();
    let c = source_features.channels();
    if hypotheses.depths().len() != w * h * d {
        return Err(GeometryError::Dimension("hypothesis volume is inconsistent".into()));
    }
    let warper = ViewWarp::new(&reference.intrinsics, rel, k_src);
    let mut values = vec![0.0f32; w * h * d * c];
    let mut mask = vec![false; w * h * d];
    values
        .par_chunks_mut(w * d * c)
        .zip(mask.par_chunks_mut(w * d))
        .enumerate()
        .for_each(|(y, (vrow, mrow))| {
            for x in 0..w {
                let ray = warper.ray(x as f64, y as f64);
                for j in 0..d {
                    let wp = warper.warp_ray(&ray, hypotheses.get(x, y, j) as f64);
                    let out = &mut vrow[(x * d + j) * c..(x * d + j + 1) * c];
                    if !wp.valid {
                        out.fill(0.0);
                        continue;
                    }
                    mrow[x * d + j] =
                        source_features.sample_into(wp.x as f32, wp.y as f32, out);
                }
            }
        });
    Ok(WarpedFeatures {
        width: w,
        height: h,
        depths: d,
        channels: c,
        values,
        mask,
    })
}

fn parse_error(file: &str, message: impl Into<String>) -> GeometryError {
    GeometryError::Parse {
        file: file.to_string(),
        message: message.into(),
    }
}

/// Parses an MVSNet-style camera file:
///
/// ```text
/// extrinsic
/// r11 r12 r13 t1
/// r21 r22 r23 t2
/// r31 r32 r33 t3
/// 0 0 0 1
///
/// intrinsic
/// fx 0 cx
/// 0 fy cy
/// 0 0 1
///
/// depth_min depth_interval [depth_max | depth_num depth_max]
/// ```
///
/// With two trailing values the maximum is `depth_min + 192 * interval`.
/// Three values read the third as `depth_max`; four follow the
/// `min interval num max` layout.
pub fn parse_cam_text(text: &str, file: &str) -> Result<CameraModel, GeometryError> {
    let mut extrinsic: Option<Vec<f64>> = None;
    let mut intrinsic: Option<Vec<f64>> = None;
    let mut depth: Option<Vec<f64>> = None;

    let mut lines = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty());

    let numbers = |line: &str| -> Result<Vec<f64>, GeometryError> {
        line.split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| parse_error(file, format!("bad number {t:?}")))
            })
            .collect()
    };

    while let Some(line) = lines.next() {
        match line.to_ascii_lowercase().as_str() {
            "extrinsic" => {
                let mut vals = Vec::with_capacity(16);
                while vals.len() < 16 {
                    let l = lines
                        .next()
                        .ok_or_else(|| parse_error(file, "extrinsic block truncated"))?;
                    vals.extend(numbers(l)?);
                }
                if vals.len() != 16 {
                    return Err(parse_error(file, "extrinsic must hold 16 values"));
                }
                extrinsic = Some(vals);
            }
            "intrinsic" => {
                let mut vals = Vec::with_capacity(9);
                while vals.len() < 9 {
                    let l = lines
                        .next()
                        .ok_or_else(|| parse_error(file, "intrinsic block truncated"))?;
                    vals.extend(numbers(l)?);
                }
                if vals.len() != 9 {
                    return Err(parse_error(file, "intrinsic must hold 9 values"));
                }
                intrinsic = Some(vals);
            }
            _ => {
                let vals = numbers(line)?;
                if depth.is_some() {
                    return Err(parse_error(file, format!("unexpected line {line:?}")));
                }
                depth = Some(vals);
            }
        }
    }

    let e = extrinsic.ok_or_else(|| parse_error(file, "missing extrinsic block"))?;
    let k = intrinsic.ok_or_else(|| parse_error(file, "missing intrinsic block"))?;
    let d = depth.ok_or_else(|| parse_error(file, "missing depth range line"))?;
    let (depth_min, depth_max) = match d.as_slice() {
        [min, interval] => (*min, min + DEFAULT_DEPTH_SAMPLES * interval),
        [min, _interval, max] => (*min, *max),
        [min, _interval, _num, max] => (*min, *max),
        _ => {
            return Err(parse_error(
                file,
                format!("depth line needs 2 to 4 values, got {}", d.len()),
            ))
        }
    };
    let rotation = Matrix3::new(e[0], e[1], e[2], e[4], e[5], e[6], e[8], e[9], e[10]);
    let translation = Vector3::new(e[3], e[7], e[11]);
    let intrinsics = Matrix3::from_row_slice(&k);
    CameraModel::new(intrinsics, rotation, translation, depth_min, depth_max).map_err(|err| {
        parse_error(file, err.to_string())
    })
}

pub fn read_cam_file(path: impl AsRef<Path>) -> Result<CameraModel, GeometryError> {
    let path = path.as_ref();
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| GeometryError::Io {
        file: file.clone(),
        source,
    })?;
    parse_cam_text(&text, &file)
}

/// Writes the four-value depth line (`min interval 192 max`), which other
/// MVSNet tooling also understands.
pub fn format_cam_text(cam: &CameraModel) -> String {
    let mut s = String::from("extrinsic\n");
    for r in 0..3 {
        let _ = writeln!(
            s,
            "{:.17e} {:.17e} {:.17e} {:.17e}",
            cam.rotation[(r, 0)],
            cam.rotation[(r, 1)],
            cam.rotation[(r, 2)],
            cam.translation[r]
        );
    }
    s.push_str("0 0 0 1\n\nintrinsic\n");
    for r in 0..3 {
        let _ = writeln!(
            s,
            "{:.17e} {:.17e} {:.17e}",
            cam.intrinsics[(r, 0)],
            cam.intrinsics[(r, 1)],
            cam.intrinsics[(r, 2)]
        );
    }
    let interval = (cam.depth_max - cam.depth_min) / DEFAULT_DEPTH_SAMPLES;
    let _ = writeln!(
        s,
        "\n{:.17e} {:.17e} {} {:.17e}",
        cam.depth_min, interval, DEFAULT_DEPTH_SAMPLES as u32, cam.depth_max
    );
    s
}

pub fn write_cam_file(path: impl AsRef<Path>, cam: &CameraModel) -> Result<(), GeometryError> {
    let path = path.as_ref();
    std::fs::write(path, format_cam_text(cam)).map_err(|source| GeometryError::Io {
        file: path.display().to_string(),
        source,
    })
}
