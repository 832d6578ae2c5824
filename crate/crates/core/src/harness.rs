//! Synthetic ground truth and point-cloud metrics.
//!
//! Scenes are TOML documents describing a pinhole rig and a handful of
//! textured primitives. Rendering is a per-pixel ray cast with Lambertian
//! shading; the hit parameter of a camera ray with unit z equals depth.

use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::FusedCloud;
use crate::geometry::{CameraModel, GeometryError};
use crate::grid::{Grid, ValidityMask};
use crate::hypothesis::DepthRange;
use crate::pipeline::View;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("scene parse error: {0}")]
    Parse(String),
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("camera {0} sees no primitive")]
    NothingVisible(usize),
    #[error("cloud is empty")]
    EmptyCloud,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub const BUNDLED_SCENES: &[(&str, &str)] = &[
    ("plane", include_str!("../scenes/plane.toml")),
    ("two_planes", include_str!("../scenes/two_planes.toml")),
    ("slanted_step", include_str!("../scenes/slanted_step.toml")),
    ("sphere", include_str!("../scenes/sphere.toml")),
    ("occluder", include_str!("../scenes/occluder.toml")),
];

pub fn bundled_scene(name: &str) -> Option<&'static str> {
    BUNDLED_SCENES.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Defaults to the image centre.
    #[serde(default)]
    pub principal: Option<[f64; 2]>,
    pub depth_min: f64,
    pub depth_max: f64,
    #[serde(default)]
    pub light: Light,
    #[serde(default)]
    pub background: [f32; 3],
    pub cameras: Vec<CameraSpec>,
    pub primitives: Vec<Primitive>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Light {
    pub direction: [f64; 3],
    pub ambient: f32,
}

impl Default for Light {
    fn default() -> Self {
        Self {
            direction: [0.3, 0.4, 1.0],
            ambient: 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    /// World direction that appears upwards; the default makes world axes
    /// coincide with camera axes for a camera looking along +z.
    #[serde(default = "default_up")]
    pub up: [f64; 3],
}

fn default_up() -> [f64; 3] {
    [0.0, -1.0, 0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Texture {
    /// Base frequency in cycles per scene unit.
    pub frequency: f64,
    pub octaves: u32,
    /// 0 gives a flat grey surface.
    pub contrast: f32,
    /// Blend weight of a sinusoidal stripe pattern.
    pub stripes: f32,
    pub seed: u64,
    pub color: [f32; 3],
}

impl Default for Texture {
    fn default() -> Self {
        Self {
            frequency: 4.0,
            octaves: 4,
            contrast: 0.9,
            stripes: 0.0,
            seed: 0,
            color: [1.0, 1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Primitive {
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
        /// Radius of the disk kept around `point`; unbounded when absent.
        #[serde(default)]
        extent: Option<f64>,
        #[serde(default)]
        texture: Texture,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        #[serde(default)]
        texture: Texture,
    },
    Box {
        center: [f64; 3],
        half_size: [f64; 3],
        /// Euler angles (roll, pitch, yaw) in degrees.
        #[serde(default)]
        rotation_deg: [f64; 3],
        #[serde(default)]
        texture: Texture,
    },
}

/// One rendered camera.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub image: Grid,
    pub depth: Grid,
    /// True where a primitive was hit.
    pub mask: ValidityMask,
    /// Index of the primitive hit per pixel.
    pub primitive: Vec<Option<u16>>,
    pub camera: CameraModel,
}

impl RenderedView {
    pub fn view(&self) -> View {
        View {
            image: self.image.clone(),
            camera: self.camera.clone(),
        }
    }
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

impl Scene {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let scene: Scene = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene serialises")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Invalid(m));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive".into());
        }
        if !(self.focal > 0.0) {
            return bad(format!("focal {} must be positive", self.focal));
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return bad(format!("depth range [{}, {}] is invalid", self.depth_min, self.depth_max));
        }
        if self.cameras.is_empty() {
            return bad("no cameras".into());
        }
        if self.primitives.is_empty() {
            return bad("no primitives".into());
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let ok = match p {
                Primitive::Plane { normal, extent, .. } => {
                    v3(*normal).norm() > 0.0 && extent.is_none_or(|e| e > 0.0)
                }
                Primitive::Sphere { radius, .. } => *radius > 0.0,
                Primitive::Box { half_size, .. } => half_size.iter().all(|&h| h > 0.0),
            };
            if !ok {
                return bad(format!("primitive {i} is degenerate"));
            }
        }
        self.camera_models()?;
        Ok(())
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        let [cx, cy] = self
            .principal
            .unwrap_or([(self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0]);
        Matrix3::new(self.focal, 0.0, cx, 0.0, self.focal, cy, 0.0, 0.0, 1.0)
    }

    pub fn camera_models(&self) -> Result<Vec<CameraModel>, HarnessError> {
        let k = self.intrinsics();
        self.cameras
            .iter()
            .map(|c| {
                let forward = v3(c.target) - v3(c.eye);
                if forward.norm() == 0.0 || forward.cross(&v3(c.up)).norm() < 1e-9 {
                    return Err(HarnessError::Invalid("camera up is parallel to its viewing direction".into()));
                }
                Ok(CameraModel::look_at(
                    v3(c.eye),
                    v3(c.target),
                    v3(c.up),
                    k,
                    self.depth_min,
                    self.depth_max,
                )?)
            })
            .collect()
    }

    pub fn depth_range(&self) -> DepthRange {
        DepthRange::new(self.depth_min as f32, self.depth_max as f32).expect("validated range")
    }

    /// Renders every camera.
    pub fn render(&self) -> Result<Vec<RenderedView>, HarnessError> {
        let cams = self.camera_models()?;
        Ok(cams.into_iter().map(|c| self.render_camera(c)).collect())
    }

    /// Renders and checks that every camera sees something.
    pub fn render_checked(&self) -> Result<Vec<RenderedView>, HarnessError> {
        let views = self.render()?;
        validate_visibility(&views)?;
        Ok(views)
    }

    pub fn render_camera(&self, camera: CameraModel) -> RenderedView {
        let (w, h) = (self.width, self.height);
        let k_inv = camera.intrinsics_inverse();
        let r_t = camera.rotation.transpose();
        let origin = camera.center();
        let light = v3(self.light.direction).normalize();
        let pixels: Vec<(f32, [f32; 3], Option<u16>)> = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (x, y) = (i % w, i / w);
                let dir = r_t * (k_inv * Vector3::new(x as f64, y as f64, 1.0));
                match self.cast(&origin, &dir) {
                    Some(hit) => {
                        let tex = match &self.primitives[hit.index] {
                            Primitive::Plane { texture, .. }
                            | Primitive::Sphere { texture, .. }
                            | Primitive::Box { texture, .. } => texture,
                        };
                        let albedo = texture_value(tex, &hit.point);
                        let lambert = hit.normal.dot(&light).abs() as f32;
                        let shade = self.light.ambient + (1.0 - self.light.ambient) * lambert;
                        let rgb = tex.color.map(|c| (c * albedo * shade).clamp(0.0, 1.0));
                        (hit.t as f32, rgb, Some(hit.index as u16))
                    }
                    None => (0.0, self.background, None),
                }
            })
            .collect();
        let mut depth = Grid::new(w, h, 1);
        let mut image = Grid::new(w, h, 3);
        let mut bits = Vec::with_capacity(w * h);
        let mut primitive = Vec::with_capacity(w * h);
        for (i, (d, rgb, p)) in pixels.into_iter().enumerate() {
            depth.data_mut()[i] = d;
            image.data_mut()[3 * i..3 * i + 3].copy_from_slice(&rgb);
            bits.push(p.is_some());
            primitive.push(p);
        }
        RenderedView {
            image,
            depth,
            mask: ValidityMask::from_vec(w, h, bits).expect("sized"),
            primitive,
            camera,
        }
    }

    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (index, p) in self.primitives.iter().enumerate() {
            if let Some((t, normal)) = intersect(p, origin, dir) {
                if t > 1e-9 && best.as_ref().is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        point: origin + dir * t,
                        normal,
                        index,
                    });
                }
            }
        }
        best
    }
}

struct Hit {
    t: f64,
    point: Vector3<f64>,
    normal: Vector3<f64>,
    index: usize,
}

/// Nearest positive hit parameter and unit normal.
fn intersect(p: &Primitive, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    match p {
        Primitive::Plane {
            point, normal, extent, ..
        } => {
            let n = v3(*normal).normalize();
            let denom = n.dot(d);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = n.dot(&(v3(*point) - o)) / denom;
            if t <= 0.0 {
                return None;
            }
            if let Some(e) = extent {
                if (o + d * t - v3(*point)).norm() > *e {
                    return None;
                }
            }
            Some((t, n))
        }
        Primitive::Sphere { center, radius, .. } => {
            let oc = o - v3(*center);
            let a = d.dot(d);
            let b = 2.0 * d.dot(&oc);
            let c = oc.dot(&oc) - radius * radius;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t0 = (-b - sq) / (2.0 * a);
            let t1 = (-b + sq) / (2.0 * a);
            let t = if t0 > 0.0 { t0 } else { t1 };
            (t > 0.0).then(|| (t, (o + d * t - v3(*center)) / *radius))
        }
        Primitive::Box {
            center,
            half_size,
            rotation_deg,
            ..
        } => {
            let [a, b, c] = rotation_deg.map(f64::to_radians);
            let rot = Rotation3::from_euler_angles(a, b, c);
            let ol = rot.inverse() * (o - v3(*center));
            let dl = rot.inverse() * d;
            let (mut t_in, mut t_out) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut n_in = Vector3::zeros();
            let mut n_out = Vector3::zeros();
            for k in 0..3 {
                let h = half_size[k];
                if dl[k].abs() < 1e-15 {
                    if ol[k].abs() > h {
                        return None;
                    }
                    continue;
                }
                let mut t1 = (-h - ol[k]) / dl[k];
                let mut t2 = (h - ol[k]) / dl[k];
                let mut sign = -1.0;
                if t1 > t2 {
                    std::mem::swap(&mut t1, &mut t2);
                    sign = 1.0;
                }
                if t1 > t_in {
                    t_in = t1;
                    n_in = Vector3::zeros();
                    n_in[k] = sign;
                }
                if t2 < t_out {
                    t_out = t2;
                    n_out = Vector3::zeros();
                    n_out[k] = -sign;
                }
            }
            if t_in > t_out || t_out <= 0.0 {
                return None;
            }
            let (t, n) = if t_in > 0.0 { (t_in, n_in) } else { (t_out, n_out) };
            Some((t, rot * n))
        }
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let h = mix64(
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ mix64(ix as u64 ^ mix64(iy as u64 ^ mix64(iz as u64))),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(p: &Vector3<f64>, seed: u64) -> f64 {
    let f = p.map(f64::floor);
    let s = (p - f).map(|t| t * t * (3.0 - 2.0 * t));
    let (ix, iy, iz) = (f.x as i64, f.y as i64, f.z as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { s.x } else { 1.0 - s.x })
                    * (if dy == 1 { s.y } else { 1.0 - s.y })
                    * (if dz == 1 { s.z } else { 1.0 - s.z });
                acc += w * lattice(ix + dx, iy + dy, iz + dz, seed);
            }
        }
    }
    acc
}

/// Albedo in [0, 1] at a world point.
pub fn texture_value(tex: &Texture, p: &Vector3<f64>) -> f32 {
    let mut sum = 0.0;
    let mut norm = 0.0;
    let mut amp = 1.0;
    let mut freq = tex.frequency;
    for o in 0..tex.octaves.max(1) {
        sum += amp * value_noise(&(p * freq), tex.seed.wrapping_add(o as u64));
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    let noise = sum / norm;
    let phase = std::f64::consts::TAU * tex.frequency * 2.0 * (p.x + 0.7 * p.y + 0.3 * p.z);
    let stripes = 0.5 + 0.5 * phase.sin();
    let s = tex.stripes.clamp(0.0, 1.0) as f64;
    let v = (1.0 - s) * noise + s * stripes;
    let c = tex.contrast.clamp(0.0, 1.0);
    ((1.0 - c) * 0.5 + c * v as f32).clamp(0.0, 1.0)
}

pub fn validate_visibility(views: &[RenderedView]) -> Result<(), HarnessError> {
    match views.iter().position(|v| v.mask.count() == 0) {
        Some(i) => Err(HarnessError::NothingVisible(i)),
        None => Ok(()),
    }
}

/// Ground-truth cloud from every `stride`-th pixel of each view.
pub fn gt_cloud(views: &[RenderedView], stride: usize) -> FusedCloud {
    let stride = stride.max(1);
    let mut points = Vec::new();
    for v in views {
        for y in (0..v.depth.height()).step_by(stride) {
            for x in (0..v.depth.width()).step_by(stride) {
                if v.mask.get(x, y) {
                    let p = v.camera.backproject(x as f64, y as f64, v.depth.get(x, y, 0) as f64);
                    points.push([p.x as f32, p.y as f32, p.z as f32]);
                }
            }
        }
    }
    FusedCloud::from_points(points)
}

/// Ground-truth cloud from depth maps where positive depth marks a hit.
pub fn gt_cloud_from_depths(depths: &[Grid], cams: &[CameraModel], stride: usize) -> FusedCloud {
    let stride = stride.max(1);
    let mut points = Vec::new();
    for (depth, cam) in depths.iter().zip(cams) {
        for y in (0..depth.height()).step_by(stride) {
            for x in (0..depth.width()).step_by(stride) {
                let d = depth.get(x, y, 0);
                if d > 0.0 {
                    let p = cam.backproject(x as f64, y as f64, d as f64);
                    points.push([p.x as f32, p.y as f32, p.z as f32]);
                }
            }
        }
    }
    FusedCloud::from_points(points)
}

/// Accuracy, completeness and their mean, in scene units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudMetrics {
    pub accuracy: f64,
    pub completeness: f64,
    pub overall: f64,
}

/// Nearest-neighbour index over a point set.
pub struct PointIndex {
    tree: ImmutableKdTree<f64, 3>,
    len: usize,
}

impl PointIndex {
    pub fn new(points: &[[f32; 3]]) -> Self {
        let pts: Vec<[f64; 3]> = points.iter().map(|p| p.map(f64::from)).collect();
        Self {
            tree: ImmutableKdTree::new_from_slice(&pts),
            len: pts.len(),
        }
    }

    pub fn nearest_distance(&self, q: &[f32; 3]) -> f64 {
        let q = q.map(f64::from);
        self.tree.nearest_one::<SquaredEuclidean>(&q).distance.sqrt()
    }

    /// Distance to the nearest point other than the query's own slot.
    fn second_distance(&self, q: &[f32; 3]) -> Option<f64> {
        if self.len < 2 {
            return None;
        }
        let q = q.map(f64::from);
        let n = self.tree.nearest_n::<SquaredEuclidean>(&q, NonZero::new(2).expect("two"));
        n.get(1).map(|nn| nn.distance.sqrt())
    }
}

/// Median nearest-neighbour spacing within a cloud, ignoring exact duplicates.
pub fn median_spacing(points: &[[f32; 3]]) -> f64 {
    let mut unique: Vec<[f32; 3]> = points.to_vec();
    unique.sort_by(|a, b| a.map(f32::to_bits).cmp(&b.map(f32::to_bits)));
    unique.dedup();
    if unique.len() < 2 {
        return 0.0;
    }
    let index = PointIndex::new(&unique);
    let mut d: Vec<f64> = unique.par_iter().filter_map(|p| index.second_distance(p)).collect();
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

pub fn default_distance_cap(gt: &[[f32; 3]]) -> f64 {
    20.0 * median_spacing(gt)
}

fn mean_capped_distance(from: &[[f32; 3]], to: &PointIndex, cap: f64) -> f64 {
    let d: Vec<f64> = from.par_iter().map(|p| to.nearest_distance(p).min(cap)).collect();
    d.iter().sum::<f64>() / d.len() as f64
}

/// Mean capped nearest-neighbour distances in both directions.
pub fn eval_clouds(pred: &[[f32; 3]], gt: &[[f32; 3]], distance_cap: f64) -> Result<CloudMetrics, HarnessError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(HarnessError::EmptyCloud);
    }
    let accuracy = mean_capped_distance(pred, &PointIndex::new(gt), distance_cap);
    let completeness = mean_capped_distance(gt, &PointIndex::new(pred), distance_cap);
    Ok(CloudMetrics {
        accuracy,
        completeness,
        overall: (accuracy + completeness) / 2.0,
    })
}

/// Points sampled by an error CDF.
pub fn cdf_abscissae() -> Vec<f64> {
    (1..=50).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCdf {
    pub abscissae: Vec<f64>,
    pub values: Vec<f64>,
    pub mean_error: f64,
    pub pixels: usize,
}

impl ErrorCdf {
    /// Fraction of pixels with error at most `x`, read from the sampled table.
    pub fn at(&self, x: f64) -> f64 {
        self.abscissae
            .iter()
            .position(|&a| (a - x).abs() < 1e-9)
            .map(|i| self.values[i])
            .unwrap_or(f64::NAN)
    }
}

/// Absolute inverse-depth errors normalised by the inverse range, for
/// pixels with positive ground truth. Missing predictions count as infinite.
pub fn normalized_inverse_errors(pred: &Grid, gt: &Grid, range: DepthRange) -> Vec<f64> {
    let span = range.inv_length();
    pred.data()
        .iter()
        .zip(gt.data())
        .filter(|(_, &g)| g > 0.0)
        .map(|(&p, &g)| {
            if p > 0.0 {
                (1.0 / p as f64 - 1.0 / g as f64).abs() / span
            } else {
                f64::INFINITY
            }
        })
        .collect()
}

pub fn error_cdf(pred: &Grid, gt: &Grid, range: DepthRange) -> ErrorCdf {
    assert_eq!((pred.width(), pred.height()), (gt.width(), gt.height()));
    cdf_from_errors(&normalized_inverse_errors(pred, gt, range))
}

/// Sampled CDF of precomputed normalised errors.
pub fn cdf_from_errors(errors: &[f64]) -> ErrorCdf {
    let n = errors.len().max(1) as f64;
    let abscissae = cdf_abscissae();
    let values = abscissae
        .iter()
        .map(|&a| errors.iter().filter(|&&e| e <= a).count() as f64 / n)
        .collect();
    let finite: Vec<f64> = errors.iter().copied().filter(|e| e.is_finite()).collect();
    ErrorCdf {
        abscissae,
        values,
        mean_error: finite.iter().sum::<f64>() / finite.len().max(1) as f64,
        pixels: errors.len(),
    }
}

/// Fraction of ground-truth pixels whose relative depth error is at most `tol`.
pub fn relative_depth_accuracy(pred: &Grid, gt: &Grid, tol: f32) -> f64 {
    let (mut n, mut good) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g > 0.0 {
            n += 1;
            if ((p - g) / g).abs() <= tol {
                good += 1;
            }
        }
    }
    good as f64 / n.max(1) as f64
}

/// A plane `normal · x = offset` with its inlier statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFit {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub inliers: Vec<usize>,
    /// Root-mean-square orthogonal distance of the inliers.
    pub rms: f64,
}

fn least_squares_plane(points: &[Vector3<f64>], idx: &[usize]) -> Option<(Vector3<f64>, f64)> {
    if idx.len() < 3 {
        return None;
    }
    let mean = idx.iter().map(|&i| points[i]).sum::<Vector3<f64>>() / idx.len() as f64;
    let mut cov = Matrix3::zeros();
    for &i in idx {
        let d = points[i] - mean;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let k = eig.eigenvalues.imin();
    let n = eig.eigenvectors.column(k).into_owned().normalize();
    Some((n, n.dot(&mean)))
}

/// Sequential RANSAC: repeatedly fits the plane with most inliers within
/// `threshold`, refines it by least squares and removes its inliers.
pub fn fit_planes(points: &[[f32; 3]], count: usize, threshold: f64, iterations: usize, seed: u64) -> Vec<PlaneFit> {
    let pts: Vec<Vector3<f64>> = points.iter().map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)).collect();
    let mut remaining: Vec<usize> = (0..pts.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fits = Vec::new();
    for _ in 0..count {
        if remaining.len() < 3 {
            break;
        }
        let mut best: Option<(usize, Vector3<f64>, f64)> = None;
        for _ in 0..iterations {
            let a = pts[remaining[rng.random_range(0..remaining.len())]];
            let b = pts[remaining[rng.random_range(0..remaining.len())]];
            let c = pts[remaining[rng.random_range(0..remaining.len())]];
            let n = (b - a).cross(&(c - a));
            if n.norm() < 1e-12 {
                continue;
            }
            let n = n.normalize();
            let off = n.dot(&a);
            let score = remaining.iter().filter(|&&i| (n.dot(&pts[i]) - off).abs() <= threshold).count();
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, n, off));
            }
        }
        let Some((_, mut n, mut off)) = best else { break };
        let mut inliers: Vec<usize> = Vec::new();
        for _ in 0..3 {
            inliers = remaining
                .iter()
                .copied()
                .filter(|&i| (n.dot(&pts[i]) - off).abs() <= threshold)
                .collect();
            match least_squares_plane(&pts, &inliers) {
                Some((nn, oo)) => (n, off) = (nn, oo),
                None => break,
            }
        }
        if inliers.len() < 3 {
            break;
        }
        let rms = (inliers.iter().map(|&i| (n.dot(&pts[i]) - off).powi(2)).sum::<f64>() / inliers.len() as f64).sqrt();
        let taken: std::collections::HashSet<usize> = inliers.iter().copied().collect();
        remaining.retain(|i| !taken.contains(i));
        fits.push(PlaneFit {
            normal: n,
            offset: off,
            inliers,
            rms,
        });
    }
    fits
}
