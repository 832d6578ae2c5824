//! Depth hypotheses: stratified initialisation, local perturbation and
//! adaptive propagation.
//!
//! All sampling happens in inverse depth. Random draws come from per-pixel
//! ChaCha8 streams keyed by `(seed, stage, iteration, purpose)` with the word
//! position derived from the pixel index, so results do not depend on thread
//! scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coeffs::{CoeffError, CoefficientSet};
use crate::features::{conv2d, ConvKernel, FeatureError};
use crate::grid::Grid;

#[derive(Debug, Error)]
pub enum HypothesisError {
    #[error("no sampling pattern for {0} samples")]
    UnknownPattern(usize),
    #[error("invalid depth range [{0}, {1}]")]
    BadRange(f32, f32),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("offset layer {layer} emits {found} channels, expected {expected}")]
    OffsetChannels {
        layer: String,
        found: usize,
        expected: usize,
    },
    #[error(transparent)]
    Coefficients(#[from] CoeffError),
    #[error(transparent)]
    Features(#[from] FeatureError),
}

/// Global depth bounds of the reference view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub min: f32,
    pub max: f32,
}

impl DepthRange {
    pub fn new(min: f32, max: f32) -> Result<Self, HypothesisError> {
        if !(min.is_finite() && max.is_finite() && min > 0.0 && max > min) {
            return Err(HypothesisError::BadRange(min, max));
        }
        Ok(Self { min, max })
    }

    /// Smallest inverse depth, `1 / max`.
    pub fn inv_low(&self) -> f64 {
        1.0 / self.max as f64
    }

    /// Largest inverse depth, `1 / min`.
    pub fn inv_high(&self) -> f64 {
        1.0 / self.min as f64
    }

    /// Length of the inverse-depth interval.
    pub fn inv_length(&self) -> f64 {
        self.inv_high() - self.inv_low()
    }

    pub fn clamp(&self, d: f32) -> f32 {
        d.clamp(self.min, self.max)
    }

    pub fn contains(&self, d: f32) -> bool {
        d >= self.min && d <= self.max
    }
}

/// Per-pixel sets of depth hypotheses, stored as `(y * W + x) * D + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisVolume {
    width: usize,
    height: usize,
    count: usize,
    depths: Vec<f32>,
}

impl HypothesisVolume {
    pub fn new(width: usize, height: usize, count: usize, depths: Vec<f32>) -> Result<Self, HypothesisError> {
        if depths.len() != width * height * count {
            return Err(HypothesisError::Dimension(format!(
                "{} depths for {width}x{height}x{count}",
                depths.len()
            )));
        }
        Ok(Self {
            width,
            height,
            count,
            depths,
        })
    }

    pub fn constant(width: usize, height: usize, count: usize, value: f32) -> Self {
        Self {
            width,
            height,
            count,
            depths: vec![value; width * height * count],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Hypotheses per pixel.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn depths(&self) -> &[f32] {
        &self.depths
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, j: usize) -> f32 {
        self.depths[(y * self.width + x) * self.count + j]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.count;
        &self.depths[i..i + self.count]
    }

    /// Bytes held by the depth values.
    pub fn storage_bytes(&self) -> usize {
        self.depths.len() * std::mem::size_of::<f32>()
    }

    /// Per-pixel concatenation of two volumes, sorted by increasing depth.
    pub fn union_sorted(&self, other: &HypothesisVolume) -> Result<HypothesisVolume, HypothesisError> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(HypothesisError::Dimension("union of differently sized volumes".into()));
        }
        let (a, b) = (self.count, other.count);
        let d = a + b;
        let mut depths = vec![0.0f32; self.width * self.height * d];
        depths.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
            out[..a].copy_from_slice(&self.depths[i * a..(i + 1) * a]);
            out[a..].copy_from_slice(&other.depths[i * b..(i + 1) * b]);
            out.sort_by(f32::total_cmp);
        });
        HypothesisVolume::new(self.width, self.height, d, depths)
    }
}

/// Parameters for one cascade stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    /// Stage index: 3 is the coarsest, 1 the finest.
    pub stage: usize,
    pub iterations: usize,
    /// Random hypotheses drawn at the first iteration of stage 3.
    pub initial_hypotheses: usize,
    /// Perturbed hypotheses per pixel.
    pub hypotheses: usize,
    /// Perturbation window as a fraction of the inverse-depth length.
    pub perturbation: f32,
    /// Propagated hypotheses per pixel (0, 8 or 16).
    pub propagation: usize,
    /// Spatial evaluation samples per pixel.
    pub evaluation: usize,
    /// Correlation groups.
    pub groups: usize,
}

impl StageConfig {
    pub fn default_for(stage: usize) -> Self {
        let (iterations, hypotheses, perturbation, propagation) = match stage {
            3 => (2, 16, 0.38, 16),
            2 => (2, 8, 0.09, 8),
            _ => (1, 8, 0.04, 0),
        };
        Self {
            stage,
            iterations,
            initial_hypotheses: 48,
            hypotheses,
            perturbation,
            propagation,
            evaluation: 9,
            groups: 4,
        }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::default_for(3)
    }
}

/// Checks a coarse-to-fine list of stage settings.
pub fn validate_stages(stages: &[StageConfig]) -> Result<(), String> {
    for s in stages {
        if s.iterations == 0 {
            return Err(format!("stage {}: iterations must be at least 1", s.stage));
        }
        if s.hypotheses == 0 || s.initial_hypotheses == 0 {
            return Err(format!("stage {}: hypothesis counts must be positive", s.stage));
        }
        if !(s.perturbation > 0.0) {
            return Err(format!("stage {}: perturbation range must be positive", s.stage));
        }
        if s.groups == 0 {
            return Err(format!("stage {}: groups must be positive", s.stage));
        }
        if !matches!(s.propagation, 0 | 8 | 16) {
            return Err(format!("stage {}: propagation count must be 0, 8 or 16", s.stage));
        }
        if s.evaluation != 9 {
            return Err(format!("stage {}: evaluation count must be 9", s.stage));
        }
    }
    for w in stages.windows(2) {
        if !(w[0].perturbation > w[1].perturbation) {
            return Err(format!(
                "perturbation range must shrink from stage {} to stage {}",
                w[0].stage, w[1].stage
            ));
        }
    }
    Ok(())
}

/// Random-stream purposes, kept distinct so streams never overlap.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Purpose {
    Init = 1,
    Perturb = 2,
}

/// Stream selector for one `(stage, iteration)` pass.
#[derive(Debug, Clone, Copy)]
pub struct StreamKey {
    pub seed: u64,
    pub stage: usize,
    pub iteration: usize,
}

impl StreamKey {
    fn rng(&self, purpose: Purpose, pixel: usize, words_per_pixel: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let stream = ((self.stage as u64) << 40) | ((self.iteration as u64) << 8) | purpose as u64;
        rng.set_stream(stream);
        rng.set_word_pos(pixel as u128 * words_per_pixel as u128);
        rng
    }
}

/// Uniform in the open interval `(0, 1)`.
#[inline]
fn unit(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u32() >> 8) as f64 + 0.5) / (1u64 << 24) as f64
}

/// Index of the equal-width bin of `[lo, hi)` holding `v`.
#[inline]
fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    (((v - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Converts an inverse depth to `f32` depth, nudging by ulps so the stored
/// value re-bins into `bin`.
fn depth_in_bin(inv: f64, lo: f64, hi: f64, bins: usize, bin: usize) -> f32 {
    let mut d = (1.0 / inv) as f32;
    if hi <= lo {
        return d;
    }
    for _ in 0..8 {
        let b = bin_of(1.0 / d as f64, lo, hi, bins);
        if b == bin {
            break;
        }
        // larger bin index means larger inverse depth, so a smaller depth
        let bits = d.to_bits();
        d = f32::from_bits(if b < bin { bits - 1 } else { bits + 1 });
    }
    d
}

/// Draws one sample per equal inverse-depth bin of `[lo, hi]` into `out`,
/// in order of increasing depth.
fn stratified(rng: &mut ChaCha8Rng, lo: f64, hi: f64, out: &mut [f32]) {
    let n = out.len();
    let step = (hi - lo) / n as f64;
    for (i, slot) in out.iter_mut().enumerate() {
        let inv = lo + (i as f64 + unit(rng)) * step;
        *slot = depth_in_bin(inv, lo, hi, n, i);
    }
    out.reverse();
}

/// Stratified random hypotheses over the whole inverse-depth range.
pub fn init_random(
    width: usize,
    height: usize,
    range: DepthRange,
    count: usize,
    key: StreamKey,
) -> HypothesisVolume {
    assert!(count >= 1);
    let (lo, hi) = (range.inv_low(), range.inv_high());
    let mut depths = vec![0.0f32; width * height * count];
    depths.par_chunks_mut(count).enumerate().for_each(|(i, out)| {
        let mut rng = key.rng(Purpose::Init, i, count);
        stratified(&mut rng, lo, hi, out);
        out.iter_mut().for_each(|d| *d = range.clamp(*d));
    });
    HypothesisVolume {
        width,
        height,
        count,
        depths,
    }
}

/// `count` stratified hypotheses per pixel in a window of `fraction * L`
/// inverse depth centred on the previous estimate, clipped to the range.
pub fn perturb(
    prev_depth: &Grid,
    fraction: f32,
    count: usize,
    range: DepthRange,
    key: StreamKey,
) -> HypothesisVolume {
    assert!(count >= 1);
    assert_eq!(prev_depth.channels(), 1);
    let (lo, hi) = (range.inv_low(), range.inv_high());
    let half = fraction as f64 * range.inv_length() / 2.0;
    let prev = prev_depth.data();
    let mut depths = vec![0.0f32; prev.len() * count];
    depths.par_chunks_mut(count).enumerate().for_each(|(i, out)| {
        let d = prev[i];
        let centre = if d.is_finite() && d > 0.0 {
            (1.0 / d as f64).clamp(lo, hi)
        } else {
            0.5 * (lo + hi)
        };
        let (a, b) = ((centre - half).max(lo), (centre + half).min(hi));
        let mut rng = key.rng(Purpose::Perturb, i, count);
        if b - a <= 0.0 {
            out.fill(range.clamp((1.0 / centre) as f32));
            return;
        }
        stratified(&mut rng, a, b, out);
        out.iter_mut().for_each(|d| *d = range.clamp(*d));
    });
    HypothesisVolume {
        width: prev_depth.width(),
        height: prev_depth.height(),
        count,
        depths,
    }
}

/// Fixed offsets for propagation: one 8-ring at dilation 2, plus a second ring
/// at dilation 4 when 16 samples are requested.
pub fn propagation_pattern(count: usize) -> Result<Vec<[f32; 2]>, HypothesisError> {
    match count {
        0 => Ok(Vec::new()),
        8 => Ok(ring(2)),
        16 => Ok([ring(2), ring(4)].concat()),
        n => Err(HypothesisError::UnknownPattern(n)),
    }
}

/// Fixed offsets for spatial evaluation: a 3x3 grid including the centre.
pub fn evaluation_pattern(count: usize, dilation: usize) -> Result<Vec<[f32; 2]>, HypothesisError> {
    if count != 9 {
        return Err(HypothesisError::UnknownPattern(count));
    }
    let s = dilation as f32;
    let mut out = Vec::with_capacity(9);
    for dy in -1..=1 {
        for dx in -1..=1 {
            out.push([dx as f32 * s, dy as f32 * s]);
        }
    }
    Ok(out)
}

fn ring(dilation: i32) -> Vec<[f32; 2]> {
    let mut out = Vec::with_capacity(8);
    for dy in -1..=1 {
        for dx in -1..=1 {
            if dx != 0 || dy != 0 {
                out.push([(dx * dilation) as f32, (dy * dilation) as f32]);
            }
        }
    }
    out
}

/// How per-pixel offset corrections are produced.
#[derive(Debug, Clone, Copy)]
pub enum OffsetMode<'a> {
    /// All corrections zero.
    Fixed,
    /// Snap each sample to the most similar feature in its 3x3 neighbourhood.
    FeatureGuided,
    /// A 3x3 convolution on the reference features; `layer` names the tensors.
    Coefficients(&'a CoefficientSet, &'a str),
}

/// Base sampling pattern plus per-pixel corrections.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    pub width: usize,
    pub height: usize,
    pub base: Vec<[f32; 2]>,
    /// `(y * W + x) * K + k`
    pub deltas: Vec<[f32; 2]>,
}

impl OffsetField {
    pub fn zeros(width: usize, height: usize, base: Vec<[f32; 2]>) -> Self {
        let k = base.len();
        Self {
            width,
            height,
            base,
            deltas: vec![[0.0; 2]; width * height * k],
        }
    }

    /// Samples per pixel.
    pub fn count(&self) -> usize {
        self.base.len()
    }

    /// Absolute sample location of sample `k` at pixel `(x, y)`.
    #[inline]
    pub fn location(&self, x: usize, y: usize, k: usize) -> (f32, f32) {
        let b = self.base[k];
        let d = self.deltas[(y * self.width + x) * self.base.len() + k];
        (x as f32 + b[0] + d[0], y as f32 + b[1] + d[1])
    }
}

/// Builds an offset field for `base` on the reference features.
pub fn compute_offsets(
    features: &Grid,
    base: Vec<[f32; 2]>,
    mode: OffsetMode<'_>,
) -> Result<OffsetField, HypothesisError> {
    let (w, h) = (features.width(), features.height());
    let mut field = OffsetField::zeros(w, h, base);
    let k = field.count();
    if k == 0 {
        return Ok(field);
    }
    match mode {
        OffsetMode::Fixed => {}
        OffsetMode::FeatureGuided => feature_guided(features, &mut field),
        OffsetMode::Coefficients(set, layer) => {
            let kernel = ConvKernel::from_set(set, layer)?;
            if kernel.out_channels != 2 * k {
                return Err(HypothesisError::OffsetChannels {
                    layer: layer.to_string(),
                    found: kernel.out_channels,
                    expected: 2 * k,
                });
            }
            let out = conv2d(features, &kernel, 1, kernel.kh / 2)?;
            for (delta, v) in field.deltas.iter_mut().zip(out.data().chunks_exact(2)) {
                *delta = [v[0], v[1]];
            }
        }
    }
    Ok(field)
}

/// Propagation offsets for `count` samples.
pub fn propagation_offsets(
    features: &Grid,
    count: usize,
    mode: OffsetMode<'_>,
) -> Result<OffsetField, HypothesisError> {
    compute_offsets(features, propagation_pattern(count)?, mode)
}

/// 3x3 displacements ordered by length, then row, then column.
fn snap_candidates() -> [(isize, isize); 9] {
    let mut c = [(0isize, 0isize); 9];
    let mut i = 0;
    for dy in -1..=1 {
        for dx in -1..=1 {
            c[i] = (dx, dy);
            i += 1;
        }
    }
    c.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));
    c
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let (mut ab, mut aa, mut bb) = (0.0f32, 0.0f32, 0.0f32);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let n = (aa * bb).sqrt();
    if n > 0.0 {
        ab / n
    } else {
        0.0
    }
}

/// Snaps each in-image base sample to the 3x3 neighbour whose features are
/// most cosine-similar to the centre pixel. Ties keep the shortest
/// displacement. Base samples outside the image are not moved.
fn feature_guided(features: &Grid, field: &mut OffsetField) {
    let (w, h) = (features.width() as isize, features.height() as isize);
    let k = field.count();
    let base = field.base.clone();
    let candidates = snap_candidates();
    field
        .deltas
        .par_chunks_mut(k)
        .enumerate()
        .for_each(|(i, deltas)| {
            let (px, py) = ((i as isize) % w, (i as isize) / w);
            let centre = features.pixel(px as usize, py as usize);
            for (delta, b) in deltas.iter_mut().zip(&base) {
                let (bx, by) = (px + b[0].round() as isize, py + b[1].round() as isize);
                if bx < 0 || by < 0 || bx >= w || by >= h {
                    // left to the out-of-bounds fallback in propagation
                    *delta = [0.0, 0.0];
                    continue;
                }
                let mut best: Option<(f32, (isize, isize))> = None;
                for &(dx, dy) in &candidates {
                    let (qx, qy) = (bx + dx, by + dy);
                    if qx < 0 || qy < 0 || qx >= w || qy >= h {
                        continue;
                    }
                    let s = cosine(centre, features.pixel(qx as usize, qy as usize));
                    if best.is_none_or(|(bs, _)| s > bs) {
                        best = Some((s, (dx, dy)));
                    }
                }
                *delta = match best {
                    Some((_, (dx, dy))) => [dx as f32, dy as f32],
                    None => [0.0, 0.0],
                };
            }
        });
}

/// Samples the previous depth map at each offset location; samples outside
/// the map fall back to the pixel's own previous depth.
pub fn propagate(prev_depth: &Grid, offsets: &OffsetField) -> Result<HypothesisVolume, HypothesisError> {
    if prev_depth.channels() != 1
        || (prev_depth.width(), prev_depth.height()) != (offsets.width, offsets.height)
    {
        return Err(HypothesisError::Dimension("depth map does not match offset field".into()));
    }
    let (w, h) = (offsets.width, offsets.height);
    let k = offsets.count();
    let mut depths = vec![0.0f32; w * h * k];
    if k > 0 {
        depths.par_chunks_mut(k).enumerate().for_each(|(i, out)| {
            let (x, y) = (i % w, i / w);
            let own = prev_depth.get(x, y, 0);
            for (s, slot) in out.iter_mut().enumerate() {
                let (sx, sy) = offsets.location(x, y, s);
                let fp = prev_depth.footprint(sx, sy);
                *slot = if fp.valid {
                    fp.blend_channel(prev_depth.data(), 1, 0)
                } else {
                    own
                };
            }
        });
    }
    HypothesisVolume::new(w, h, k, depths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::Tensor;

    fn key(seed: u64) -> StreamKey {
        StreamKey {
            seed,
            stage: 3,
            iteration: 0,
        }
    }

    /// Bin histogram of one pixel's hypotheses in f64 inverse depth.
    fn bins(depths: &[f32], lo: f64, hi: f64) -> Vec<usize> {
        let n = depths.len();
        let mut hist = vec![0usize; n];
        for &d in depths {
            let inv = 1.0 / d as f64;
            assert!(inv >= lo && inv <= hi, "{inv} outside [{lo}, {hi}]");
            let b = (((inv - lo) / (hi - lo)) * n as f64).floor() as usize;
            hist[b.min(n - 1)] += 1;
        }
        hist
    }

    #[test]
    fn init_one_sample_per_bin() {
        let range = DepthRange::new(425.0, 935.0).unwrap();
        let vol = init_random(37, 23, range, 48, key(7));
        assert_eq!(vol.count(), 48);
        for y in 0..23 {
            for x in 0..37 {
                let px = vol.pixel(x, y);
                assert!(px.iter().all(|&d| range.contains(d)));
                assert!(bins(px, range.inv_low(), range.inv_high()).iter().all(|&c| c == 1));
                assert!(px.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn init_two_bins() {
        // inverse range [0.5, 1.0]
        let range = DepthRange::new(1.0, 2.0).unwrap();
        let vol = init_random(8, 8, range, 2, key(1));
        for px in vol.depths().chunks_exact(2) {
            let (far, near) = (1.0 / px[1] as f64, 1.0 / px[0] as f64);
            assert!((0.5..0.75).contains(&far));
            assert!((0.75..=1.0).contains(&near));
        }
        let single = init_random(4, 4, range, 1, key(1));
        assert!(single.depths().iter().all(|&d| range.contains(d)));
    }

    #[test]
    fn determinism_and_seed_sensitivity() {
        let range = DepthRange::new(2.0, 10.0).unwrap();
        let a = init_random(16, 9, range, 16, key(3));
        let b = init_random(16, 9, range, 16, key(3));
        let c = init_random(16, 9, range, 16, key(4));
        assert_eq!(a, b);
        assert_ne!(a, c);
        let prev = Grid::from_fn(16, 9, 1, |x, y, _| 3.0 + (x + y) as f32 * 0.2);
        let p1 = perturb(&prev, 0.1, 8, range, key(3));
        let p2 = perturb(&prev, 0.1, 8, range, key(3));
        assert_eq!(p1, p2);
    }

    #[test]
    fn streams_are_order_independent() {
        let range = DepthRange::new(2.0, 10.0).unwrap();
        let k = key(11);
        let vol = init_random(5, 4, range, 6, k);
        // recompute pixel 13 in isolation
        let mut rng = k.rng(Purpose::Init, 13, 6);
        let mut out = [0.0f32; 6];
        stratified(&mut rng, range.inv_low(), range.inv_high(), &mut out);
        assert_eq!(&out, vol.pixel(3, 2));
    }

    #[test]
    fn perturb_degenerate_window() {
        let range = DepthRange::new(2.0, 10.0).unwrap();
        let prev = Grid::filled(4, 4, 1, 4.0);
        let vol = perturb(&prev, 1e-12, 8, range, key(2));
        assert!(vol.depths().iter().all(|&d| (d - 4.0).abs() < 1e-4));
    }

    #[test]
    fn perturb_wide_window_covers_clamped_range() {
        let range = DepthRange::new(2.0, 10.0).unwrap();
        let centre = 2.0 / (range.inv_low() + range.inv_high());
        let prev = Grid::filled(6, 5, 1, centre as f32);
        let vol = perturb(&prev, 2.0, 8, range, key(5));
        for px in vol.depths().chunks_exact(8) {
            assert!(bins(px, range.inv_low(), range.inv_high()).iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn perturb_window_width() {
        let range = DepthRange::new(2.0, 10.0).unwrap();
        let prev = Grid::filled(10, 10, 1, 4.0);
        let r = 0.38f32;
        let vol = perturb(&prev, r, 16, range, key(9));
        let half = r as f64 * range.inv_length() / 2.0;
        let (lo, hi) = (0.25 - half, 0.25 + half);
        for px in vol.depths().chunks_exact(16) {
            assert!(bins(px, lo, hi).iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn patterns() {
        let p8 = propagation_pattern(8).unwrap();
        assert_eq!(p8.len(), 8);
        assert!(p8.iter().all(|o| o[0].abs().max(o[1].abs()) == 2.0));
        let p16 = propagation_pattern(16).unwrap();
        assert_eq!(&p16[..8], &p8[..]);
        assert!(p16[8..].iter().all(|o| o[0].abs().max(o[1].abs()) == 4.0));
        assert!(propagation_pattern(0).unwrap().is_empty());
        assert!(matches!(propagation_pattern(5), Err(HypothesisError::UnknownPattern(5))));
        let e = evaluation_pattern(9, 2).unwrap();
        assert_eq!(e[4], [0.0, 0.0]);
        assert_eq!(e[0], [-2.0, -2.0]);
        assert!(evaluation_pattern(8, 1).is_err());
    }

    #[test]
    fn fixed_offsets_are_zero() {
        let f = Grid::from_fn(8, 8, 3, |x, y, c| (x * y + c) as f32);
        let o = propagation_offsets(&f, 16, OffsetMode::Fixed).unwrap();
        assert_eq!(o.base, propagation_pattern(16).unwrap());
        assert!(o.deltas.iter().all(|d| *d == [0.0, 0.0]));
    }

    #[test]
    fn constant_features_keep_base() {
        let f = Grid::filled(9, 9, 4, 0.7);
        let o = propagation_offsets(&f, 16, OffsetMode::FeatureGuided).unwrap();
        assert!(o.deltas.iter().all(|d| *d == [0.0, 0.0]));
    }

    #[test]
    fn feature_guided_snaps_to_own_side() {
        // left of column 5 is region A, from column 5 on region B
        let f = Grid::from_fn(12, 9, 2, |x, _, c| match (x < 5, c) {
            (true, 0) => 1.0,
            (true, _) => 0.0,
            (false, 0) => 0.0,
            (false, _) => 1.0,
        });
        let o = propagation_offsets(&f, 8, OffsetMode::FeatureGuided).unwrap();
        // centre (4, 4) is the last A column; base (+2, 0) lands at column 6
        let k = o.base.iter().position(|b| *b == [2.0, 0.0]).unwrap();
        // the whole 3x3 window around (6, 4) is B: a tie that keeps the base
        let brute = |bx: isize, by: isize| {
            let centre = f.pixel(4, 4);
            let mut best = (f32::MIN, (0isize, 0isize));
            for &(dx, dy) in &snap_candidates() {
                let q = f.pixel((bx + dx) as usize, (by + dy) as usize);
                let s = cosine(centre, q);
                if s > best.0 {
                    best = (s, (dx, dy));
                }
            }
            best.1
        };
        let want = brute(6, 4);
        let got = o.deltas[(4 * 12 + 4) * 8 + k];
        assert_eq!(got, [want.0 as f32, want.1 as f32]);

        // centre (3, 4), base (+2, 0) lands at column 5 which is B; snaps left to 4
        let got = o.deltas[(4 * 12 + 3) * 8 + k];
        assert_eq!(got, [-1.0, 0.0]);
        let (sx, _) = o.location(3, 4, k);
        assert!(sx < 5.0);
    }

    #[test]
    fn coefficient_offsets_follow_conv() {
        let f = Grid::from_fn(6, 5, 2, |x, y, c| (x + 2 * y + c) as f32 * 0.1);
        let mut weights = vec![0.0f32; 16 * 2 * 9];
        // channel 0 (dx of sample 0) copies feature 0 at the centre tap
        weights[4] = 1.0;
        let bias = (0..16).map(|i| i as f32 * 0.01).collect();
        let set = CoefficientSet::new(vec![
            Tensor::new("prop2.offset.weight", vec![16, 2, 3, 3], weights),
            Tensor::new("prop2.offset.bias", vec![16], bias),
        ])
        .unwrap();
        let o = propagation_offsets(&f, 8, OffsetMode::Coefficients(&set, "prop2.offset")).unwrap();
        let d = o.deltas[(2 * 6 + 3) * 8];
        assert!((d[0] - f.get(3, 2, 0)).abs() < 1e-6);
        assert!((d[1] - 0.01).abs() < 1e-6);
        assert!(matches!(
            propagation_offsets(&f, 16, OffsetMode::Coefficients(&set, "prop2.offset")),
            Err(HypothesisError::OffsetChannels { .. })
        ));
    }

    #[test]
    fn propagate_step_blend() {
        // depth 2 for x < 4, 6 otherwise
        let prev = Grid::from_fn(8, 8, 1, |x, _, _| if x < 4 { 2.0 } else { 6.0 });
        let mut o = OffsetField::zeros(8, 8, vec![[1.5, 0.0], [0.0, 0.0], [-9.0, 0.0]]);
        let vol = propagate(&prev, &o).unwrap();
        // from x = 3 the first sample sits at 4.5, fully on the high side
        assert_eq!(vol.get(3, 3, 0), 6.0);
        // from x = 2 it sits at 3.5: half of each side
        assert_eq!(vol.get(2, 3, 0), 4.0);
        assert_eq!(vol.get(2, 3, 1), 2.0);
        // out of bounds falls back to the centre depth
        assert_eq!(vol.get(5, 3, 2), 6.0);
        o.deltas[(3 * 8 + 2) * 3] = [0.25, 0.0];
        let vol = propagate(&prev, &o).unwrap();
        assert_eq!(vol.get(2, 3, 0), 5.0);
    }

    #[test]
    fn union_sorts() {
        let a = HypothesisVolume::new(1, 1, 2, vec![5.0, 1.0]).unwrap();
        let b = HypothesisVolume::new(1, 1, 2, vec![3.0, 2.0]).unwrap();
        let u = a.union_sorted(&b).unwrap();
        assert_eq!(u.depths(), &[1.0, 2.0, 3.0, 5.0]);
        assert_eq!(u.storage_bytes(), 16);
    }

    #[test]
    fn stage_defaults_and_validation() {
        let stages: Vec<_> = [3, 2, 1].iter().map(|&k| StageConfig::default_for(k)).collect();
        assert_eq!(stages.iter().map(|s| s.iterations).collect::<Vec<_>>(), [2, 2, 1]);
        assert_eq!(stages.iter().map(|s| s.hypotheses).collect::<Vec<_>>(), [16, 8, 8]);
        assert_eq!(stages.iter().map(|s| s.propagation).collect::<Vec<_>>(), [16, 8, 0]);
        assert_eq!(stages.iter().map(|s| s.perturbation).collect::<Vec<_>>(), [0.38, 0.09, 0.04]);
        assert!(stages.iter().all(|s| s.initial_hypotheses == 48 && s.evaluation == 9));
        validate_stages(&stages).unwrap();
        let mut bad = stages.clone();
        bad[1].perturbation = 0.5;
        assert!(validate_stages(&bad).is_err());
        bad = stages;
        bad[2].iterations = 0;
        assert!(validate_stages(&bad).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn constant_map_propagates_constant(
                value in 0.5f32..50.0,
                deltas in proptest::collection::vec((-6.0f32..6.0, -6.0f32..6.0), 7 * 6 * 16),
            ) {
                let prev = Grid::filled(7, 6, 1, value);
                let mut o = OffsetField::zeros(7, 6, propagation_pattern(16).unwrap());
                for (d, (x, y)) in o.deltas.iter_mut().zip(deltas) {
                    *d = [x, y];
                }
                let vol = propagate(&prev, &o).unwrap();
                for &d in vol.depths() {
                    prop_assert!((d - value).abs() <= value * 1e-6);
                }
            }

            #[test]
            fn perturb_stays_in_range(
                seed in any::<u64>(),
                fraction in 0.001f32..3.0,
                prev in proptest::collection::vec(0.1f32..30.0, 20),
                min in 0.5f32..3.0,
                span in 0.5f32..20.0,
            ) {
                let range = DepthRange::new(min, min + span).unwrap();
                let g = Grid::from_vec(5, 4, 1, prev).unwrap();
                let vol = perturb(&g, fraction, 8, range, key(seed));
                prop_assert_eq!(vol.count(), 8);
                prop_assert!(vol.depths().iter().all(|&d| range.contains(d)));
            }

            #[test]
            fn init_is_stratified(seed in any::<u64>(), min in 0.1f32..5.0, span in 0.1f32..100.0, n in 1usize..40) {
                let range = DepthRange::new(min, min + span).unwrap();
                let vol = init_random(3, 2, range, n, key(seed));
                for px in vol.depths().chunks_exact(n) {
                    prop_assert!(bins(px, range.inv_low(), range.inv_high()).iter().all(|&c| c == 1));
                }
            }
        }
    }
}
