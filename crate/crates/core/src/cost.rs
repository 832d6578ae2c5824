//! Matching cost and depth regression.
//!
//! Scores are "higher is better". Probabilities are a softmax of score over
//! temperature.

use rayon::prelude::*;
use thiserror::Error;

use crate::coeffs::{CoeffError, CoefficientSet, LEAKY_SLOPE};
use crate::geometry::{ViewWarp, WarpedFeatures};
use crate::grid::Grid;
use crate::hypothesis::{
    compute_offsets, evaluation_pattern, DepthRange, HypothesisError, HypothesisVolume, OffsetField,
    OffsetMode,
};

/// Denominator guard for view aggregation.
pub const VIEW_EPS: f32 = 1e-6;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("{channels} feature channels cannot be split into {groups} groups")]
    GroupMismatch { channels: usize, groups: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("no source views")]
    NoViews,
    #[error(transparent)]
    Coefficients(#[from] CoeffError),
    #[error(transparent)]
    Hypothesis(#[from] HypothesisError),
}

#[inline]
pub fn logistic(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Group correlation between one reference and one source pixel.
#[inline]
pub fn group_correlation(a: &[f32], b: &[f32], groups: usize, out: &mut [f32]) {
    let per = a.len() / groups;
    let scale = groups as f32 / a.len() as f32;
    for (g, o) in out.iter_mut().enumerate().take(groups) {
        let r = g * per..(g + 1) * per;
        *o = scale * a[r.clone()].iter().zip(&b[r]).map(|(x, y)| x * y).sum::<f32>();
    }
}

fn check_groups(channels: usize, groups: usize) -> Result<(), CostError> {
    if groups == 0 || channels % groups != 0 {
        return Err(CostError::GroupMismatch { channels, groups });
    }
    Ok(())
}

/// Per-hypothesis group similarities for one source view.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVolume {
    pub width: usize,
    pub height: usize,
    pub depths: usize,
    pub groups: usize,
    /// `((y * W + x) * D + j) * G + g`
    pub values: Vec<f32>,
    /// `(y * W + x) * D + j`
    pub valid: Vec<bool>,
}

impl SimilarityVolume {
    #[inline]
    pub fn at(&self, x: usize, y: usize, j: usize) -> &[f32] {
        let i = ((y * self.width + x) * self.depths + j) * self.groups;
        &self.values[i..i + self.groups]
    }

    /// Mean over groups for each `(pixel, hypothesis)`.
    pub fn group_mean(&self) -> Vec<f32> {
        self.values
            .chunks_exact(self.groups)
            .map(|s| s.iter().sum::<f32>() / self.groups as f32)
            .collect()
    }
}

/// Group similarity of the reference features against pre-warped source
/// features. Masked entries are zero.
pub fn group_similarity(
    reference: &Grid,
    warped: &WarpedFeatures,
    groups: usize,
) -> Result<SimilarityVolume, CostError> {
    let c = reference.channels();
    check_groups(c, groups)?;
    if warped.channels != c || (warped.width, warped.height) != (reference.width(), reference.height()) {
        return Err(CostError::Dimension("warped features do not match the reference".into()));
    }
    let (w, h, d) = (warped.width, warped.height, warped.depths);
    let mut values = vec![0.0f32; w * h * d * groups];
    values
        .par_chunks_mut(d * groups)
        .enumerate()
        .for_each(|(i, out)| {
            let r = reference.pixel(i % w, i / w);
            for j in 0..d {
                if warped.mask[i * d + j] {
                    let src = &warped.values[(i * d + j) * c..(i * d + j + 1) * c];
                    group_correlation(r, src, groups, &mut out[j * groups..(j + 1) * groups]);
                }
            }
        });
    Ok(SimilarityVolume {
        width: w,
        height: h,
        depths: d,
        groups,
        values,
        valid: warped.mask.clone(),
    })
}

/// Warps and correlates in one pass without storing warped features.
pub fn view_similarity(
    reference: &Grid,
    source: &Grid,
    hypotheses: &HypothesisVolume,
    warp: &ViewWarp,
    groups: usize,
) -> Result<SimilarityVolume, CostError> {
    let c = reference.channels();
    check_groups(c, groups)?;
    if source.channels() != c
        || (hypotheses.width(), hypotheses.height()) != (reference.width(), reference.height())
    {
        return Err(CostError::Dimension("features and hypotheses disagree".into()));
    }
    let (w, h, d) = (hypotheses.width(), hypotheses.height(), hypotheses.count());
    let mut values = vec![0.0f32; w * h * d * groups];
    let mut valid = vec![false; w * h * d];
    values
        .par_chunks_mut(w * d * groups)
        .zip(valid.par_chunks_mut(w * d))
        .enumerate()
        .for_each(|(y, (vrow, mrow))| {
            let mut buf = vec![0.0f32; c];
            for x in 0..w {
                let r = reference.pixel(x, y);
                let ray = warp.ray(x as f64, y as f64);
                for j in 0..d {
                    let wp = warp.warp_ray(&ray, hypotheses.get(x, y, j) as f64);
                    if !wp.valid || !source.sample_into(wp.x as f32, wp.y as f32, &mut buf) {
                        continue;
                    }
                    mrow[x * d + j] = true;
                    let o = (x * d + j) * groups;
                    group_correlation(r, &buf, groups, &mut vrow[o..o + groups]);
                }
            }
        });
    Ok(SimilarityVolume {
        width: w,
        height: h,
        depths: d,
        groups,
        values,
        valid,
    })
}

/// A chain of fully connected layers over the group axis with a leaky
/// rectifier between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseStack {
    layers: Vec<(usize, usize, Vec<f32>, Vec<f32>)>,
}

impl PointwiseStack {
    /// Loads `{prefix}1..` from a coefficient set. Returns `None` when the
    /// group is absent.
    pub fn from_set(set: &CoefficientSet, prefix: &str, inputs: usize) -> Result<Option<Self>, CostError> {
        let depth = crate::coeffs::registry::stack_depth(set, prefix);
        if depth == 0 {
            return Ok(None);
        }
        let mut layers = Vec::with_capacity(depth);
        let mut width = inputs;
        for n in 1..=depth {
            let w = set.require(&format!("{prefix}{n}.weight"))?;
            let b = set.require(&format!("{prefix}{n}.bias"))?;
            if w.shape.len() != 2 || w.shape[1] != width {
                return Err(CoeffError::ShapeMismatch {
                    name: w.name.clone(),
                    found: w.shape.clone(),
                    expected: format!("[out, {width}]"),
                }
                .into());
            }
            width = w.shape[0];
            layers.push((w.shape[0], w.shape[1], w.values.clone(), b.values.clone()));
        }
        if width != 1 {
            return Err(CostError::Dimension(format!("{prefix} stack must end in one output")));
        }
        Ok(Some(Self { layers }))
    }

    pub fn apply(&self, input: &[f32]) -> f32 {
        let mut cur = input.to_vec();
        let last = self.layers.len() - 1;
        for (n, (out, inp, w, b)) in self.layers.iter().enumerate() {
            let mut next = b.clone();
            for (o, v) in next.iter_mut().enumerate().take(*out) {
                *v += w[o * inp..(o + 1) * inp].iter().zip(&cur).map(|(a, x)| a * x).sum::<f32>();
                if n != last && *v < 0.0 {
                    *v *= LEAKY_SLOPE;
                }
            }
            cur = next;
        }
        cur[0]
    }
}

#[inline]
fn reduce_groups(s: &[f32], stack: Option<&PointwiseStack>) -> f32 {
    match stack {
        Some(net) => net.apply(s),
        None => s.iter().sum::<f32>() / s.len() as f32,
    }
}

/// Pixel-wise visibility weight of one source view: the best per-hypothesis
/// match probability.
pub fn view_weight(sim: &SimilarityVolume, stack: Option<&PointwiseStack>) -> Grid {
    let (w, d, g) = (sim.width, sim.depths, sim.groups);
    Grid::from_fn_rows(sim.width, sim.height, 1, |y, row| {
        for (x, out) in row.iter_mut().enumerate() {
            let base = (y * w + x) * d * g;
            *out = sim.values[base..base + d * g]
                .chunks_exact(g)
                .map(|s| logistic(reduce_groups(s, stack)))
                .fold(0.0f32, f32::max);
        }
    })
}

/// Per-source-view visibility weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewWeightMap {
    pub weights: Vec<Grid>,
}

impl ViewWeightMap {
    pub fn uniform(views: usize, width: usize, height: usize) -> Self {
        Self {
            weights: vec![Grid::filled(width, height, 1, 1.0); views],
        }
    }

    pub fn upsample_x2(&self) -> Self {
        Self {
            weights: self.weights.iter().map(Grid::upsample_x2).collect(),
        }
    }

    /// Matches a target size by repeated x2 upsampling, then cropping or
    /// edge padding.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let mut cur = self.clone();
        while cur.weights[0].width() < width || cur.weights[0].height() < height {
            cur = cur.upsample_x2();
        }
        Self {
            weights: cur.weights.iter().map(|g| g.crop(width, height)).collect(),
        }
    }
}

/// Weighted mean over source views:
/// `sum_i w_i S_i / (sum_i w_i + eps)`.
pub fn aggregate_views(sims: &[SimilarityVolume], weights: &ViewWeightMap) -> Result<SimilarityVolume, CostError> {
    let first = sims.first().ok_or(CostError::NoViews)?;
    if weights.weights.len() != sims.len() {
        return Err(CostError::Dimension("one weight map per view required".into()));
    }
    let (w, h, d, g) = (first.width, first.height, first.depths, first.groups);
    for s in sims {
        if (s.width, s.height, s.depths, s.groups) != (w, h, d, g) {
            return Err(CostError::Dimension("similarity volumes differ in shape".into()));
        }
    }
    for m in &weights.weights {
        if (m.width(), m.height()) != (w, h) {
            return Err(CostError::Dimension("view weight size mismatch".into()));
        }
    }
    let mut values = vec![0.0f32; w * h * d * g];
    let mut valid = vec![false; w * h * d];
    values
        .par_chunks_mut(d * g)
        .zip(valid.par_chunks_mut(d))
        .enumerate()
        .for_each(|(i, (out, vout))| {
            let mut acc = vec![0.0f64; d * g];
            let mut total = 0.0f64;
            for (s, m) in sims.iter().zip(&weights.weights) {
                let wi = m.data()[i] as f64;
                total += wi;
                for (a, &v) in acc.iter_mut().zip(&s.values[i * d * g..(i + 1) * d * g]) {
                    *a += wi * v as f64;
                }
                for (vo, &sv) in vout.iter_mut().zip(&s.valid[i * d..(i + 1) * d]) {
                    *vo |= sv;
                }
            }
            let denom = total + VIEW_EPS as f64;
            for (o, a) in out.iter_mut().zip(&acc) {
                *o = (a / denom) as f32;
            }
        });
    Ok(SimilarityVolume {
        width: w,
        height: h,
        depths: d,
        groups: g,
        values,
        valid,
    })
}

/// One scalar score per pixel and hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub width: usize,
    pub height: usize,
    pub depths: usize,
    /// `(y * W + x) * D + j`
    pub score: Vec<f32>,
}

impl CostVolume {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.depths;
        &self.score[i..i + self.depths]
    }
}

pub fn similarity_to_score(sim: &SimilarityVolume, stack: Option<&PointwiseStack>) -> CostVolume {
    let score = sim
        .values
        .par_chunks(sim.groups)
        .map(|s| reduce_groups(s, stack))
        .collect();
    CostVolume {
        width: sim.width,
        height: sim.height,
        depths: sim.depths,
        score,
    }
}

/// Offsets for spatial cost aggregation.
pub fn eval_offsets(
    features: &Grid,
    count: usize,
    dilation: usize,
    mode: OffsetMode<'_>,
) -> Result<OffsetField, CostError> {
    Ok(compute_offsets(features, evaluation_pattern(count, dilation)?, mode)?)
}

/// Constants of the depth-similarity weight.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DepthWeightParams {
    /// Logit at zero inverse-depth difference.
    pub sigma: f32,
    /// Penalty per unit normalised inverse-depth difference.
    pub beta: f32,
}

impl Default for DepthWeightParams {
    fn default() -> Self {
        Self {
            sigma: 2.0,
            beta: 10.0,
        }
    }
}

/// Spatial aggregation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeights {
    pub samples: usize,
    pub depths: usize,
    /// Feature weight per sample, `(y * W + x) * K + k`; zero for samples
    /// outside the image.
    pub feature: Vec<f32>,
    /// Depth weight, `((y * W + x) * K + k) * D + j`.
    pub depth: Vec<f32>,
}

pub fn spatial_weights(
    features: &Grid,
    offsets: &OffsetField,
    hypotheses: &HypothesisVolume,
    range: DepthRange,
    params: DepthWeightParams,
    groups: usize,
    stack: Option<&PointwiseStack>,
) -> Result<SpatialWeights, CostError> {
    let c = features.channels();
    check_groups(c, groups)?;
    let (w, h) = (features.width(), features.height());
    if (hypotheses.width(), hypotheses.height()) != (w, h) || (offsets.width, offsets.height) != (w, h) {
        return Err(CostError::Dimension("spatial weight inputs disagree in size".into()));
    }
    let (k, d) = (offsets.count(), hypotheses.count());
    let inv_len = (1.0 / range.inv_length()) as f32;
    let mut feature = vec![0.0f32; w * h * k];
    let mut depth = vec![0.0f32; w * h * k * d];
    let hyp = hypotheses.depths();
    feature
        .par_chunks_mut(k)
        .zip(depth.par_chunks_mut(k * d))
        .enumerate()
        .for_each(|(i, (fw, dw))| {
            let (x, y) = (i % w, i / w);
            let centre = features.pixel(x, y);
            let own = hypotheses.pixel(x, y);
            let mut buf = vec![0.0f32; c];
            let mut corr = vec![0.0f32; groups];
            for s in 0..k {
                let (sx, sy) = offsets.location(x, y, s);
                let fp = features.footprint(sx, sy);
                if !fp.valid {
                    continue;
                }
                fp.blend(features.data(), c, &mut buf);
                group_correlation(centre, &buf, groups, &mut corr);
                fw[s] = logistic(reduce_groups(&corr, stack));
                for j in 0..d {
                    let nd = fp.blend_channel(hyp, d, j);
                    let diff = (1.0 / nd - 1.0 / own[j]).abs() * inv_len;
                    dw[s * d + j] = logistic(params.sigma - params.beta * diff);
                }
            }
        });
    Ok(SpatialWeights {
        samples: k,
        depths: d,
        feature,
        depth,
    })
}

/// Weighted mean of bilinearly sampled scores at the evaluation offsets.
/// Samples outside the image are dropped; pixels with no usable weight keep
/// their own score.
pub fn aggregate_spatial(
    score: &CostVolume,
    offsets: &OffsetField,
    weights: &SpatialWeights,
) -> Result<CostVolume, CostError> {
    let (w, h, d) = (score.width, score.height, score.depths);
    let k = offsets.count();
    if (offsets.width, offsets.height) != (w, h) || weights.samples != k || weights.depths != d {
        return Err(CostError::Dimension("spatial aggregation inputs disagree".into()));
    }
    let geometry = Grid::new(w, h, 1);
    let mut out = vec![0.0f32; w * h * d];
    out.par_chunks_mut(d).enumerate().for_each(|(i, acc)| {
        let (x, y) = (i % w, i / w);
        let mut norm = vec![0.0f32; d];
        for s in 0..k {
            let fw = weights.feature[i * k + s];
            if fw == 0.0 {
                continue;
            }
            let (sx, sy) = offsets.location(x, y, s);
            let fp = geometry.footprint(sx, sy);
            if !fp.valid {
                continue;
            }
            for j in 0..d {
                let wt = fw * weights.depth[(i * k + s) * d + j];
                acc[j] += wt * fp.blend_channel(&score.score, d, j);
                norm[j] += wt;
            }
        }
        let own = &score.score[i * d..(i + 1) * d];
        for j in 0..d {
            acc[j] = if norm[j] > 1e-12 { acc[j] / norm[j] } else { own[j] };
        }
    });
    Ok(CostVolume {
        width: w,
        height: h,
        depths: d,
        score: out,
    })
}

/// Per-pixel distribution over hypotheses.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    pub width: usize,
    pub height: usize,
    pub depths: usize,
    /// `(y * W + x) * D + j`
    pub values: Vec<f32>,
}

impl ProbabilityVolume {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.depths;
        &self.values[i..i + self.depths]
    }
}

pub fn softmax(scores: &[f32], temperature: f32, out: &mut [f32]) {
    let m = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = ((s - m) / temperature).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Softmax over hypotheses and the expected depth.
pub fn regress_depth(
    score: &CostVolume,
    hypotheses: &HypothesisVolume,
    temperature: f32,
) -> Result<(Grid, ProbabilityVolume), CostError> {
    let (w, h, d) = (score.width, score.height, score.depths);
    if (hypotheses.width(), hypotheses.height(), hypotheses.count()) != (w, h, d) {
        return Err(CostError::Dimension("scores and hypotheses disagree".into()));
    }
    let mut values = vec![0.0f32; w * h * d];
    values
        .par_chunks_mut(d)
        .zip(score.score.par_chunks(d))
        .for_each(|(p, s)| softmax(s, temperature, p));
    let prob = ProbabilityVolume {
        width: w,
        height: h,
        depths: d,
        values,
    };
    let hyp = hypotheses.depths();
    let depth = Grid::from_fn(w, h, 1, |x, y, _| {
        let i = y * w + x;
        let e: f32 = prob.values[i * d..(i + 1) * d]
            .iter()
            .zip(&hyp[i * d..(i + 1) * d])
            .map(|(p, z)| p * z)
            .sum();
        // keep rounding inside the hypothesis span
        let (lo, hi) = hyp[i * d..(i + 1) * d]
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &z| (a.min(z), b.max(z)));
        e.clamp(lo, hi)
    });
    Ok((depth, prob))
}

/// Expected inverse depth, inverted.
pub fn regress_inverse_depth(prob: &ProbabilityVolume, hypotheses: &HypothesisVolume) -> Grid {
    let (w, d) = (prob.width, prob.depths);
    let hyp = hypotheses.depths();
    Grid::from_fn(prob.width, prob.height, 1, |x, y, _| {
        let i = y * w + x;
        let inv: f32 = prob.values[i * d..(i + 1) * d]
            .iter()
            .zip(&hyp[i * d..(i + 1) * d])
            .map(|(p, z)| p / z)
            .sum();
        1.0 / inv
    })
}

/// Probability mass of the four hypotheses nearest the estimate in inverse
/// depth.
pub fn confidence(prob: &ProbabilityVolume, hypotheses: &HypothesisVolume, depth: &Grid) -> Grid {
    let (w, d) = (prob.width, prob.depths);
    let hyp = hypotheses.depths();
    Grid::from_fn(prob.width, prob.height, 1, |x, y, _| {
        let i = y * w + x;
        let target = 1.0 / depth.get(x, y, 0);
        let mut idx: Vec<usize> = (0..d).collect();
        idx.sort_by(|&a, &b| {
            let da = (1.0 / hyp[i * d + a] - target).abs();
            let db = (1.0 / hyp[i * d + b] - target).abs();
            da.total_cmp(&db)
        });
        let sum: f32 = idx.iter().take(4).map(|&j| prob.values[i * d + j]).sum();
        sum.clamp(0.0, 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::Tensor;
    use crate::geometry::{relative_pose, warp_feature_map, CameraModel};
    use nalgebra::{Matrix3, Vector3};

    fn sim_from(w: usize, h: usize, d: usize, g: usize, values: Vec<f32>) -> SimilarityVolume {
        SimilarityVolume {
            width: w,
            height: h,
            depths: d,
            groups: g,
            values,
            valid: vec![true; w * h * d],
        }
    }

    #[test]
    fn group_correlation_examples() {
        let mut out = [0.0; 2];
        group_correlation(&[1.0; 4], &[1.0; 4], 2, &mut out);
        assert_eq!(out, [1.0, 1.0]);
        group_correlation(&[1.0, 0.0, 0.0, 1.0], &[0.0, 1.0, 1.0, 0.0], 2, &mut out);
        assert_eq!(out, [0.0, 0.0]);
        group_correlation(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0], 2, &mut out);
        assert_eq!(out, [5.0, 5.0]);
    }

    #[test]
    fn group_similarity_rejects_bad_groups() {
        let f = Grid::new(2, 2, 6);
        let hyp = HypothesisVolume::constant(2, 2, 1, 1.0);
        let warp = ViewWarp::new(&Matrix3::identity(), &crate::geometry::RelativePose::identity(), &Matrix3::identity());
        assert!(matches!(
            view_similarity(&f, &f, &hyp, &warp, 4),
            Err(CostError::GroupMismatch { channels: 6, groups: 4 })
        ));
    }

    fn cams() -> (CameraModel, CameraModel) {
        let k = Matrix3::new(20.0, 0.0, 7.5, 0.0, 20.0, 5.5, 0.0, 0.0, 1.0);
        let r = CameraModel::new(k, Matrix3::identity(), Vector3::zeros(), 1.0, 10.0).unwrap();
        let s = CameraModel::new(k, Matrix3::identity(), Vector3::new(-0.3, 0.1, 0.0), 1.0, 10.0).unwrap();
        (r, s)
    }

    #[test]
    fn fused_path_matches_two_step_oracle() {
        let (r, s) = cams();
        let fr = Grid::from_fn(16, 12, 8, |x, y, c| ((x * 3 + y * 5 + c * 7) % 11) as f32 / 11.0 - 0.4);
        let fs = Grid::from_fn(16, 12, 8, |x, y, c| ((x * 7 + y * 2 + c * 3) % 13) as f32 / 13.0 - 0.5);
        let hyp = HypothesisVolume::new(16, 12, 3, (0..16 * 12 * 3).map(|i| 2.0 + (i % 7) as f32).collect()).unwrap();
        let rel = relative_pose(&r, &s);
        let warped = warp_feature_map(&fs, &hyp, &r, &rel, &s.intrinsics).unwrap();
        let a = group_similarity(&fr, &warped, 4).unwrap();
        let b = view_similarity(&fr, &fs, &hyp, &ViewWarp::between(&r, &s), 4).unwrap();
        assert_eq!(a.valid, b.valid);
        // brute force per-group dot product
        for i in 0..16 * 12 {
            for j in 0..3 {
                for g in 0..4 {
                    let mut dot = 0.0f32;
                    if warped.mask[i * 3 + j] {
                        for c in 2 * g..2 * g + 2 {
                            dot += fr.data()[i * 8 + c] * warped.values[(i * 3 + j) * 8 + c];
                        }
                    }
                    let want = dot * 4.0 / 8.0;
                    let idx = (i * 3 + j) * 4 + g;
                    assert!((a.values[idx] - want).abs() < 1e-5);
                    assert!((b.values[idx] - want).abs() < 1e-5);
                }
            }
        }
        assert!(b.valid.iter().any(|v| !v));
    }

    #[test]
    fn view_weight_is_max_probability() {
        let logit = |p: f32| (p / (1.0 - p)).ln();
        let s = sim_from(1, 1, 3, 1, vec![logit(0.2), logit(0.9), logit(0.4)]);
        assert!((view_weight(&s, None).get(0, 0, 0) - 0.9).abs() < 1e-6);
        let zero = sim_from(2, 1, 4, 2, vec![0.0; 16]);
        assert!(view_weight(&zero, None).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn view_aggregation_examples() {
        let s1 = sim_from(1, 1, 2, 1, vec![1.0, 3.0]);
        let s2 = sim_from(1, 1, 2, 1, vec![5.0, -1.0]);
        let one = |v| Grid::filled(1, 1, 1, v);
        let single = aggregate_views(&[s1.clone()], &ViewWeightMap { weights: vec![one(0.7)] }).unwrap();
        for (a, b) in single.values.iter().zip(&s1.values) {
            assert!((a - b).abs() < 1e-5);
        }
        let mean = aggregate_views(&[s1.clone(), s2.clone()], &ViewWeightMap { weights: vec![one(0.5), one(0.5)] }).unwrap();
        assert!((mean.values[0] - 3.0).abs() < 1e-5 && (mean.values[1] - 1.0).abs() < 1e-5);
        let first = aggregate_views(&[s1.clone(), s2], &ViewWeightMap { weights: vec![one(1.0), one(0.0)] }).unwrap();
        assert!((first.values[0] - 1.0).abs() < 1e-5);
        assert!(matches!(aggregate_views(&[], &ViewWeightMap { weights: vec![] }), Err(CostError::NoViews)));
    }

    #[test]
    fn score_reduction() {
        let s = sim_from(1, 1, 1, 2, vec![5.0, 5.0]);
        assert_eq!(similarity_to_score(&s, None).score, vec![5.0]);
        // 1/G weights with zero bias reproduce the mean
        let set = CoefficientSet::new(vec![
            Tensor::new("score.layer1.weight", vec![1, 4], vec![0.25; 4]),
            Tensor::new("score.layer1.bias", vec![1], vec![0.0]),
        ])
        .unwrap();
        let net = PointwiseStack::from_set(&set, "score.layer", 4).unwrap().unwrap();
        let s = sim_from(2, 1, 3, 4, (0..24).map(|i| (i as f32 * 0.37).sin()).collect());
        let a = similarity_to_score(&s, None);
        let b = similarity_to_score(&s, Some(&net));
        for (x, y) in a.score.iter().zip(&b.score) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(PointwiseStack::from_set(&set, "view_weight.layer", 4).unwrap().is_none());
    }

    #[test]
    fn depth_weight_constants() {
        let p = DepthWeightParams::default();
        let same = logistic(p.sigma);
        let jump = logistic(p.sigma - p.beta);
        assert!((same - 0.8808).abs() < 1e-4);
        assert!((jump - 3.35e-4).abs() < 1e-5);
        // through the operator: identical depths and a full-range step
        let range = DepthRange::new(1.0, 2.0).unwrap();
        let f = Grid::filled(3, 1, 4, 1.0);
        let hyp = HypothesisVolume::new(3, 1, 1, vec![1.0, 1.0, 2.0]).unwrap();
        let offsets = OffsetField::zeros(3, 1, vec![[1.0, 0.0]]);
        let sw = spatial_weights(&f, &offsets, &hyp, range, p, 2, None).unwrap();
        assert!((sw.depth[0] - same).abs() < 1e-6);
        assert!((sw.depth[1] - jump).abs() < 1e-6);
        // outside the image
        assert_eq!(sw.feature[2], 0.0);
    }

    #[test]
    fn self_similarity_is_maximal() {
        let f = Grid::from_fn(5, 5, 4, |x, y, c| ((x * 3 + y + c) % 4) as f32 - 1.5);
        let f = crate::features::normalize_features(&f, 1.0);
        let hyp = HypothesisVolume::constant(5, 5, 1, 2.0);
        let offsets = eval_offsets(&f, 9, 1, OffsetMode::Fixed).unwrap();
        let range = DepthRange::new(1.0, 4.0).unwrap();
        let sw = spatial_weights(&f, &offsets, &hyp, range, DepthWeightParams::default(), 2, None).unwrap();
        let i = 2 * 5 + 2;
        let centre = sw.feature[i * 9 + 4];
        assert!(sw.feature[i * 9..i * 9 + 9].iter().all(|&v| v <= centre + 1e-6));
    }

    #[test]
    fn spatial_aggregation_examples() {
        let (w, h, d) = (6, 5, 2);
        let offsets = OffsetField::zeros(w, h, evaluation_pattern(9, 1).unwrap());
        let constant = CostVolume {
            width: w,
            height: h,
            depths: d,
            score: vec![0.7; w * h * d],
        };
        let uniform = SpatialWeights {
            samples: 9,
            depths: d,
            feature: vec![1.0; w * h * 9],
            depth: vec![1.0; w * h * 9 * d],
        };
        let out = aggregate_spatial(&constant, &offsets, &uniform).unwrap();
        assert!(out.score.iter().all(|&v| (v - 0.7).abs() < 1e-6));

        let varied = CostVolume {
            width: w,
            height: h,
            depths: d,
            score: (0..w * h * d).map(|i| ((i * 7) % 5) as f32).collect(),
        };
        let out = aggregate_spatial(&varied, &offsets, &uniform).unwrap();
        // interior pixels: 3x3 box filter
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                for j in 0..d {
                    let mut box_sum = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            box_sum += varied.at(x + dx - 1, y + dy - 1)[j];
                        }
                    }
                    assert!((out.at(x, y)[j] - box_sum / 9.0).abs() < 1e-5);
                }
            }
        }

        let mut one_hot = uniform.clone();
        one_hot.feature.iter_mut().enumerate().for_each(|(i, v)| *v = if i % 9 == 5 { 1.0 } else { 0.0 });
        let out = aggregate_spatial(&varied, &offsets, &one_hot).unwrap();
        assert_eq!(out.at(2, 2), varied.at(3, 2));
        // right border: the only weighted sample is outside, keep own score
        assert_eq!(out.at(w - 1, 2), varied.at(w - 1, 2));
    }

    #[test]
    fn regression_examples() {
        let hyp = HypothesisVolume::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let score = CostVolume {
            width: 1,
            height: 1,
            depths: 2,
            score: vec![3.0f32.ln(), 0.0],
        };
        let (depth, p) = regress_depth(&score, &hyp, 1.0).unwrap();
        assert!((p.values[0] - 0.75).abs() < 1e-6 && (p.values[1] - 0.25).abs() < 1e-6);
        assert!((depth.get(0, 0, 0) - 1.25).abs() < 1e-6);

        let hyp24 = HypothesisVolume::new(1, 1, 2, vec![2.0, 4.0]).unwrap();
        let flat = CostVolume { score: vec![0.0, 0.0], ..score.clone() };
        assert!((regress_depth(&flat, &hyp24, 1.0).unwrap().0.get(0, 0, 0) - 3.0).abs() < 1e-6);

        let peaked = CostVolume { score: vec![0.0, 1e4], ..score };
        let hyp34 = HypothesisVolume::new(1, 1, 2, vec![7.0, 3.0]).unwrap();
        assert_eq!(regress_depth(&peaked, &hyp34, 1.0).unwrap().0.get(0, 0, 0), 3.0);

        let half = ProbabilityVolume {
            width: 1,
            height: 1,
            depths: 2,
            values: vec![0.5, 0.5],
        };
        assert!((regress_inverse_depth(&half, &hyp).get(0, 0, 0) - 4.0 / 3.0).abs() < 1e-6);
        let same = HypothesisVolume::new(1, 1, 2, vec![2.5, 2.5]).unwrap();
        assert!((regress_inverse_depth(&half, &same).get(0, 0, 0) - 2.5).abs() < 1e-6);
    }

    #[test]
    fn confidence_examples() {
        let hyp = HypothesisVolume::new(1, 1, 8, (1..=8).map(|v| v as f32).collect()).unwrap();
        let uniform = ProbabilityVolume {
            width: 1,
            height: 1,
            depths: 8,
            values: vec![0.125; 8],
        };
        let depth = regress_inverse_depth(&uniform, &hyp);
        assert!((confidence(&uniform, &hyp, &depth).get(0, 0, 0) - 0.5).abs() < 1e-6);
        let mut one_hot = uniform.clone();
        one_hot.values = vec![0.0; 8];
        one_hot.values[5] = 1.0;
        let d = Grid::filled(1, 1, 1, 6.0);
        assert_eq!(confidence(&one_hot, &hyp, &d).get(0, 0, 0), 1.0);
        let hyp4 = HypothesisVolume::new(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p4 = ProbabilityVolume {
            width: 1,
            height: 1,
            depths: 4,
            values: vec![0.1, 0.2, 0.3, 0.4],
        };
        assert!((confidence(&p4, &hyp4, &Grid::filled(1, 1, 1, 1.0)).get(0, 0, 0) - 1.0).abs() < 1e-6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn view_aggregation_scale_invariant(
                vals in proptest::collection::vec(-3.0f32..3.0, 2 * 3 * 4),
                // total weight of at least 1 keeps the epsilon's share below 1e-6
                w in proptest::collection::vec(0.5f32..1.0, 2),
                s in 1.0f32..10.0,
            ) {
                let a = sim_from(1, 1, 3, 4, vals[..12].to_vec());
                let b = sim_from(1, 1, 3, 4, vals[12..].to_vec());
                let m = |k: f32| ViewWeightMap { weights: w.iter().map(|&v| Grid::filled(1, 1, 1, v * k)).collect() };
                let x = aggregate_views(&[a.clone(), b.clone()], &m(1.0)).unwrap();
                let y = aggregate_views(&[a, b], &m(s)).unwrap();
                for (p, q) in x.values.iter().zip(&y.values) {
                    prop_assert!((p - q).abs() <= 1e-6 * (1.0 + p.abs()));
                }
            }

            #[test]
            fn softmax_properties(
                ticks in proptest::collection::vec(-1280i32..1280, 1..24),
                shift in -50i32..50,
                t in 0.2f32..4.0,
            ) {
                // multiples of 1/64 so the shifted inputs are exact in f32
                let scores: Vec<f32> = ticks.iter().map(|&k| k as f32 / 64.0).collect();
                let shift = shift as f32;
                let mut p = vec![0.0; scores.len()];
                softmax(&scores, t, &mut p);
                prop_assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                let shifted: Vec<f32> = scores.iter().map(|s| s + shift).collect();
                let mut q = vec![0.0; scores.len()];
                softmax(&shifted, t, &mut q);
                for (a, b) in p.iter().zip(&q) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }

            #[test]
            fn regression_bounds_and_means(
                hyps in proptest::collection::vec(0.5f32..20.0, 2..12),
                seed in proptest::collection::vec(-5.0f32..5.0, 12),
            ) {
                let d = hyps.len();
                let hyp = HypothesisVolume::new(1, 1, d, hyps.clone()).unwrap();
                let score = CostVolume { width: 1, height: 1, depths: d, score: seed[..d].to_vec() };
                let (depth, p) = regress_depth(&score, &hyp, 1.0).unwrap();
                let lo = hyps.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = hyps.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let z = depth.get(0, 0, 0);
                prop_assert!(z >= lo && z <= hi);
                let harmonic = regress_inverse_depth(&p, &hyp).get(0, 0, 0);
                prop_assert!(harmonic <= z * (1.0 + 1e-5));
            }

            #[test]
            fn constant_score_is_fixed_point(
                c in -5.0f32..5.0,
                fw in proptest::collection::vec(0.0f32..1.0, 4 * 4 * 9),
                deltas in proptest::collection::vec((-2.0f32..2.0, -2.0f32..2.0), 4 * 4 * 9),
            ) {
                let mut offsets = OffsetField::zeros(4, 4, evaluation_pattern(9, 2).unwrap());
                for (d, (x, y)) in offsets.deltas.iter_mut().zip(deltas) {
                    *d = [x, y];
                }
                let score = CostVolume { width: 4, height: 4, depths: 3, score: vec![c; 48] };
                let w = SpatialWeights { samples: 9, depths: 3, feature: fw, depth: vec![0.5; 4 * 4 * 9 * 3] };
                let out = aggregate_spatial(&score, &offsets, &w).unwrap();
                for &v in &out.score {
                    prop_assert!((v - c).abs() < 1e-5);
                }
            }
        }
    }
}
