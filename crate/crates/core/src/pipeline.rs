//! Coarse-to-fine depth estimation for one reference view.
//!
//! Stages 3, 2 and 1 run Patchmatch at `1/8`, `1/4` and `1/2` resolution.
//! Each iteration builds hypotheses (random, perturbed, propagated), scores
//! them against every source view, aggregates spatially and regresses a
//! depth map. The stage-1 result is upsampled to full resolution by an
//! image-guided refinement.

use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coeffs::{CoeffError, CoefficientSet};
use crate::cost::{
    aggregate_spatial, aggregate_views, confidence, eval_offsets, regress_depth, regress_inverse_depth,
    similarity_to_score, spatial_weights, view_similarity, view_weight, CostError, DepthWeightParams,
    PointwiseStack, ProbabilityVolume, ViewWeightMap,
};
use crate::features::{
    add, conv2d, conv_transpose_x2, extract_pyramid, leaky_relu_grid, normalize_features, ConvKernel,
    FeatureError, FeatureMode, FeaturePyramid,
};
use crate::geometry::{relative_pose, CameraModel, ViewWarp};
use crate::grid::Grid;
use crate::hypothesis::{
    init_random, perturb, propagate, propagation_offsets, validate_stages, DepthRange, HypothesisError,
    HypothesisVolume, OffsetField, OffsetMode, StageConfig, StreamKey,
};

/// Camera motion below which a source view counts as coincident with the
/// reference.
pub const DEGENERATE_BASELINE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("need a reference and at least one source view, got {0} views")]
    TooFewViews(usize),
    #[error("view {index} is {found:?}, reference is {expected:?}")]
    SizeMismatch {
        index: usize,
        found: (usize, usize),
        expected: (usize, usize),
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Hypothesis(#[from] HypothesisError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Coefficients(#[from] CoeffError),
}

/// Image-guided x2 upsampling used when no refinement coefficients are loaded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineParams {
    pub radius: usize,
    /// Spatial standard deviation in full-resolution pixels.
    pub sigma_spatial: f32,
    /// Intensity standard deviation for image values in `[0, 1]`.
    pub sigma_range: f32,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            radius: 2,
            sigma_spatial: 1.5,
            sigma_range: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub stage3: StageConfig,
    pub stage2: StageConfig,
    pub stage1: StageConfig,
    /// Views used per estimate, reference included.
    pub views: usize,
    /// Softmax temperature applied to matching scores.
    pub temperature: f32,
    /// Score of a perfect match for handcrafted features.
    pub feature_gain: f32,
    /// Feature-guided (or learned) propagation offsets instead of the fixed
    /// grid.
    pub adaptive_propagation: bool,
    /// Feature-guided (or learned) evaluation offsets instead of the fixed
    /// grid.
    pub adaptive_evaluation: bool,
    /// Pixel-wise view weights; uniform weights when off.
    pub view_weighting: bool,
    pub eval_dilation: usize,
    pub depth_weight: DepthWeightParams,
    pub refine: RefineParams,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stage3: StageConfig::default_for(3),
            stage2: StageConfig::default_for(2),
            stage1: StageConfig::default_for(1),
            views: 5,
            temperature: 0.1,
            feature_gain: 4.0,
            adaptive_propagation: true,
            adaptive_evaluation: true,
            view_weighting: true,
            eval_dilation: 2,
            depth_weight: DepthWeightParams::default(),
            refine: RefineParams::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Stage settings from coarse to fine.
    pub fn stages(&self) -> [StageConfig; 3] {
        [self.stage3, self.stage2, self.stage1]
    }

    pub fn stage_mut(&mut self, k: usize) -> &mut StageConfig {
        match k {
            3 => &mut self.stage3,
            2 => &mut self.stage2,
            1 => &mut self.stage1,
            _ => panic!("stage {k} does not exist"),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let stages = self.stages();
        for (s, want) in stages.iter().zip([3, 2, 1]) {
            if s.stage != want {
                return Err(PipelineError::Config(format!(
                    "stage{want} table declares stage {}",
                    s.stage
                )));
            }
        }
        validate_stages(&stages).map_err(PipelineError::Config)?;
        if self.views < 2 {
            return Err(PipelineError::Config("views must be at least 2".into()));
        }
        if !(self.temperature > 0.0) || !(self.feature_gain > 0.0) {
            return Err(PipelineError::Config("temperature and feature_gain must be positive".into()));
        }
        if self.eval_dilation == 0 {
            return Err(PipelineError::Config("eval_dilation must be positive".into()));
        }
        Ok(())
    }

    /// Defaults overlaid with each TOML document in order.
    pub fn from_toml_layers(layers: &[&str]) -> Result<Self, PipelineError> {
        let mut value = toml::Value::try_from(Self::default())
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        for layer in layers {
            let overlay: toml::Value = toml::from_str(layer).map_err(|e| PipelineError::Config(e.to_string()))?;
            merge_toml(&mut value, overlay);
        }
        value.try_into().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))
    }
}

/// Recursively overlays `overlay` onto `base`; tables merge, everything else
/// replaces.
pub fn merge_toml(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// An image with its camera.
#[derive(Debug, Clone)]
pub struct View {
    pub image: Grid,
    pub camera: CameraModel,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub stage: usize,
    pub iteration: usize,
    pub hypotheses_per_pixel: usize,
    pub hypothesis_bytes: usize,
    pub propagated: bool,
    #[serde(skip)]
    pub depth: Grid,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub stage: usize,
    pub width: usize,
    pub height: usize,
    pub wall_time_ms: f64,
    pub peak_hypothesis_bytes: usize,
    pub iterations: Vec<IterationRecord>,
    #[serde(skip)]
    pub depth: Grid,
}

#[derive(Debug, Clone)]
pub struct DepthResult {
    /// Full-resolution depth.
    pub depth: Grid,
    /// Full-resolution confidence in `[0, 1]`.
    pub confidence: Grid,
    /// Stage-1 depth before refinement.
    pub unrefined: Grid,
    pub stages: Vec<StageRecord>,
    /// Stage-3 view weights, one map per source view.
    pub view_weights: ViewWeightMap,
    pub refine_time_ms: f64,
    pub degenerate: bool,
}

/// Serializable timing and memory summary.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub stages: Vec<StageRecord>,
    pub refine_time_ms: f64,
    pub total_time_ms: f64,
    pub peak_hypothesis_bytes: usize,
    pub degenerate: bool,
}

impl DepthResult {
    pub fn report(&self) -> RunReport {
        let total = self.stages.iter().map(|s| s.wall_time_ms).sum::<f64>() + self.refine_time_ms;
        RunReport {
            stages: self.stages.clone(),
            refine_time_ms: self.refine_time_ms,
            total_time_ms: total,
            peak_hypothesis_bytes: self.stages.iter().map(|s| s.peak_hypothesis_bytes).max().unwrap_or(0),
            degenerate: self.degenerate,
        }
    }

    /// Final depth of stage `k` brought to full resolution by repeated
    /// bilinear x2 upsampling.
    pub fn stage_depth_full(&self, k: usize) -> Option<Grid> {
        let rec = self.stages.iter().find(|s| s.stage == k)?;
        let mut g = rec.depth.clone();
        for _ in 0..k {
            g = g.upsample_x2();
        }
        Some(g.crop(self.depth.width(), self.depth.height()))
    }
}

/// Per-stage inputs shared by all iterations.
struct StageContext<'a> {
    reference: &'a Grid,
    sources: Vec<&'a Grid>,
    warps: Vec<ViewWarp>,
    range: DepthRange,
    prop_offsets: OffsetField,
    eval_offsets: OffsetField,
    view_stack: Option<PointwiseStack>,
    score_stack: Option<PointwiseStack>,
    spatial_stack: Option<PointwiseStack>,
}

pub struct StageOutput {
    pub depth: Grid,
    pub probability: ProbabilityVolume,
    pub hypotheses: HypothesisVolume,
    pub view_weights: ViewWeightMap,
    pub record: StageRecord,
}

fn offset_mode<'a>(adaptive: bool, set: Option<&'a CoefficientSet>, layer: &'a str) -> OffsetMode<'a> {
    match (adaptive, set) {
        (false, _) => OffsetMode::Fixed,
        (true, Some(s)) if s.get(&format!("{layer}.weight")).is_some() => OffsetMode::Coefficients(s, layer),
        (true, _) => OffsetMode::FeatureGuided,
    }
}

fn load_stack(set: Option<&CoefficientSet>, prefix: &str, groups: usize) -> Result<Option<PointwiseStack>, PipelineError> {
    match set {
        Some(s) => Ok(PointwiseStack::from_set(s, prefix, groups)?),
        None => Ok(None),
    }
}

/// Runs all Patchmatch iterations of one stage.
///
/// `prev` is the depth from the coarser stage, already at this stage's
/// resolution; it must be present unless `k == 3`. `weights` carries view
/// weights from stage 3; when absent they are computed at the first
/// iteration (or set uniform if view weighting is off).
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    k: usize,
    prev: Option<&Grid>,
    features: &[&Grid],
    cams: &[CameraModel],
    weights: Option<&ViewWeightMap>,
    cfg: &PipelineConfig,
    coeffs: Option<&CoefficientSet>,
    range: DepthRange,
) -> Result<StageOutput, PipelineError> {
    let stage = cfg.stages()[3 - k];
    if features.len() < 2 || cams.len() != features.len() {
        return Err(PipelineError::TooFewViews(features.len()));
    }
    if k != 3 && prev.is_none() {
        return Err(PipelineError::Config(format!("stage {k} needs the previous depth map")));
    }
    let started = Instant::now();
    let reference = features[0];
    let (w, h) = (reference.width(), reference.height());
    let ref_cam = cams[0].scaled(k as u32);
    let warps = cams[1..]
        .iter()
        .map(|c| ViewWarp::between(&ref_cam, &c.scaled(k as u32)))
        .collect();
    let prop_layer = format!("prop{k}.offset");
    let eval_layer = format!("eval{k}.offset");
    let ctx = StageContext {
        reference,
        sources: features[1..].to_vec(),
        warps,
        range,
        prop_offsets: propagation_offsets(
            reference,
            stage.propagation,
            offset_mode(cfg.adaptive_propagation, coeffs, &prop_layer),
        )?,
        eval_offsets: eval_offsets(
            reference,
            stage.evaluation,
            cfg.eval_dilation,
            offset_mode(cfg.adaptive_evaluation, coeffs, &eval_layer),
        )?,
        view_stack: load_stack(coeffs, "view_weight.layer", stage.groups)?,
        score_stack: load_stack(coeffs, "score.layer", stage.groups)?,
        spatial_stack: load_stack(coeffs, "spatial.layer", stage.groups)?,
    };

    let mut view_weights = weights.map(|m| m.resized(w, h));
    let mut depth = prev.cloned();
    let mut records = Vec::with_capacity(stage.iterations);
    let mut last = None;
    for it in 0..stage.iterations {
        let key = StreamKey {
            seed: cfg.seed,
            stage: k,
            iteration: it,
        };
        let final_iteration = k == 1 && it + 1 == stage.iterations;
        let (hyp, propagated) = match &depth {
            None => (init_random(w, h, range, stage.initial_hypotheses, key), false),
            Some(d) => {
                let perturbed = perturb(d, stage.perturbation, stage.hypotheses, range, key);
                if stage.propagation > 0 && !final_iteration {
                    let spread = propagate(d, &ctx.prop_offsets)?;
                    (perturbed.union_sorted(&spread)?, true)
                } else {
                    (perturbed, false)
                }
            }
        };
        let sims = ctx
            .sources
            .par_iter()
            .zip(&ctx.warps)
            .map(|(src, warp)| view_similarity(ctx.reference, src, &hyp, warp, stage.groups))
            .collect::<Result<Vec<_>, _>>()?;
        let weights_now = match &view_weights {
            Some(m) => m.clone(),
            None => {
                let m = if cfg.view_weighting {
                    ViewWeightMap {
                        weights: sims.par_iter().map(|s| view_weight(s, ctx.view_stack.as_ref())).collect(),
                    }
                } else {
                    ViewWeightMap::uniform(sims.len(), w, h)
                };
                view_weights = Some(m.clone());
                m
            }
        };
        let merged = aggregate_views(&sims, &weights_now)?;
        drop(sims);
        let score = similarity_to_score(&merged, ctx.score_stack.as_ref());
        drop(merged);
        let sw = spatial_weights(
            ctx.reference,
            &ctx.eval_offsets,
            &hyp,
            ctx.range,
            cfg.depth_weight,
            stage.groups,
            ctx.spatial_stack.as_ref(),
        )?;
        let score = aggregate_spatial(&score, &ctx.eval_offsets, &sw)?;
        drop(sw);
        let (mut estimate, prob) = regress_depth(&score, &hyp, cfg.temperature)?;
        if final_iteration {
            estimate = regress_inverse_depth(&prob, &hyp);
        }
        let estimate = estimate.map(|d| range.clamp(d));
        records.push(IterationRecord {
            stage: k,
            iteration: it,
            hypotheses_per_pixel: hyp.count(),
            hypothesis_bytes: hyp.storage_bytes(),
            propagated,
            depth: estimate.clone(),
        });
        depth = Some(estimate);
        last = Some((prob, hyp));
    }
    let (probability, hypotheses) = last.expect("at least one iteration");
    let depth = depth.expect("at least one iteration");
    let record = StageRecord {
        stage: k,
        width: w,
        height: h,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        peak_hypothesis_bytes: records.iter().map(|r| r.hypothesis_bytes).max().unwrap_or(0),
        iterations: records,
        depth: depth.clone(),
    };
    Ok(StageOutput {
        depth,
        probability,
        hypotheses,
        view_weights: view_weights.expect("computed in the first iteration"),
        record,
    })
}

/// True when every source camera coincides with the reference.
pub fn is_degenerate(views: &[View]) -> bool {
    let reference = &views[0].camera;
    views[1..].iter().all(|v| {
        let rel = relative_pose(reference, &v.camera);
        (v.camera.center() - reference.center()).norm() < DEGENERATE_BASELINE
            && rel.rotation_angle() < DEGENERATE_BASELINE
    })
}

fn handcrafted_pyramid(image: &Grid, gain: f32) -> Result<FeaturePyramid, PipelineError> {
    let p = extract_pyramid(image, FeatureMode::Handcrafted)?;
    Ok(p.map_stages(|g| normalize_features(g, gain)))
}

/// Estimates the depth of `views[0]` from all views.
pub fn run_cascade(
    views: &[View],
    cfg: &PipelineConfig,
    coeffs: Option<&CoefficientSet>,
) -> Result<DepthResult, PipelineError> {
    cfg.validate()?;
    if views.len() < 2 {
        return Err(PipelineError::TooFewViews(views.len()));
    }
    let (w, h) = (views[0].image.width(), views[0].image.height());
    for (index, v) in views.iter().enumerate() {
        let found = (v.image.width(), v.image.height());
        if found != (w, h) {
            return Err(PipelineError::SizeMismatch {
                index,
                found,
                expected: (w, h),
            });
        }
    }
    let views = &views[..views.len().min(cfg.views)];
    let reference_cam = &views[0].camera;
    let range = DepthRange::new(reference_cam.depth_min as f32, reference_cam.depth_max as f32)?;
    let degenerate = is_degenerate(views);
    if degenerate {
        warn!("all source cameras coincide with the reference; depth is unconstrained");
    }

    let padded: Vec<Grid> = views.iter().map(|v| v.image.pad_to_multiple(8)).collect();
    let use_fpn = coeffs.is_some_and(|s| s.has_prefix("fpn."));
    let pyramids = padded
        .par_iter()
        .map(|img| match coeffs {
            Some(set) if use_fpn => Ok(extract_pyramid(img, FeatureMode::Coefficients(set))?),
            _ => handcrafted_pyramid(img, cfg.feature_gain),
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let cams: Vec<CameraModel> = views.iter().map(|v| v.camera.clone()).collect();

    let mut stages = Vec::with_capacity(3);
    let mut prev: Option<Grid> = None;
    let mut weights: Option<ViewWeightMap> = None;
    let mut stage3_weights = None;
    let mut last = None;
    for k in [3usize, 2, 1] {
        let feats: Vec<&Grid> = pyramids.iter().map(|p| p.stage(k)).collect();
        let out = run_stage(k, prev.as_ref(), &feats, &cams, weights.as_ref(), cfg, coeffs, range)?;
        if k == 3 {
            stage3_weights = Some(out.view_weights.clone());
        }
        weights = Some(out.view_weights.clone());
        prev = (k > 1).then(|| out.depth.upsample_x2());
        stages.push(out.record.clone());
        last = Some(out);
    }
    let last = last.expect("three stages ran");
    let mut conf = confidence(&last.probability, &last.hypotheses, &last.depth);
    if degenerate {
        conf = Grid::new(conf.width(), conf.height(), 1);
    }

    let started = Instant::now();
    let refined = refine(&last.depth, &padded[0], cfg.refine, coeffs, range)?;
    let refine_time_ms = started.elapsed().as_secs_f64() * 1e3;

    for s in &mut stages {
        let (sw, sh) = (w.div_ceil(1 << s.stage), h.div_ceil(1 << s.stage));
        s.depth = s.depth.crop(sw, sh);
        for it in &mut s.iterations {
            it.depth = it.depth.crop(sw, sh);
        }
    }
    Ok(DepthResult {
        depth: refined.crop(w, h),
        confidence: conf.upsample_x2().crop(w, h),
        unrefined: last.depth.crop(w.div_ceil(2), h.div_ceil(2)),
        stages,
        view_weights: stage3_weights.expect("stage 3 ran"),
        refine_time_ms,
        degenerate,
    })
}

/// x2 upsampling of a half-resolution depth map guided by the full
/// resolution image. Uses the refinement graph when the coefficient set has
/// one, otherwise a joint bilateral filter. Depth is scaled to `[0, 1]`
/// before and restored after.
pub fn refine(
    depth: &Grid,
    image: &Grid,
    params: RefineParams,
    coeffs: Option<&CoefficientSet>,
    range: DepthRange,
) -> Result<Grid, PipelineError> {
    let (lo, hi) = depth.min_max();
    let span = hi - lo;
    if !(span > 0.0) {
        let up = Grid::filled(depth.width() * 2, depth.height() * 2, 1, lo);
        return Ok(up);
    }
    let unit = depth.map(|d| (d - lo) / span);
    let up = unit.upsample_x2();
    let refined = match coeffs.filter(|s| s.has_prefix("refine.")) {
        Some(set) => {
            let residual = refine_residual(&unit, image, set)?;
            add(&up, &residual)
        }
        None => joint_bilateral(&up, &image.to_gray(), params),
    };
    Ok(refined.map(|v| range.clamp(v * span + lo)))
}

fn refine_residual(unit_depth: &Grid, image: &Grid, set: &CoefficientSet) -> Result<Grid, PipelineError> {
    let conv = |g: &Grid, layer: &str| -> Result<Grid, PipelineError> {
        let k = ConvKernel::from_set(set, layer)?;
        Ok(conv2d(g, &k, 1, k.kh / 2)?)
    };
    let rgb = if image.channels() == 1 {
        Grid::from_fn(image.width(), image.height(), 3, |x, y, _| image.get(x, y, 0))
    } else {
        image.clone()
    };
    let depth_feat = leaky_relu_grid(&conv(unit_depth, "refine.depth_conv")?);
    let deconv = ConvKernel::from_set(set, "refine.deconv")?;
    let depth_up = leaky_relu_grid(&conv_transpose_x2(&depth_feat, &deconv)?);
    let image_feat = leaky_relu_grid(&conv(&rgb, "refine.image_conv")?);
    let mut x = concat_channels(&depth_up, &image_feat);
    let mut n = 1;
    while set.get(&format!("refine.fuse{n}.weight")).is_some() {
        x = leaky_relu_grid(&conv(&x, &format!("refine.fuse{n}"))?);
        n += 1;
    }
    conv(&x, "refine.residual")
}

fn concat_channels(a: &Grid, b: &Grid) -> Grid {
    let (ca, cb) = (a.channels(), b.channels());
    Grid::from_fn(a.width(), a.height(), ca + cb, |x, y, c| {
        if c < ca {
            a.get(x, y, c)
        } else {
            b.get(x, y, c - ca)
        }
    })
}

/// Edge-aware smoothing of `values` with weights from `guide` intensity.
pub fn joint_bilateral(values: &Grid, guide: &Grid, params: RefineParams) -> Grid {
    let (w, h) = (values.width(), values.height());
    let r = params.radius as isize;
    let inv_s = -0.5 / (params.sigma_spatial * params.sigma_spatial);
    let inv_r = -0.5 / (params.sigma_range * params.sigma_range);
    Grid::from_fn(w, h, 1, |x, y, _| {
        let g0 = guide.get(x, y, 0);
        let (mut acc, mut norm) = (0.0f32, 0.0f32);
        for dy in -r..=r {
            for dx in -r..=r {
                let (qx, qy) = (x as isize + dx, y as isize + dy);
                if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                    continue;
                }
                let (qx, qy) = (qx as usize, qy as usize);
                let dg = guide.get(qx, qy, 0) - g0;
                let wt = ((dx * dx + dy * dy) as f32 * inv_s + dg * dg * inv_r).exp();
                acc += wt * values.get(qx, qy, 0);
                norm += wt;
            }
        }
        acc / norm
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::Tensor;

    #[test]
    fn defaults_match_published_settings() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let s = c.stages();
        assert_eq!(s.map(|s| s.iterations), [2, 2, 1]);
        assert_eq!(s.map(|s| s.hypotheses), [16, 8, 8]);
        assert_eq!(s.map(|s| s.perturbation), [0.38, 0.09, 0.04]);
        assert_eq!(s.map(|s| s.propagation), [16, 8, 0]);
        assert_eq!(s[0].initial_hypotheses, 48);
        assert!(s.iter().all(|s| s.evaluation == 9));
    }

    #[test]
    fn toml_layers_override_fields() {
        let c = PipelineConfig::from_toml_layers(&[
            "seed = 9\n[stage2]\niterations = 3\n",
            "[stage2]\nhypotheses = 12\n",
        ])
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.stage2.iterations, 3);
        assert_eq!(c.stage2.hypotheses, 12);
        assert_eq!(c.stage2.perturbation, 0.09);
        assert_eq!(c.stage1, StageConfig::default_for(1));
        assert!(PipelineConfig::from_toml_layers(&["views = \"x\""]).is_err());
    }

    #[test]
    fn refine_keeps_constant_depth() {
        let d = Grid::filled(6, 4, 1, 3.5);
        let img = Grid::from_fn(12, 8, 1, |x, y, _| ((x * 7 + y) % 5) as f32 / 5.0);
        let range = DepthRange::new(1.0, 10.0).unwrap();
        let out = refine(&d, &img, RefineParams::default(), None, range).unwrap();
        assert_eq!(out.shape(), (12, 8, 1));
        assert!(out.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn refine_step_follows_image_edge() {
        // the image edge sits between full-resolution columns 9 and 10
        let img = Grid::from_fn(24, 8, 1, |x, _, _| if x < 10 { 0.2 } else { 0.8 });
        let d = Grid::from_fn(12, 4, 1, |x, _, _| if x < 5 { 2.0 } else { 4.0 });
        let range = DepthRange::new(1.0, 10.0).unwrap();
        let out = refine(&d, &img, RefineParams::default(), None, range).unwrap();
        for y in 0..8 {
            // the largest jump between neighbouring columns
            let edge = (0..23)
                .max_by(|&a, &b| {
                    let ja = (out.get(a + 1, y, 0) - out.get(a, y, 0)).abs();
                    let jb = (out.get(b + 1, y, 0) - out.get(b, y, 0)).abs();
                    ja.total_cmp(&jb)
                })
                .unwrap();
            assert!((edge as isize - 9).abs() <= 1, "row {y}: edge after column {edge}");
        }
    }

    #[test]
    fn zero_residual_head_is_plain_upsampling() {
        let fd = 2;
        let fi = 3;
        let t = |name: &str, shape: Vec<usize>, v: f32| {
            let n = shape.iter().product();
            Tensor::new(name, shape, vec![v; n])
        };
        let set = CoefficientSet::new(vec![
            t("refine.depth_conv.weight", vec![fd, 1, 3, 3], 0.1),
            t("refine.depth_conv.bias", vec![fd], 0.0),
            t("refine.deconv.weight", vec![fd, fd, 2, 2], 0.2),
            t("refine.deconv.bias", vec![fd], 0.0),
            t("refine.image_conv.weight", vec![fi, 3, 3, 3], 0.3),
            t("refine.image_conv.bias", vec![fi], 0.0),
            t("refine.fuse1.weight", vec![4, fd + fi, 3, 3], 0.1),
            t("refine.fuse1.bias", vec![4], 0.0),
            t("refine.residual.weight", vec![1, 4, 3, 3], 0.0),
            t("refine.residual.bias", vec![1], 0.0),
        ])
        .unwrap();
        crate::coeffs::registry::validate(&set).unwrap();
        let d = Grid::from_fn(5, 4, 1, |x, y, _| 2.0 + (x + y) as f32 * 0.3);
        let img = Grid::from_fn(10, 8, 3, |x, y, c| ((x + y + c) % 3) as f32 / 3.0);
        let range = DepthRange::new(1.0, 10.0).unwrap();
        let out = refine(&d, &img, RefineParams::default(), Some(&set), range).unwrap();
        let plain = d.upsample_x2();
        for (a, b) in out.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn too_few_views() {
        let cam = CameraModel::new(
            nalgebra::Matrix3::new(10.0, 0.0, 4.0, 0.0, 10.0, 4.0, 0.0, 0.0, 1.0),
            nalgebra::Matrix3::identity(),
            nalgebra::Vector3::zeros(),
            1.0,
            5.0,
        )
        .unwrap();
        let v = View {
            image: Grid::new(8, 8, 1),
            camera: cam,
        };
        assert!(matches!(
            run_cascade(&[v], &PipelineConfig::default(), None),
            Err(PipelineError::TooFewViews(1))
        ));
    }
}
