#![allow(dead_code)]

use pmstereo_core::harness::{self, bundled_scene, default_distance_cap, gt_cloud, RenderedView};
use pmstereo_core::{
    eval_clouds, filter_views, fuse, run_cascade, CloudMetrics, DepthResult, FilterParams, Grid,
    PipelineConfig, Scene, View,
};

pub fn scene(name: &str) -> Scene {
    Scene::from_toml(bundled_scene(name).expect("bundled scene")).expect("valid scene")
}

pub fn render(name: &str) -> (Scene, Vec<RenderedView>) {
    let s = scene(name);
    let views = s.render_checked().expect("renders");
    (s, views)
}

/// Views reordered so that `r` is the reference.
pub fn views_for(views: &[RenderedView], r: usize) -> Vec<View> {
    std::iter::once(r)
        .chain((0..views.len()).filter(|&i| i != r))
        .map(|i| views[i].view())
        .collect()
}

/// Runs the cascade once per reference view.
pub fn estimate_all(views: &[RenderedView], cfg: &PipelineConfig) -> Vec<DepthResult> {
    (0..views.len())
        .map(|r| run_cascade(&views_for(views, r), cfg, None).expect("cascade runs"))
        .collect()
}

/// Fuses the depth maps chosen by `pick` (with each run's final confidence)
/// and scores the cloud against the rendered ground truth.
pub fn fused_metrics(
    views: &[RenderedView],
    results: &[DepthResult],
    pick: impl Fn(&DepthResult) -> Grid,
    params: &FilterParams,
) -> (CloudMetrics, usize) {
    let depths: Vec<Grid> = results.iter().map(&pick).collect();
    let confs: Vec<Grid> = results.iter().map(|r| r.confidence.clone()).collect();
    let cams: Vec<_> = views.iter().map(|v| v.camera.clone()).collect();
    let images: Vec<Grid> = views.iter().map(|v| v.image.clone()).collect();
    let masks = filter_views(&depths, &confs, &cams, params).expect("filters");
    let cloud = fuse(&depths, &masks, &images, &cams, params).expect("fuses");
    let gt = gt_cloud(views, 2);
    let cap = default_distance_cap(&gt.points);
    let m = if cloud.is_empty() {
        CloudMetrics {
            accuracy: cap,
            completeness: cap,
            overall: cap,
        }
    } else {
        eval_clouds(&cloud.points, &gt.points, cap).expect("non-empty clouds")
    };
    (m, cloud.len())
}

pub fn fraction_within(pred: &Grid, gt: &Grid, tol: f32) -> f64 {
    harness::relative_depth_accuracy(pred, gt, tol)
}
