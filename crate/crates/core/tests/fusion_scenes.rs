//! Fusion and metrics on rendered scenes with exact depth.

mod common;

use pmstereo_core::harness::{default_distance_cap, fit_planes, gt_cloud, median_spacing};
use pmstereo_core::{eval_clouds, filter_views, fuse, FilterParams, Grid};

fn exact_cloud(name: &str) -> (Vec<pmstereo_core::RenderedView>, pmstereo_core::FusedCloud) {
    let (_, views) = common::render(name);
    let depths: Vec<Grid> = views.iter().map(|v| v.depth.clone()).collect();
    let confs: Vec<Grid> = depths.iter().map(|d| d.map(|_| 1.0)).collect();
    let cams: Vec<_> = views.iter().map(|v| v.camera.clone()).collect();
    let images: Vec<Grid> = views.iter().map(|v| v.image.clone()).collect();
    let params = FilterParams::default();
    let masks = filter_views(&depths, &confs, &cams, &params).unwrap();
    let cloud = fuse(&depths, &masks, &images, &cams, &params).unwrap();
    (views, cloud)
}

#[test]
fn exact_two_plane_depths_fuse_onto_both_planes() {
    let (views, cloud) = exact_cloud("two_planes");
    assert!(!cloud.is_empty());
    assert!(cloud.support.iter().all(|&s| s >= 2));

    // back plane at z = 6 and a disk at z = 4, both facing the cameras
    let fits = fit_planes(&cloud.points, 2, 0.01, 300, 3);
    assert_eq!(fits.len(), 2);
    let mut depths: Vec<f64> = fits.iter().map(|f| f.offset / f.normal.z).collect();
    depths.sort_by(f64::total_cmp);
    assert!((depths[0] - 4.0).abs() < 0.01, "{depths:?}");
    assert!((depths[1] - 6.0).abs() < 0.01, "{depths:?}");
    for f in &fits {
        assert!(f.normal.z.abs() > 0.9999, "normal {:?}", f.normal);
    }
    let mean_depth = cloud.points.iter().map(|p| p[2] as f64).sum::<f64>() / cloud.len() as f64;
    for f in &fits {
        assert!(f.rms <= 0.005 * mean_depth, "plane rms {} vs mean depth {mean_depth}", f.rms);
    }
    let covered: usize = fits.iter().map(|f| f.inliers.len()).sum();
    assert!(covered as f64 >= 0.99 * cloud.len() as f64, "{covered} of {}", cloud.len());

    let gt = gt_cloud(&views, 2);
    let m = eval_clouds(&cloud.points, &gt.points, default_distance_cap(&gt.points)).unwrap();
    assert!(m.accuracy < median_spacing(&gt.points), "{m:?}");
}

#[test]
fn exact_sphere_depths_fuse_onto_the_sphere() {
    let (_, cloud) = exact_cloud("sphere");
    let (centre, radius) = ([0.0f64, 0.0, 4.5], 1.0f64);
    let radial: Vec<f64> = cloud
        .points
        .iter()
        .map(|p| {
            let d: f64 = (0..3).map(|i| (p[i] as f64 - centre[i]).powi(2)).sum();
            (d.sqrt() - radius).abs()
        })
        .filter(|&e| e < 0.2)
        .collect();
    assert!(radial.len() > 1000, "{} sphere points", radial.len());
    let mean = radial.iter().sum::<f64>() / radial.len() as f64;
    assert!(mean < 1e-3, "mean radial error {mean}");
}

#[test]
fn fused_cloud_metrics_improve_with_the_cascade() {
    let (_, views) = common::render("two_planes");
    let results = common::estimate_all(&views, &pmstereo_core::PipelineConfig::default());
    let params = FilterParams::default();
    let (coarse, _) = common::fused_metrics(&views, &results, |r| r.stage_depth_full(3).unwrap(), &params);
    let (fine, n) = common::fused_metrics(&views, &results, |r| r.depth.clone(), &params);
    assert!(n > 0);
    assert!(fine.overall < coarse.overall, "{fine:?} vs {coarse:?}");
    for (r, v) in results.iter().zip(&views) {
        let within = common::fraction_within(&r.depth, &v.depth, 0.01);
        assert!(within > 0.5, "{within}");
    }
}
