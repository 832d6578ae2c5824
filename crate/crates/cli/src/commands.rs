use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use pmstereo_core::fusion::FusedCloud;
use pmstereo_core::geometry::write_cam_file;
use pmstereo_core::harness::{
    bundled_scene, cdf_from_errors, default_distance_cap, gt_cloud_from_depths, median_spacing,
    normalized_inverse_errors, BUNDLED_SCENES,
};
use pmstereo_core::{
    eval_clouds, filter_views, fuse, load_coefficients, read_image, read_ply, run_cascade, write_pfm,
    write_ply, write_png, CameraModel, CloudMetrics, CoefficientSet, DepthRange, ErrorCdf, Grid,
    RunReport, Scene,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::{self, CONFIDENCE, DEPTHS, GT_DEPTHS, MASKS};

/// Scene text for a bundled name or a path to a TOML file.
pub fn scene_source(spec: &str) -> Result<(String, String)> {
    if let Some(text) = bundled_scene(spec) {
        return Ok((spec.to_string(), text.to_string()));
    }
    let path = Path::new(spec);
    if path.exists() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
        return Ok((path.display().to_string(), text));
    }
    let names: Vec<&str> = BUNDLED_SCENES.iter().map(|(n, _)| *n).collect();
    bail!("{spec:?} is neither a scene file nor a bundled scene ({})", names.join(", "))
}

pub fn synth(spec: &str, out: &Path) -> Result<usize> {
    let (label, text) = scene_source(spec)?;
    let scene = Scene::from_toml(&text).with_context(|| format!("scene {label}"))?;
    let views = scene.render_checked().with_context(|| format!("scene {label}"))?;
    for dir in [dataset::IMAGES, dataset::CAMS, GT_DEPTHS] {
        dataset::ensure_dir(out, dir)?;
    }
    for (i, v) in views.iter().enumerate() {
        write_png(dataset::image_path(out, i), &v.image)?;
        write_cam_file(dataset::cam_path(out, i), &v.camera)?;
        write_pfm(dataset::map_path(out, GT_DEPTHS, i), &v.depth)?;
    }
    std::fs::write(out.join("scene.toml"), &text).context("writing scene.toml")?;
    info!("wrote {} views of {label} to {}", views.len(), out.display());
    Ok(views.len())
}

#[derive(Debug, Serialize)]
struct ViewReport {
    reference: usize,
    sources: Vec<usize>,
    #[serde(flatten)]
    run: RunReport,
}

#[derive(Debug, Serialize)]
struct DepthReport<'a> {
    config: &'a RunConfig,
    views: Vec<ViewReport>,
    wall_time_ms: f64,
}

pub struct DepthJob<'a> {
    pub dataset: &'a Path,
    pub out: &'a Path,
    pub references: Option<Vec<usize>>,
    pub weights: Option<&'a Path>,
}

pub fn depth(job: &DepthJob<'_>, cfg: &mut RunConfig) -> Result<()> {
    let started = Instant::now();
    let indices = dataset::view_indices(job.dataset)?;
    let views = dataset::load_views(job.dataset, &indices)?;
    ensure!(views.len() >= 2, "need at least two views, found {}", views.len());
    if cfg.pipeline.views > views.len() {
        warn!(
            "requested {} views but the dataset has {}; using {}",
            cfg.pipeline.views,
            views.len(),
            views.len()
        );
        cfg.pipeline.views = views.len();
    }
    cfg.validate()?;
    let coeffs: Option<CoefficientSet> = match job.weights {
        Some(p) => Some(load_coefficients(p).with_context(|| format!("coefficients {}", p.display()))?),
        None => None,
    };
    let cams: Vec<_> = views.iter().map(|v| v.camera.clone()).collect();
    let refs: Vec<usize> = match &job.references {
        Some(r) => {
            for &i in r {
                ensure!(i < views.len(), "reference {i} out of range (dataset has {} views)", views.len());
            }
            r.clone()
        }
        None => (0..views.len()).collect(),
    };
    dataset::ensure_dir(job.out, DEPTHS)?;
    dataset::ensure_dir(job.out, CONFIDENCE)?;

    let pipeline = &cfg.pipeline;
    let reports = refs
        .par_iter()
        .map(|&r| -> Result<ViewReport> {
            let order = dataset::source_order(&cams, r);
            let sources: Vec<usize> = order.into_iter().take(pipeline.views - 1).collect();
            let input: Vec<_> = std::iter::once(r).chain(sources.iter().copied()).map(|i| views[i].clone()).collect();
            let result = run_cascade(&input, pipeline, coeffs.as_ref())
                .with_context(|| format!("view {}", dataset::stem(indices[r])))?;
            write_pfm(dataset::map_path(job.out, DEPTHS, indices[r]), &result.depth)?;
            write_pfm(dataset::map_path(job.out, CONFIDENCE, indices[r]), &result.confidence)?;
            let run = result.report();
            info!(
                "view {}: {:.0} ms, peak hypothesis storage {} bytes",
                dataset::stem(indices[r]),
                run.total_time_ms,
                run.peak_hypothesis_bytes
            );
            Ok(ViewReport {
                reference: indices[r],
                sources: sources.iter().map(|&i| indices[i]).collect(),
                run,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let report = DepthReport {
        config: cfg,
        views: reports,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    let path = job.out.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub struct FuseJob<'a> {
    pub dataset: &'a Path,
    /// Directory holding `depth_est/` and `confidence/`.
    pub depths: &'a Path,
    pub out: &'a Path,
}

pub fn fuse_cmd(job: &FuseJob<'_>, cfg: &mut RunConfig) -> Result<FusedCloud> {
    cfg.filter.validate()?;
    let indices = dataset::view_indices(job.dataset)?;
    let partners = indices.len().saturating_sub(1);
    if cfg.filter.min_consistent_views > partners {
        warn!(
            "{} consistent views requested but only {partners} other views exist; using {partners}",
            cfg.filter.min_consistent_views
        );
        cfg.filter.min_consistent_views = partners;
    }
    let cams = dataset::load_cameras(job.dataset, &indices)?;
    let depths = dataset::load_maps(job.depths, DEPTHS, &indices)?;
    let confs = dataset::load_maps(job.depths, CONFIDENCE, &indices)?;
    let images = indices
        .iter()
        .map(|&i| {
            let p = dataset::image_path(job.dataset, i);
            read_image(&p).with_context(|| format!("image {}", p.display()))
        })
        .collect::<Result<Vec<Grid>>>()?;
    let masks = filter_views(&depths, &confs, &cams, &cfg.filter)?;
    dataset::ensure_dir(job.depths, MASKS)?;
    for (&i, m) in indices.iter().zip(&masks) {
        write_pfm(dataset::map_path(job.depths, MASKS, i), &m.to_grid())?;
    }
    let cloud = fuse(&depths, &masks, &images, &cams, &cfg.filter)?;
    if cloud.is_empty() {
        bail!(
            "no points survived filtering (conf_min {}, reprojection {} px, relative depth {}, {} consistent views)",
            cfg.filter.conf_min,
            cfg.filter.reproj_max,
            cfg.filter.relative_depth_max,
            cfg.filter.min_consistent_views
        );
    }
    if let Some(parent) = job.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_ply(&cloud, job.out)?;
    info!("fused {} points into {}", cloud.len(), job.out.display());
    Ok(cloud)
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub prediction: PathBuf,
    pub ground_truth: PathBuf,
    pub predicted_points: usize,
    pub ground_truth_points: usize,
    pub distance_cap: f64,
    pub metrics: CloudMetrics,
    /// Depth error CDF over all views, when depth maps are available.
    pub depth_cdf: Option<ErrorCdf>,
}

pub struct EvalJob<'a> {
    pub prediction: &'a Path,
    /// A PLY file or a dataset directory with `gt_depths/`.
    pub ground_truth: &'a Path,
    /// Directory holding `depth_est/` for the CDF table.
    pub depths: Option<&'a Path>,
    pub stride: usize,
    pub cap: Option<f64>,
}

pub fn eval(job: &EvalJob<'_>) -> Result<EvalReport> {
    let pred = read_ply(job.prediction).with_context(|| format!("reading {}", job.prediction.display()))?;
    let mut depth_cdf = None;
    let gt = if job.ground_truth.is_dir() {
        let root = job.ground_truth;
        let indices = dataset::view_indices(root)?;
        let cams = dataset::load_cameras(root, &indices)?;
        let gt_depths = dataset::load_maps(root, GT_DEPTHS, &indices)?;
        let depths_dir = job.depths.unwrap_or(root);
        if depths_dir.join(DEPTHS).is_dir() {
            let pred_depths = dataset::load_maps(depths_dir, DEPTHS, &indices)?;
            depth_cdf = Some(pooled_cdf(&pred_depths, &gt_depths, &cams)?);
        }
        gt_cloud_from_depths(&gt_depths, &cams, job.stride)
    } else {
        read_ply(job.ground_truth).with_context(|| format!("reading {}", job.ground_truth.display()))?
    };
    ensure!(!pred.is_empty(), "prediction {} has no points", job.prediction.display());
    ensure!(!gt.is_empty(), "ground truth {} has no points", job.ground_truth.display());
    let cap = job.cap.unwrap_or_else(|| default_distance_cap(&gt.points));
    ensure!(cap > 0.0, "distance cap must be positive (median spacing {})", median_spacing(&gt.points));
    let metrics = eval_clouds(&pred.points, &gt.points, cap)?;
    Ok(EvalReport {
        prediction: job.prediction.to_path_buf(),
        ground_truth: job.ground_truth.to_path_buf(),
        predicted_points: pred.len(),
        ground_truth_points: gt.len(),
        distance_cap: cap,
        metrics,
        depth_cdf,
    })
}

/// CDF over the pixels of all views, each normalised by its own camera range.
fn pooled_cdf(pred: &[Grid], gt: &[Grid], cams: &[CameraModel]) -> Result<ErrorCdf> {
    let mut errors = Vec::new();
    for ((p, g), cam) in pred.iter().zip(gt).zip(cams) {
        ensure!(
            (p.width(), p.height()) == (g.width(), g.height()),
            "estimated depth is {}x{} but ground truth is {}x{}",
            p.width(),
            p.height(),
            g.width(),
            g.height()
        );
        let range = DepthRange::new(cam.depth_min as f32, cam.depth_max as f32)?;
        errors.extend(normalized_inverse_errors(p, g, range));
    }
    Ok(cdf_from_errors(&errors))
}

pub fn render_eval_text(r: &EvalReport) -> String {
    let mut s = format!(
        "prediction   {} ({} points)\nground truth {} ({} points)\ndistance cap {:.6}\n\naccuracy     {:.6}\ncompleteness {:.6}\noverall      {:.6}\n",
        r.prediction.display(),
        r.predicted_points,
        r.ground_truth.display(),
        r.ground_truth_points,
        r.distance_cap,
        r.metrics.accuracy,
        r.metrics.completeness,
        r.metrics.overall
    );
    if let Some(c) = &r.depth_cdf {
        s.push_str(&format!(
            "\nnormalized inverse-depth error over {} pixels (mean {:.5})\n  error <=   fraction\n",
            c.pixels, c.mean_error
        ));
        for (a, v) in c.abscissae.iter().zip(&c.values) {
            let i = (a * 100.0).round() as usize;
            if i <= 10 || i % 5 == 0 {
                s.push_str(&format!("  {a:>8.2}   {v:.4}\n"));
            }
        }
    }
    s
}
