//! On-disk dataset layout.
//!
//! ```text
//! images/00000000.png      cams/00000000_cam.txt     gt_depths/00000000.pfm
//! depth_est/00000000.pfm   confidence/00000000.pfm   masks/00000000.pfm
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pmstereo_core::geometry::read_cam_file;
use pmstereo_core::{read_image, read_pfm, CameraModel, Grid, View};

pub const IMAGES: &str = "images";
pub const CAMS: &str = "cams";
pub const GT_DEPTHS: &str = "gt_depths";
pub const DEPTHS: &str = "depth_est";
pub const CONFIDENCE: &str = "confidence";
pub const MASKS: &str = "masks";

pub fn stem(index: usize) -> String {
    format!("{index:08}")
}

pub fn image_path(root: &Path, index: usize) -> PathBuf {
    root.join(IMAGES).join(format!("{}.png", stem(index)))
}

pub fn cam_path(root: &Path, index: usize) -> PathBuf {
    root.join(CAMS).join(format!("{}_cam.txt", stem(index)))
}

pub fn map_path(root: &Path, dir: &str, index: usize) -> PathBuf {
    root.join(dir).join(format!("{}.pfm", stem(index)))
}

/// View indices found under `images/`, sorted.
pub fn view_indices(root: &Path) -> Result<Vec<usize>> {
    let dir = root.join(IMAGES);
    let entries = std::fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let index = path
            .file_stem()
            .and_then(|s| s.to_str())
            .filter(|s| s.len() == 8)
            .and_then(|s| s.parse::<usize>().ok());
        if let Some(i) = index {
            out.push(i);
        }
    }
    out.sort_unstable();
    if out.is_empty() {
        bail!("no images named like 00000000.png in {}", dir.display());
    }
    Ok(out)
}

pub fn load_cameras(root: &Path, indices: &[usize]) -> Result<Vec<CameraModel>> {
    indices
        .iter()
        .map(|&i| {
            let path = cam_path(root, i);
            read_cam_file(&path).with_context(|| format!("camera {}", path.display()))
        })
        .collect()
}

pub fn load_views(root: &Path, indices: &[usize]) -> Result<Vec<View>> {
    let cams = load_cameras(root, indices)?;
    indices
        .iter()
        .zip(cams)
        .map(|(&i, camera)| {
            let path = image_path(root, i);
            let image = read_image(&path).with_context(|| format!("image {}", path.display()))?;
            Ok(View { image, camera })
        })
        .collect()
}

pub fn load_maps(root: &Path, dir: &str, indices: &[usize]) -> Result<Vec<Grid>> {
    indices
        .iter()
        .map(|&i| {
            let path = map_path(root, dir, i);
            read_pfm(&path).with_context(|| format!("reading {}", path.display()))
        })
        .collect()
}

/// Source order for `reference`: every other view, nearest camera centre
/// first, ties broken by position.
pub fn source_order(cams: &[CameraModel], reference: usize) -> Vec<usize> {
    let centre = cams[reference].center();
    let mut others: Vec<usize> = (0..cams.len()).filter(|&i| i != reference).collect();
    others.sort_by(|&a, &b| {
        let da = (cams[a].center() - centre).norm();
        let db = (cams[b].center() - centre).norm();
        da.total_cmp(&db).then(a.cmp(&b))
    });
    others
}

pub fn ensure_dir(root: &Path, dir: &str) -> Result<PathBuf> {
    let path = root.join(dir);
    std::fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(path)
}
