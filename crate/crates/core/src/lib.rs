//! Cascade Patchmatch multi-view stereo.
pub use nalgebra;

pub mod coeffs;
pub mod cost;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod harness;
pub mod hypothesis;
pub mod io;
pub mod pipeline;

pub use coeffs::{load_coefficients, CoeffError, CoefficientSet, Tensor};
pub use geometry::{relative_pose, CameraModel, GeometryError, RelativePose};
pub use grid::{Grid, GridError, ValidityMask};
pub use hypothesis::{DepthRange, HypothesisVolume, StageConfig};
pub use io::{read_image, read_pfm, write_pfm, write_png, IoError};
pub use fusion::{fuse, filter_views, read_ply, write_ply, FilterParams, FusedCloud, FusionError};
pub use harness::{eval_clouds, error_cdf, CloudMetrics, ErrorCdf, HarnessError, RenderedView, Scene};
pub use pipeline::{run_cascade, DepthResult, PipelineConfig, PipelineError, RunReport, View};
