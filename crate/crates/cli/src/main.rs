mod commands;
mod config;
mod dataset;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::commands::{DepthJob, EvalJob, FuseJob};
use crate::config::{parse_stage_iters, RunConfig};

/// Cascade Patchmatch multi-view stereo.
#[derive(Debug, Parser)]
#[command(name = "pmstereo", version, about)]
struct Cli {
    /// Layered TOML configuration; later files override earlier ones.
    #[arg(long = "config", global = true, value_name = "FILE")]
    configs: Vec<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic scene into a dataset directory.
    Synth {
        /// Bundled scene name or path to a scene TOML file.
        scene: String,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Estimate a depth and confidence map for every reference view.
    Depth {
        dataset: PathBuf,
        /// Output directory (defaults to the dataset).
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Only these reference views, by position.
        #[arg(long, value_delimiter = ',')]
        refs: Option<Vec<usize>>,
        /// Coefficient file for the learned modules.
        #[arg(long, value_name = "FILE")]
        weights: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineFlags,
    },
    /// Filter the depth maps and fuse them into a point cloud.
    Fuse {
        dataset: PathBuf,
        /// Directory holding depth_est/ and confidence/ (defaults to the dataset).
        #[arg(long)]
        depths: Option<PathBuf>,
        /// Output PLY (defaults to <depths>/fused.ply).
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        filter: FilterFlags,
    },
    /// Score a fused cloud against ground truth.
    Eval {
        prediction: PathBuf,
        /// Ground-truth PLY or dataset directory with gt_depths/.
        #[arg(long)]
        gt: PathBuf,
        /// Directory holding depth_est/ for the depth error table.
        #[arg(long)]
        depths: Option<PathBuf>,
        /// Pixel stride when building the ground-truth cloud from depth maps.
        #[arg(long, default_value_t = 2)]
        stride: usize,
        /// Outlier distance cap (defaults to 20x the median ground-truth spacing).
        #[arg(long)]
        cap: Option<f64>,
        /// Also write the report as JSON.
        #[arg(long, value_name = "FILE")]
        json: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct PipelineFlags {
    /// Views per estimate, reference included.
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Iterations for stages 3, 2 and 1, e.g. 2,2,1.
    #[arg(long, value_name = "A,B,C")]
    stage_iters: Option<String>,
    /// Fixed propagation offsets.
    #[arg(long)]
    no_ap: bool,
    /// Fixed evaluation offsets.
    #[arg(long)]
    no_ae: bool,
    /// Uniform view weights.
    #[arg(long)]
    no_view_weight: bool,
}

#[derive(Debug, Args)]
struct FilterFlags {
    #[arg(long)]
    conf_min: Option<f32>,
    /// Round-trip reprojection limit in pixels.
    #[arg(long)]
    reproj_max: Option<f32>,
    #[arg(long)]
    rel_depth_max: Option<f32>,
    #[arg(long)]
    min_views: Option<usize>,
}

impl PipelineFlags {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let p = &mut cfg.pipeline;
        if let Some(v) = self.views {
            p.views = v;
        }
        if let Some(s) = self.seed {
            p.seed = s;
        }
        if let Some(s) = &self.stage_iters {
            let iters = parse_stage_iters(s)?;
            for (k, n) in [3, 2, 1].into_iter().zip(iters) {
                p.stage_mut(k).iterations = n;
            }
        }
        p.adaptive_propagation &= !self.no_ap;
        p.adaptive_evaluation &= !self.no_ae;
        p.view_weighting &= !self.no_view_weight;
        Ok(())
    }
}

impl FilterFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let f = &mut cfg.filter;
        if let Some(v) = self.conf_min {
            f.conf_min = v;
        }
        if let Some(v) = self.reproj_max {
            f.reproj_max = v;
        }
        if let Some(v) = self.rel_depth_max {
            f.relative_depth_max = v;
        }
        if let Some(v) = self.min_views {
            f.min_consistent_views = v;
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = RunConfig::load(&cli.configs)?;
    match cli.command {
        Command::Synth { scene, out } => {
            commands::synth(&scene, &out)?;
        }
        Command::Depth {
            dataset,
            out,
            refs,
            weights,
            pipeline,
        } => {
            pipeline.apply(&mut cfg)?;
            let out = out.unwrap_or_else(|| dataset.clone());
            let job = DepthJob {
                dataset: &dataset,
                out: &out,
                references: refs,
                weights: weights.as_deref(),
            };
            commands::depth(&job, &mut cfg)?;
        }
        Command::Fuse {
            dataset,
            depths,
            out,
            filter,
        } => {
            filter.apply(&mut cfg);
            let depths = depths.unwrap_or_else(|| dataset.clone());
            let out = out.unwrap_or_else(|| depths.join("fused.ply"));
            let job = FuseJob {
                dataset: &dataset,
                depths: &depths,
                out: &out,
            };
            commands::fuse_cmd(&job, &mut cfg)?;
        }
        Command::Eval {
            prediction,
            gt,
            depths,
            stride,
            cap,
            json,
        } => {
            let job = EvalJob {
                prediction: &prediction,
                ground_truth: &gt,
                depths: depths.as_deref(),
                stride,
                cap,
            };
            let report = commands::eval(&job)?;
            print!("{}", commands::render_eval_text(&report));
            if let Some(path) = json {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(())
}
