//! Layered run configuration: built-in defaults, then each `--config` file in
//! order, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pmstereo_core::pipeline::merge_toml;
use pmstereo_core::{FilterParams, PipelineConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub filter: FilterParams,
}

impl RunConfig {
    pub fn load(files: &[PathBuf]) -> Result<Self> {
        let mut value = toml::Value::try_from(Self::default()).context("serializing defaults")?;
        for file in files {
            merge_toml(&mut value, read_layer(file)?);
        }
        let cfg: Self = value.try_into().context("invalid configuration")?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.filter.validate()?;
        Ok(())
    }
}

fn read_layer(path: &Path) -> Result<toml::Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Parses `a,b,c` into iteration counts for stages 3, 2 and 1.
pub fn parse_stage_iters(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        bail!("expected three comma-separated counts, got {s:?}");
    }
    let mut out = [0; 3];
    for (slot, p) in out.iter_mut().zip(&parts) {
        *slot = p.parse().with_context(|| format!("bad iteration count {p:?}"))?;
    }
    Ok(out)
}
