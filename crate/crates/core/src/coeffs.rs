//! Loadable coefficients for the learned sub-networks.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! "PMNW"  u32 version  u32 tensor_count
//! repeated: u16 name_len, name bytes, u8 ndim, u32 dims[ndim], f32 payload[prod(dims)]
//! ```
//!
//! Version 1 defines a fixed graph family. Every tensor is a `.weight` or
//! `.bias` of one of these layers:
//!
//! | prefix                    | weight shape          | notes                               |
//! |---------------------------|-----------------------|-------------------------------------|
//! | `fpn.conv0`               | `[c0, 3, 3, 3]`       | stride 1, full resolution           |
//! | `fpn.conv{1,2,3}`         | `[ci, c(i-1), 3, 3]`  | stride 2, one per pyramid stage     |
//! | `fpn.lat{1,2,3}`          | `[C, ci, 1, 1]`       | lateral merge, shared width `C`     |
//! | `prop{k}.offset`          | `[2Kp, C, 3, 3]`      | `Kp` in {8, 16}                     |
//! | `eval{k}.offset`          | `[18, C, 3, 3]`       | `Ke` = 9                            |
//! | `view_weight.layer{n}`    | `[out, in]`           | 1x1x1 stack over G, ends in 1       |
//! | `score.layer{n}`          | `[out, in]`           | 1x1x1 stack over G, ends in 1       |
//! | `spatial.layer{n}`        | `[out, in]`           | 1x1x1 stack over G, ends in 1       |
//! | `refine.depth_conv`       | `[fd, 1, 3, 3]`       | on the half-resolution depth        |
//! | `refine.deconv`           | `[fd, fd, 2, 2]`      | transposed, stride 2 (in, out, h, w)|
//! | `refine.image_conv`       | `[fi, 3, 3, 3]`       | on the full-resolution image        |
//! | `refine.fuse{n}`          | `[out, in, 3, 3]`     | first `in` = fd + fi                |
//! | `refine.residual`         | `[1, in, 3, 3]`       | residual head                       |
//!
//! Hidden layers use a leaky rectifier with slope [`LEAKY_SLOPE`]. Groups of
//! layers are optional; a mode that needs an absent group fails with
//! [`CoeffError::Missing`].

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"PMNW";
pub const FORMAT_VERSION: u32 = 1;
pub const LEAKY_SLOPE: f32 = 0.1;

#[derive(Debug, Error)]
pub enum CoeffError {
    #[error("bad magic: expected \"PMNW\"")]
    BadMagic,
    #[error("unsupported coefficient version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("coefficient file truncated while reading {0}")]
    Truncated(String),
    #[error("tensor {name}: shape {found:?} does not match the graph ({expected})")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: String,
    },
    #[error("unknown tensor {0}")]
    Unknown(String),
    #[error("duplicate tensor {0}")]
    Duplicate(String),
    #[error("missing tensor {0}")]
    Missing(String),
    #[error("tensor {0} has a malformed name")]
    BadName(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Self {
        let t = Self {
            name: name.into(),
            shape,
            values,
        };
        debug_assert_eq!(t.values.len(), t.shape.iter().product::<usize>());
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub version: u32,
    tensors: BTreeMap<String, Tensor>,
}

impl CoefficientSet {
    /// Builds and validates a set from tensors.
    pub fn new(tensors: Vec<Tensor>) -> Result<Self, CoeffError> {
        let mut map = BTreeMap::new();
        for t in tensors {
            if t.values.len() != t.shape.iter().product::<usize>() {
                return Err(CoeffError::ShapeMismatch {
                    name: t.name.clone(),
                    found: t.shape.clone(),
                    expected: format!("{} values", t.values.len()),
                });
            }
            if map.contains_key(&t.name) {
                return Err(CoeffError::Duplicate(t.name));
            }
            map.insert(t.name.clone(), t);
        }
        let set = Self {
            version: FORMAT_VERSION,
            tensors: map,
        };
        registry::validate(&set)?;
        Ok(set)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, CoeffError> {
        self.get(name)
            .ok_or_else(|| CoeffError::Missing(name.to_string()))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.values()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in self.tensors.values() {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CoeffError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
            return Err(CoeffError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CoeffError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let len = r.u16(&format!("tensor {i} name length"))? as usize;
            let name = String::from_utf8(r.take(len, &format!("tensor {i} name"))?.to_vec())
                .map_err(|_| CoeffError::BadName(format!("#{i}")))?;
            let ndim = r.take(1, &format!("{name} ndim"))?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32(&format!("{name} dims"))? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n * 4, &format!("{name} payload"))?;
            let values = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor {
                name,
                shape,
                values,
            });
        }
        Self::new(tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CoeffError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| CoeffError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

pub fn load_coefficients(path: impl AsRef<Path>) -> Result<CoefficientSet, CoeffError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CoeffError::Io {
        path: path.display().to_string(),
        source,
    })?;
    CoefficientSet::from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CoeffError> {
        if self.pos + n > self.bytes.len() {
            return Err(CoeffError::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CoeffError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self, what: &str) -> Result<u16, CoeffError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

/// Shape rules for the version-1 graph.
pub mod registry {
    use super::*;

    fn mismatch(t: &Tensor, expected: impl Into<String>) -> CoeffError {
        CoeffError::ShapeMismatch {
            name: t.name.clone(),
            found: t.shape.clone(),
            expected: expected.into(),
        }
    }

    /// Kernel-size rule for a layer prefix: `(ndim, trailing spatial dims)`.
    fn static_rule(layer: &str) -> Option<(usize, Option<[usize; 2]>)> {
        let conv3 = Some((4, Some([3, 3])));
        match layer {
            "fpn.conv0" | "fpn.conv1" | "fpn.conv2" | "fpn.conv3" => conv3,
            "fpn.lat1" | "fpn.lat2" | "fpn.lat3" => Some((4, Some([1, 1]))),
            "prop1.offset" | "prop2.offset" | "prop3.offset" => conv3,
            "eval1.offset" | "eval2.offset" | "eval3.offset" => conv3,
            "refine.depth_conv" | "refine.image_conv" | "refine.residual" => conv3,
            "refine.deconv" => Some((4, Some([2, 2]))),
            _ => {
                let stacked = |prefix: &str| {
                    layer
                        .strip_prefix(prefix)
                        .and_then(|n| n.parse::<usize>().ok())
                        .filter(|&n| n >= 1)
                        .is_some()
                };
                if stacked("view_weight.layer") || stacked("score.layer") || stacked("spatial.layer")
                {
                    Some((2, None))
                } else if stacked("refine.fuse") {
                    conv3
                } else {
                    None
                }
            }
        }
    }

    fn split(name: &str) -> Option<(&str, &str)> {
        let (layer, kind) = name.rsplit_once('.')?;
        matches!(kind, "weight" | "bias").then_some((layer, kind))
    }

    fn out_channels(set: &CoefficientSet, layer: &str) -> Result<usize, CoeffError> {
        Ok(set.require(&format!("{layer}.weight"))?.shape[0])
    }

    fn in_channels(set: &CoefficientSet, layer: &str) -> Result<usize, CoeffError> {
        Ok(set.require(&format!("{layer}.weight"))?.shape[1])
    }

    fn expect_in(set: &CoefficientSet, layer: &str, want: usize) -> Result<(), CoeffError> {
        let t = set.require(&format!("{layer}.weight"))?;
        if t.shape[1] != want {
            return Err(mismatch(t, format!("input channels {want}")));
        }
        Ok(())
    }

    fn expect_out(set: &CoefficientSet, layer: &str, want: usize) -> Result<(), CoeffError> {
        let t = set.require(&format!("{layer}.weight"))?;
        if t.shape[0] != want {
            return Err(mismatch(t, format!("output channels {want}")));
        }
        Ok(())
    }

    /// Number of consecutive `{prefix}{n}` layers starting at 1.
    pub fn stack_depth(set: &CoefficientSet, prefix: &str) -> usize {
        let mut n = 0;
        while set.get(&format!("{prefix}{}.weight", n + 1)).is_some() {
            n += 1;
        }
        n
    }

    fn validate_stack(set: &CoefficientSet, prefix: &str, in_first: Option<usize>) -> Result<(), CoeffError> {
        let depth = stack_depth(set, prefix);
        if depth == 0 {
            return Ok(());
        }
        if let Some(c) = in_first {
            expect_in(set, &format!("{prefix}1"), c)?;
        }
        for n in 2..=depth {
            let prev = out_channels(set, &format!("{prefix}{}", n - 1))?;
            expect_in(set, &format!("{prefix}{n}"), prev)?;
        }
        expect_out(set, &format!("{prefix}{depth}"), 1)
    }

    /// Checks every tensor against the version-1 graph.
    pub fn validate(set: &CoefficientSet) -> Result<(), CoeffError> {
        // per-tensor rules
        for t in set.tensors() {
            let (layer, kind) = split(&t.name).ok_or_else(|| CoeffError::Unknown(t.name.clone()))?;
            let (ndim, spatial) =
                static_rule(layer).ok_or_else(|| CoeffError::Unknown(t.name.clone()))?;
            if kind == "weight" {
                if t.shape.len() != ndim || t.shape.iter().any(|&d| d == 0) {
                    return Err(mismatch(t, format!("{ndim}-d weight")));
                }
                if let Some([kh, kw]) = spatial {
                    if t.shape[2] != kh || t.shape[3] != kw {
                        return Err(mismatch(t, format!("{kh}x{kw} kernel")));
                    }
                }
            }
        }
        // weight/bias pairing
        for t in set.tensors() {
            let (layer, kind) = split(&t.name).expect("checked above");
            let weight = set.require(&format!("{layer}.weight"))?;
            let bias_len = if layer == "refine.deconv" {
                weight.shape[1]
            } else {
                weight.shape[0]
            };
            if kind == "weight" {
                let bias = set.require(&format!("{layer}.bias"))?;
                if bias.shape != [bias_len] {
                    return Err(mismatch(bias, format!("[{bias_len}]")));
                }
            }
        }

        // feature pyramid chain
        let feature_width = if set.has_prefix("fpn.") {
            expect_in(set, "fpn.conv0", 3)?;
            for i in 1..=3 {
                let prev = out_channels(set, &format!("fpn.conv{}", i - 1))?;
                expect_in(set, &format!("fpn.conv{i}"), prev)?;
            }
            let c = out_channels(set, "fpn.lat3")?;
            for i in 1..=3 {
                expect_in(set, &format!("fpn.lat{i}"), out_channels(set, &format!("fpn.conv{i}"))?)?;
                expect_out(set, &format!("fpn.lat{i}"), c)?;
            }
            Some(c)
        } else {
            None
        };

        let mut offset_width = feature_width;
        for stage in 1..=3 {
            for (net, allowed) in [("prop", &[16usize, 32][..]), ("eval", &[18usize][..])] {
                let layer = format!("{net}{stage}.offset");
                if let Some(t) = set.get(&format!("{layer}.weight")) {
                    if !allowed.contains(&t.shape[0]) {
                        return Err(mismatch(t, format!("output channels in {allowed:?}")));
                    }
                    match offset_width {
                        Some(c) => expect_in(set, &layer, c)?,
                        None => offset_width = Some(t.shape[1]),
                    }
                }
            }
        }

        validate_stack(set, "view_weight.layer", None)?;
        validate_stack(set, "score.layer", None)?;
        validate_stack(set, "spatial.layer", None)?;
        let g_widths: Vec<usize> = ["view_weight.layer1", "score.layer1", "spatial.layer1"]
            .iter()
            .filter(|l| set.get(&format!("{l}.weight")).is_some())
            .map(|l| in_channels(set, l))
            .collect::<Result<_, _>>()?;
        if let Some(&g) = g_widths.first() {
            for (l, &w) in ["view_weight.layer1", "score.layer1", "spatial.layer1"]
                .iter()
                .filter(|l| set.get(&format!("{l}.weight")).is_some())
                .zip(&g_widths)
            {
                if w != g {
                    expect_in(set, l, g)?;
                }
            }
        }

        if set.has_prefix("refine.") {
            expect_in(set, "refine.depth_conv", 1)?;
            let fd = out_channels(set, "refine.depth_conv")?;
            let deconv = set.require("refine.deconv.weight")?;
            if deconv.shape[0] != fd || deconv.shape[1] != fd {
                return Err(mismatch(deconv, format!("[{fd}, {fd}, 2, 2]")));
            }
            expect_in(set, "refine.image_conv", 3)?;
            let fi = out_channels(set, "refine.image_conv")?;
            let depth = stack_depth(set, "refine.fuse");
            let mut width = fd + fi;
            for n in 1..=depth {
                let layer = format!("refine.fuse{n}");
                expect_in(set, &layer, width)?;
                width = out_channels(set, &layer)?;
            }
            expect_in(set, "refine.residual", width)?;
            expect_out(set, "refine.residual", 1)?;
        }
        Ok(())
    }
}
