//! Multi-scale feature extraction.
//!
//! Two modes produce a three-stage pyramid (stage `k` at `W/2^k x H/2^k`):
//!
//! * handcrafted: on the `k`-times pooled intensity image, eight channels
//!   `[I, dI/dx, dI/dy, c0..c4]` where `c*` are 3x3 mean-centred samples at the
//!   four diagonal neighbours and the centre;
//! * coefficients: the version-1 FPN graph from [`crate::coeffs`]: a stride-1
//!   stem, three stride-2 3x3 convolutions with leaky rectifiers, 1x1 lateral
//!   projections to a shared width `C`, and a top-down pass adding the x2
//!   upsampled coarser level.

use rayon::prelude::*;
use thiserror::Error;

use crate::coeffs::{CoeffError, CoefficientSet, LEAKY_SLOPE};
use crate::grid::Grid;

pub const HANDCRAFTED_CHANNELS: usize = 8;
pub const STAGES: usize = 3;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("kernel expects {expected} input channels, grid has {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("image must have 1 or 3 channels, got {0}")]
    BadImageChannels(usize),
    #[error("image size {0}x{1} must be divisible by 8")]
    NotDivisible(usize, usize),
    #[error("kernel larger than padded input")]
    KernelTooLarge,
    #[error(transparent)]
    Coefficients(#[from] CoeffError),
}

/// Convolution weights in `[out, in, kh, kw]` order with one bias per output.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvKernel {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        weights: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Self {
        assert_eq!(weights.len(), out_channels * in_channels * kh * kw);
        let bias = bias.unwrap_or_else(|| vec![0.0; out_channels]);
        assert_eq!(bias.len(), out_channels);
        Self {
            out_channels,
            in_channels,
            kh,
            kw,
            weights,
            bias,
        }
    }

    /// Reads `{layer}.weight` / `{layer}.bias`.
    pub fn from_set(set: &CoefficientSet, layer: &str) -> Result<Self, CoeffError> {
        let w = set.require(&format!("{layer}.weight"))?;
        let b = set.require(&format!("{layer}.bias"))?;
        Ok(Self::new(
            w.shape[0],
            w.shape[1],
            w.shape[2],
            w.shape[3],
            w.values.clone(),
            Some(b.values.clone()),
        ))
    }

    #[inline]
    fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f32 {
        self.weights[((o * self.in_channels + i) * self.kh + ky) * self.kw + kx]
    }
}

/// 2D cross-correlation (no kernel flip) with zero padding.
///
/// Output size is `(in + 2 * padding - k) / stride + 1` per axis.
pub fn conv2d(
    input: &Grid,
    kernel: &ConvKernel,
    stride: usize,
    padding: usize,
) -> Result<Grid, FeatureError> {
    if input.channels() != kernel.in_channels {
        return Err(FeatureError::ChannelMismatch {
            expected: kernel.in_channels,
            found: input.channels(),
        });
    }
    let (w, h, cin) = input.shape();
    if w + 2 * padding < kernel.kw || h + 2 * padding < kernel.kh {
        return Err(FeatureError::KernelTooLarge);
    }
    let ow = (w + 2 * padding - kernel.kw) / stride + 1;
    let oh = (h + 2 * padding - kernel.kh) / stride + 1;
    let cout = kernel.out_channels;
    let data = input.data();
    Ok(Grid::from_fn_rows(ow, oh, cout, |oy, row| {
        for ox in 0..ow {
            let out = &mut row[ox * cout..(ox + 1) * cout];
            out.copy_from_slice(&kernel.bias);
            for ky in 0..kernel.kh {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kernel.kw {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let px = &data[(iy as usize * w + ix as usize) * cin..][..cin];
                    for (o, acc) in out.iter_mut().enumerate() {
                        let mut s = 0.0f32;
                        for (i, &v) in px.iter().enumerate() {
                            s += kernel.weight(o, i, ky, kx) * v;
                        }
                        *acc += s;
                    }
                }
            }
        }
    }))
}

/// Stride-2, 2x2 transposed convolution; weights in `[in, out, 2, 2]` order.
pub fn conv_transpose_x2(input: &Grid, kernel: &ConvKernel) -> Result<Grid, FeatureError> {
    // ConvKernel fields are reused as (in, out) for this layout
    let cin = kernel.out_channels;
    let cout = kernel.in_channels;
    if input.channels() != cin {
        return Err(FeatureError::ChannelMismatch {
            expected: cin,
            found: input.channels(),
        });
    }
    let (w, h, _) = input.shape();
    Ok(Grid::from_fn_rows(2 * w, 2 * h, cout, |oy, row| {
        let (iy, ky) = (oy / 2, oy % 2);
        for ox in 0..2 * w {
            let (ix, kx) = (ox / 2, ox % 2);
            let px = input.pixel(ix, iy);
            for o in 0..cout {
                let mut s = kernel.bias[o];
                for (i, &v) in px.iter().enumerate() {
                    s += kernel.weights[((i * cout + o) * 2 + ky) * 2 + kx] * v;
                }
                row[ox * cout + o] = s;
            }
        }
    }))
}

#[inline]
pub fn leaky_relu(v: f32) -> f32 {
    if v >= 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

pub fn leaky_relu_grid(g: &Grid) -> Grid {
    g.map(leaky_relu)
}

/// Elementwise sum of equally shaped grids.
pub fn add(a: &Grid, b: &Grid) -> Grid {
    assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Grid::from_vec(a.width(), a.height(), a.channels(), data).expect("same shape")
}

/// Per-stage feature maps plus the full-resolution guidance image.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub guidance: Grid,
    stages: [Grid; STAGES],
}

impl FeaturePyramid {
    /// Features for stage `k` in `1..=3`.
    pub fn stage(&self, k: usize) -> &Grid {
        &self.stages[k - 1]
    }

    pub fn channels(&self) -> usize {
        self.stages[0].channels()
    }

    /// Applies `f` to every stage.
    pub fn map_stages(&self, f: impl Fn(&Grid) -> Grid) -> FeaturePyramid {
        FeaturePyramid {
            guidance: self.guidance.clone(),
            stages: [f(&self.stages[0]), f(&self.stages[1]), f(&self.stages[2])],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum FeatureMode<'a> {
    Handcrafted,
    Coefficients(&'a CoefficientSet),
}

pub fn extract_pyramid(image: &Grid, mode: FeatureMode<'_>) -> Result<FeaturePyramid, FeatureError> {
    if image.channels() != 1 && image.channels() != 3 {
        return Err(FeatureError::BadImageChannels(image.channels()));
    }
    if image.width() % 8 != 0 || image.height() % 8 != 0 {
        return Err(FeatureError::NotDivisible(image.width(), image.height()));
    }
    let stages = match mode {
        FeatureMode::Handcrafted => {
            let gray = image.to_gray();
            let l1 = gray.downsample_x2();
            let l2 = l1.downsample_x2();
            let l3 = l2.downsample_x2();
            [handcrafted(&l1), handcrafted(&l2), handcrafted(&l3)]
        }
        FeatureMode::Coefficients(set) => fpn(image, set)?,
    };
    Ok(FeaturePyramid {
        guidance: image.clone(),
        stages,
    })
}

const CENSUS_OFFSETS: [(isize, isize); 5] = [(-1, -1), (1, -1), (0, 0), (-1, 1), (1, 1)];

/// Handcrafted descriptor on one intensity level.
pub fn handcrafted(gray: &Grid) -> Grid {
    assert_eq!(gray.channels(), 1);
    let (w, h) = (gray.width(), gray.height());
    let at = |x: isize, y: isize| gray.get_clamped(x, y, 0);
    Grid::from_fn_rows(w, h, HANDCRAFTED_CHANNELS, |y, row| {
        let y = y as isize;
        for x in 0..w {
            let xi = x as isize;
            let out = &mut row[x * HANDCRAFTED_CHANNELS..(x + 1) * HANDCRAFTED_CHANNELS];
            out[0] = at(xi, y);
            out[1] = one_sided_diff(w, xi, |t| at(t, y));
            out[2] = one_sided_diff(h, y, |t| at(xi, t));
            let mut mean = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    mean += at(xi + dx, y + dy);
                }
            }
            mean /= 9.0;
            for (c, (dx, dy)) in CENSUS_OFFSETS.iter().enumerate() {
                out[3 + c] = at(xi + dx, y + dy) - mean;
            }
        }
    })
}

/// Central difference, one-sided at the borders.
fn one_sided_diff(len: usize, i: isize, f: impl Fn(isize) -> f32) -> f32 {
    let last = len as isize - 1;
    if last == 0 {
        0.0
    } else if i == 0 {
        f(1) - f(0)
    } else if i == last {
        f(last) - f(last - 1)
    } else {
        0.5 * (f(i + 1) - f(i - 1))
    }
}

fn fpn(image: &Grid, set: &CoefficientSet) -> Result<[Grid; STAGES], FeatureError> {
    let rgb = if image.channels() == 1 {
        Grid::from_fn(image.width(), image.height(), 3, |x, y, _| image.get(x, y, 0))
    } else {
        image.clone()
    };
    let conv = |g: &Grid, layer: &str, stride: usize| -> Result<Grid, FeatureError> {
        let k = ConvKernel::from_set(set, layer)?;
        let pad = k.kh / 2;
        conv2d(g, &k, stride, pad)
    };
    let c0 = leaky_relu_grid(&conv(&rgb, "fpn.conv0", 1)?);
    let c1 = leaky_relu_grid(&conv(&c0, "fpn.conv1", 2)?);
    let c2 = leaky_relu_grid(&conv(&c1, "fpn.conv2", 2)?);
    let c3 = leaky_relu_grid(&conv(&c2, "fpn.conv3", 2)?);
    let p3 = conv(&c3, "fpn.lat3", 1)?;
    let p2 = add(&conv(&c2, "fpn.lat2", 1)?, &p3.upsample_x2());
    let p1 = add(&conv(&c1, "fpn.lat1", 1)?, &p2.upsample_x2());
    Ok([p1, p2, p3])
}

/// Standardises each channel over the image, then rescales every pixel's
/// descriptor to squared norm `C * gain`, so a perfect match scores `gain`
/// after group correlation and averaging over groups. Near-zero descriptors
/// become zero.
pub fn normalize_features(features: &Grid, gain: f32) -> Grid {
    let (w, h, c) = features.shape();
    let n = (w * h) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for px in features.data().chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for px in features.data().chunks_exact(c) {
        for ((s, &v), m) in var.iter_mut().zip(px).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let inv_std: Vec<f32> = var
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-8 {
                (1.0 / sd) as f32
            } else {
                0.0
            }
        })
        .collect();
    let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    let target = (c as f32 * gain).sqrt();
    let mut out = features.clone();
    out.data_mut().par_chunks_mut(c).for_each(|px| {
        for ((v, m), s) in px.iter_mut().zip(&mean).zip(&inv_std) {
            *v = (*v - m) * s;
        }
        let norm = px.iter().map(|v| v * v).sum::<f32>().sqrt();
        let scale = if norm > 1e-6 { target / norm } else { 0.0 };
        px.iter_mut().for_each(|v| *v *= scale);
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::Tensor;

    fn ramp(w: usize, h: usize) -> Grid {
        Grid::from_fn(w, h, 1, |x, _, _| x as f32)
    }

    #[test]
    fn identity_and_average_kernels() {
        let g = Grid::from_fn(5, 4, 2, |x, y, c| (x * 3 + y * 7 + c) as f32);
        let id = ConvKernel::new(2, 2, 1, 1, vec![1.0, 0.0, 0.0, 1.0], None);
        assert_eq!(conv2d(&g, &id, 1, 0).unwrap(), g);

        let c = Grid::filled(6, 6, 1, 3.0);
        let avg = ConvKernel::new(1, 1, 3, 3, vec![1.0 / 9.0; 9], None);
        let out = conv2d(&c, &avg, 1, 0).unwrap();
        assert_eq!(out.shape(), (4, 4, 1));
        assert!(out.data().iter().all(|&v| (v - 3.0).abs() < 1e-6));
    }

    #[test]
    fn difference_kernel_on_ramp() {
        // cross-correlation: out(x) = k0 * I(x) + k1 * I(x + 1)
        let r = ramp(6, 2);
        let fwd = ConvKernel::new(1, 1, 1, 2, vec![-1.0, 1.0], None);
        let out = conv2d(&r, &fwd, 1, 0).unwrap();
        assert_eq!(out.shape(), (5, 2, 1));
        assert!(out.data().iter().all(|&v| v == 1.0));
        let bwd = ConvKernel::new(1, 1, 1, 2, vec![1.0, -1.0], None);
        let out = conv2d(&r, &bwd, 1, 0).unwrap();
        assert!(out.data().iter().all(|&v| v == -1.0));
        // zero padding: the padded left border sees I(-1) = 0
        let padded = conv2d(&r, &fwd, 1, 1).unwrap();
        assert_eq!(padded.shape(), (7, 4, 1));
        assert_eq!(padded.get(0, 1, 0), 0.0);
        assert_eq!(padded.get(3, 1, 0), 1.0);
    }

    #[test]
    fn conv_output_size_and_errors() {
        let g = Grid::new(9, 7, 3);
        let k = ConvKernel::new(4, 3, 3, 3, vec![0.0; 108], None);
        assert_eq!(conv2d(&g, &k, 2, 1).unwrap().shape(), (5, 4, 4));
        let k1 = ConvKernel::new(4, 2, 3, 3, vec![0.0; 72], None);
        assert!(matches!(conv2d(&g, &k1, 1, 1), Err(FeatureError::ChannelMismatch { .. })));
    }

    #[test]
    fn transposed_conv_doubles() {
        let g = Grid::filled(3, 2, 1, 2.0);
        let k = ConvKernel::new(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0], Some(vec![0.5]));
        let out = conv_transpose_x2(&g, &k).unwrap();
        assert_eq!(out.shape(), (6, 4, 1));
        assert_eq!(out.get(0, 0, 0), 2.5);
        assert_eq!(out.get(1, 1, 0), 8.5);
    }

    #[test]
    fn constant_image_features() {
        let p = extract_pyramid(&Grid::filled(32, 16, 1, 0.4), FeatureMode::Handcrafted).unwrap();
        for k in 1..=3 {
            let f = p.stage(k);
            for px in f.data().chunks_exact(8) {
                assert!((px[0] - 0.4).abs() < 1e-6);
                assert!(px[1..].iter().all(|v| v.abs() < 1e-6));
            }
        }
    }

    #[test]
    fn ramp_gradient_is_one() {
        let f = handcrafted(&ramp(10, 6));
        for y in 0..6 {
            for x in 0..10 {
                assert_eq!(f.get(x, y, 1), 1.0);
                assert_eq!(f.get(x, y, 2), 0.0);
            }
        }
    }

    #[test]
    fn pyramid_shapes() {
        let img = Grid::from_fn(64, 64, 3, |x, y, c| ((x * 7 + y * 13 + c) % 17) as f32 / 17.0);
        let p = extract_pyramid(&img, FeatureMode::Handcrafted).unwrap();
        for (k, size) in [(1, 32), (2, 16), (3, 8)] {
            assert_eq!(p.stage(k).shape(), (size, size, 8));
        }
        assert!(matches!(
            extract_pyramid(&Grid::new(12, 8, 1), FeatureMode::Handcrafted),
            Err(FeatureError::NotDivisible(12, 8))
        ));
    }

    #[test]
    fn handcrafted_translation_equivariance() {
        let tex = |x: isize, y: isize| (((x * 37 + y * 91) % 53) as f32 / 53.0).sin();
        for k in 1..=3usize {
            let s = 1isize << k;
            let a = Grid::from_fn(64, 64, 1, |x, y, _| tex(x as isize, y as isize));
            let b = Grid::from_fn(64, 64, 1, |x, y, _| tex(x as isize + s, y as isize));
            let fa = extract_pyramid(&a, FeatureMode::Handcrafted).unwrap();
            let fb = extract_pyramid(&b, FeatureMode::Handcrafted).unwrap();
            let (ga, gb) = (fa.stage(k), fb.stage(k));
            for y in 2..ga.height() - 2 {
                for x in 2..ga.width() - 3 {
                    for c in 0..8 {
                        assert!((ga.get(x + 1, y, c) - gb.get(x, y, c)).abs() < 1e-5);
                    }
                }
            }
        }
    }

    fn fpn_set(c: usize) -> CoefficientSet {
        let mut t = Vec::new();
        let mut push = |name: &str, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let vals = (0..n).map(|i| ((i * 7919) % 97) as f32 / 97.0 - 0.5).collect();
            t.push(Tensor::new(format!("{name}.weight"), shape.clone(), vals));
            t.push(Tensor::new(format!("{name}.bias"), vec![shape[0]], vec![0.01; shape[0]]));
        };
        push("fpn.conv0", vec![4, 3, 3, 3]);
        push("fpn.conv1", vec![6, 4, 3, 3]);
        push("fpn.conv2", vec![8, 6, 3, 3]);
        push("fpn.conv3", vec![10, 8, 3, 3]);
        push("fpn.lat1", vec![c, 6, 1, 1]);
        push("fpn.lat2", vec![c, 8, 1, 1]);
        push("fpn.lat3", vec![c, 10, 1, 1]);
        CoefficientSet::new(t).unwrap()
    }

    #[test]
    fn coefficient_pyramid_shapes() {
        let set = fpn_set(12);
        let img = Grid::from_fn(32, 16, 1, |x, y, _| ((x ^ y) % 5) as f32 / 5.0);
        let p = extract_pyramid(&img, FeatureMode::Coefficients(&set)).unwrap();
        assert_eq!(p.stage(1).shape(), (16, 8, 12));
        assert_eq!(p.stage(2).shape(), (8, 4, 12));
        assert_eq!(p.stage(3).shape(), (4, 2, 12));
    }

    #[test]
    fn normalized_norms() {
        let img = Grid::from_fn(16, 16, 1, |x, y, _| ((x * 5 + y * 3) % 7) as f32);
        let f = normalize_features(&handcrafted(&img), 4.0);
        for px in f.data().chunks_exact(8) {
            let n2: f32 = px.iter().map(|v| v * v).sum();
            assert!(n2 == 0.0 || (n2 - 32.0).abs() < 1e-3);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn conv_is_bilinear(
                a in proptest::collection::vec(-1.0f32..1.0, 5 * 4 * 2),
                b in proptest::collection::vec(-1.0f32..1.0, 5 * 4 * 2),
                k1 in proptest::collection::vec(-1.0f32..1.0, 3 * 2 * 9),
                k2 in proptest::collection::vec(-1.0f32..1.0, 3 * 2 * 9),
                s in -2.0f32..2.0,
            ) {
                let ga = Grid::from_vec(5, 4, 2, a.clone()).unwrap();
                let gb = Grid::from_vec(5, 4, 2, b.clone()).unwrap();
                let sum = Grid::from_vec(5, 4, 2, a.iter().zip(&b).map(|(x, y)| x + s * y).collect()).unwrap();
                let ka = ConvKernel::new(3, 2, 3, 3, k1.clone(), None);
                let kb = ConvKernel::new(3, 2, 3, 3, k2.clone(), None);
                let ksum = ConvKernel::new(3, 2, 3, 3, k1.iter().zip(&k2).map(|(x, y)| x + s * y).collect(), None);
                let lhs = conv2d(&sum, &ka, 1, 1).unwrap();
                let ra = conv2d(&ga, &ka, 1, 1).unwrap();
                let rb = conv2d(&gb, &ka, 1, 1).unwrap();
                for i in 0..lhs.data().len() {
                    prop_assert!((lhs.data()[i] - (ra.data()[i] + s * rb.data()[i])).abs() < 1e-5);
                }
                let lhs = conv2d(&ga, &ksum, 1, 1).unwrap();
                let rb = conv2d(&ga, &kb, 1, 1).unwrap();
                for i in 0..lhs.data().len() {
                    prop_assert!((lhs.data()[i] - (ra.data()[i] + s * rb.data()[i])).abs() < 1e-5);
                }
            }
        }
    }
}
