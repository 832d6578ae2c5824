//! Dense multi-channel 2D grids.
//!
//! Storage is row-major with channels interleaved per pixel:
//! `data[(y * width + x) * channels + c]`. Pixel `(x, y)` sits at the integer
//! coordinate `(x, y)`; continuous queries between pixels are bilinear and
//! out-of-range queries clamp to the border while reporting `valid = false`.
//!
//! Between resolution levels, coarse pixel `i` covers fine pixels `2i` and
//! `2i + 1`, so `x_fine = 2 * x_coarse + 0.5`. Both [`Grid::downsample_x2`]
//! and [`Grid::upsample_x2`] follow that mapping.

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GridError {
    #[error("grid data length {got} does not match {width}x{height}x{channels}")]
    LengthMismatch {
        width: usize,
        height: usize,
        channels: usize,
        got: usize,
    },
    #[error("grid dimensions {width}x{height}x{channels} must all be non-zero")]
    Empty {
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("grid shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Grid {
    /// Zero-filled grid.
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, GridError> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(GridError::Empty {
                width,
                height,
                channels,
            });
        }
        if data.len() != width * height * channels {
            return Err(GridError::LengthMismatch {
                width,
                height,
                channels,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f32 + Sync,
    ) -> Self {
        let mut grid = Self::new(width, height, channels);
        grid.data
            .par_chunks_mut(width * channels)
            .enumerate()
            .for_each(|(y, row)| {
                for x in 0..width {
                    for c in 0..channels {
                        row[x * channels + c] = f(x, y, c);
                    }
                }
            });
        grid
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f32) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    /// Pixel read with coordinates clamped to the grid.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, c: usize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y, c)
    }

    /// True when `(x, y)` lies inside `[0, W-1] x [0, H-1]`.
    #[inline]
    pub fn contains(&self, x: f32, y: f32) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f32 && y <= (self.height - 1) as f32
    }

    /// Bilinear footprint of a continuous query: corner indices and weights.
    #[inline]
    pub fn footprint(&self, x: f32, y: f32) -> Footprint {
        let valid = self.contains(x, y);
        let fx = x.floor();
        let fy = y.floor();
        let (ax, ay) = if valid || (x.is_finite() && y.is_finite()) {
            (x - fx, y - fy)
        } else {
            (0.0, 0.0)
        };
        let max_x = self.width as isize - 1;
        let max_y = self.height as isize - 1;
        let x0 = fx as isize;
        let y0 = fy as isize;
        let cx0 = x0.clamp(0, max_x) as usize;
        let cx1 = (x0 + 1).clamp(0, max_x) as usize;
        let cy0 = y0.clamp(0, max_y) as usize;
        let cy1 = (y0 + 1).clamp(0, max_y) as usize;
        Footprint {
            offsets: [
                cy0 * self.width + cx0,
                cy0 * self.width + cx1,
                cy1 * self.width + cx0,
                cy1 * self.width + cx1,
            ],
            fx: ax,
            fy: ay,
            valid,
        }
    }

    /// Samples all channels at a continuous coordinate into `out`, returning
    /// whether the query lay inside the grid.
    #[inline]
    pub fn sample_into(&self, x: f32, y: f32, out: &mut [f32]) -> bool {
        let fp = self.footprint(x, y);
        fp.blend(&self.data, self.channels, out);
        fp.valid
    }

    pub fn bilinear_sample(&self, x: f32, y: f32) -> (Vec<f32>, bool) {
        let mut out = vec![0.0; self.channels];
        let valid = self.sample_into(x, y, &mut out);
        (out, valid)
    }

    /// Doubles both dimensions with bilinear interpolation; output pixel `i`
    /// reads the input at `i / 2 - 0.25`.
    pub fn upsample_x2(&self) -> Grid {
        let (w, h, c) = self.shape();
        let src = self;
        Grid::from_fn_rows(2 * w, 2 * h, c, |y, row| {
            let sy = y as f32 * 0.5 - 0.25;
            for x in 0..2 * w {
                let sx = x as f32 * 0.5 - 0.25;
                let fp = src.footprint(sx, sy);
                fp.blend(&src.data, c, &mut row[x * c..(x + 1) * c]);
            }
        })
    }

    /// 2x2 mean pooling; odd trailing rows/columns pool only what exists.
    pub fn downsample_x2(&self) -> Grid {
        let (w, h, c) = self.shape();
        let ow = w.div_ceil(2);
        let oh = h.div_ceil(2);
        Grid::from_fn_rows(ow, oh, c, |y, row| {
            for x in 0..ow {
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    let mut n = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let sx = 2 * x + dx;
                            let sy = 2 * y + dy;
                            if sx < w && sy < h {
                                sum += self.get(sx, sy, ch) as f64;
                                n += 1;
                            }
                        }
                    }
                    row[x * c + ch] = (sum / n as f64) as f32;
                }
            }
        })
    }

    /// Pads right and bottom by edge replication up to multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Grid {
        let w = self.width.div_ceil(m) * m;
        let h = self.height.div_ceil(m) * m;
        if w == self.width && h == self.height {
            return self.clone();
        }
        Grid::from_fn(w, h, self.channels, |x, y, c| {
            self.get(x.min(self.width - 1), y.min(self.height - 1), c)
        })
    }

    /// Top-left `width x height` window.
    pub fn crop(&self, width: usize, height: usize) -> Grid {
        assert!(width <= self.width && height <= self.height);
        Grid::from_fn(width, height, self.channels, |x, y, c| self.get(x, y, c))
    }

    /// Channel mean, turning colour images into intensity.
    pub fn to_gray(&self) -> Grid {
        if self.channels == 1 {
            return self.clone();
        }
        let c = self.channels;
        Grid::from_fn(self.width, self.height, 1, |x, y, _| {
            self.pixel(x, y).iter().sum::<f32>() / c as f32
        })
    }

    pub fn channel(&self, c: usize) -> Grid {
        Grid::from_fn(self.width, self.height, 1, |x, y, _| self.get(x, y, c))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32 + Sync) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.par_iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub(crate) fn from_fn_rows(
        width: usize,
        height: usize,
        channels: usize,
        f: impl Fn(usize, &mut [f32]) + Sync,
    ) -> Grid {
        let mut grid = Grid::new(width, height, channels);
        grid.data
            .par_chunks_mut(width * channels)
            .enumerate()
            .for_each(|(y, row)| f(y, row));
        grid
    }
}

/// Precomputed bilinear corners for one query location.
#[derive(Debug, Clone, Copy)]
pub struct Footprint {
    /// Pixel indices (not scalar offsets) of the corners, in the order
    /// top-left, top-right, bottom-left, bottom-right.
    pub offsets: [usize; 4],
    /// Fractional position inside the cell.
    pub fx: f32,
    pub fy: f32,
    pub valid: bool,
}

impl Footprint {
    /// Corner weights in `offsets` order.
    pub fn weights(&self) -> [f32; 4] {
        let (ax, ay) = (self.fx, self.fy);
        [(1.0 - ax) * (1.0 - ay), ax * (1.0 - ay), (1.0 - ax) * ay, ax * ay]
    }

    #[inline]
    pub fn blend(&self, data: &[f32], channels: usize, out: &mut [f32]) {
        for (c, o) in out.iter_mut().enumerate().take(channels) {
            *o = self.blend_channel(data, channels, c);
        }
    }

    /// Blend of a single channel stored with stride `channels`. Nested
    /// interpolation reproduces constant fields exactly.
    #[inline]
    pub fn blend_channel(&self, data: &[f32], channels: usize, c: usize) -> f32 {
        let v = |k: usize| data[self.offsets[k] * channels + c];
        let (v00, v01, v10, v11) = (v(0), v(1), v(2), v(3));
        let top = v00 + self.fx * (v01 - v00);
        let bottom = v10 + self.fx * (v11 - v10);
        top + self.fy * (bottom - top)
    }
}

/// One flag per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl ValidityMask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, GridError> {
        if bits.len() != width * height {
            return Err(GridError::LengthMismatch {
                width,
                height,
                channels: 1,
                got: bits.len(),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &ValidityMask) -> ValidityMask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        ValidityMask {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a && b)
                .collect(),
        }
    }

    /// 0/1 grid, handy for dumping masks as PFM.
    pub fn to_grid(&self) -> Grid {
        Grid::from_vec(
            self.width,
            self.height,
            1,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask dimensions are non-zero")
    }
}
