//! File formats: PFM grids, 8-bit PNG/PPM images and binary PLY clouds.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::grid::Grid;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported channel count {0} (PFM stores 1 or 3 channels)")]
    UnsupportedChannels(usize),
    #[error("image decode failed for {path}: {message}")]
    Image { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads one whitespace-delimited header token starting at `*pos`.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return None;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok()
}

/// Decodes a PFM byte stream. `Pf` is one channel, `PF` three; a negative
/// scale marks little-endian samples. Rows are stored bottom to top.
pub fn decode_pfm(bytes: &[u8]) -> Result<Grid, IoError> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)
        .ok_or_else(|| IoError::MalformedHeader("missing magic".into()))?;
    let channels = match magic {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(IoError::MalformedHeader(format!("bad magic {other:?}"))),
    };
    let mut number = |what: &str| -> Result<&str, IoError> {
        next_token(bytes, &mut pos).ok_or_else(|| IoError::MalformedHeader(format!("missing {what}")))
    };
    let width: usize = number("width")?
        .parse()
        .map_err(|_| IoError::MalformedHeader("bad width".into()))?;
    let height: usize = number("height")?
        .parse()
        .map_err(|_| IoError::MalformedHeader("bad height".into()))?;
    let scale: f32 = number("scale")?
        .parse()
        .map_err(|_| IoError::MalformedHeader("bad scale".into()))?;
    if width == 0 || height == 0 {
        return Err(IoError::MalformedHeader(format!("empty size {width}x{height}")));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(IoError::MalformedHeader(format!("bad scale {scale}")));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(IoError::MalformedHeader("missing header terminator".into()));
    }
    pos += 1;
    let payload = &bytes[pos..];
    let expected = width * height * channels * 4;
    if payload.len() < expected {
        return Err(IoError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let little = scale < 0.0;
    let row_len = width * channels;
    let mut data = vec![0.0f32; expected / 4];
    for (i, chunk) in payload[..expected].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let file_row = i / row_len;
        let col = i % row_len;
        data[(height - 1 - file_row) * row_len + col] = v;
    }
    Grid::from_vec(width, height, channels, data)
        .map_err(|e| IoError::MalformedHeader(e.to_string()))
}

pub fn encode_pfm(grid: &Grid) -> Result<Vec<u8>, IoError> {
    let magic = match grid.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(IoError::UnsupportedChannels(c)),
    };
    let header = format!("{magic}\n{} {}\n-1.0\n", grid.width(), grid.height());
    let mut out = Vec::with_capacity(header.len() + grid.data().len() * 4);
    out.extend_from_slice(header.as_bytes());
    let row_len = grid.width() * grid.channels();
    for row in grid.data().chunks_exact(row_len).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Grid, IoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_pfm(&bytes)
}

pub fn write_pfm(path: impl AsRef<Path>, grid: &Grid) -> Result<(), IoError> {
    let path = path.as_ref();
    let bytes = encode_pfm(grid)?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// Loads an 8-bit PNG or PPM/PGM as floats in `[0, 1]`. Grey images give one
/// channel, everything else three.
pub fn read_image(path: impl AsRef<Path>) -> Result<Grid, IoError> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| IoError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let grid = if img.color().channel_count() <= 2 {
        let g = img.to_luma8();
        Grid::from_vec(w, h, 1, g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
    } else {
        let g = img.to_rgb8();
        Grid::from_vec(w, h, 3, g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
    };
    grid.map_err(|e| IoError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Quantises a 1- or 3-channel grid in `[0, 1]` to an 8-bit PNG.
pub fn write_png(path: impl AsRef<Path>, grid: &Grid) -> Result<(), IoError> {
    let path = path.as_ref();
    let quant: Vec<u8> = grid
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let (w, h) = (grid.width() as u32, grid.height() as u32);
    let result = match grid.channels() {
        1 => image::GrayImage::from_raw(w, h, quant).map(|i| i.save(path)),
        3 => image::RgbImage::from_raw(w, h, quant).map(|i| i.save(path)),
        c => return Err(IoError::UnsupportedChannels(c)),
    };
    match result {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(IoError::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        }),
        None => Err(IoError::Image {
            path: path.display().to_string(),
            message: "buffer size mismatch".into(),
        }),
    }
}

/// Buffered writer helper shared by the PLY encoder.
pub(crate) fn create_file(path: &Path) -> Result<BufWriter<fs::File>, IoError> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(io_err(path))
}

pub(crate) fn finish(mut w: BufWriter<fs::File>, path: &Path) -> Result<(), IoError> {
    w.flush().map_err(io_err(path))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(io_err(path))
}

pub(crate) fn write_err(path: &Path, e: std::io::Error) -> IoError {
    io_err(path)(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_forced_example() {
        let mut bytes = b"Pf\n2 2\n-1.0\n".to_vec();
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let g = decode_pfm(&bytes).unwrap();
        assert_eq!(g.shape(), (2, 2, 1));
        // first stored row is the bottom one
        assert_eq!(g.data(), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn three_channel_fixture() {
        let mut bytes = b"PF\n1 1\n1.0\n".to_vec();
        for v in [0.25f32, 0.5, 0.75] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let g = decode_pfm(&bytes).unwrap();
        assert_eq!(g.shape(), (1, 1, 3));
        assert_eq!(g.data(), &[0.25, 0.5, 0.75]);
    }

    #[test]
    fn error_kinds_are_distinct() {
        assert!(matches!(decode_pfm(b"P6\n1 1\n-1\n"), Err(IoError::MalformedHeader(_))));
        assert!(matches!(decode_pfm(b""), Err(IoError::MalformedHeader(_))));
        assert!(matches!(decode_pfm(b"Pf\nx 1\n-1\n"), Err(IoError::MalformedHeader(_))));
        assert!(matches!(
            decode_pfm(b"Pf\n2 2\n-1.0\n\0\0\0\0"),
            Err(IoError::Truncated { expected: 16, found: 4 })
        ));
        let g = Grid::new(2, 2, 2);
        assert!(matches!(encode_pfm(&g), Err(IoError::UnsupportedChannels(2))));
    }

    #[test]
    fn file_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.pfm");
        let g = Grid::from_fn(7, 5, 3, |x, y, c| (x as f32).sin() * 1e-7 + (y * 3 + c) as f32 * 1.1);
        write_pfm(&p, &g).unwrap();
        let back = read_pfm(&p).unwrap();
        let a: Vec<u32> = g.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn png_roundtrip_quantises() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        let g = Grid::from_fn(4, 3, 3, |x, y, c| ((x + y + c) % 4) as f32 / 3.0);
        write_png(&p, &g).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!(back.shape(), g.shape());
        for (a, b) in g.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn ppm_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.ppm");
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        std::fs::write(&p, bytes).unwrap();
        let g = read_image(&p).unwrap();
        assert_eq!(g.shape(), (2, 1, 3));
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    proptest::proptest! {
        #[test]
        fn pfm_payload_identity(bits in proptest::collection::vec(proptest::num::f32::NORMAL | proptest::num::f32::ZERO | proptest::num::f32::SUBNORMAL, 12)) {
            let g = Grid::from_vec(4, 3, 1, bits).unwrap();
            let back = decode_pfm(&encode_pfm(&g).unwrap()).unwrap();
            let a: Vec<u32> = g.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            proptest::prop_assert_eq!(a, b);
        }
    }
}
