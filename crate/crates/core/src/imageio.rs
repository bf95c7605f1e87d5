//! Grey-level images: netpbm ingestion/export, noise synthesis, and
//! continuous sampling of the intensity and of the edge detector.
//!
//! Pixel `(i, j)` (column `i`, row `j`, rows growing downward) has its centre
//! at `(i + 0.5, j + 0.5)`; the continuous domain is `[0, W] × [0, H]`.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::Vec2;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header at byte {offset}: {msg}")]
    MalformedHeader { offset: usize, msg: String },
    #[error("unsupported maxval {maxval} at byte {offset} (only 255 is accepted)")]
    UnsupportedMaxval { offset: usize, maxval: u32 },
    #[error("truncated payload at byte {offset}: expected {expected} samples, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("sample value {value} at byte {offset} exceeds maxval 255")]
    SampleOutOfRange { offset: usize, value: u32 },
    #[error("invalid image dimensions {width}x{height} (both must be >= 2)")]
    InvalidDimensions { width: usize, height: usize },
    #[error("pixel data length {len} does not match {width}x{height}")]
    LengthMismatch {
        len: usize,
        width: usize,
        height: usize,
    },
    #[error("intensity {value} at index {index} outside [0, 255]")]
    IntensityOutOfRange { index: usize, value: f64 },
    #[error("point ({x}, {y}) lies outside the image domain [0, {width}] x [0, {height}]")]
    OutsideDomain {
        x: f64,
        y: f64,
        width: f64,
        height: f64,
    },
    #[error("invalid noise specification: {0}")]
    InvalidNoise(String),
}

pub type ImageResult<T> = Result<T, ImageError>;

/// Row-major grid of grey levels in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GreyImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GreyImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> ImageResult<Self> {
        if width < 2 || height < 2 {
            return Err(ImageError::InvalidDimensions { width, height });
        }
        if data.len() != width * height {
            return Err(ImageError::LengthMismatch {
                len: data.len(),
                width,
                height,
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=255.0).contains(*v))
        {
            return Err(ImageError::IntensityOutOfRange { index, value });
        }
        Ok(GreyImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> ImageResult<Self> {
        GreyImage::new(width, height, vec![value; width * height])
    }

    /// Builds an image by evaluating `f(column, row)` on every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> ImageResult<Self> {
        let mut data = Vec::with_capacity(width * height);
        for j in 0..height {
            for i in 0..width {
                data.push(f(i, j));
            }
        }
        GreyImage::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.width + i]
    }

    pub fn pixel_center(&self, idx: usize) -> Vec2 {
        let i = idx % self.width;
        let j = idx / self.width;
        [i as f64 + 0.5, j as f64 + 0.5]
    }

    /// Intensities rounded to the nearest integer grey level.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| v.round() as u8).collect()
    }

    /// Bilinear interpolation of the pixel centres at `p`; clamped extrapolation
    /// inside the half-pixel band along the border.
    pub fn sample(&self, p: Vec2) -> ImageResult<f64> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(0.0..=w).contains(&p[0]) || !(0.0..=h).contains(&p[1]) {
            return Err(ImageError::OutsideDomain {
                x: p[0],
                y: p[1],
                width: w,
                height: h,
            });
        }
        Ok(bilinear(&self.data, self.width, self.height, p))
    }
}

/// Bilinear sampler over a row-major grid with pixel-centre nodes; points
/// outside the node hull are clamped onto it.
pub(crate) fn bilinear(grid: &[f64], width: usize, height: usize, p: Vec2) -> f64 {
    let fx = (p[0] - 0.5).clamp(0.0, (width - 1) as f64);
    let fy = (p[1] - 0.5).clamp(0.0, (height - 1) as f64);
    let i0 = (fx.floor() as usize).min(width - 2);
    let j0 = (fy.floor() as usize).min(height - 2);
    let tx = fx - i0 as f64;
    let ty = fy - j0 as f64;
    let at = |i: usize, j: usize| grid[j * width + i];
    let top = at(i0, j0) * (1.0 - tx) + at(i0 + 1, j0) * tx;
    let bottom = at(i0, j0 + 1) * (1.0 - tx) + at(i0 + 1, j0 + 1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Continuous evaluation of the intensity `U` at a point in pixel coordinates.
pub fn sample_intensity(img: &GreyImage, p: Vec2) -> ImageResult<f64> {
    img.sample(p)
}

// ---------------------------------------------------------------------------
// netpbm

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if c == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> ImageResult<(u32, usize)> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImageError::MalformedHeader {
                offset: start,
                msg: format!("expected {what}"),
            });
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        let value = text
            .parse::<u32>()
            .map_err(|_| ImageError::MalformedHeader {
                offset: start,
                msg: format!("{what} does not fit in 32 bits"),
            })?;
        Ok((value, start))
    }
}

/// Decodes a PGM (P2/P5) or PPM (P3/P6) byte stream with maxval 255.
/// Colour images are reduced with Rec.601 luminance.
pub fn decode_netpbm(bytes: &[u8]) -> ImageResult<GreyImage> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(ImageError::MalformedHeader {
            offset: 0,
            msg: "missing 'P' magic".into(),
        });
    }
    let (channels, binary) = match bytes[1] {
        b'2' => (1, false),
        b'5' => (1, true),
        b'3' => (3, false),
        b'6' => (3, true),
        other => {
            return Err(ImageError::MalformedHeader {
                offset: 1,
                msg: format!("unsupported magic P{}", other as char),
            })
        }
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let (width, _) = cur.number("width")?;
    let (height, _) = cur.number("height")?;
    let (maxval, maxval_at) = cur.number("maxval")?;
    if maxval != 255 {
        return Err(ImageError::UnsupportedMaxval {
            offset: maxval_at,
            maxval,
        });
    }
    let (width, height) = (width as usize, height as usize);
    if width < 2 || height < 2 {
        return Err(ImageError::InvalidDimensions { width, height });
    }
    let expected = width * height * channels;
    let samples: Vec<u8> = if binary {
        // exactly one whitespace byte separates the header from the raster
        if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
            return Err(ImageError::MalformedHeader {
                offset: cur.pos,
                msg: "expected single whitespace before raster".into(),
            });
        }
        let start = cur.pos + 1;
        let avail = bytes.len().saturating_sub(start);
        if avail < expected {
            return Err(ImageError::Truncated {
                offset: bytes.len(),
                expected,
                found: avail,
            });
        }
        bytes[start..start + expected].to_vec()
    } else {
        let mut out = Vec::with_capacity(expected);
        for _ in 0..expected {
            cur.skip_space_and_comments();
            if cur.pos >= bytes.len() {
                return Err(ImageError::Truncated {
                    offset: cur.pos,
                    expected,
                    found: out.len(),
                });
            }
            let (v, at) = cur.number("sample")?;
            if v > 255 {
                return Err(ImageError::SampleOutOfRange {
                    offset: at,
                    value: v,
                });
            }
            out.push(v as u8);
        }
        out
    };
    let data = if channels == 1 {
        samples.iter().map(|&v| v as f64).collect()
    } else {
        samples
            .chunks_exact(3)
            .map(|c| (0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64).min(255.0))
            .collect()
    };
    GreyImage::new(width, height, data)
}

/// Binary PGM (P5) encoding with intensities rounded to the nearest level.
pub fn encode_pgm(img: &GreyImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}

pub fn load_image(path: impl AsRef<Path>) -> ImageResult<GreyImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_netpbm(&bytes)
}

pub fn save_image(img: &GreyImage, path: impl AsRef<Path>) -> ImageResult<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------------------
// noise

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    SaltPepper,
    Speckle,
}

impl std::str::FromStr for NoiseKind {
    type Err = ImageError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "salt-and-pepper" | "salt_pepper" | "salt-pepper" | "saltpepper" => {
                Ok(NoiseKind::SaltPepper)
            }
            "speckle" => Ok(NoiseKind::Speckle),
            other => Err(ImageError::InvalidNoise(format!("unknown kind '{other}'"))),
        }
    }
}

/// Noise model; `level` is a variance on the `[0, 1]` intensity scale for
/// gaussian/speckle and a corruption density for salt-and-pepper.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub level: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, level: f64, seed: u64) -> ImageResult<Self> {
        let spec = NoiseSpec { kind, level, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> ImageResult<()> {
        if !(self.level > 0.0) || !self.level.is_finite() {
            return Err(ImageError::InvalidNoise(format!(
                "level must be > 0, got {}",
                self.level
            )));
        }
        if self.kind == NoiseKind::SaltPepper && self.level > 1.0 {
            return Err(ImageError::InvalidNoise(format!(
                "salt-and-pepper density must be <= 1, got {}",
                self.level
            )));
        }
        Ok(())
    }
}

pub fn add_noise(img: &GreyImage, spec: &NoiseSpec) -> ImageResult<GreyImage> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = img.data.clone();
    match spec.kind {
        NoiseKind::Gaussian | NoiseKind::Speckle => {
            let normal = Normal::new(0.0, spec.level.sqrt())
                .map_err(|e| ImageError::InvalidNoise(e.to_string()))?;
            for v in data.iter_mut() {
                let u = *v / 255.0;
                let n = normal.sample(&mut rng);
                let noisy = match spec.kind {
                    NoiseKind::Gaussian => u + n,
                    _ => u * (1.0 + n),
                };
                *v = noisy.clamp(0.0, 1.0) * 255.0;
            }
        }
        NoiseKind::SaltPepper => {
            let count = (spec.level * data.len() as f64).round() as usize;
            let picked = index::sample(&mut rng, data.len(), count.min(data.len()));
            for idx in picked.into_iter() {
                data[idx] = if rng.random_bool(0.5) { 255.0 } else { 0.0 };
            }
        }
    }
    GreyImage::new(img.width, img.height, data)
}

// ---------------------------------------------------------------------------
// edge detector

/// Per-pixel edge detector `g = 1 / (1 + β‖∇U‖²)` with a bilinear sampler.
#[derive(Clone, Debug)]
pub struct EdgeDetector {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl EdgeDetector {
    pub fn new(img: &GreyImage, beta: f64) -> Self {
        let (w, h) = (img.width, img.height);
        let u = |i: usize, j: usize| img.get(i, j) / 255.0;
        let diff = |lo: f64, hi: f64, span: usize| (hi - lo) / span as f64;
        let mut values = Vec::with_capacity(w * h);
        for j in 0..h {
            for i in 0..w {
                let (il, ir) = (i.saturating_sub(1), (i + 1).min(w - 1));
                let (jl, jr) = (j.saturating_sub(1), (j + 1).min(h - 1));
                let gx = diff(u(il, j), u(ir, j), ir - il);
                let gy = diff(u(i, jl), u(i, jr), jr - jl);
                values.push(1.0 / (1.0 + beta * (gx * gx + gy * gy)));
            }
        }
        EdgeDetector {
            width: w,
            height: h,
            values,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.width + i]
    }

    /// Bilinear interpolation of the per-pixel grid (clamped at the border).
    pub fn at(&self, p: Vec2) -> f64 {
        bilinear(&self.values, self.width, self.height, p)
    }
}

pub fn edge_detector(img: &GreyImage, beta: f64) -> EdgeDetector {
    EdgeDetector::new(img, beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> GreyImage {
        GreyImage::from_fn(5, 4, |i, j| (10 * i + 7 * j) as f64).unwrap()
    }

    #[test]
    fn p2_decode() {
        let img = decode_netpbm(b"P2\n2 2\n255\n0 255 128 64").unwrap();
        assert_eq!(img.data(), &[0.0, 255.0, 128.0, 64.0]);
        assert_eq!(img.get(0, 1), 128.0);
    }

    #[test]
    fn p5_matches_p2() {
        let mut p5 = b"P5\n2 2\n255\n".to_vec();
        p5.extend([0u8, 255, 128, 64]);
        assert_eq!(
            decode_netpbm(&p5).unwrap(),
            decode_netpbm(b"P2\n2 2\n255\n0 255 128 64").unwrap()
        );
    }

    #[test]
    fn ppm_luminance() {
        let white = decode_netpbm(b"P3\n2 2\n255\n255 255 255 255 255 255 255 255 255 255 255 255")
            .unwrap();
        assert!(white.data().iter().all(|&v| (v - 255.0).abs() < 1e-9));
        let mut p6 = b"P6 # comment\n2 2 255\n".to_vec();
        p6.extend([255u8, 0, 0, 0, 255, 0, 0, 0, 255, 10, 10, 10]);
        let img = decode_netpbm(&p6).unwrap();
        assert!((img.data()[0] - 0.299 * 255.0).abs() < 1e-9);
        assert!((img.data()[1] - 0.587 * 255.0).abs() < 1e-9);
        assert!((img.data()[3] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn header_errors_carry_offsets() {
        match decode_netpbm(b"P2\n2 2\n65535\n0 0 0 0") {
            Err(ImageError::UnsupportedMaxval { offset, maxval }) => {
                assert_eq!((offset, maxval), (7, 65535))
            }
            other => panic!("{other:?}"),
        }
        match decode_netpbm(b"P2\n2 x\n255\n") {
            Err(ImageError::MalformedHeader { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        let mut p5 = b"P5\n2 2\n255\n".to_vec();
        p5.extend([1u8, 2, 3]);
        assert!(matches!(
            decode_netpbm(&p5),
            Err(ImageError::Truncated {
                expected: 4,
                found: 3,
                ..
            })
        ));
        assert!(matches!(
            decode_netpbm(b"P2\n2 2\n255\n1 2 3"),
            Err(ImageError::Truncated { .. })
        ));
        assert!(matches!(
            decode_netpbm(b"P4\n2 2\n"),
            Err(ImageError::MalformedHeader { offset: 1, .. })
        ));
    }

    #[test]
    fn save_rounds_to_nearest() {
        let mut data = vec![0.0; 4];
        data[0] = 127.6;
        data[1] = 0.4;
        let img = GreyImage::new(2, 2, data).unwrap();
        let bytes = encode_pgm(&img);
        let back = decode_netpbm(&bytes).unwrap();
        assert_eq!(back.data()[0], 128.0);
        assert_eq!(back.data()[1], 0.0);
    }

    #[test]
    fn save_load_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.pgm");
        let img = ramp();
        save_image(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
        assert!(matches!(
            save_image(&img, dir.path().join("missing/dir/x.pgm")),
            Err(ImageError::Io { .. })
        ));
    }

    #[test]
    fn degenerate_dimensions_rejected_at_construction() {
        assert!(matches!(
            GreyImage::new(1, 5, vec![0.0; 5]),
            Err(ImageError::InvalidDimensions { .. })
        ));
        assert!(GreyImage::new(2, 2, vec![0.0, 1.0, 2.0, 256.0]).is_err());
    }

    #[test]
    fn sampling() {
        let img = ramp();
        assert_eq!(img.sample([2.5, 1.5]).unwrap(), img.get(2, 1));
        let two = GreyImage::new(2, 2, vec![0.0, 100.0, 0.0, 100.0]).unwrap();
        assert!((two.sample([1.0, 0.5]).unwrap() - 50.0).abs() < 1e-12);
        let c = GreyImage::filled(3, 3, 42.0).unwrap();
        assert_eq!(c.sample([0.0, 0.0]).unwrap(), 42.0);
        assert!(c.sample([3.1, 0.0]).is_err());
        assert!(c.sample([-0.1, 1.0]).is_err());
        // affine field reproduced at interior points
        for &p in &[[0.7, 0.9], [3.2, 2.1], [4.5, 3.5], [1.25, 2.75]] {
            let expect = 10.0 * (p[0] - 0.5) + 7.0 * (p[1] - 0.5);
            assert!((img.sample(p).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_detector_values() {
        let c = GreyImage::filled(4, 4, 90.0).unwrap();
        assert!(edge_detector(&c, 100.0).values().iter().all(|&g| g == 1.0));

        // vertical step between columns 1 and 2
        let step = GreyImage::from_fn(4, 3, |i, _| if i < 2 { 0.0 } else { 255.0 }).unwrap();
        let g = edge_detector(&step, 100.0);
        // column 1: central difference (1 - 0) / 2 = 0.5 → ‖∇U‖² = 0.25
        let expect = 1.0 / (1.0 + 100.0 * 0.25);
        assert!((g.get(1, 1) - expect).abs() < 1e-15);
        assert!((g.get(2, 0) - expect).abs() < 1e-15);
        assert_eq!(g.get(0, 0), 1.0);
        assert!(g.values().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn edge_detector_direct_substitution() {
        // ‖∇U‖² = 0.01 with β = 100 gives 1/2: a horizontal ramp with slope 0.1 per pixel
        let img = GreyImage::from_fn(5, 3, |i, _| 25.5 * i as f64).unwrap();
        let g = edge_detector(&img, 100.0);
        assert!((g.get(2, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn salt_pepper_exact_count() {
        let img = GreyImage::filled(200, 200, 128.0).unwrap();
        let spec = NoiseSpec::new(NoiseKind::SaltPepper, 0.05, 11).unwrap();
        let noisy = add_noise(&img, &spec).unwrap();
        // brute-force mask from an identically seeded generator
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut mask = vec![false; 40_000];
        for idx in index::sample(&mut rng, 40_000, 2000).into_iter() {
            mask[idx] = true;
        }
        let changed: Vec<usize> = (0..40_000).filter(|&k| noisy.data()[k] != 128.0).collect();
        assert_eq!(changed.len(), 2000);
        assert!(changed.iter().all(|&k| mask[k]));
        assert!(changed
            .iter()
            .all(|&k| noisy.data()[k] == 0.0 || noisy.data()[k] == 255.0));
    }

    #[test]
    fn gaussian_statistics() {
        let img = GreyImage::filled(256, 256, 127.5).unwrap();
        let level = 0.01;
        let noisy = add_noise(
            &img,
            &NoiseSpec::new(NoiseKind::Gaussian, level, 3).unwrap(),
        )
        .unwrap();
        let n = noisy.len() as f64;
        let diffs: Vec<f64> = noisy.data().iter().map(|v| (v - 127.5) / 255.0).collect();
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 3.0 * (level / n).sqrt(), "mean {mean}");
        assert!((var - level).abs() <= 0.1 * level, "var {var}");
    }

    #[test]
    fn tiny_gaussian_is_identity() {
        let img = ramp();
        let noisy = add_noise(
            &img,
            &NoiseSpec::new(NoiseKind::Gaussian, 1e-30, 1).unwrap(),
        )
        .unwrap();
        for (a, b) in img.data().iter().zip(noisy.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_is_deterministic_and_validated() {
        let img = ramp();
        for kind in [
            NoiseKind::Gaussian,
            NoiseKind::SaltPepper,
            NoiseKind::Speckle,
        ] {
            let spec = NoiseSpec::new(kind, 0.1, 99).unwrap();
            assert_eq!(
                add_noise(&img, &spec).unwrap(),
                add_noise(&img, &spec).unwrap()
            );
        }
        assert!(NoiseSpec::new(NoiseKind::Gaussian, 0.0, 1).is_err());
        assert!(NoiseSpec::new(NoiseKind::SaltPepper, 1.5, 1).is_err());
        assert!("bogus".parse::<NoiseKind>().is_err());
    }
}
