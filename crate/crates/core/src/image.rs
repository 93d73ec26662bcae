//! Image ingestion and the sliding-window front end.
//!
//! Photos come in as binary portable graymaps or pixmaps (P5/P6), are
//! reduced to grayscale intensities in `[0, 1]`, expanded into a bilinear
//! downsampling pyramid, and cut into fixed-size detection windows. Each
//! window is photometrically normalized to zero mean and unit variance
//! *before* encryption — the server cannot normalize ciphertexts, and
//! normalizing on the client keeps the plaintext and encrypted evaluation
//! paths equivalent.

use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW_EDGE: u32 = 24;
pub const DEFAULT_STRIDE: u32 = 4;
pub const DEFAULT_SCALE_FACTOR: f64 = 1.25;

/// Grayscale image with row-major intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Protocol("image dimensions must be positive".into()));
        }
        if pixels.len() != (width as usize) * (height as usize) {
            return Err(Error::Dimension {
                expected: (width as usize) * (height as usize),
                got: pixels.len(),
            });
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Protocol("pixel intensity outside [0, 1]".into()));
        }
        Ok(Self { width, height, pixels })
    }

    /// Uniform-noise image, handy for synthetic scenarios and tests.
    pub fn random<R: Rng + ?Sized>(width: u32, height: u32, rng: &mut R) -> Self {
        let pixels = (0..(width as usize) * (height as usize))
            .map(|_| rng.random_range(0.0..=1.0))
            .collect();
        Self { width, height, pixels }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> f64 {
        self.pixels[(y as usize) * (self.width as usize) + (x as usize)]
    }

    /// Encodes as an 8-bit binary P5 graymap.
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&p| (p * 255.0).round() as u8));
        out
    }
}

/// Decodes a binary P5 graymap or P6 pixmap. Color input is converted to
/// grayscale by averaging the three channels; intensities are scaled by the
/// declared maximum sample value. Only single-byte samples (maxval up to
/// 255) are supported.
pub fn load_pnm(bytes: &[u8]) -> Result<GrayImage> {
    let mut p = PnmHeaderParser { bytes, pos: 0 };
    let magic = p.take(2)?;
    let channels = match magic {
        b"P5" => 1usize,
        b"P6" => 3usize,
        _ => {
            return Err(Error::Parse {
                offset: 0,
                what: "unsupported magic: expected binary P5 or P6".into(),
            })
        }
    };
    let width = p.ascii_uint("width")?;
    let height = p.ascii_uint("height")?;
    let maxval = p.ascii_uint("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Parse {
            offset: p.pos as u64,
            what: "zero image dimension".into(),
        });
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse {
            offset: p.pos as u64,
            what: format!("unsupported maxval {maxval} (expected 1..=255)"),
        });
    }
    // Exactly one whitespace byte separates the header from the raster.
    let sep = p.take(1)?;
    if !sep[0].is_ascii_whitespace() {
        return Err(Error::Parse {
            offset: (p.pos - 1) as u64,
            what: "expected whitespace before raster".into(),
        });
    }
    let n = (width as usize) * (height as usize);
    let raster = p.take(n * channels)?;
    let scale = maxval as f64;
    let pixels = raster
        .chunks_exact(channels)
        .map(|px| px.iter().map(|&b| b as f64).sum::<f64>() / channels as f64 / scale)
        .map(|v| v.min(1.0))
        .collect();
    GrayImage::new(width as u32, height as u32, pixels)
}

struct PnmHeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PnmHeaderParser<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                needed: n - (self.bytes.len() - self.pos),
                have: self.bytes.len() - self.pos,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    /// Skips whitespace and `#` comments, then reads a decimal token.
    fn ascii_uint(&mut self, what: &str) -> Result<u64> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| b.is_ascii_digit())
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse {
                offset: self.pos as u64,
                what: format!("expected {what} in header"),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Parse {
                offset: start as u64,
                what: format!("{what} out of range"),
            })
    }
}

/// A normalized, vectorized patch plus where it came from. `origin_x` and
/// `origin_y` are in source-image coordinates; `scale` maps window-local
/// pixel units back to source pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionWindow {
    pub origin_x: u32,
    pub origin_y: u32,
    pub scale: f64,
    pub vector: Vec<f64>,
}

/// Bilinear downsampling pyramid. Level `k` has dimensions
/// `floor(original / scale_factor^k)` and nominal scale `scale_factor^k`;
/// level 0 is the original. Construction stops before either edge drops
/// below `min_edge`; an image already smaller than `min_edge` yields an
/// empty pyramid.
pub fn build_pyramid(img: &GrayImage, scale_factor: f64, min_edge: u32) -> Vec<(GrayImage, f64)> {
    assert!(scale_factor > 1.0, "scale factor must exceed 1");
    assert!(min_edge >= 1, "min edge must be positive");
    let mut levels = Vec::new();
    if img.width < min_edge || img.height < min_edge {
        return levels;
    }
    levels.push((img.clone(), 1.0));
    for k in 1.. {
        let scale = scale_factor.powi(k);
        let w = (img.width as f64 / scale).floor() as u32;
        let h = (img.height as f64 / scale).floor() as u32;
        if w < min_edge || h < min_edge {
            break;
        }
        levels.push((resize_bilinear(img, w, h), scale));
    }
    levels
}

/// Center-aligned bilinear resampling from the original image.
fn resize_bilinear(src: &GrayImage, dst_w: u32, dst_h: u32) -> GrayImage {
    let sw = src.width as usize;
    let sh = src.height as usize;
    let mut pixels = Vec::with_capacity((dst_w as usize) * (dst_h as usize));
    for y in 0..dst_h as usize {
        let sy = ((y as f64 + 0.5) * sh as f64 / dst_h as f64 - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let fy = sy - y0 as f64;
        for x in 0..dst_w as usize {
            let sx =
                ((x as f64 + 0.5) * sw as f64 / dst_w as f64 - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let fx = sx - x0 as f64;
            let top = src.pixels[y0 * sw + x0] * (1.0 - fx) + src.pixels[y0 * sw + x1] * fx;
            let bottom = src.pixels[y1 * sw + x0] * (1.0 - fx) + src.pixels[y1 * sw + x1] * fx;
            pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    GrayImage {
        width: dst_w,
        height: dst_h,
        pixels,
    }
}

/// Cuts every stride-aligned `window_edge × window_edge` patch fully inside
/// the image, in row-major order, normalizing each. Origins are in the
/// given image's coordinates with scale 1; an image smaller than the window
/// yields an empty list.
pub fn extract_windows(img: &GrayImage, window_edge: u32, stride: u32) -> Vec<DetectionWindow> {
    assert!(stride >= 1, "stride must be positive");
    assert!(window_edge >= 1, "window edge must be positive");
    let mut out = Vec::new();
    if img.width < window_edge || img.height < window_edge {
        return out;
    }
    let e = window_edge as usize;
    let mut raw = vec![0.0; e * e];
    let mut y = 0;
    while y + window_edge <= img.height {
        let mut x = 0;
        while x + window_edge <= img.width {
            for dy in 0..e {
                let row = (y as usize + dy) * img.width as usize + x as usize;
                raw[dy * e..(dy + 1) * e].copy_from_slice(&img.pixels[row..row + e]);
            }
            out.push(DetectionWindow {
                origin_x: x,
                origin_y: y,
                scale: 1.0,
                vector: normalize_window(&raw),
            });
            x += stride;
        }
        y += stride;
    }
    out
}

/// Zero-mean, unit-variance normalization with the population standard
/// deviation. A constant input maps to all zeros.
pub fn normalize_window(raw: &[f64]) -> Vec<f64> {
    assert!(!raw.is_empty(), "cannot normalize an empty window");
    if raw.iter().all(|&v| v == raw[0]) {
        return vec![0.0; raw.len()];
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        return vec![0.0; raw.len()];
    }
    let sd = var.sqrt();
    raw.iter().map(|v| (v - mean) / sd).collect()
}

/// Sliding-window parameters for a full multi-scale scan.
#[derive(Debug, Clone)]
pub struct ScanParams {
    pub window_edge: u32,
    pub stride: u32,
    pub scale_factor: f64,
    /// Smallest pyramid level edge; defaults to `window_edge`.
    pub min_edge: Option<u32>,
}

impl Default for ScanParams {
    fn default() -> Self {
        Self {
            window_edge: DEFAULT_WINDOW_EDGE,
            stride: DEFAULT_STRIDE,
            scale_factor: DEFAULT_SCALE_FACTOR,
            min_edge: None,
        }
    }
}

/// Pyramid construction plus window extraction over every level, with
/// origins mapped back to source-image coordinates.
pub fn scan_windows(img: &GrayImage, params: &ScanParams) -> Vec<DetectionWindow> {
    let min_edge = params.min_edge.unwrap_or(params.window_edge).max(params.window_edge);
    let mut out = Vec::new();
    for (level, scale) in build_pyramid(img, params.scale_factor, min_edge) {
        for mut w in extract_windows(&level, params.window_edge, params.stride) {
            w.origin_x = (w.origin_x as f64 * scale).floor() as u32;
            w.origin_y = (w.origin_y as f64 * scale).floor() as u32;
            w.scale = scale;
            out.push(w);
        }
    }
    out
}
