//! Pixel-level primitives: image, mask and patch containers, RGB→HSI
//! conversion, grayscale reduction, and per-channel whitening.
//!
//! Channel values are stored as `f64` normalised to `[0, 1]` from 8-bit
//! sources (`v / 255`); whitened patches are the one exception and carry
//! unbounded values.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("channel {0} has zero variance")]
    DegenerateChannel(usize),
    #[error("expected a {expected}-channel patch, got {got} channels")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("invalid dimensions: {0}")]
    BadDimensions(String),
    #[error("unsupported image format for {0} (only PNG and JPEG are read)")]
    UnsupportedFormat(String),
    #[error("failed to read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// An RGB image with row-major `(r, g, b)` triplets in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::BadDimensions(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(ImagingError::BadDimensions(format!(
                "expected {} channel values for {width}x{height} RGB, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The `(r, g, b)` triplet at pixel `(x, y)`.
    pub fn pixel(&self, x: usize, y: usize) -> (f64, f64, f64) {
        let i = (y * self.width + x) * 3;
        (self.data[i], self.data[i + 1], self.data[i + 2])
    }

    /// Copies the square region with top-left corner `(x, y)` into a patch.
    /// The region must lie fully inside the image.
    pub fn crop_square(&self, x: usize, y: usize, size: usize) -> Patch {
        assert!(x + size <= self.width && y + size <= self.height, "crop out of bounds");
        let mut data = Vec::with_capacity(size * size * 3);
        for row in y..y + size {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + size * 3]);
        }
        Patch { size, channels: 3, data }
    }
}

/// A per-pixel boolean mask; `true` marks kidney-stone fragment pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl SegmentationMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self, ImagingError> {
        if data.len() != width * height {
            return Err(ImagingError::BadDimensions(format!(
                "expected {} mask values for {width}x{height}, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the true pixels, or
    /// `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.data[y * self.width + x] {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then_some((x0, y0, x1, y1))
    }
}

/// A square patch with 3 (RGB) or 1 (grayscale) channels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    size: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Patch {
    pub fn new(size: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImagingError> {
        if size == 0 || (channels != 1 && channels != 3) {
            return Err(ImagingError::BadDimensions(format!(
                "invalid patch shape: size {size}, {channels} channels"
            )));
        }
        if data.len() != size * size * channels {
            return Err(ImagingError::BadDimensions(format!(
                "expected {} values for a {size}x{size} patch with {channels} channels, got {}",
                size * size * channels,
                data.len()
            )));
        }
        Ok(Self { size, channels, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Channel `c` of pixel `(x, y)`.
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.size + x) * self.channels + c]
    }
}

/// RGB→HSI for a single pixel with `r, g, b` in `[0, 1]`.
///
/// Returns `(h, s, i)` with hue in degrees `[0, 360)`, saturation and
/// intensity in `[0, 1]`. Achromatic pixels (`r = g = b`, including black)
/// map to `h = 0, s = 0` by convention.
pub fn rgb_to_hsi(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    if r == g && g == b {
        return (0.0, 0.0, r);
    }
    let i = (r + g + b) / 3.0;
    let min = r.min(g).min(b);
    let s = if i > 0.0 { 1.0 - min / i } else { 0.0 };
    let num = 0.5 * ((r - g) + (r - b));
    let den = ((r - g) * (r - g) + (r - b) * (g - b)).sqrt();
    if s == 0.0 || den == 0.0 {
        return (0.0, s, i);
    }
    let theta = (num / den).clamp(-1.0, 1.0).acos().to_degrees();
    let mut h = if b > g { 360.0 - theta } else { theta };
    if h >= 360.0 {
        h -= 360.0;
    }
    (h, s, i)
}

/// Grayscale reduction with BT.601 luma weights.
///
/// Computed as `(299 r + 587 g + 114 b) / 1000` so that pure white maps to
/// exactly 1.0 and pure primaries to the exact weight values.
pub fn to_grayscale(patch: &Patch) -> Result<Patch, ImagingError> {
    if patch.channels != 3 {
        return Err(ImagingError::ChannelMismatch { expected: 3, got: patch.channels });
    }
    let mut data = Vec::with_capacity(patch.size * patch.size);
    for px in patch.data.chunks_exact(3) {
        data.push((299.0 * px[0] + 587.0 * px[1] + 114.0 * px[2]) / 1000.0);
    }
    Ok(Patch { size: patch.size, channels: 1, data })
}

/// How `whiten_patch` treats a channel whose standard deviation is zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegenerateChannelMode {
    /// Substitute σ := 1, so a constant channel whitens to all zeros.
    #[default]
    Substitute,
    /// Fail with [`ImagingError::DegenerateChannel`].
    Strict,
}

/// Standardises each channel independently to mean 0 and population
/// standard deviation 1: `(v − m) / σ`.
pub fn whiten_patch(patch: &Patch, mode: DegenerateChannelMode) -> Result<Patch, ImagingError> {
    let n = patch.size * patch.size;
    let mut out = patch.data.clone();
    for c in 0..patch.channels {
        let mut sum = 0.0;
        for i in 0..n {
            sum += patch.data[i * patch.channels + c];
        }
        let mean = sum / n as f64;
        let mut var = 0.0;
        for i in 0..n {
            let d = patch.data[i * patch.channels + c] - mean;
            var += d * d;
        }
        let sigma = (var / n as f64).sqrt();
        let sigma = if sigma == 0.0 {
            match mode {
                DegenerateChannelMode::Substitute => 1.0,
                DegenerateChannelMode::Strict => return Err(ImagingError::DegenerateChannel(c)),
            }
        } else {
            sigma
        };
        for i in 0..n {
            let v = &mut out[i * patch.channels + c];
            *v = (*v - mean) / sigma;
        }
    }
    Ok(Patch { size: patch.size, channels: patch.channels, data: out })
}

fn check_extension(path: &Path) -> Result<(), ImagingError> {
    let ok = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| {
            let e = e.to_ascii_lowercase();
            e == "png" || e == "jpg" || e == "jpeg"
        })
        .unwrap_or(false);
    if ok {
        Ok(())
    } else {
        Err(ImagingError::UnsupportedFormat(path.display().to_string()))
    }
}

/// Loads an 8-bit PNG or JPEG as an RGB image; an alpha channel is dropped.
pub fn load_image(path: &Path) -> Result<ImageRgb, ImagingError> {
    check_extension(path)?;
    let img = image::open(path)
        .map_err(|source| ImagingError::Read { path: path.display().to_string(), source })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    ImageRgb::new(w, h, data)
}

/// Loads a single-channel PNG mask; a pixel value ≥ 128 marks fragment.
pub fn load_mask(path: &Path) -> Result<SegmentationMask, ImagingError> {
    check_extension(path)?;
    let img = image::open(path)
        .map_err(|source| ImagingError::Read { path: path.display().to_string(), source })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| v >= 128).collect();
    SegmentationMask::new(w, h, data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB image as an 8-bit PNG.
pub fn save_image_png(img: &ImageRgb, path: &Path) -> Result<(), ImagingError> {
    let raw: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, raw).unwrap();
    buf.save(path)
        .map_err(|source| ImagingError::Write { path: path.display().to_string(), source })
}

/// Writes a mask as an 8-bit single-channel PNG (255 = fragment).
pub fn save_mask_png(mask: &SegmentationMask, path: &Path) -> Result<(), ImagingError> {
    let raw: Vec<u8> = mask.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, raw).unwrap();
    buf.save(path)
        .map_err(|source| ImagingError::Write { path: path.display().to_string(), source })
}

/// Writes a patch as an 8-bit PNG (RGB or single-channel).
pub fn save_patch_png(patch: &Patch, path: &Path) -> Result<(), ImagingError> {
    let raw: Vec<u8> = patch.data.iter().map(|&v| quantize(v)).collect();
    let side = patch.size as u32;
    let res = if patch.channels == 3 {
        image::RgbImage::from_raw(side, side, raw).unwrap().save(path)
    } else {
        image::GrayImage::from_raw(side, side, raw).unwrap().save(path)
    };
    res.map_err(|source| ImagingError::Write { path: path.display().to_string(), source })
}

/// Reads a patch previously written by [`save_patch_png`].
pub fn load_patch_png(path: &Path) -> Result<Patch, ImagingError> {
    let img = image::open(path)
        .map_err(|source| ImagingError::Read { path: path.display().to_string(), source })?;
    let (patch, w, h) = match img {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let data: Vec<f64> = buf.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            (Patch::new(w, 1, data), w, h)
        }
        other => {
            let buf = other.to_rgb8();
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let data: Vec<f64> = buf.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            (Patch::new(w, 3, data), w, h)
        }
    };
    if w != h {
        return Err(ImagingError::BadDimensions(format!("patch file is not square: {w}x{h}")));
    }
    patch
}
