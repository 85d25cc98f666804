//! Raster image types shared by the preprocessing and embedding stages.
//!
//! Signature images enter the pipeline as 8-bit grayscale rasters and are
//! reduced to boolean ink masks. All buffers are row-major.

use std::io::Cursor;
use std::path::Path;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum RasterError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image decode error: {0}")]
    Decode(#[from] image::ImageError),
    #[error("unsupported color type: {0}")]
    UnsupportedColor(String),
    #[error("invalid dimensions: {width}x{height} with {len} pixels")]
    DimensionMismatch {
        width: usize,
        height: usize,
        len: usize,
    },
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(RasterError::DimensionMismatch {
                width,
                height,
                len: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Constant-intensity image.
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("nonzero dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.pixels[y * self.width + x] = value;
    }

    /// Decode a PNG (8-bit gray or RGB). Color inputs are converted by
    /// averaging the three channels.
    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        let bytes = std::fs::read(path)?;
        Self::decode_png(&bytes)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, RasterError> {
        let dynamic = image::ImageReader::new(Cursor::new(bytes))
            .with_guessed_format()?
            .decode()?;
        let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
        let pixels = match dynamic {
            image::DynamicImage::ImageLuma8(img) => img.into_raw(),
            image::DynamicImage::ImageRgb8(img) => img
                .pixels()
                .map(|p| {
                    let sum = p.0[0] as u32 + p.0[1] as u32 + p.0[2] as u32;
                    ((sum + 1) / 3) as u8
                })
                .collect(),
            image::DynamicImage::ImageRgba8(img) => img
                .pixels()
                .map(|p| {
                    let sum = p.0[0] as u32 + p.0[1] as u32 + p.0[2] as u32;
                    ((sum + 1) / 3) as u8
                })
                .collect(),
            other => {
                return Err(RasterError::UnsupportedColor(format!("{:?}", other.color())));
            }
        };
        Self::new(w, h, pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        let img = image::GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.pixels.clone(),
        )
        .expect("buffer length matches dimensions");
        img.save(path)?;
        Ok(())
    }
}

/// Boolean ink mask produced by binarization. `true` marks ink.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    width: usize,
    height: usize,
    mask: Vec<bool>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize, mask: Vec<bool>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 || mask.len() != width * height {
            return Err(RasterError::DimensionMismatch {
                width,
                height,
                len: mask.len(),
            });
        }
        Ok(Self {
            width,
            height,
            mask,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![false; width * height]).expect("nonzero dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, ink: bool) {
        self.mask[y * self.width + x] = ink;
    }

    /// Out-of-bounds coordinates read as background.
    pub fn get_signed(&self, x: isize, y: isize) -> bool {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            false
        } else {
            self.mask[y as usize * self.width + x as usize]
        }
    }

    pub fn ink_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        // ink black, background white
        let pixels: Vec<u8> = self.mask.iter().map(|&b| if b { 0 } else { 255 }).collect();
        GrayImage::new(self.width, self.height, pixels)?.save_png(path)
    }
}

/// One-pixel-wide skeleton mask. Same layout as [`BinaryImage`]; kept as a
/// distinct type so graph extraction only accepts thinned input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonImage {
    inner: BinaryImage,
}

impl SkeletonImage {
    pub(crate) fn from_mask(inner: BinaryImage) -> Self {
        Self { inner }
    }

    pub fn width(&self) -> usize {
        self.inner.width()
    }

    pub fn height(&self) -> usize {
        self.inner.height()
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.inner.get(x, y)
    }

    pub fn get_signed(&self, x: isize, y: isize) -> bool {
        self.inner.get_signed(x, y)
    }

    pub fn ink_count(&self) -> usize {
        self.inner.ink_count()
    }

    pub fn mask(&self) -> &BinaryImage {
        &self.inner
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        self.inner.save_png(path)
    }
}
