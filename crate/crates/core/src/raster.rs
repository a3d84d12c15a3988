//! 8-bit RGB rasters and the lossless PNG codec used for every artifact.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use sha2::{Digest, Sha256};

use crate::error::RasterError;

/// A row-major, 3-channel, 8-bit image.
#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("digest", &&self.digest_hex()[..12])
            .finish()
    }
}

impl RasterImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, RasterError> {
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(RasterError::BadLength {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for _ in 0..(width as usize * height as usize) {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn put_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the `w`×`h` rectangle at (`x`,`y`).
    pub fn crop(&self, x: u32, y: u32, w: u32, h: u32) -> Result<Self, RasterError> {
        if x.checked_add(w).is_none_or(|r| r > self.width)
            || y.checked_add(h).is_none_or(|b| b > self.height)
        {
            return Err(RasterError::OutOfBounds);
        }
        let mut pixels = Vec::with_capacity(w as usize * h as usize * 3);
        for row in y..y + h {
            let start = (row as usize * self.width as usize + x as usize) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w as usize * 3]);
        }
        Ok(Self {
            width: w,
            height: h,
            pixels,
        })
    }

    /// Writes `src` with its top-left corner at (`x`,`y`). `src` must fit.
    pub fn blit(&mut self, src: &RasterImage, x: u32, y: u32) {
        debug_assert!(x + src.width <= self.width && y + src.height <= self.height);
        let row_bytes = src.width as usize * 3;
        for row in 0..src.height {
            let dst = ((y + row) as usize * self.width as usize + x as usize) * 3;
            let s = row as usize * row_bytes;
            self.pixels[dst..dst + row_bytes].copy_from_slice(&src.pixels[s..s + row_bytes]);
        }
    }

    /// SHA-256 over (width, height, pixels).
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(&self.pixels);
        h.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("length checked at construction")
    }

    pub fn from_rgb_image(img: RgbImage) -> Self {
        let (width, height) = img.dimensions();
        Self {
            width,
            height,
            pixels: img.into_raw(),
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, RasterError> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb_image().write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, RasterError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Ok(Self::from_rgb_image(img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        crate::fsutil::write_atomic(path, &self.encode_png()?)?;
        Ok(())
    }
}

/// Single-channel 8-bit mask: 0 keeps the composite pixel, 255 marks the
/// region to synthesize.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    values: Vec<u8>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("set", &self.count_set())
            .finish()
    }
}

impl Mask {
    pub const KEEP: u8 = 0;
    pub const GENERATE: u8 = 255;

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            values: vec![Self::KEEP; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    pub fn fill_rect(&mut self, x: u32, y: u32, w: u32, h: u32, value: u8) {
        for row in y..y + h {
            let start = row as usize * self.width as usize + x as usize;
            self.values[start..start + w as usize].fill(value);
        }
    }

    pub fn count_set(&self) -> usize {
        self.values.iter().filter(|&&v| v == Self::GENERATE).count()
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(&self.values);
        h.finalize().into()
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, RasterError> {
        let img = image::GrayImage::from_raw(self.width, self.height, self.values.clone())
            .expect("length fixed at construction");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, RasterError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
        let (width, height) = img.dimensions();
        Ok(Self {
            width,
            height,
            values: img.into_raw(),
        })
    }
}
