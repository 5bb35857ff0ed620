//! Row-major sRGB rasters and PNG I/O.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::color::{LabColor, RgbColor};

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    EmptyImage { width: usize, height: usize },
    #[error("pixel count {got} does not match {width}x{height}")]
    PixelCount { width: usize, height: usize, got: usize },
    #[error("failed to decode PNG: {0}")]
    Decode(#[source] image::ImageError),
    #[error("failed to encode PNG: {0}")]
    Encode(#[source] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An 8-bit sRGB image. Pixels are stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<RgbColor>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<RgbColor>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyImage { width, height });
        }
        if pixels.len() != width * height {
            return Err(RasterError::PixelCount {
                width,
                height,
                got: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, color: RgbColor) -> Result<Self, RasterError> {
        Self::new(width, height, vec![color; width * height])
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> RgbColor,
    ) -> Result<Self, RasterError> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[RgbColor] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> RgbColor {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: RgbColor) {
        self.pixels[y * self.width + x] = c;
    }

    /// Lab values of every pixel, converting each distinct color once.
    pub fn to_lab(&self) -> Vec<LabColor> {
        let mut cache = std::collections::HashMap::new();
        self.pixels
            .iter()
            .map(|&p| *cache.entry(p).or_insert_with(|| p.to_lab()))
            .collect()
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, RasterError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(RasterError::Decode)?
            .to_rgb8();
        Self::from_rgb_image(&img)
    }

    /// Reads the width and height from a PNG header without decoding pixels.
    pub fn png_dimensions(bytes: &[u8]) -> Result<(usize, usize), RasterError> {
        let (w, h) = image::ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png)
            .into_dimensions()
            .map_err(RasterError::Decode)?;
        Ok((w as usize, h as usize))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, RasterError> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb_image()
            .write_to(&mut out, ImageFormat::Png)
            .map_err(RasterError::Encode)?;
        Ok(out.into_inner())
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self, RasterError> {
        Self::decode_png(&std::fs::read(path)?)
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    fn from_rgb_image(img: &RgbImage) -> Result<Self, RasterError> {
        let pixels = img
            .pixels()
            .map(|p| RgbColor::new(p.0[0], p.0[1], p.0[2]))
            .collect();
        Self::new(img.width() as usize, img.height() as usize, pixels)
    }

    fn to_rgb_image(&self) -> RgbImage {
        let raw = self.pixels.iter().flat_map(|p| p.channels()).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }
}
