use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::{BinaryMask, BoundingBox};

/// Default overlay weight.
pub const DEFAULT_ALPHA: f64 = 0.5;
/// Default overlay color (red).
pub const DEFAULT_COLOR: Rgb = Rgb([255, 0, 0]);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rgb(pub [u8; 3]);

/// 8-bit raster with 1 (gray) or 3 (RGB) interleaved channels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image must be at least 1x1".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidArgument(format!(
                "image data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Uniform image filled with `value` in every channel.
    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image { width: self.width, height: self.height, channels: 3, data }
    }

    pub fn crop(&self, b: &BoundingBox) -> Result<Image> {
        if b.is_empty() || !b.fits(self.width, self.height) {
            return Err(Error::InvalidArgument(format!("crop {b:?} outside {}x{} image", self.width, self.height)));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(b.area() * c);
        for y in b.y..b.bottom() {
            let row = y * self.width;
            data.extend_from_slice(&self.data[(row + b.x) * c..(row + b.right()) * c]);
        }
        Ok(Image { width: b.w, height: b.h, channels: c, data })
    }

    /// Bilinear resize with pixel-center alignment; edge samples clamp.
    pub fn resize(&self, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("resize target must be at least 1x1".into()));
        }
        if (width, height) == self.dims() {
            return Ok(self.clone());
        }
        let xs = bilinear_taps(self.width, width);
        let ys = bilinear_taps(self.height, height);
        let c = self.channels;
        let mut data = Vec::with_capacity(width * height * c);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for ch in 0..c {
                    let at = |x: usize, y: usize| self.data[(y * self.width + x) * c + ch] as f64;
                    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                    let v = top * (1.0 - fy) + bottom * fy;
                    data.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        Ok(Image { width, height, channels: c, data })
    }
}

fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Alpha-blends `color` onto `img` wherever `mask` is set. The result is
/// always RGB; unmasked pixels keep their (gray-expanded) values.
pub fn overlay(img: &Image, mask: &BinaryMask, alpha: f64, color: Rgb) -> Result<Image> {
    if img.dims() != mask.dims() {
        return Err(Error::DimensionMismatch { left: img.dims(), right: mask.dims() });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut out = img.to_rgb();
    for (x, y) in mask.ones() {
        let i = (y * out.width + x) * 3;
        for (ch, &c) in color.0.iter().enumerate() {
            let v = (1.0 - alpha) * out.data[i + ch] as f64 + alpha * c as f64;
            out.data[i + ch] = v.round() as u8;
        }
    }
    Ok(out)
}
