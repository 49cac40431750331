use crate::{Error, Result};

use super::BoundingBox;

/// Per-pixel {0,1} raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    /// Builds a mask from raw values; every value must be 0 or 1.
    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "mask data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("mask value {v} is not binary")));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        Self { width, height, data }
    }

    /// Mask with every pixel inside `b` (clipped to the raster) set.
    pub fn from_box(width: usize, height: usize, b: &BoundingBox) -> Self {
        let b = b.clamp_to(width, height);
        Self::from_fn(width, height, |x, y| b.contains(x, y))
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Iterates `(x, y)` of every set pixel in row-major order.
    pub fn ones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data.iter().enumerate().filter(|(_, &v)| v != 0).map(move |(i, _)| (i % w, i / w))
    }

    pub(crate) fn ensure_same_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch { left: self.dims(), right: other.dims() });
        }
        Ok(())
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(u8, u8) -> u8) -> Result<BinaryMask> {
        self.ensure_same_dims(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(BinaryMask { width: self.width, height: self.height, data })
    }

    /// Whether every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    /// Exact sub-raster.
    pub fn crop(&self, b: &BoundingBox) -> Result<BinaryMask> {
        if b.is_empty() || !b.fits(self.width, self.height) {
            return Err(Error::InvalidArgument(format!("crop {b:?} outside {}x{} mask", self.width, self.height)));
        }
        let mut data = Vec::with_capacity(b.area());
        for y in b.y..b.bottom() {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + b.x..row + b.right()]);
        }
        Ok(BinaryMask { width: b.w, height: b.h, data })
    }

    /// Nearest-neighbour resize: destination pixel `d` samples source index
    /// `floor((d + 0.5) · src / dst)`.
    pub fn resize(&self, width: usize, height: usize) -> Result<BinaryMask> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("resize target must be at least 1x1".into()));
        }
        if (width, height) == self.dims() {
            return Ok(self.clone());
        }
        let xs = nearest_index_map(self.width, width);
        let ys = nearest_index_map(self.height, height);
        let mut data = Vec::with_capacity(width * height);
        for &sy in &ys {
            let row = sy * self.width;
            data.extend(xs.iter().map(|&sx| self.data[row + sx]));
        }
        Ok(BinaryMask { width, height, data })
    }

    /// ORs `patch` into `self` with its top-left corner at `(x, y)`; parts
    /// falling outside are dropped.
    pub fn paste_or(&mut self, patch: &BinaryMask, x: usize, y: usize) {
        for py in 0..patch.height {
            let ty = y + py;
            if ty >= self.height {
                break;
            }
            for px in 0..patch.width {
                let tx = x + px;
                if tx >= self.width {
                    break;
                }
                if patch.get(px, py) {
                    self.data[ty * self.width + tx] = 1;
                }
            }
        }
    }

    /// Clears every pixel outside `b`.
    pub fn retain_box(&mut self, b: &BoundingBox) {
        for y in 0..self.height {
            for x in 0..self.width {
                if !b.contains(x, y) {
                    self.data[y * self.width + x] = 0;
                }
            }
        }
    }

    /// Tight bounding box of the set pixels, `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let mut it = self.ones();
        let (fx, fy) = it.next()?;
        let (mut x0, mut y0, mut x1, mut y1) = (fx, fy, fx, fy);
        for (x, y) in it {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        Some(BoundingBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }
}

pub(crate) fn nearest_index_map(src: usize, dst: usize) -> Vec<usize> {
    let scale = src as f64 / dst as f64;
    (0..dst).map(|d| (((d as f64 + 0.5) * scale).floor() as usize).min(src - 1)).collect()
}

/// Set difference `a ∖ b`: 1 where `a` is set and `b` is not.
pub fn mask_difference(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    a.zip_with(b, |a, b| a & (1 - b))
}

pub fn mask_intersection(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    a.zip_with(b, |a, b| a & b)
}

pub fn mask_union(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    a.zip_with(b, |a, b| a | b)
}
