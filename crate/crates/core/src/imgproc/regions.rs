use std::collections::VecDeque;

use super::{BinaryMask, BoundingBox};

/// One 8-connected component of set pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pixels: Vec<(usize, usize)>,
    bbox: BoundingBox,
}

impl Region {
    /// Pixel coordinates in discovery order; the first entry is the
    /// component's first pixel in row-major order.
    pub fn pixels(&self) -> &[(usize, usize)] {
        &self.pixels
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn bbox(&self) -> BoundingBox {
        self.bbox
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.bbox.contains(x, y) && self.pixels.contains(&(x, y))
    }

    /// Writes the region into `mask` (which must share the source raster dims).
    pub fn paint(&self, mask: &mut BinaryMask, on: bool) {
        for &(x, y) in &self.pixels {
            mask.set(x, y, on);
        }
    }
}

/// Labels the 8-connected components of `m`, ordered by their first pixel
/// in row-major scan.
pub fn find_contours(m: &BinaryMask) -> Vec<Region> {
    let (w, h) = m.dims();
    let mut seen = vec![false; w * h];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for (sx, sy) in m.ones() {
        if seen[sy * w + sx] {
            continue;
        }
        seen[sy * w + sx] = true;
        queue.push_back((sx, sy));
        let mut pixels = Vec::new();
        let (mut x0, mut y0, mut x1, mut y1) = (sx, sy, sx, sy);
        while let Some((x, y)) = queue.pop_front() {
            pixels.push((x, y));
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let i = ny * w + nx;
                    if !seen[i] && m.get(nx, ny) {
                        seen[i] = true;
                        queue.push_back((nx, ny));
                    }
                }
            }
        }
        regions.push(Region { pixels, bbox: BoundingBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1) });
    }
    regions
}

/// Per-pixel component labels (0 = background, regions numbered from 1 in
/// [`find_contours`] order).
pub(crate) fn label_map(m: &BinaryMask) -> (Vec<u32>, Vec<Region>) {
    let regions = find_contours(m);
    let mut labels = vec![0u32; m.width() * m.height()];
    for (i, r) in regions.iter().enumerate() {
        for &(x, y) in r.pixels() {
            labels[y * m.width() + x] = i as u32 + 1;
        }
    }
    (labels, regions)
}
