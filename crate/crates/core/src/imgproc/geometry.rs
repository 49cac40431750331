use serde::{Deserialize, Serialize};

/// Integer pixel rectangle, `x`/`y` the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoundingBox {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    /// Box covering a whole `width`×`height` raster.
    pub const fn full(width: usize, height: usize) -> Self {
        Self::new(0, 0, width, height)
    }

    /// Exclusive right edge.
    pub fn right(&self) -> usize {
        self.x + self.w
    }

    /// Exclusive bottom edge.
    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        other.x >= self.x && other.y >= self.y && other.right() <= self.right() && other.bottom() <= self.bottom()
    }

    /// Whether the box lies fully inside a `width`×`height` raster.
    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.right() <= width && self.bottom() <= height
    }

    /// Intersection with a `width`×`height` raster; may be empty.
    pub fn clamp_to(&self, width: usize, height: usize) -> BoundingBox {
        let x0 = self.x.min(width);
        let y0 = self.y.min(height);
        let x1 = self.right().min(width);
        let y1 = self.bottom().min(height);
        BoundingBox::new(x0, y0, x1 - x0, y1 - y0)
    }

    /// Expresses `self` in the coordinate frame of `origin`'s top-left
    /// corner, clipped to `origin`.
    pub fn relative_to(&self, origin: &BoundingBox) -> BoundingBox {
        let x0 = self.x.max(origin.x);
        let y0 = self.y.max(origin.y);
        let x1 = self.right().min(origin.right()).max(x0);
        let y1 = self.bottom().min(origin.bottom()).max(y0);
        BoundingBox::new(x0 - origin.x, y0 - origin.y, x1 - x0, y1 - y0)
    }

    /// Maps the box from a `from` raster size to a `to` raster size,
    /// keeping at least one pixel of extent.
    pub fn rescale(&self, from: (usize, usize), to: (usize, usize)) -> BoundingBox {
        let sx = to.0 as f64 / from.0 as f64;
        let sy = to.1 as f64 / from.1 as f64;
        let x0 = ((self.x as f64 * sx).floor() as usize).min(to.0.saturating_sub(1));
        let y0 = ((self.y as f64 * sy).floor() as usize).min(to.1.saturating_sub(1));
        let x1 = ((self.right() as f64 * sx).ceil() as usize).clamp(x0 + 1, to.0);
        let y1 = ((self.bottom() as f64 * sy).ceil() as usize).clamp(y0 + 1, to.1);
        BoundingBox::new(x0, y0, x1 - x0, y1 - y0)
    }
}

/// Grows `b` by `factor` of its size, symmetric about its center, then clamps
/// to a `bounds.0`×`bounds.1` raster.
///
/// The new extent is `round(w·(1+factor))` × `round(h·(1+factor))`; the new
/// corner is `round(center − extent/2)`. Clamping never yields an empty box
/// as long as `b` itself overlaps the raster.
pub fn expand_box(b: &BoundingBox, factor: f64, bounds: (usize, usize)) -> BoundingBox {
    assert!(factor >= 0.0, "expansion factor must be non-negative");
    if factor == 0.0 {
        return b.clamp_to(bounds.0, bounds.1);
    }
    let w = (b.w as f64 * (1.0 + factor)).round();
    let h = (b.h as f64 * (1.0 + factor)).round();
    let cx = b.x as f64 + b.w as f64 / 2.0;
    let cy = b.y as f64 + b.h as f64 / 2.0;
    let x0 = (cx - w / 2.0).round();
    let y0 = (cy - h / 2.0).round();
    let x1 = (x0 + w).min(bounds.0 as f64);
    let y1 = (y0 + h).min(bounds.1 as f64);
    let x0 = x0.max(0.0);
    let y0 = y0.max(0.0);
    BoundingBox::new(x0 as usize, y0 as usize, (x1 - x0).max(0.0) as usize, (y1 - y0).max(0.0) as usize)
}
