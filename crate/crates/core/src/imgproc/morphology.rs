use crate::{Error, Result};

use super::BinaryMask;

/// Largest kernel side accepted by [`make_elliptical_kernel`].
pub const MAX_KERNEL: usize = 63;

/// Odd-sided k×k elliptical (disc) footprint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuringElement {
    k: usize,
    footprint: Vec<bool>,
    // inclusive column span of each footprint row; every disc row is one run
    spans: Vec<Option<(usize, usize)>>,
}

impl StructuringElement {
    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.footprint[row * self.k + col]
    }

    pub fn footprint(&self) -> &[bool] {
        &self.footprint
    }

    pub fn cell_count(&self) -> usize {
        self.footprint.iter().filter(|&&b| b).count()
    }
}

/// Disc footprint of odd side `k`: cell (i, j) is set iff
/// `((i − c)/a)² + ((j − c)/a)² ≤ 1` with `c = (k − 1)/2`, `a = k/2`.
pub fn make_elliptical_kernel(k: usize) -> Result<StructuringElement> {
    if k == 0 || k.is_multiple_of(2) || k > MAX_KERNEL {
        return Err(Error::InvalidArgument(format!("kernel size {k} must be odd and in 1..={MAX_KERNEL}")));
    }
    let c = (k - 1) as f64 / 2.0;
    let a = k as f64 / 2.0;
    let mut footprint = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let di = (i as f64 - c) / a;
            let dj = (j as f64 - c) / a;
            footprint.push(di * di + dj * dj <= 1.0);
        }
    }
    let spans = (0..k)
        .map(|i| {
            let row = &footprint[i * k..(i + 1) * k];
            let first = row.iter().position(|&b| b)?;
            let last = row.iter().rposition(|&b| b)?;
            debug_assert!(row[first..=last].iter().all(|&b| b));
            Some((first, last))
        })
        .collect();
    Ok(StructuringElement { k, footprint, spans })
}

/// Binary erosion. A pixel survives iff every footprint cell centred on it
/// lands on a set pixel; cells falling outside the raster count as unset.
pub fn erode(m: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    let (w, h) = m.dims();
    if se.k == 1 {
        return m.clone();
    }
    let c = (se.k - 1) / 2;
    // prefix[y * (w + 1) + x] = ones in row y before column x
    let mut prefix = vec![0u32; h * (w + 1)];
    for y in 0..h {
        let base = y * (w + 1);
        for x in 0..w {
            prefix[base + x + 1] = prefix[base + x] + m.get(x, y) as u32;
        }
    }
    let row_all_set = |yy: usize, x0: usize, x1: usize| {
        let base = yy * (w + 1);
        prefix[base + x1 + 1] - prefix[base + x0] == (x1 - x0 + 1) as u32
    };
    BinaryMask::from_fn(w, h, |x, y| {
        if !m.get(x, y) {
            return false;
        }
        se.spans.iter().enumerate().all(|(i, span)| {
            let Some((j0, j1)) = *span else { return true };
            let (Some(yy), Some(x0)) = ((y + i).checked_sub(c), (x + j0).checked_sub(c)) else {
                return false;
            };
            let x1 = x + j1 - c;
            yy < h && x1 < w && row_all_set(yy, x0, x1)
        })
    })
}
