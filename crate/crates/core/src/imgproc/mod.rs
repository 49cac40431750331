//! Rasters, binary masks and the morphology / region tools built on them.

mod geometry;
mod io;
mod mask;
mod morphology;
mod raster;
mod regions;

pub use geometry::{expand_box, BoundingBox};
pub use io::{load_image, load_mask, save_image, save_mask};
pub use mask::{mask_difference, mask_intersection, mask_union, BinaryMask};
pub use morphology::{erode, make_elliptical_kernel, StructuringElement, MAX_KERNEL as MAX_KERNEL_SIZE};
pub use raster::{overlay, Image, Rgb, DEFAULT_ALPHA, DEFAULT_COLOR};
pub use regions::{find_contours, Region};

pub(crate) use mask::nearest_index_map;
pub(crate) use regions::label_map;
