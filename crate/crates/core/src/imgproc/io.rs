use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::{Error, Result};

use super::{BinaryMask, Image};

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image { path: path.to_path_buf(), source }
}

/// Loads a PNG (or any format the `image` crate decodes) as 8-bit gray or RGB.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let has_color = img.color().has_color();
    if has_color {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Image::new(w as usize, h as usize, 3, rgb.into_raw())
    } else {
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        Image::new(w as usize, h as usize, 1, gray.into_raw())
    }
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let dynamic = if img.channels() == 3 {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, img.data().to_vec()).expect("validated dims"))
    } else {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, img.data().to_vec()).expect("validated dims"))
    };
    dynamic.save(path).map_err(|e| image_err(path, e))
}

/// Loads a mask image; gray values ≥ 128 map to 1.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let gray = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray.into_raw().into_iter().map(|v| (v >= 128) as u8).collect();
    BinaryMask::from_vec(w as usize, h as usize, data)
}

/// Saves a mask as an 8-bit gray PNG with values {0, 255}.
pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let data = mask.data().iter().map(|&v| v * 255).collect();
    let gray = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, data).expect("validated dims");
    gray.save(path).map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = BinaryMask::from_fn(7, 5, |x, y| (x * y) % 3 == 1);
        save_mask(&m, &path).unwrap();
        assert_eq!(load_mask(&path).unwrap(), m);
    }

    #[test]
    fn image_png_round_trip_keeps_channels() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Image::new(3, 2, 3, (0..18).collect()).unwrap();
        let gray = Image::new(3, 2, 1, (10..16).collect()).unwrap();
        save_image(&rgb, dir.path().join("rgb.png")).unwrap();
        save_image(&gray, dir.path().join("gray.png")).unwrap();
        assert_eq!(load_image(dir.path().join("rgb.png")).unwrap(), rgb);
        assert_eq!(load_image(dir.path().join("gray.png")).unwrap(), gray);
    }

    #[test]
    fn missing_file_is_a_data_error() {
        let err = load_mask("/nonexistent/mask.png").unwrap_err();
        assert_eq!(err.kind(), crate::ErrorKind::Data);
    }
}
