//! 8-bit PNG encoding of [`Image`]s via the linear map `[-1, 1] → [0, 255]`.

use std::path::Path;

use image::{ImageBuffer, RgbImage};

use crate::datamodel::Image;
use crate::error::{Error, Result};

pub fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_u8(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

pub fn to_rgb8(img: &Image) -> RgbImage {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let raw: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    ImageBuffer::from_raw(w, h, raw).expect("buffer size matches image dims")
}

pub fn from_rgb8(buf: &RgbImage) -> Result<Image> {
    let data = buf.as_raw().iter().map(|&v| from_u8(v)).collect();
    Image::new(buf.height() as usize, buf.width() as usize, data)
}

/// Round-trips an image through 8-bit quantization without touching disk.
pub fn quantize(img: &Image) -> Image {
    let data = img.data().iter().map(|&v| from_u8(to_u8(v))).collect();
    Image::new(img.height(), img.width(), data).expect("quantized values stay in range")
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    to_rgb8(img).save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "image not found"),
        ));
    }
    let dynamic = image::open(path)?;
    from_rgb8(&dynamic.to_rgb8())
}

/// Tiles equally sized images into a `rows × cols` grid (row-major order).
pub fn tile(images: &[Image], rows: usize, cols: usize) -> Result<Image> {
    if images.len() != rows * cols || images.is_empty() {
        return Err(Error::validation(format!(
            "grid of {rows}×{cols} needs {} images, got {}",
            rows * cols,
            images.len()
        )));
    }
    let (h, w) = (images[0].height(), images[0].width());
    if images.iter().any(|i| i.height() != h || i.width() != w) {
        return Err(Error::validation("grid images must share one size"));
    }
    let (gh, gw) = (rows * h, cols * w);
    let mut data = vec![0.0; gh * gw * 3];
    for (idx, img) in images.iter().enumerate() {
        let (r, c) = (idx / cols, idx % cols);
        for y in 0..h {
            let src = &img.data()[y * w * 3..][..w * 3];
            let dst = ((r * h + y) * gw + c * w) * 3;
            data[dst..dst + w * 3].copy_from_slice(src);
        }
    }
    Image::new(gh, gw, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_endpoints() {
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(from_u8(0), -1.0);
        assert_eq!(from_u8(255), 1.0);
        assert!((from_u8(to_u8(0.3)) - 0.3).abs() <= 1.0 / 255.0);
    }

    #[test]
    fn png_round_trip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(2, 2, (0..12).map(|i| i as f64 / 6.0 - 1.0).collect()).unwrap();
        let p = dir.path().join("x.png");
        save_png(&img, &p).unwrap();
        assert_eq!(load_png(&p).unwrap(), quantize(&img));
    }

    #[test]
    fn tile_layout() {
        let a = Image::filled(2, 3, [0.1, 0.1, 0.1]).unwrap();
        let b = Image::filled(2, 3, [0.5, 0.5, 0.5]).unwrap();
        let g = tile(&[a.clone(), b.clone(), b, a], 2, 2).unwrap();
        assert_eq!((g.height(), g.width()), (4, 6));
        assert_eq!(g.pixel(0, 0)[0], 0.1);
        assert_eq!(g.pixel(0, 3)[0], 0.5);
        assert_eq!(g.pixel(3, 5)[0], 0.1);
    }
}
