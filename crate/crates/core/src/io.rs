//! PNG/JPEG decode and encode; 8-bit samples map to `v / 255`.

use std::path::Path;

use image::{ImageBuffer, ImageReader, Rgb};

use crate::error::{Error, Result};
use crate::image::Image;

fn img_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

pub fn load_image(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let decoded = ImageReader::open(path)
        .map_err(|e| img_err(path, e))?
        .with_guessed_format()
        .map_err(|e| img_err(path, e))?
        .decode()
        .map_err(|e| img_err(path, e))?
        .to_rgb8();
    let (w, h) = decoded.dimensions();
    let data = decoded.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Image::new(h as usize, w as usize, data)
}

/// Quantises to 8 bits (round half up) and writes a PNG.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(img.width() as u32, img.height() as u32, bytes)
        .ok_or_else(|| img_err(path, "buffer size mismatch"))?;
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| img_err(path, e))
}

/// Horizontal strip of equally tall images separated by a 2-px white gap.
pub fn grid(images: &[&Image]) -> Result<Image> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty grid".into()))?;
    let h = first.height();
    if images.iter().any(|i| i.height() != h) {
        return Err(Error::Shape("grid images must share a height".into()));
    }
    const GAP: usize = 2;
    let total_w = images.iter().map(|i| i.width()).sum::<usize>() + GAP * (images.len() - 1);
    let mut offsets = Vec::with_capacity(images.len());
    let mut x0 = 0;
    for i in images {
        offsets.push(x0);
        x0 += i.width() + GAP;
    }
    Ok(Image::from_fn(h, total_w, |y, x| {
        for (img, &off) in images.iter().zip(&offsets) {
            if x >= off && x < off + img.width() {
                return img.pixel(y, x - off);
            }
        }
        [1.0; 3]
    }))
}
