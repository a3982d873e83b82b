//! PNG and PFM conversion for channel-first tensors.

use std::io::Write;
use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save a `[3, H, W]` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_rgb(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = t.dims3();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("RGB image needs 3 channels, got {c}")));
    }
    let n = h * w;
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_u8(t.data()[i]), to_u8(t.data()[n + i]), to_u8(t.data()[2 * n + i])])
    });
    img.save(path)?;
    Ok(())
}

/// Save a `[1, H, W]` tensor in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_gray(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = t.dims3();
    if c != 1 {
        return Err(Error::ShapeMismatch(format!("grayscale image needs 1 channel, got {c}")));
    }
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(t.data()[y as usize * w + x as usize])]));
    img.save(path)?;
    Ok(())
}

pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    let mut data = vec![0.0; 3 * n];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * n + i] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data))
}

pub fn load_gray(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Ok(Tensor::from_vec(&[1, h, w], data))
}

/// Single-channel little-endian PFM (rows stored bottom to top).
pub fn save_pfm(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    let mut buf = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for row in (0..height).rev() {
        for x in 0..width {
            buf.extend_from_slice(&(values[row * width + x] as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
