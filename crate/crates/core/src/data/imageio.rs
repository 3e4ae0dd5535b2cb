//! 8-bit PNG image I/O mapped to unit-interval tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use image::{ColorType, DynamicImage, GrayImage, RgbImage};
use std::path::Path;

/// Load an 8-bit grayscale or RGB PNG as `[C,H,W]` with intensities / 255.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
    match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let data = g.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
            Tensor::new(&[1, h, w], data)
        }
        DynamicImage::ImageRgb8(c) => {
            let (w, h) = (c.width() as usize, c.height() as usize);
            let raw = c.into_raw();
            let mut data = vec![0.0; 3 * h * w];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        data[ch * h * w + y * w + x] = raw[(y * w + x) * 3 + ch] as f64 / 255.0;
                    }
                }
            }
            Tensor::new(&[3, h, w], data)
        }
        other => Err(Error::Decode(format!(
            "{}: unsupported color type {:?}; expected 8-bit grayscale or RGB",
            path.display(),
            other.color()
        ))),
    }
}

/// Save a `[1,H,W]` or `[3,H,W]` tensor as an 8-bit PNG. Values are clamped
/// to [0,1] and quantized with round(v*255), the exact inverse of
/// [`load_image`] for values on the 1/255 grid.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = t.chw()?;
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let bytes = match c {
        1 => {
            let img =
                GrayImage::from_fn(w as u32, h as u32, |x, y| {
                    image::Luma([q(t.data()[y as usize * w + x as usize])])
                });
            encode_png(img.as_raw(), w as u32, h as u32, ColorType::L8)?
        }
        3 => {
            let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let (xi, yi) = (x as usize, y as usize);
                image::Rgb([
                    q(t.data()[yi * w + xi]),
                    q(t.data()[h * w + yi * w + xi]),
                    q(t.data()[2 * h * w + yi * w + xi]),
                ])
            });
            encode_png(img.as_raw(), w as u32, h as u32, ColorType::Rgb8)?
        }
        _ => return Err(Error::shape(&[1, h, w], t.shape())),
    };
    crate::harness::write_atomic(path, &bytes)
}

fn encode_png(raw: &[u8], w: u32, h: u32, color: ColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .encode(raw, w, h, color)
        .map_err(|e| Error::Decode(format!("png encode: {e}")))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn grid_valued_roundtrip_is_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("gray.png");
        let data: Vec<f64> = (0..12).map(|k| (k * 20) as f64 / 255.0).collect();
        let t = Tensor::new(&[1, 3, 4], data).unwrap();
        save_image(&t, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn all_black_png_is_all_zero() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("black.png");
        save_image(&Tensor::zeros(&[1, 4, 4]), &p).unwrap();
        let back = load_image(&p).unwrap();
        assert!(back.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn known_bytes_fixture() {
        // Write a 4x4 with known byte values through the image crate, then
        // check the loaded tensor against a hand byte table.
        let dir = tempdir().unwrap();
        let p = dir.path().join("fix.png");
        let bytes: [u8; 16] = [0, 1, 2, 3, 10, 20, 30, 40, 100, 120, 140, 160, 200, 220, 240, 255];
        let img = GrayImage::from_raw(4, 4, bytes.to_vec()).unwrap();
        img.save(&p).unwrap();
        let t = load_image(&p).unwrap();
        assert_eq!(t.shape(), &[1, 4, 4]);
        for (a, &b) in t.data().iter().zip(bytes.iter()) {
            assert_eq!(*a, b as f64 / 255.0);
        }
    }

    #[test]
    fn rgb_roundtrip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        let data: Vec<f64> = (0..3 * 4).map(|k| (k * 21) as f64 / 255.0).collect();
        let t = Tensor::new(&[3, 2, 2], data).unwrap();
        save_image(&t, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), t);
    }
}
