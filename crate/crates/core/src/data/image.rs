use std::path::Path;

use image::{DynamicImage, ImageFormat};

use crate::error::{Error, Result};
use crate::tensor::kernels::{resize_forward, ResizeGeom};
use crate::tensor::Tensor;

pub const DEFAULT_SIZE: (usize, usize) = (224, 224);

/// Decodes an 8-bit gray or RGB PNG/BMP into an `H×W×3` tensor in `[0, 1]`,
/// resized bilinearly with half-pixel centers.
pub fn decode_and_resize(path: &Path, target: (usize, usize)) -> Result<Tensor<f32>> {
    let format = ImageFormat::from_path(path).map_err(|_| unsupported(path, "unknown extension"))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Bmp) {
        return Err(unsupported(path, "only PNG and BMP are accepted"));
    }
    let img = image::open(path)?;
    resize(&to_tensor(&img).map_err(|e| unsupported(path, &e))?, target)
}

fn unsupported(path: &Path, why: &str) -> Error {
    Error::Data(format!("{}: {why}", path.display()))
}

/// Converts an 8-bit gray or RGB image to `H×W×3` in `[0, 1]`.
pub fn to_tensor(img: &DynamicImage) -> std::result::Result<Tensor<f32>, String> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(g) => g.as_raw().iter().flat_map(|&v| [v as f32 / 255.0; 3]).collect(),
        DynamicImage::ImageRgb8(rgb) => rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        other => return Err(format!("unsupported pixel layout {:?}", other.color())),
    };
    Tensor::from_vec(&[h, w, 3], data).map_err(|e| e.to_string())
}

/// Bilinear resize of an `H×W×C` tensor.
pub fn resize(img: &Tensor<f32>, target: (usize, usize)) -> Result<Tensor<f32>> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::invalid_shape("resize", format!("expected H×W×C, got {s:?}")));
    }
    if (s[0], s[1]) == target {
        return Ok(img.clone());
    }
    let geom = ResizeGeom::new(&[1, s[0], s[1], s[2]], target)?;
    let out = resize_forward(&geom, img.data());
    Tensor::from_vec(&[target.0, target.1, s[2]], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    #[test]
    fn rgb_at_target_size_is_scaled_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = RgbImage::from_fn(6, 4, |x, y| Rgb([(x * 40) as u8, (y * 60) as u8, 255]));
        img.save(&p).unwrap();
        let t = decode_and_resize(&p, (4, 6)).unwrap();
        assert_eq!(t.shape(), &[4, 6, 3]);
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                assert_eq!(t.data()[i * 3 + c], px[c] as f32 / 255.0);
            }
        }
    }

    #[test]
    fn constant_gray_stays_constant() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.bmp");
        GrayImage::from_pixel(37, 53, Luma([91])).save(&p).unwrap();
        let t = decode_and_resize(&p, (224, 224)).unwrap();
        assert_eq!(t.shape(), &[224, 224, 3]);
        let v = 91.0 / 255.0;
        assert!(t.data().iter().all(|&x| (x - v).abs() < 1e-6));
    }

    #[test]
    fn rejects_other_formats_and_depths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jpg");
        std::fs::write(&p, b"not an image").unwrap();
        assert!(decode_and_resize(&p, (8, 8)).is_err());
        let p = dir.path().join("deep.png");
        image::ImageBuffer::<Luma<u16>, _>::from_pixel(4, 4, Luma([1000u16])).save(&p).unwrap();
        assert!(decode_and_resize(&p, (8, 8)).is_err());
    }
}
