use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Largest translation as a fraction of width and height.
    pub shift_fraction: f64,
    /// Largest horizontal shear angle in degrees.
    pub shear_degrees: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            shift_fraction: 0.1,
            shear_degrees: 10.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            shift_fraction: 0.0,
            shear_degrees: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.shift_fraction) || !(0.0..90.0).contains(&self.shear_degrees) {
            return Err(Error::InvalidArgument(format!(
                "augmentation needs shift_fraction in [0,1) and shear_degrees in [0,90), got {} and {}",
                self.shift_fraction, self.shear_degrees
            )));
        }
        Ok(())
    }
}

/// Translation in pixels plus a horizontal shear about the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub dx: f64,
    pub dy: f64,
    pub shear_degrees: f64,
}

/// Draws a transform from `cfg` for one sample and applies it.
pub fn augment(img: &Tensor<f32>, cfg: &AugmentConfig, per_sample_seed: u64) -> Tensor<f32> {
    if cfg.shift_fraction == 0.0 && cfg.shear_degrees == 0.0 {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ per_sample_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let (h, w) = (img.shape()[0] as f64, img.shape()[1] as f64);
    let mut draw = |limit: f64| if limit > 0.0 { rng.gen_range(-limit..=limit) } else { 0.0 };
    let t = Affine {
        dx: draw(cfg.shift_fraction * w),
        dy: draw(cfg.shift_fraction * h),
        shear_degrees: draw(cfg.shear_degrees),
    };
    warp(img, &t)
}

/// Resamples `H×W×C` under `t` with bilinear interpolation; pixels that map
/// outside the source are zero.
pub fn warp(img: &Tensor<f32>, t: &Affine) -> Tensor<f32> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let shear = t.shear_degrees.to_radians().tan();
    let cy = (h as f64 - 1.0) / 2.0;
    let src = img.data();
    let mut out = vec![0.0f32; h * w * c];
    let texel = |y: isize, x: isize, ch: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[((y as usize) * w + x as usize) * c + ch] as f64
        }
    };
    for y in 0..h {
        let sy = y as f64 - t.dy;
        for x in 0..w {
            let sx = x as f64 - t.dx - shear * (sy - cy);
            if sx <= -1.0 || sy <= -1.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let top = texel(y0, x0, ch) * (1.0 - fx) + texel(y0, x0 + 1, ch) * fx;
                let bot = texel(y0 + 1, x0, ch) * (1.0 - fx) + texel(y0 + 1, x0 + 1, ch) * fx;
                out[(y * w + x) * c + ch] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    Tensor::from_vec(img.shape(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Tensor<f32> {
        Tensor::from_vec(&[9, 11, 3], (0..297).map(|i| (i % 17) as f32 / 17.0).collect()).unwrap()
    }

    #[test]
    fn zero_config_is_identity() {
        let img = ramp();
        assert_eq!(augment(&img, &AugmentConfig::identity(), 5), img);
        let t = Affine { dx: 0.0, dy: 0.0, shear_degrees: 0.0 };
        assert_eq!(warp(&img, &t), img);
    }

    #[test]
    fn same_seeds_same_output() {
        let img = ramp();
        let cfg = AugmentConfig { seed: 3, ..Default::default() };
        assert_eq!(augment(&img, &cfg, 11), augment(&img, &cfg, 11));
        assert_ne!(augment(&img, &cfg, 11), augment(&img, &cfg, 12));
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(AugmentConfig { shift_fraction: 1.5, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }
}
