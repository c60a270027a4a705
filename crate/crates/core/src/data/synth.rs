//! Procedural iris-like images for desk-scale experiments.
//!
//! A bonafide eye is a bright background, an iris annulus carrying
//! band-limited angular texture with radial noise, and a dark pupil disc.
//! Attack classes reuse the same base and add one overlay:
//!
//! - textured lens: a regular dot lattice over the iris;
//! - soft lens: a faint smooth film plus its edge ring just outside the limbus;
//! - print and scan: a halftone screen and a global blur.
//!
//! Each sensor profile applies its own gamma, gain and noise. The base, the
//! overlay and the sensor noise draw from separate streams, so an attack image
//! rendered with the same sample seed as a bonafide one differs from it only
//! where the overlay acts.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{format_manifest, LensClass, RelabelPolicy, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorProfile {
    pub name: String,
    pub gamma: f64,
    pub gain: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
}

impl SensorProfile {
    pub fn new(name: &str, gamma: f64, gain: f64, noise: f64) -> Self {
        SensorProfile {
            name: name.to_string(),
            gamma,
            gain,
            noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub image_size: usize,
    pub dataset: String,
    pub sensors: Vec<SensorProfile>,
    /// Range of angular frequencies (cycles per turn) of the iris texture.
    pub ring_band: (f64, f64),
    pub radial_noise: f64,
    /// Dot spacing of the textured-lens lattice as a fraction of the image side.
    pub lattice_period: f64,
    pub lattice_contrast: f64,
    /// Opacity of the soft-lens film.
    pub film_alpha: f64,
    /// Halftone screen period as a fraction of the image side.
    pub halftone_period: f64,
    pub blur_radius: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            image_size: 64,
            dataset: "synth".into(),
            sensors: vec![
                SensorProfile::new("sensor_a", 1.0, 1.0, 0.02),
                SensorProfile::new("sensor_b", 1.4, 0.92, 0.04),
            ],
            ring_band: (6.0, 14.0),
            radial_noise: 0.08,
            lattice_period: 0.08,
            lattice_contrast: 0.45,
            film_alpha: 0.25,
            halftone_period: 0.06,
            blur_radius: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.image_size >= 16
            && !self.sensors.is_empty()
            && self.ring_band.0 > 0.0
            && self.ring_band.0 <= self.ring_band.1
            && self.lattice_period > 0.0
            && self.halftone_period > 0.0
            && (0.0..=1.0).contains(&self.lattice_contrast)
            && (0.0..=1.0).contains(&self.film_alpha)
            && self.sensors.iter().all(|s| s.gamma > 0.0 && s.gain > 0.0 && s.noise >= 0.0);
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid synthetic dataset config: {self:?}")));
        }
        let mut names: Vec<_> = self.sensors.iter().map(|s| &s.name).collect();
        names.sort();
        names.dedup();
        if names.len() != self.sensors.len() {
            return Err(Error::InvalidArgument("sensor names must be unique".into()));
        }
        Ok(())
    }
}

/// Images per lens class, in [`LensClass::ALL`] order, generated for every sensor.
pub type ClassCounts = [usize; 5];

/// Parses "n,n,n,n,n" in lens-class order.
pub fn parse_counts(text: &str) -> Result<ClassCounts> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let bad = || Error::InvalidArgument(format!("counts must be five comma-separated integers (normal,soft,textured,print,scan), got {text:?}"));
    if parts.len() != 5 {
        return Err(bad());
    }
    let mut out = [0; 5];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| bad())?;
    }
    Ok(out)
}

fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0xd1b5_4a32_d192_ed03;
    for &p in parts {
        h = (h ^ p).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        h ^= h >> 29;
    }
    h
}

struct Eye {
    cx: f64,
    cy: f64,
    iris: f64,
    pupil: f64,
    background: f64,
    tilt: f64,
    waves: Vec<(f64, f64, f64, f64)>,
    noise: Vec<f64>,
}

impl Eye {
    fn draw(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Eye {
        let s = cfg.image_size as f64;
        let jitter = 0.04 * s;
        let iris = s * rng.gen_range(0.30..0.36);
        let waves = (0..4)
            .map(|_| {
                let m = rng.gen_range(cfg.ring_band.0..=cfg.ring_band.1).round();
                (m, rng.gen_range(0.0..2.0 * PI), rng.gen_range(-1.5..1.5), rng.gen_range(0.02..0.05))
            })
            .collect();
        Eye {
            cx: s / 2.0 + rng.gen_range(-jitter..jitter),
            cy: s / 2.0 + rng.gen_range(-jitter..jitter),
            iris,
            pupil: iris * rng.gen_range(0.30..0.42),
            background: rng.gen_range(0.66..0.78),
            tilt: rng.gen_range(-0.1..0.1),
            waves,
            noise: (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn polar(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        ((dx * dx + dy * dy).sqrt(), dy.atan2(dx))
    }

    fn shade(&self, cfg: &SynthConfig, x: f64, y: f64) -> f64 {
        let s = cfg.image_size as f64;
        let (r, theta) = self.polar(x, y);
        let outside = self.background + self.tilt * (y / s - 0.5);
        if r >= self.iris {
            let limbus = (-(r - self.iris) / (0.03 * s)).exp();
            return outside - 0.2 * limbus;
        }
        if r <= self.pupil {
            return 0.06;
        }
        let t = (r - self.pupil) / (self.iris - self.pupil);
        let texture: f64 = self.waves.iter().map(|&(m, phase, twist, amp)| amp * (m * theta + phase + twist * t * 2.0 * PI).cos()).sum();
        let n = self.noise.len() as f64;
        let u = (theta + PI) / (2.0 * PI) * n;
        let (i0, f) = (u.floor() as usize % self.noise.len(), u.fract());
        let radial = self.noise[i0] * (1.0 - f) + self.noise[(i0 + 1) % self.noise.len()] * f;
        0.42 + texture + cfg.radial_noise * radial * (PI * t).sin() - 0.1 * t
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn box_blur(img: &[f64], n: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return img.to_vec();
    }
    let r = radius as isize;
    let mut out = vec![0.0; n * n];
    for y in 0..n as isize {
        for x in 0..n as isize {
            let (mut sum, mut count) = (0.0, 0.0);
            for yy in (y - r).max(0)..=(y + r).min(n as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(n as isize - 1) {
                    sum += img[yy as usize * n + xx as usize];
                    count += 1.0;
                }
            }
            out[y as usize * n + x as usize] = sum / count;
        }
    }
    out
}

/// Renders one sample as 8-bit gray.
pub fn render(cfg: &SynthConfig, class: LensClass, sensor: &SensorProfile, sample_seed: u64) -> GrayImage {
    let n = cfg.image_size;
    let s = n as f64;
    let eye = Eye::draw(cfg, &mut ChaCha8Rng::seed_from_u64(mix(sample_seed, &[1])));
    let mut overlay_rng = ChaCha8Rng::seed_from_u64(mix(sample_seed, &[2]));
    let mut px: Vec<f64> = (0..n * n).map(|i| eye.shade(cfg, (i % n) as f64 + 0.5, (i / n) as f64 + 0.5)).collect();

    match class {
        LensClass::Normal => {}
        LensClass::Textured => {
            let period = (cfg.lattice_period * s).max(3.0);
            let (ox, oy) = (overlay_rng.gen_range(0.0..period), overlay_rng.gen_range(0.0..period));
            let dot = 0.3 * period;
            for (i, v) in px.iter_mut().enumerate() {
                let (x, y) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
                let (r, _) = eye.polar(x, y);
                let band = smoothstep(eye.pupil, eye.pupil * 1.15, r) * (1.0 - smoothstep(eye.iris * 1.02, eye.iris * 1.1, r));
                let (lx, ly) = ((x + ox).rem_euclid(period) - period / 2.0, (y + oy).rem_euclid(period) - period / 2.0);
                let d = (lx * lx + ly * ly).sqrt();
                let on = 1.0 - smoothstep(dot * 0.7, dot, d);
                *v *= 1.0 - cfg.lattice_contrast * on * band;
            }
        }
        LensClass::Soft => {
            let edge = eye.iris * overlay_rng.gen_range(1.12..1.2);
            let width = 0.025 * s;
            for (i, v) in px.iter_mut().enumerate() {
                let (r, _) = eye.polar((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
                let film = 1.0 - smoothstep(edge - width, edge, r);
                let ring = (-((r - edge) / width).powi(2)).exp();
                *v = *v * (1.0 - 0.5 * cfg.film_alpha * film) + 0.5 * cfg.film_alpha * film * 0.6 + cfg.film_alpha * ring;
            }
        }
        LensClass::Print | LensClass::Scan => {
            let (period, angle, radius) = if class == LensClass::Print {
                (cfg.halftone_period * s, 0.0, cfg.blur_radius)
            } else {
                (cfg.halftone_period * s * 1.5, PI / 4.0, cfg.blur_radius + 1)
            };
            let period = period.max(2.5);
            let phase = overlay_rng.gen_range(0.0..2.0 * PI);
            let (ca, sa) = (angle.cos(), angle.sin());
            for (i, v) in px.iter_mut().enumerate() {
                let (x, y) = ((i % n) as f64, (i / n) as f64);
                let (u, w) = (ca * x + sa * y, -sa * x + ca * y);
                let screen = 0.5 + 0.35 * (2.0 * PI * u / period + phase).cos() * (2.0 * PI * w / period).cos();
                *v = 0.5 + 0.5 * ((*v - screen) / 0.08).tanh();
            }
            px = box_blur(&px, n, radius);
        }
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix(sample_seed, &[3]));
    let data: Vec<u8> = px
        .into_iter()
        .map(|v| {
            let e: f64 = StandardNormal.sample(&mut noise_rng);
            let v = sensor.gain * v.clamp(0.0, 1.0).powf(sensor.gamma) + sensor.noise * e;
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    GrayImage::from_raw(n as u32, n as u32, data).expect("buffer size")
}

/// Sample seed of image `index` of `class` for sensor number `sensor`.
pub fn sample_seed(cfg: &SynthConfig, sensor: usize, class: LensClass, index: usize) -> u64 {
    mix(cfg.seed, &[sensor as u64, class.index() as u64, index as u64])
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub records: Vec<SampleRecord>,
}

/// Writes `<root>/<sensor>/<lens_class>/<index>.png` for every sensor and
/// class, plus `<root>/manifest.csv`.
pub fn synth_generate(cfg: &SynthConfig, counts: &ClassCounts, root: &Path) -> Result<SynthOutput> {
    cfg.validate()?;
    if counts.iter().sum::<usize>() == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs at least one image".into()));
    }
    let mut jobs = Vec::new();
    for (si, sensor) in cfg.sensors.iter().enumerate() {
        for class in LensClass::ALL {
            for index in 0..counts[class.index()] {
                jobs.push((si, sensor, class, index));
            }
        }
    }
    let images = par::map_range(jobs.len(), |j| {
        let (si, sensor, class, index) = jobs[j];
        render(cfg, class, sensor, sample_seed(cfg, si, class, index))
    });
    let policy = RelabelPolicy::default();
    let mut records = Vec::with_capacity(jobs.len());
    for ((_, sensor, class, index), img) in jobs.iter().zip(images) {
        let dir = root.join(&sensor.name).join(class.name());
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{index}.png"));
        img.save(&path)?;
        records.push(SampleRecord {
            path,
            label: policy.label(*class),
            lens_class: *class,
            sensor: sensor.name.clone(),
            dataset: cfg.dataset.clone(),
            split: Split::Unassigned,
        });
    }
    let manifest = root.join("manifest.csv");
    std::fs::write(&manifest, format_manifest(&records, root))?;
    Ok(SynthOutput { manifest, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_parse() {
        assert_eq!(parse_counts("1, 2,3,4,5").unwrap(), [1, 2, 3, 4, 5]);
        assert!(parse_counts("1,2,3").is_err());
        assert!(parse_counts("a,2,3,4,5").is_err());
    }

    #[test]
    fn zero_total_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(synth_generate(&SynthConfig::default(), &[0; 5], dir.path()).is_err());
    }

    #[test]
    fn classes_differ_from_their_bonafide_base() {
        let cfg = SynthConfig::default();
        let sensor = &cfg.sensors[0];
        let base = render(&cfg, LensClass::Normal, sensor, 42);
        for class in [LensClass::Soft, LensClass::Textured, LensClass::Print, LensClass::Scan] {
            let other = render(&cfg, class, sensor, 42);
            assert_ne!(base, other, "{class}");
        }
        assert_eq!(base, render(&cfg, LensClass::Normal, sensor, 42));
    }
}
