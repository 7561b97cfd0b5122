//! ImageNet-C style corruptions: motion blur, snow and low contrast.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::blur::{fit_odd, line_kernel};
use super::constants::{
    CONTRAST_FACTORS, MOTION_BLUR_LENGTHS, SNOW_BLUR_ANGLE_DEG, SNOW_TABLE,
};
use crate::error::{invalid, Result};
use crate::image::{clamp_unit, convolve2d, crop, resize_bilinear, ImageTensor, LUMA_B, LUMA_G, LUMA_R};

/// Corruption intensity, 1 (mild) to 5 (severe).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Severity(u8);

impl Severity {
    pub const ALL: [Severity; 5] = [Severity(1), Severity(2), Severity(3), Severity(4), Severity(5)];

    pub fn new(level: u8) -> Result<Self> {
        if (1..=5).contains(&level) {
            Ok(Severity(level))
        } else {
            Err(invalid!("severity must be in 1..=5, got {level}"))
        }
    }

    pub fn level(self) -> u8 {
        self.0
    }

    /// Zero-based table index.
    pub fn index(self) -> usize {
        usize::from(self.0 - 1)
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        Severity(rng.random_range(1..=5))
    }
}

impl TryFrom<u8> for Severity {
    type Error = crate::Error;

    fn try_from(v: u8) -> Result<Self> {
        Severity::new(v)
    }
}

impl From<Severity> for u8 {
    fn from(s: Severity) -> u8 {
        s.0
    }
}

/// Fully resolved parameters of one snow corruption.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnowParams {
    /// Mean of the Gaussian flake field.
    pub loc: f64,
    /// Standard deviation of the flake field.
    pub scale: f64,
    pub zoom: f64,
    /// Flake values below this are dropped.
    pub threshold: f64,
    pub blur_radius: usize,
    pub blur_sigma: f64,
    /// Weight of the original image in the whitening blend.
    pub blend: f64,
}

impl SnowParams {
    pub fn for_severity(s: Severity) -> Self {
        let (loc, scale, zoom, threshold, blur_radius, blur_sigma, blend) = SNOW_TABLE[s.index()];
        SnowParams {
            loc,
            scale,
            zoom,
            threshold,
            blur_radius,
            blur_sigma,
            blend,
        }
    }
}

/// Severity tables used by the weather branch. Defaults mirror
/// [`super::constants`]; any table may be overridden from configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeatherConfig {
    pub motion_blur_lengths: [usize; 5],
    pub contrast_factors: [f64; 5],
    pub snow: [SnowParams; 5],
}

impl Default for WeatherConfig {
    fn default() -> Self {
        WeatherConfig {
            motion_blur_lengths: MOTION_BLUR_LENGTHS,
            contrast_factors: CONTRAST_FACTORS,
            snow: Severity::ALL.map(SnowParams::for_severity),
        }
    }
}

/// Uniform line blur of `length` pixels oriented at `angle` radians
/// (counter-clockwise from the x axis). The kernel is shrunk to fit small
/// images.
pub fn motion_blur_length(img: &ImageTensor, length: usize, angle: f64) -> Result<ImageTensor> {
    if length == 0 {
        return Err(invalid!("motion blur length must be positive"));
    }
    let size = fit_odd(length | 1, img.height(), img.width());
    if size == 1 {
        return Ok(img.clone());
    }
    let kernel = line_kernel(size, angle, false, |_| 1.0)?;
    convolve2d(img, &kernel)
}

pub fn motion_blur(img: &ImageTensor, severity: Severity, angle: f64) -> Result<ImageTensor> {
    motion_blur_length(img, MOTION_BLUR_LENGTHS[severity.index()], angle)
}

/// `x ← clamp((x − μ_c)·factor + μ_c)` with per-channel means `μ_c`.
pub fn contrast_factor(img: &ImageTensor, factor: f64) -> Result<ImageTensor> {
    if !factor.is_finite() || factor < 0.0 {
        return Err(invalid!("contrast factor must be non-negative, got {factor}"));
    }
    let c = img.channels();
    let n = (img.height() * img.width()) as f64;
    let mut means = vec![0.0f64; c];
    for px in img.data().chunks_exact(c) {
        for (m, &v) in means.iter_mut().zip(px) {
            *m += f64::from(v);
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for (v, &m) in px.iter_mut().zip(&means) {
            *v = clamp_unit(((f64::from(*v) - m) * factor + m) as f32);
        }
    }
    Ok(out)
}

pub fn contrast(img: &ImageTensor, severity: Severity) -> Result<ImageTensor> {
    contrast_factor(img, CONTRAST_FACTORS[severity.index()])
}

/// Central crop of `1/zoom` of the image scaled back to full size.
fn clipped_zoom(layer: &ImageTensor, zoom: f64) -> Result<ImageTensor> {
    if zoom <= 1.0 {
        return Ok(layer.clone());
    }
    let (h, w) = (layer.height(), layer.width());
    let ch = ((h as f64 / zoom).ceil() as usize).clamp(1, h);
    let cw = ((w as f64 / zoom).ceil() as usize).clamp(1, w);
    let region = crop(layer, (w - cw) / 2, (h - ch) / 2, cw, ch)?;
    resize_bilinear(&region, h, w)
}

/// Snow composite with explicit parameters. Draws the flake field and the
/// streak angle from `rng`.
pub fn snow_with(img: &ImageTensor, params: &SnowParams, rng: &mut impl Rng) -> Result<ImageTensor> {
    if img.channels() != 3 {
        return Err(invalid!("snow needs an RGB image, got {} channel(s)", img.channels()));
    }
    if !(params.scale >= 0.0) || !(0.0..=1.0).contains(&params.blend) {
        return Err(invalid!("invalid snow parameters {params:?}"));
    }
    let (h, w) = (img.height(), img.width());
    let normal = Normal::new(params.loc, params.scale).map_err(|e| invalid!("{e}"))?;
    let field: Vec<f32> = (0..h * w).map(|_| normal.sample(rng) as f32).collect();
    let field = ImageTensor::new(h, w, 1, field)?;
    let mut layer = clipped_zoom(&field, params.zoom)?;
    for v in layer.data_mut() {
        *v = if f64::from(*v) < params.threshold {
            0.0
        } else {
            clamp_unit(*v)
        };
    }
    let angle_deg = rng.random_range(SNOW_BLUR_ANGLE_DEG.0..SNOW_BLUR_ANGLE_DEG.1);
    let size = fit_odd(2 * params.blur_radius + 1, h, w);
    if size > 1 && params.blur_sigma > 0.0 {
        let sigma = params.blur_sigma;
        let kernel = line_kernel(size, angle_deg.to_radians(), true, |t| {
            (-t * t / (2.0 * sigma * sigma)).exp()
        })?;
        layer = convolve2d(&layer, &kernel)?;
    }
    let flipped = layer.rotated_180();

    let mut out = img.clone();
    for (i, px) in out.data_mut().chunks_exact_mut(3).enumerate() {
        let [r, g, b] = [px[0], px[1], px[2]].map(f64::from);
        let lifted = (LUMA_R * r + LUMA_G * g + LUMA_B * b) * 1.5 + 0.5;
        let flakes = f64::from(layer.data()[i]) + f64::from(flipped.data()[i]);
        for v in px.iter_mut() {
            let x = f64::from(*v);
            let whitened = params.blend * x + (1.0 - params.blend) * x.max(lifted);
            *v = clamp_unit((whitened + flakes) as f32);
        }
    }
    Ok(out)
}

pub fn snow(img: &ImageTensor, severity: Severity, rng: &mut impl Rng) -> Result<ImageTensor> {
    snow_with(img, &SnowParams::for_severity(severity), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::rng_from_seed;
    use crate::metrics::psnr;

    fn textured(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, 3, |y, x, c| {
            let v = ((x as f32 * 0.7 + c as f32).sin() * (y as f32 * 0.45).cos()) * 0.4 + 0.5;
            v.clamp(0.0, 1.0)
        })
        .unwrap()
    }

    #[test]
    fn severity_bounds() {
        assert!(Severity::new(0).is_err());
        assert!(Severity::new(6).is_err());
        assert_eq!(Severity::new(3).unwrap().index(), 2);
        let s: Severity = serde_json::from_str("4").unwrap();
        assert_eq!(s.level(), 4);
        assert!(serde_json::from_str::<Severity>("9").is_err());
    }

    #[test]
    fn motion_blur_keeps_constant() {
        let img = ImageTensor::filled(32, 32, 3, 0.6).unwrap();
        let out = motion_blur(&img, Severity::new(5).unwrap(), 0.8).unwrap();
        for v in out.data() {
            assert!((v - 0.6).abs() < 1e-6);
        }
    }

    #[test]
    fn motion_blur_severity_ordering() {
        let img = textured(48, 48);
        let mild = motion_blur(&img, Severity::new(1).unwrap(), 0.3).unwrap();
        let harsh = motion_blur(&img, Severity::new(5).unwrap(), 0.3).unwrap();
        assert!(psnr(&img, &harsh).unwrap() < psnr(&img, &mild).unwrap());
    }

    #[test]
    fn horizontal_motion_blur_on_vertical_edge() {
        // Left half dark, right half bright: blur spreads along x only, so
        // every row stays identical.
        let img = ImageTensor::from_fn(24, 32, 1, |_, x, _| if x < 16 { 0.1 } else { 0.9 }).unwrap();
        let out = motion_blur(&img, Severity::new(2).unwrap(), 0.0).unwrap();
        for y in 1..24 {
            for x in 0..32 {
                assert_eq!(out.get(y, x, 0), out.get(0, x, 0));
            }
        }
        // Support is ±4 px around the edge.
        assert!((out.get(0, 11, 0) - 0.1).abs() < 1e-6);
        assert!((out.get(0, 20, 0) - 0.9).abs() < 1e-6);
        assert!(out.get(0, 14, 0) > 0.1 && out.get(0, 17, 0) < 0.9);
    }

    #[test]
    fn contrast_formula() {
        let img = ImageTensor::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let out = contrast_factor(&img, 0.5).unwrap();
        assert_eq!(out.data(), &[0.25, 0.75]);
        let tex = textured(16, 16);
        assert_eq!(contrast_factor(&tex, 1.0).unwrap(), tex);
        let flat = contrast_factor(&tex, 0.0).unwrap();
        for c in 0..3 {
            let m = tex.channel(c).mean();
            for px in flat.channel(c).data() {
                assert!((f64::from(*px) - m).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn snow_degenerate_is_identity() {
        let img = textured(32, 32);
        let params = SnowParams {
            loc: 0.0,
            scale: 0.0,
            zoom: 1.0,
            threshold: 0.5,
            blur_radius: 4,
            blur_sigma: 2.0,
            blend: 1.0,
        };
        let out = snow_with(&img, &params, &mut rng_from_seed(1)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn snow_only_brightens() {
        let img = textured(64, 64);
        for s in Severity::ALL {
            for seed in 0..3 {
                let out = snow(&img, s, &mut rng_from_seed(seed)).unwrap();
                assert!(out.is_valid());
                assert!(out.luminance().mean() >= img.luminance().mean());
            }
        }
    }

    #[test]
    fn snow_rejects_gray() {
        let img = ImageTensor::filled(32, 32, 1, 0.5).unwrap();
        assert!(snow(&img, Severity::new(1).unwrap(), &mut rng_from_seed(0)).is_err());
    }
}
