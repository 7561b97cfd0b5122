//! Full-reference quality metrics and benchmark aggregation.
//!
//! PSNR uses a peak of 1.0 over all samples. SSIM follows the usual
//! Gaussian-window formulation (11×11, σ = 1.5, K1 = 0.01, K2 = 0.03) over
//! valid windows only, on BT.601 luminance unless configured otherwise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::forge::ManifestEntry;
use crate::image::{crop, load_image, ImageTensor};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(shape_err!("{:?} vs {:?}", a.dims(), b.dims()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10·log10(1 / MSE)`, capped at [`PSNR_CAP`] for identical inputs.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM of two single-channel planes.
fn ssim_plane(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (h, w) = (a.height(), a.width());
    let x: Vec<f64> = a.data().iter().map(|&v| f64::from(v)).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| f64::from(v)).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &taps));
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    total / n as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimChannels {
    /// SSIM on BT.601 luminance.
    #[default]
    Luminance,
    /// Mean of per-channel SSIM.
    RgbMean,
}

pub fn ssim_with(a: &ImageTensor, b: &ImageTensor, channels: SsimChannels) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(shape_err!("ssim: {:?} vs {:?}", a.dims(), b.dims()));
    }
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(invalid!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width(),
            a.height()
        ));
    }
    Ok(match channels {
        SsimChannels::Luminance => ssim_plane(&a.luminance(), &b.luminance()),
        SsimChannels::RgbMean => {
            let c = a.channels();
            (0..c)
                .map(|ch| ssim_plane(&a.channel(ch), &b.channel(ch)))
                .sum::<f64>()
                / c as f64
        }
    })
}

pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    ssim_with(a, b, SsimChannels::Luminance)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub ssim_channels: SsimChannels,
    /// Pixels dropped from every border before measuring.
    pub crop_border: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub name: String,
    pub items: Vec<ItemMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sets: Vec<SetMetrics>,
    /// Unweighted mean of the per-set means.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    /// Builds a report from per-item scores. Items are sorted by id inside each
    /// set and sets by name, so the result does not depend on input order.
    pub fn from_items(items: impl IntoIterator<Item = (String, ItemMetrics)>) -> Result<Self> {
        let mut by_set: BTreeMap<String, Vec<ItemMetrics>> = BTreeMap::new();
        for (set, item) in items {
            by_set.entry(set).or_default().push(item);
        }
        if by_set.is_empty() {
            return Err(Error::Data("no items to aggregate".into()));
        }
        let sets: Vec<SetMetrics> = by_set
            .into_iter()
            .map(|(name, mut items)| {
                items.sort_by(|a, b| a.id.cmp(&b.id));
                let n = items.len() as f64;
                SetMetrics {
                    mean_psnr: items.iter().map(|i| i.psnr).sum::<f64>() / n,
                    mean_ssim: items.iter().map(|i| i.ssim).sum::<f64>() / n,
                    name,
                    items,
                }
            })
            .collect();
        let k = sets.len() as f64;
        Ok(MetricReport {
            mean_psnr: sets.iter().map(|s| s.mean_psnr).sum::<f64>() / k,
            mean_ssim: sets.iter().map(|s| s.mean_ssim).sum::<f64>() / k,
            sets,
        })
    }

    pub fn to_table(&self) -> String {
        let width = self
            .sets
            .iter()
            .map(|s| s.name.len())
            .chain([7])
            .max()
            .unwrap_or(7);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>6}  {:>9}  {:>7}", "set", "items", "PSNR(dB)", "SSIM");
        for s in &self.sets {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6}  {:>9.4}  {:>7.4}",
                s.name,
                s.items.len(),
                s.mean_psnr,
                s.mean_ssim
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>9.4}  {:>7.4}",
            "average",
            self.sets.iter().map(|s| s.items.len()).sum::<usize>(),
            self.mean_psnr,
            self.mean_ssim
        );
        out
    }
}

fn shave(img: ImageTensor, border: usize) -> Result<ImageTensor> {
    if border == 0 {
        return Ok(img);
    }
    if img.width() <= 2 * border || img.height() <= 2 * border {
        return Err(invalid!("border {border} leaves nothing of {}x{}", img.width(), img.height()));
    }
    crop(&img, border, border, img.width() - 2 * border, img.height() - 2 * border)
}

pub fn score_pair(restored: &ImageTensor, target: &ImageTensor, opts: MetricOptions) -> Result<(f64, f64)> {
    let r = shave(restored.clone(), opts.crop_border)?;
    let t = shave(target.clone(), opts.crop_border)?;
    Ok((psnr(&r, &t)?, ssim_with(&r, &t, opts.ssim_channels)?))
}

/// Scores every manifest target against `restored_dir/<target path>`, one set
/// per task.
pub fn evaluate_benchmark(
    manifest: &[ManifestEntry],
    data_root: &Path,
    restored_dir: &Path,
    opts: MetricOptions,
) -> Result<MetricReport> {
    if manifest.is_empty() {
        return Err(Error::Data("empty manifest".into()));
    }
    let scored: Vec<(String, ItemMetrics)> = manifest
        .par_iter()
        .map(|e| {
            let restored_path = restored_dir.join(&e.target);
            if !restored_path.is_file() {
                return Err(Error::MissingFile(restored_path));
            }
            let restored = load_image(&restored_path)?;
            let target = load_image(data_root.join(&e.target))?;
            let (p, s) = score_pair(&restored, &target, opts)
                .map_err(|err| Error::Data(format!("{}: {err}", e.target)))?;
            Ok((
                e.task.clone(),
                ItemMetrics {
                    id: e.target.clone(),
                    psnr: p,
                    ssim: s,
                },
            ))
        })
        .collect::<Result<_>>()?;
    MetricReport::from_items(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn textured(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = ImageTensor::from_fn(32, 40, 3, |y, x, c| {
            (0.5 + 0.3 * ((x as f32 * 0.4 + c as f32).sin() * (y as f32 * 0.3).cos())).clamp(0.0, 1.0)
        })
        .unwrap();
        base.map(|v| (v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0))
    }

    // Window-by-window SSIM with an explicit 2-D Gaussian; no separable pass.
    fn ssim_direct(a: &ImageTensor, b: &ImageTensor) -> f64 {
        let (a, b) = (a.luminance(), b.luminance());
        let k = SSIM_WINDOW;
        let r = (k / 2) as f64;
        let mut win = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let (dy, dx) = (i as f64 - r, j as f64 - r);
                win[i * k + j] = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            }
        }
        let s: f64 = win.iter().sum();
        win.iter_mut().for_each(|w| *w /= s);
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=a.height() - k {
            for x0 in 0..=a.width() - k {
                let (mut ux, mut uy) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        ux += win[i * k + j] * f64::from(a.get(y0 + i, x0 + j, 0));
                        uy += win[i * k + j] * f64::from(b.get(y0 + i, x0 + j, 0));
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let dx = f64::from(a.get(y0 + i, x0 + j, 0)) - ux;
                        let dy = f64::from(b.get(y0 + i, x0 + j, 0)) - uy;
                        vx += win[i * k + j] * dx * dx;
                        vy += win[i * k + j] * dy * dy;
                        cov += win[i * k + j] * dx * dy;
                    }
                }
                total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                    / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_identity_and_closed_form() {
        let a = textured(1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let z = ImageTensor::filled(8, 8, 3, 0.2).unwrap();
        let o = z.map(|v| v + 1.0 / 255.0);
        assert!((psnr(&z, &o).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-3);
        assert!(psnr(&z, &ImageTensor::filled(8, 9, 3, 0.2).unwrap()).is_err());
    }

    #[test]
    fn psnr_matches_direct_sum() {
        let (a, b) = (textured(1), textured(2));
        let mut s = 0.0f64;
        for i in 0..a.data().len() {
            let d = a.data()[i] as f64 - b.data()[i] as f64;
            s += d * d;
        }
        let oracle = -10.0 * (s / a.data().len() as f64).log10();
        assert!((psnr(&a, &b).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_symmetry_and_oracle() {
        let (a, b) = (textured(3), textured(4));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(&a, &b).unwrap();
        assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!((ab - ssim_direct(&a, &b)).abs() < 1e-10);
        assert!(ab < 1.0 && ab > -1.0);
    }

    #[test]
    fn ssim_errors() {
        let small = ImageTensor::filled(10, 20, 1, 0.5).unwrap();
        assert!(ssim(&small, &small).is_err());
        let a = ImageTensor::filled(12, 12, 1, 0.5).unwrap();
        let b = ImageTensor::filled(12, 13, 1, 0.5).unwrap();
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn ssim_drops_with_contrast_loss() {
        let a = textured(5);
        let flat = crate::degrade::contrast_factor(&a, 0.3).unwrap();
        assert!(ssim(&a, &flat).unwrap() < ssim(&a, &a).unwrap());
        let rgb = ssim_with(&a, &flat, SsimChannels::RgbMean).unwrap();
        assert!(rgb < 1.0);
    }

    #[test]
    fn grand_mean_is_unweighted() {
        let item = |id: &str, p: f64| ItemMetrics {
            id: id.into(),
            psnr: p,
            ssim: 1.0,
        };
        let r = MetricReport::from_items(vec![
            ("a".to_string(), item("1", 30.0)),
            ("b".to_string(), item("1", 10.0)),
            ("b".to_string(), item("2", 30.0)),
        ])
        .unwrap();
        assert_eq!(r.sets[1].mean_psnr, 20.0);
        assert_eq!(r.mean_psnr, 25.0);
        assert_eq!(r.mean_ssim, 1.0);
        assert!(r.to_table().contains("average"));
        assert!(MetricReport::from_items(Vec::new()).is_err());
    }

    #[test]
    fn crop_border_option() {
        let a = textured(6);
        let b = textured(7);
        let opts = MetricOptions {
            crop_border: 4,
            ..Default::default()
        };
        let (p, _) = score_pair(&a, &b, opts).unwrap();
        let inner = |i: &ImageTensor| crop(i, 4, 4, 32, 24).unwrap();
        assert_eq!(p, psnr(&inner(&a), &inner(&b)).unwrap());
        let huge = MetricOptions {
            crop_border: 20,
            ..Default::default()
        };
        assert!(score_pair(&a, &b, huge).is_err());
    }
}
