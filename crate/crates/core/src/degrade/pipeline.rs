//! Stochastic degradation policies: the two-stage blur → noise → JPEG chain
//! and the per-item routing between it and the weather branch.

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::blur::fit_odd;
use super::constants::WEATHER_BRANCH_PROB;
use super::recipe::{DegradationRecipe, DegradationStep};
use super::rng::{child_seed, rng_from_seed, DegradeRng};
use super::weather::{Severity, WeatherConfig};
use crate::error::{invalid, Result};
use crate::image::ImageTensor;

/// Closed interval `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Range { min, max }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite()) || self.min > self.max {
            return Err(invalid!("{what}: malformed range [{}, {}]", self.min, self.max));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }

    fn sample_log(&self, rng: &mut impl Rng) -> f64 {
        Range::new(self.min.ln(), self.max.ln()).sample(rng).exp()
    }
}

/// Parameter ranges for one blur → noise → JPEG stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub blur_prob: f64,
    /// Odd kernel sizes are drawn uniformly from this inclusive range.
    pub kernel_size: (usize, usize),
    pub blur_sigma: Range,
    /// Chance of Gaussian (rather than Poisson) noise.
    pub gaussian_noise_prob: f64,
    /// Gaussian sigma on the `[0, 1]` scale.
    pub noise_sigma: Range,
    pub gray_noise_prob: f64,
    /// Poisson photon-count scale, sampled log-uniformly.
    pub poisson_scale: Range,
    pub jpeg_quality: (u8, u8),
}

impl StageConfig {
    pub fn first() -> Self {
        StageConfig {
            blur_prob: 1.0,
            kernel_size: (7, 21),
            blur_sigma: Range::new(0.2, 3.0),
            gaussian_noise_prob: 0.5,
            noise_sigma: Range::new(1.0 / 255.0, 30.0 / 255.0),
            gray_noise_prob: 0.4,
            poisson_scale: Range::new(28.0, 1.0e5),
            jpeg_quality: (30, 95),
        }
    }

    pub fn second() -> Self {
        StageConfig {
            blur_prob: 0.8,
            kernel_size: (7, 21),
            blur_sigma: Range::new(0.2, 1.5),
            gaussian_noise_prob: 0.5,
            noise_sigma: Range::new(1.0 / 255.0, 25.0 / 255.0),
            gray_noise_prob: 0.4,
            poisson_scale: Range::new(41.0, 1.0e5),
            jpeg_quality: (30, 95),
        }
    }

    fn validate(&self, stage: &str) -> Result<()> {
        for (name, p) in [
            ("blur_prob", self.blur_prob),
            ("gaussian_noise_prob", self.gaussian_noise_prob),
            ("gray_noise_prob", self.gray_noise_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid!("{stage}.{name} must be a probability, got {p}"));
            }
        }
        let (kmin, kmax) = self.kernel_size;
        if kmin > kmax || kmin == 0 {
            return Err(invalid!("{stage}.kernel_size: malformed range [{kmin}, {kmax}]"));
        }
        self.blur_sigma.validate(&format!("{stage}.blur_sigma"))?;
        self.noise_sigma.validate(&format!("{stage}.noise_sigma"))?;
        self.poisson_scale.validate(&format!("{stage}.poisson_scale"))?;
        if self.blur_sigma.min <= 0.0 || self.noise_sigma.min < 0.0 || self.poisson_scale.min <= 0.0 {
            return Err(invalid!("{stage}: sigma and scale ranges must be positive"));
        }
        let (qmin, qmax) = self.jpeg_quality;
        if qmin > qmax || qmin == 0 || qmax > 100 {
            return Err(invalid!("{stage}.jpeg_quality: malformed range [{qmin}, {qmax}]"));
        }
        Ok(())
    }

    fn sample_steps(&self, h: usize, w: usize, rng: &mut DegradeRng, steps: &mut Vec<DegradationStep>) {
        if rng.random::<f64>() < self.blur_prob {
            let (kmin, kmax) = self.kernel_size;
            let odd: Vec<usize> = (kmin..=kmax).filter(|k| k % 2 == 1).collect();
            let size = if odd.is_empty() { kmin | 1 } else { odd[rng.random_range(0..odd.len())] };
            steps.push(DegradationStep::GaussianBlur {
                sigma_x: self.blur_sigma.sample(rng),
                sigma_y: self.blur_sigma.sample(rng),
                theta: rng.random_range(0.0..std::f64::consts::PI),
                size: fit_odd(size, h, w),
            });
        }
        if rng.random::<f64>() < self.gaussian_noise_prob {
            steps.push(DegradationStep::GaussianNoise {
                sigma: self.noise_sigma.sample(rng),
                gray: rng.random::<f64>() < self.gray_noise_prob,
                seed: rng.next_u64(),
            });
        } else {
            steps.push(DegradationStep::PoissonNoise {
                scale: self.poisson_scale.sample_log(rng),
                seed: rng.next_u64(),
            });
        }
        let (qmin, qmax) = self.jpeg_quality;
        steps.push(DegradationStep::Jpeg {
            quality: rng.random_range(qmin..=qmax),
            chroma_subsample: true,
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoStageConfig {
    pub first: StageConfig,
    pub second: StageConfig,
    pub second_stage_prob: f64,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        TwoStageConfig {
            first: StageConfig::first(),
            second: StageConfig::second(),
            second_stage_prob: 0.8,
        }
    }
}

impl TwoStageConfig {
    pub fn validate(&self) -> Result<()> {
        self.first.validate("first")?;
        self.second.validate("second")?;
        if !(0.0..=1.0).contains(&self.second_stage_prob) {
            return Err(invalid!(
                "second_stage_prob must be a probability, got {}",
                self.second_stage_prob
            ));
        }
        Ok(())
    }
}

/// Samples a two-stage chain for `img` from `seed`, applies it and returns
/// the result together with the recipe that reproduces it.
pub fn two_stage_pipeline(
    img: &ImageTensor,
    config: &TwoStageConfig,
    seed: u64,
) -> Result<(ImageTensor, DegradationRecipe)> {
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut recipe = DegradationRecipe::new(seed);
    let (h, w) = (img.height(), img.width());
    config.first.sample_steps(h, w, &mut rng, &mut recipe.steps);
    if rng.random::<f64>() < config.second_stage_prob {
        config.second.sample_steps(h, w, &mut rng, &mut recipe.steps);
    }
    let out = recipe.apply(img)?;
    Ok((out, recipe))
}

/// Motion blur, snow and contrast with independently drawn severities. Snow
/// is skipped for gray images.
pub fn weather_pipeline(
    img: &ImageTensor,
    config: &WeatherConfig,
    seed: u64,
) -> Result<(ImageTensor, DegradationRecipe)> {
    let mut rng = rng_from_seed(seed);
    let mut recipe = DegradationRecipe::new(seed);
    let s = Severity::sample(&mut rng);
    recipe.steps.push(DegradationStep::MotionBlur {
        severity: Some(s),
        length: config.motion_blur_lengths[s.index()],
        angle: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    });
    let s = Severity::sample(&mut rng);
    let snow_seed = rng.next_u64();
    if img.channels() == 3 {
        recipe.steps.push(DegradationStep::Snow {
            severity: Some(s),
            params: config.snow[s.index()],
            seed: snow_seed,
        });
    }
    let s = Severity::sample(&mut rng);
    recipe.steps.push(DegradationStep::Contrast {
        severity: Some(s),
        factor: config.contrast_factors[s.index()],
    });
    let out = recipe.apply(img)?;
    Ok((out, recipe))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Weather,
    TwoStage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub weather_prob: f64,
    pub two_stage: TwoStageConfig,
    pub weather: WeatherConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            weather_prob: WEATHER_BRANCH_PROB,
            two_stage: TwoStageConfig::default(),
            weather: WeatherConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradedItem {
    pub image: ImageTensor,
    pub recipe: DegradationRecipe,
    pub branch: Branch,
}

/// Branch assignment and child seed for batch item `index`.
pub fn route(master_seed: u64, index: usize, weather_prob: f64) -> (Branch, u64) {
    let mut rng = rng_from_seed(child_seed(master_seed, index as u64));
    let branch = if rng.random::<f64>() < weather_prob {
        Branch::Weather
    } else {
        Branch::TwoStage
    };
    (branch, rng.next_u64())
}

pub fn degrade_one(
    img: &ImageTensor,
    master_seed: u64,
    index: usize,
    config: &PolicyConfig,
) -> Result<DegradedItem> {
    let (branch, seed) = route(master_seed, index, config.weather_prob);
    let (image, recipe) = match branch {
        Branch::Weather => weather_pipeline(img, &config.weather, seed)?,
        Branch::TwoStage => two_stage_pipeline(img, &config.two_stage, seed)?,
    };
    Ok(DegradedItem {
        image,
        recipe,
        branch,
    })
}

/// Routes every image independently to the weather branch (probability
/// `weather_prob`) or the two-stage chain. Items are processed in parallel;
/// results depend only on `(master_seed, index)`.
pub fn batch_policy(
    batch: &[ImageTensor],
    master_seed: u64,
    config: &PolicyConfig,
) -> Result<Vec<DegradedItem>> {
    if batch.is_empty() {
        return Err(invalid!("batch_policy needs at least one image"));
    }
    if !(0.0..=1.0).contains(&config.weather_prob) {
        return Err(invalid!("weather_prob must be a probability, got {}", config.weather_prob));
    }
    config.two_stage.validate()?;
    batch
        .par_iter()
        .enumerate()
        .map(|(i, img)| degrade_one(img, master_seed, i, config))
        .collect()
}
