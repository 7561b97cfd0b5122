use std::path::Path;

use serde::{Deserialize, Serialize};

use super::blur::gaussian_kernel;
use super::jpeg::jpeg_roundtrip;
use super::noise::{add_gaussian_noise, add_poisson_noise};
use super::rng::rng_from_seed;
use super::weather::{contrast_factor, motion_blur_length, snow_with, Severity, SnowParams};
use crate::error::{Error, Result};
use crate::image::{convolve2d, ImageTensor};

/// One logged degradation with every parameter it consumed. Stochastic steps
/// carry their own seed so that replay never depends on step order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "params", rename_all = "snake_case")]
pub enum DegradationStep {
    GaussianBlur {
        sigma_x: f64,
        sigma_y: f64,
        theta: f64,
        size: usize,
    },
    GaussianNoise {
        sigma: f64,
        gray: bool,
        seed: u64,
    },
    PoissonNoise {
        scale: f64,
        seed: u64,
    },
    Jpeg {
        quality: u8,
        chroma_subsample: bool,
    },
    MotionBlur {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        severity: Option<Severity>,
        length: usize,
        angle: f64,
    },
    Snow {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        severity: Option<Severity>,
        #[serde(flatten)]
        params: SnowParams,
        seed: u64,
    },
    Contrast {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        severity: Option<Severity>,
        factor: f64,
    },
}

impl DegradationStep {
    pub fn name(&self) -> &'static str {
        match self {
            DegradationStep::GaussianBlur { .. } => "gaussian_blur",
            DegradationStep::GaussianNoise { .. } => "gaussian_noise",
            DegradationStep::PoissonNoise { .. } => "poisson_noise",
            DegradationStep::Jpeg { .. } => "jpeg",
            DegradationStep::MotionBlur { .. } => "motion_blur",
            DegradationStep::Snow { .. } => "snow",
            DegradationStep::Contrast { .. } => "contrast",
        }
    }

    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor> {
        match *self {
            DegradationStep::GaussianBlur {
                sigma_x,
                sigma_y,
                theta,
                size,
            } => convolve2d(img, &gaussian_kernel(sigma_x, sigma_y, theta, size)?),
            DegradationStep::GaussianNoise { sigma, gray, seed } => {
                add_gaussian_noise(img, sigma, gray, &mut rng_from_seed(seed))
            }
            DegradationStep::PoissonNoise { scale, seed } => {
                add_poisson_noise(img, scale, &mut rng_from_seed(seed))
            }
            DegradationStep::Jpeg {
                quality,
                chroma_subsample,
            } => jpeg_roundtrip(img, quality, chroma_subsample),
            DegradationStep::MotionBlur { length, angle, .. } => {
                motion_blur_length(img, length, angle)
            }
            DegradationStep::Snow { params, seed, .. } => {
                snow_with(img, &params, &mut rng_from_seed(seed))
            }
            DegradationStep::Contrast { factor, .. } => contrast_factor(img, factor),
        }
    }
}

/// Ordered, replayable log of the degradations applied to one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecipe {
    pub seed: u64,
    pub steps: Vec<DegradationStep>,
}

impl DegradationRecipe {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            steps: Vec::new(),
        }
    }

    /// Re-applies every step in order.
    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor> {
        self.steps
            .iter()
            .try_fold(img.clone(), |acc, step| step.apply(&acc))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("recipe serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::json("degradation recipe", e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("recipe serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
