//! Degradation operators and the stochastic batch policy used to synthesize
//! training inputs.
//!
//! Every operator is a pure function of its input and parameters (plus a
//! seed for the noisy ones). [`DegradationRecipe`] logs resolved parameters so
//! any output can be regenerated bit-exactly.

mod blur;
pub mod constants;
mod jpeg;
mod noise;
mod pipeline;
mod recipe;
mod rng;
mod weather;

pub use blur::gaussian_kernel;
pub use jpeg::{chroma_table, jpeg_roundtrip, luma_table};
pub use noise::{add_gaussian_noise, add_poisson_noise};
pub use pipeline::{
    batch_policy, degrade_one, route, two_stage_pipeline, weather_pipeline, Branch, DegradedItem,
    PolicyConfig, Range, StageConfig, TwoStageConfig,
};
pub use recipe::{DegradationRecipe, DegradationStep};
pub use rng::{child_seed, rng_from_seed, splitmix64, DegradeRng};
pub use weather::{
    contrast, contrast_factor, motion_blur, motion_blur_length, snow, snow_with, Severity,
    SnowParams, WeatherConfig,
};
