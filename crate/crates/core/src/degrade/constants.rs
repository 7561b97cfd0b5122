//! Corruption severity tables, following the reference ImageNet-C
//! implementation. Bump [`TABLE_VERSION`] whenever a value changes so that
//! recipes written by older builds can be told apart.

pub const TABLE_VERSION: u32 = 1;

/// Motion-blur line length in pixels for severities 1..=5.
pub const MOTION_BLUR_LENGTHS: [usize; 5] = [7, 9, 13, 17, 21];

/// Contrast factor for severities 1..=5.
pub const CONTRAST_FACTORS: [f64; 5] = [0.4, 0.3, 0.2, 0.1, 0.05];

/// Snow parameters for severities 1..=5:
/// (mean, std, zoom, threshold, blur radius, blur sigma, blend).
pub const SNOW_TABLE: [(f64, f64, f64, f64, usize, f64, f64); 5] = [
    (0.1, 0.2, 1.0, 0.6, 8, 3.0, 0.95),
    (0.1, 0.2, 1.0, 0.5, 10, 4.0, 0.9),
    (0.15, 0.3, 1.75, 0.55, 10, 4.0, 0.9),
    (0.25, 0.3, 2.25, 0.6, 12, 6.0, 0.85),
    (0.3, 0.3, 1.25, 0.65, 14, 12.0, 0.8),
];

/// Angle range (degrees) for the snow-streak blur.
pub const SNOW_BLUR_ANGLE_DEG: (f64, f64) = (-135.0, -45.0);

/// Share of a batch routed to the weather branch.
pub const WEATHER_BRANCH_PROB: f64 = 0.4;
