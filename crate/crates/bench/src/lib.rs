//! Inputs shared by the benchmarks.

use constyle_core::ImageTensor;

/// Deterministic colour test card with edges and gradients.
pub fn card(height: usize, width: usize) -> ImageTensor {
    ImageTensor::from_fn(height, width, 3, |y, x, c| {
        let edge = if (x / 8 + y / 8) % 2 == 0 { 0.7 } else { 0.2 };
        let ramp = (x + y + 20 * c) as f32 / (height + width + 40) as f32;
        (0.5 * edge + 0.5 * ramp).clamp(0.0, 1.0)
    })
    .expect("valid dimensions")
}
