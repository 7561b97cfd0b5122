use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{invalid, Result};
use crate::image::{clamp_unit, ImageTensor};

/// Additive white Gaussian noise with standard deviation `sigma` (on the
/// `[0, 1]` intensity scale). With `gray` set, one noise plane is shared by
/// all channels.
pub fn add_gaussian_noise(
    img: &ImageTensor,
    sigma: f64,
    gray: bool,
    rng: &mut impl Rng,
) -> Result<ImageTensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid!("noise sigma must be non-negative, got {sigma}"));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| invalid!("{e}"))?;
    let c = img.channels();
    let mut out = img.clone();
    if gray {
        for px in out.data_mut().chunks_exact_mut(c) {
            let n = normal.sample(rng);
            for v in px {
                *v = clamp_unit((f64::from(*v) + n) as f32);
            }
        }
    } else {
        for v in out.data_mut() {
            *v = clamp_unit((f64::from(*v) + normal.sample(rng)) as f32);
        }
    }
    Ok(out)
}

/// Shot noise: each sample becomes `Poisson(x · scale) / scale`.
pub fn add_poisson_noise(img: &ImageTensor, scale: f64, rng: &mut impl Rng) -> Result<ImageTensor> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(invalid!("poisson scale must be positive, got {scale}"));
    }
    let mut out = img.clone();
    for v in out.data_mut() {
        let lambda = f64::from(*v).max(0.0) * scale;
        let count = if lambda > 0.0 {
            Poisson::new(lambda)
                .map_err(|e| invalid!("poisson rate {lambda}: {e}"))?
                .sample(rng)
        } else {
            0.0
        };
        *v = clamp_unit((count / scale) as f32);
    }
    Ok(out)
}
