use crate::error::{invalid, Result};
use crate::image::Kernel2D;

/// Anisotropic Gaussian kernel. `theta` rotates the `sigma_x` axis
/// counter-clockwise from the image x axis. Weights sum to one.
pub fn gaussian_kernel(sigma_x: f64, sigma_y: f64, theta: f64, size: usize) -> Result<Kernel2D> {
    if !(sigma_x > 0.0 && sigma_y > 0.0) || !sigma_x.is_finite() || !sigma_y.is_finite() {
        return Err(invalid!(
            "gaussian sigmas must be positive, got ({sigma_x}, {sigma_y})"
        ));
    }
    if size == 0 || size.is_multiple_of(2) {
        return Err(invalid!("gaussian kernel size must be odd, got {size}"));
    }
    // Inverse covariance of R diag(sx², sy²) Rᵀ.
    let (s, c) = theta.sin_cos();
    let (ix, iy) = (1.0 / (sigma_x * sigma_x), 1.0 / (sigma_y * sigma_y));
    let a = c * c * ix + s * s * iy;
    let b = c * s * (ix - iy);
    let d = s * s * ix + c * c * iy;
    let r = (size / 2) as f64;
    let mut weights = Vec::with_capacity(size * size);
    for row in 0..size {
        let y = row as f64 - r;
        for col in 0..size {
            let x = col as f64 - r;
            weights.push((-0.5 * (a * x * x + 2.0 * b * x * y + d * y * y)).exp());
        }
    }
    Kernel2D::new(size, weights)?.normalized()
}

/// Kernel that smears along a straight segment through (or, when
/// `one_sided`, starting at) the centre. `weight(t)` gives the contribution of
/// the point `t` pixels from the centre. Samples are bilinearly splatted.
pub(crate) fn line_kernel(
    size: usize,
    angle: f64,
    one_sided: bool,
    weight: impl Fn(f64) -> f64,
) -> Result<Kernel2D> {
    if size.is_multiple_of(2) {
        return Err(invalid!("line kernel size must be odd, got {size}"));
    }
    let r = (size / 2) as f64;
    let mut weights = vec![0.0; size * size];
    const SUB: usize = 4;
    let start = if one_sided { 0.0 } else { -r };
    let steps = ((r - start) as usize) * SUB;
    let (dy, dx) = angle.sin_cos();
    // Exact zeros keep axis-aligned kernels on a single row/column.
    let dx = if dx.abs() < 1e-12 { 0.0 } else { dx };
    let dy = if dy.abs() < 1e-12 { 0.0 } else { dy };
    for i in 0..=steps {
        let t = start + i as f64 / SUB as f64;
        let w = weight(t);
        // Image rows grow downwards; positive angles point up.
        let px = (r + t * dx).clamp(0.0, 2.0 * r);
        let py = (r - t * dy).clamp(0.0, 2.0 * r);
        let (x0, y0) = (px.floor(), py.floor());
        let (fx, fy) = (px - x0, py - y0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        let x1 = (x0 + 1).min(size - 1);
        let y1 = (y0 + 1).min(size - 1);
        for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
            for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                let v = w * wy * wx;
                if v != 0.0 {
                    weights[yy * size + xx] += v;
                }
            }
        }
    }
    Kernel2D::new(size, weights)?.normalized()
}

/// Largest odd size that fits inside an `h × w` image.
pub(crate) fn fit_odd(size: usize, h: usize, w: usize) -> usize {
    let limit = h.min(w);
    let limit = if limit.is_multiple_of(2) { limit - 1 } else { limit };
    size.min(limit).max(1)
}
