//! Baseline JPEG quantization cycle without entropy coding.
//!
//! The lossy part of JPEG lives entirely in the colour conversion, chroma
//! subsampling, DCT quantization and 8-bit sample rounding. Huffman coding is
//! lossless and therefore skipped.

use std::sync::OnceLock;

use crate::error::{invalid, Result};
use crate::image::{rgb_to_ycbcr_px, ycbcr_to_rgb_px, ImageTensor};

/// ITU T.81 Annex K.1 luminance table, natural (row-major) order.
const LUMA_BASE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// ITU T.81 Annex K.2 chrominance table.
const CHROMA_BASE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Scales a base table with the IJG quality formula, clamped to the
/// baseline range 1..=255.
pub fn scaled_table(base: &[u16; 64], quality: u8) -> [u16; 64] {
    let q = u32::from(quality.clamp(1, 100));
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0u16; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((u32::from(b) * scale + 50) / 100).clamp(1, 255) as u16;
    }
    out
}

pub fn luma_table(quality: u8) -> [u16; 64] {
    scaled_table(&LUMA_BASE, quality)
}

pub fn chroma_table(quality: u8) -> [u16; 64] {
    scaled_table(&CHROMA_BASE, quality)
}

// cos((2x+1)uπ/16) scaled by the orthonormal factors.
fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut m = [[0.0; 8]; 8];
        for (u, row) in m.iter_mut().enumerate() {
            let cu = if u == 0 {
                (1.0f64 / 8.0).sqrt()
            } else {
                (2.0f64 / 8.0).sqrt()
            };
            for (x, v) in row.iter_mut().enumerate() {
                *v = cu * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        m
    })
}

fn fdct(block: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| b[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

fn idct(coef: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| b[u][x] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| b[v][y] * tmp[v * 8 + x]).sum();
        }
    }
    out
}

/// Quantizes one plane of 0..255 samples in place. Dimensions must be
/// multiples of 8.
fn quantize_plane(plane: &mut [f64], w: usize, h: usize, table: &[u16; 64]) {
    let mut block = [0.0; 64];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for y in 0..8 {
                for x in 0..8 {
                    block[y * 8 + x] = plane[(by + y) * w + bx + x] - 128.0;
                }
            }
            let mut coef = fdct(&block);
            for (c, &q) in coef.iter_mut().zip(table) {
                let q = f64::from(q);
                *c = (*c / q).round() * q;
            }
            let rec = idct(&coef);
            for y in 0..8 {
                for x in 0..8 {
                    plane[(by + y) * w + bx + x] = (rec[y * 8 + x] + 128.0).round().clamp(0.0, 255.0);
                }
            }
        }
    }
}

/// Compresses and decompresses `img` at the given quality. Output has the
/// input's dimensions and lies on the 8-bit grid.
pub fn jpeg_roundtrip(img: &ImageTensor, quality: u8, chroma_subsample: bool) -> Result<ImageTensor> {
    if !(1..=100).contains(&quality) {
        return Err(invalid!("jpeg quality must be in 1..=100, got {quality}"));
    }
    let (h, w, c) = img.dims();
    let subsample = chroma_subsample && c == 3;
    let unit = if subsample { 16 } else { 8 };
    let ph = h.div_ceil(unit) * unit;
    let pw = w.div_ceil(unit) * unit;

    // Edge-replicated, 8-bit level planes in YCbCr.
    let mut planes = vec![vec![0.0f64; ph * pw]; c];
    for y in 0..ph {
        let sy = y.min(h - 1);
        for x in 0..pw {
            let sx = x.min(w - 1);
            let q = |ch: usize| f64::from(crate::image::to_u8(img.get(sy, sx, ch))) / 255.0;
            if c == 3 {
                let ycc = rgb_to_ycbcr_px([q(0), q(1), q(2)]);
                planes[0][y * pw + x] = ycc[0] * 255.0;
                planes[1][y * pw + x] = (ycc[1] - 0.5) * 255.0 + 128.0;
                planes[2][y * pw + x] = (ycc[2] - 0.5) * 255.0 + 128.0;
            } else {
                planes[0][y * pw + x] = q(0) * 255.0;
            }
        }
    }

    let luma_q = luma_table(quality);
    quantize_plane(&mut planes[0], pw, ph, &luma_q);
    if c == 3 {
        let chroma_q = chroma_table(quality);
        for plane in planes.iter_mut().skip(1) {
            if subsample {
                let (sw, sh) = (pw / 2, ph / 2);
                let mut small = vec![0.0; sw * sh];
                for y in 0..sh {
                    for x in 0..sw {
                        let i = 2 * y * pw + 2 * x;
                        small[y * sw + x] =
                            (plane[i] + plane[i + 1] + plane[i + pw] + plane[i + pw + 1]) / 4.0;
                    }
                }
                quantize_plane(&mut small, sw, sh, &chroma_q);
                for y in 0..ph {
                    for x in 0..pw {
                        plane[y * pw + x] = small[(y / 2) * sw + x / 2];
                    }
                }
            } else {
                quantize_plane(plane, pw, ph, &chroma_q);
            }
        }
    }

    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let i = y * pw + x;
            if c == 3 {
                // JFIF centres chroma on level 128.
                let rgb = ycbcr_to_rgb_px([
                    planes[0][i] / 255.0,
                    (planes[1][i] - 128.0) / 255.0 + 0.5,
                    (planes[2][i] - 128.0) / 255.0 + 0.5,
                ]);
                out.extend(rgb.iter().map(|&v| ((v * 255.0).round().clamp(0.0, 255.0) / 255.0) as f32));
            } else {
                out.push((planes[0][i] / 255.0) as f32);
            }
        }
    }
    ImageTensor::new(h, w, c, out)
}
