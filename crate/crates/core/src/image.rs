//! Pixel buffers and the low-level image operations the rest of the crate
//! builds on.
//!
//! Images are stored as row-major, interleaved `f32` samples in `[0, 1]`
//! (`H × W × C`, with `C` either 1 or 3). Convolution and colour math
//! accumulate in `f64`.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{invalid, shape_err, Error, Result};

/// BT.601 luma weights.
pub const LUMA_R: f64 = 0.299;
pub const LUMA_G: f64 = 0.587;
pub const LUMA_B: f64 = 0.114;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("zero-dimension image {height}x{width}"));
        }
        if channels != 1 && channels != 3 {
            return Err(invalid!("unsupported channel count {channels}"));
        }
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "data length {} != {height}x{width}x{channels}",
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    /// Builds an image by evaluating `f(y, x, c)` for every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn same_dims(&self, other: &ImageTensor) -> bool {
        self.dims() == other.dims()
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> ImageTensor {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamped(mut self) -> ImageTensor {
        for v in &mut self.data {
            *v = clamp_unit(*v);
        }
        self
    }

    pub fn is_valid(&self) -> bool {
        self.data
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// Rounds every sample to the nearest 8-bit level, as storing to PNG does.
    pub fn quantized_8bit(&self) -> ImageTensor {
        self.map(|v| f32::from(to_u8(v)) / 255.0)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    /// Single-channel BT.601 luminance. Gray images are returned unchanged.
    pub fn luminance(&self) -> ImageTensor {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| {
                (LUMA_R * f64::from(p[0]) + LUMA_G * f64::from(p[1]) + LUMA_B * f64::from(p[2]))
                    as f32
            })
            .collect();
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Extracts one channel as a gray image.
    pub fn channel(&self, c: usize) -> ImageTensor {
        let data = self
            .data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect();
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Rotates by 180 degrees.
    pub fn rotated_180(&self) -> ImageTensor {
        let mut out = self.clone();
        let (h, w, c) = self.dims();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.set(h - 1 - y, w - 1 - x, ch, self.get(y, x, ch));
                }
            }
        }
        out
    }
}

#[inline]
pub fn clamp_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (clamp_unit(v) * 255.0).round() as u8
}

/// Square, odd-sized convolution kernel with row-major weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2D {
    size: usize,
    weights: Vec<f64>,
}

impl Kernel2D {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(invalid!("kernel size must be odd, got {size}"));
        }
        if weights.len() != size * size {
            return Err(shape_err!(
                "kernel weights length {} != {size}x{size}",
                weights.len()
            ));
        }
        Ok(Self { size, weights })
    }

    /// Kernel with all weight at the centre.
    pub fn identity() -> Self {
        Self {
            size: 1,
            weights: vec![1.0],
        }
    }

    pub fn box_filter(size: usize) -> Result<Self> {
        let n = (size * size) as f64;
        Self::new(size, vec![1.0 / n; size * size])
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Rescales the weights to sum to one.
    pub fn normalized(mut self) -> Result<Self> {
        let s = self.sum();
        if !(s.is_finite() && s > 0.0) {
            return Err(invalid!("cannot normalize kernel with sum {s}"));
        }
        for w in &mut self.weights {
            *w /= s;
        }
        Ok(self)
    }
}

/// Mirror index into `0..n` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Correlates each channel with `kernel` using reflect padding; the output has
/// the input's dimensions and is clamped to `[0, 1]`.
pub fn convolve2d(img: &ImageTensor, kernel: &Kernel2D) -> Result<ImageTensor> {
    let (h, w, c) = img.dims();
    let k = kernel.size();
    if k > h.min(w) {
        return Err(invalid!("kernel size {k} exceeds image {h}x{w}"));
    }
    let r = k / 2;
    // Reflect-pad once into a double-precision buffer so that every kernel tap
    // becomes a contiguous axpy over a padded row.
    let pw = w + 2 * r;
    let mut padded = vec![0f64; (h + 2 * r) * pw * c];
    for py in 0..h + 2 * r {
        let sy = reflect_index(py as isize - r as isize, h);
        let src = &img.data[sy * w * c..(sy + 1) * w * c];
        let dst = &mut padded[py * pw * c..(py + 1) * pw * c];
        for px in 0..pw {
            let sx = reflect_index(px as isize - r as isize, w);
            for ch in 0..c {
                dst[px * c + ch] = f64::from(src[sx * c + ch]);
            }
        }
    }
    // Non-zero taps grouped by kernel row, each as (column offset, weight).
    let rows: Vec<(usize, Vec<(usize, f64)>)> = (0..k)
        .map(|ky| {
            let taps = (0..k)
                .map(|kx| (kx * c, kernel.at(ky, kx)))
                .filter(|&(_, wgt)| wgt != 0.0)
                .collect::<Vec<_>>();
            (ky, taps)
        })
        .filter(|(_, taps)| !taps.is_empty())
        .collect();
    const LANES: usize = 16;
    let n = w * c;
    let mut out = vec![0f32; h * w * c];
    let mut acc = vec![0f64; n];
    for y in 0..h {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (ky, taps) in &rows {
            let base = &padded[(y + ky) * pw * c..(y + ky + 1) * pw * c];
            // Accumulate a block of outputs in registers across one kernel
            // row; every sample still sees its taps in (ky, kx) order.
            let mut j = 0;
            while j + LANES <= n {
                let mut block: [f64; LANES] = acc[j..j + LANES].try_into().unwrap();
                for &(off, wgt) in taps {
                    let src: &[f64; LANES] = base[j + off..j + off + LANES].try_into().unwrap();
                    for l in 0..LANES {
                        block[l] += wgt * src[l];
                    }
                }
                acc[j..j + LANES].copy_from_slice(&block);
                j += LANES;
            }
            for (jj, a) in acc.iter_mut().enumerate().skip(j) {
                for &(off, wgt) in taps {
                    *a += wgt * base[jj + off];
                }
            }
        }
        for (dst, &a) in out[y * w * c..(y + 1) * w * c].iter_mut().zip(&acc) {
            *dst = clamp_unit(a as f32);
        }
    }
    ImageTensor::new(h, w, c, out)
}

/// Full-range BT.601 RGB → YCbCr with chroma centred on 0.5.
pub fn rgb_to_ycbcr(img: &ImageTensor) -> Result<ImageTensor> {
    if img.channels() != 3 {
        return Err(invalid!(
            "rgb_to_ycbcr needs 3 channels, got {}",
            img.channels()
        ));
    }
    let mut out = img.clone();
    for (dst, p) in out.data.chunks_exact_mut(3).zip(img.data.chunks_exact(3)) {
        let [y, cb, cr] = rgb_to_ycbcr_px([p[0].into(), p[1].into(), p[2].into()]);
        dst[0] = y as f32;
        dst[1] = cb as f32;
        dst[2] = cr as f32;
    }
    Ok(out)
}

pub fn ycbcr_to_rgb(img: &ImageTensor) -> Result<ImageTensor> {
    if img.channels() != 3 {
        return Err(invalid!(
            "ycbcr_to_rgb needs 3 channels, got {}",
            img.channels()
        ));
    }
    let mut out = img.clone();
    for (dst, p) in out.data.chunks_exact_mut(3).zip(img.data.chunks_exact(3)) {
        let [r, g, b] = ycbcr_to_rgb_px([p[0].into(), p[1].into(), p[2].into()]);
        dst[0] = r as f32;
        dst[1] = g as f32;
        dst[2] = b as f32;
    }
    Ok(out)
}

#[inline]
pub(crate) fn rgb_to_ycbcr_px([r, g, b]: [f64; 3]) -> [f64; 3] {
    let y = LUMA_R * r + LUMA_G * g + LUMA_B * b;
    let cb = 0.5 + (b - y) / (2.0 * (1.0 - LUMA_B));
    let cr = 0.5 + (r - y) / (2.0 * (1.0 - LUMA_R));
    [y, cb, cr]
}

#[inline]
pub(crate) fn ycbcr_to_rgb_px([y, cb, cr]: [f64; 3]) -> [f64; 3] {
    let r = y + 2.0 * (1.0 - LUMA_R) * (cr - 0.5);
    let b = y + 2.0 * (1.0 - LUMA_B) * (cb - 0.5);
    let g = (y - LUMA_R * r - LUMA_B * b) / LUMA_G;
    [r, g, b]
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("zero target size {out_h}x{out_w}"));
    }
    let (h, w, c) = img.dims();
    let taps = |out: usize, input: usize| -> Vec<(usize, usize, f64)> {
        let scale = input as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(input - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let p = |y, x| f64::from(img.get(y, x, ch));
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                data.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    ImageTensor::new(out_h, out_w, c, data)
}

pub fn crop(img: &ImageTensor, x: usize, y: usize, w: usize, h: usize) -> Result<ImageTensor> {
    if w == 0 || h == 0 || x + w > img.width() || y + h > img.height() {
        return Err(invalid!(
            "crop ({x},{y}) {w}x{h} outside {}x{} image",
            img.width(),
            img.height()
        ));
    }
    let c = img.channels();
    let mut data = Vec::with_capacity(w * h * c);
    for row in y..y + h {
        let start = img.index(row, x, 0);
        data.extend_from_slice(&img.data[start..start + w * c]);
    }
    ImageTensor::new(h, w, c, data)
}

/// Loads an 8-bit raster. Gray sources stay single-channel; everything else is
/// converted to RGB. Alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if decoded.width() == 0 || decoded.height() == 0 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            message: "zero-dimension image".into(),
        });
    }
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let gray = matches!(
        decoded,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
    );
    let (channels, raw) = if gray {
        (1, decoded.into_luma8().into_raw())
    } else {
        (3, decoded.into_rgb8().into_raw())
    };
    let data = raw.into_iter().map(|v| f32::from(v) / 255.0).collect();
    ImageTensor::new(h, w, channels, data)
}

/// Writes an 8-bit PNG.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let dynamic = if img.channels() == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, raw).expect("buffer sized by invariant"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, raw).expect("buffer sized by invariant"))
    };
    let mut buf = std::io::Cursor::new(Vec::new());
    dynamic
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Encode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    std::fs::write(path, buf.into_inner()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(h, w, c, |_, _, _| rng.random::<f32>()).unwrap()
    }

    fn ramp(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, 1, |y, x, _| (x + w * y) as f32 / (h * w) as f32).unwrap()
    }

    // Direct O(n·k²) correlation with reflect indices.
    fn naive_convolve(img: &ImageTensor, k: &Kernel2D) -> Vec<f64> {
        let (h, w, c) = img.dims();
        let r = (k.size() / 2) as isize;
        let mut out = Vec::new();
        for y in 0..h as isize {
            for x in 0..w as isize {
                for ch in 0..c {
                    let mut s = 0.0;
                    for ky in -r..=r {
                        for kx in -r..=r {
                            let mut sy = y + ky;
                            let mut sx = x + kx;
                            if sy < 0 {
                                sy = -sy;
                            }
                            if sy >= h as isize {
                                sy = 2 * (h as isize - 1) - sy;
                            }
                            if sx < 0 {
                                sx = -sx;
                            }
                            if sx >= w as isize {
                                sx = 2 * (w as isize - 1) - sx;
                            }
                            s += k.at((ky + r) as usize, (kx + r) as usize)
                                * f64::from(img.get(sy as usize, sx as usize, ch));
                        }
                    }
                    out.push(s);
                }
            }
        }
        out
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(ImageTensor::new(0, 4, 1, vec![]).is_err());
        assert!(ImageTensor::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageTensor::new(2, 2, 3, vec![0.0; 11]).is_err());
    }

    #[test]
    fn identity_kernel_is_noop() {
        let img = random_image(9, 7, 3, 1);
        let out = convolve2d(&img, &Kernel2D::identity()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn box_kernel_keeps_constant() {
        let img = ImageTensor::filled(6, 6, 3, 0.37).unwrap();
        let out = convolve2d(&img, &Kernel2D::box_filter(3).unwrap()).unwrap();
        for &v in out.data() {
            assert!((v - 0.37).abs() < 1e-7);
        }
    }

    #[test]
    fn shifted_delta_matches_naive() {
        let img = ramp(8, 11);
        let mut weights = vec![0.0; 25];
        weights[5 + 4] = 1.0;
        let k = Kernel2D::new(5, weights).unwrap();
        let fast = convolve2d(&img, &k).unwrap();
        let slow = naive_convolve(&img, &k);
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((f64::from(*a) - b).abs() < 1e-7);
        }
    }

    #[test]
    fn random_kernel_matches_naive() {
        let img = random_image(10, 13, 3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Kernel2D::new(7, (0..49).map(|_| rng.random::<f64>()).collect())
            .unwrap()
            .normalized()
            .unwrap();
        let fast = convolve2d(&img, &k).unwrap();
        let slow = naive_convolve(&img, &k);
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((f64::from(*a) - b).abs() < 1e-6);
        }
    }

    #[test]
    fn kernel_larger_than_image_fails() {
        let img = ImageTensor::filled(4, 8, 1, 0.0).unwrap();
        assert!(convolve2d(&img, &Kernel2D::box_filter(5).unwrap()).is_err());
        assert!(Kernel2D::new(4, vec![0.0; 16]).is_err());
    }

    #[test]
    fn reflect_index_mirrors() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(3, 1), 0);
    }

    #[test]
    fn ycbcr_of_gray_and_white() {
        let img = ImageTensor::from_fn(1, 2, 3, |_, x, _| if x == 0 { 0.3 } else { 1.0 }).unwrap();
        let ycc = rgb_to_ycbcr(&img).unwrap();
        assert!((ycc.get(0, 0, 0) - 0.3).abs() < 1e-6);
        assert!((ycc.get(0, 0, 1) - 0.5).abs() < 1e-6);
        assert!((ycc.get(0, 0, 2) - 0.5).abs() < 1e-6);
        assert!((ycc.get(0, 1, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ycbcr_roundtrip() {
        let img = random_image(10, 10, 3, 11);
        let back = ycbcr_to_rgb(&rgb_to_ycbcr(&img).unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(rgb_to_ycbcr(&ImageTensor::filled(2, 2, 1, 0.0).unwrap()).is_err());
    }

    #[test]
    fn resize_constant_and_identity() {
        let img = ImageTensor::filled(8, 8, 3, 0.7).unwrap();
        let up = resize_bilinear(&img, 16, 16).unwrap();
        assert_eq!(up.dims(), (16, 16, 3));
        assert!(up.data().iter().all(|v| (v - 0.7).abs() < 1e-6));
        let r = random_image(5, 9, 3, 2);
        let same = resize_bilinear(&r, 5, 9).unwrap();
        for (a, b) in r.data().iter().zip(same.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(resize_bilinear(&r, 0, 3).is_err());
    }

    #[test]
    fn resize_ramp_endpoints() {
        let img = ImageTensor::from_fn(1, 4, 1, |_, x, _| x as f32 / 3.0).unwrap();
        let up = resize_bilinear(&img, 1, 8).unwrap();
        assert!((up.get(0, 0, 0) - 0.0).abs() < 1e-7);
        assert!((up.get(0, 7, 0) - 1.0).abs() < 1e-7);
        // Interior sample 1 sits at source coordinate 0.25.
        assert!((up.get(0, 1, 0) - 0.25 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn crop_cases() {
        let img = random_image(6, 5, 3, 4);
        assert_eq!(crop(&img, 0, 0, 5, 6).unwrap(), img);
        let px = crop(&img, 2, 3, 1, 1).unwrap();
        for c in 0..3 {
            assert_eq!(px.get(0, 0, c), img.get(3, 2, c));
        }
        assert!(crop(&img, 4, 0, 2, 1).is_err());
    }

    #[test]
    fn overlapping_tiles_reassemble() {
        let img = random_image(12, 12, 1, 5);
        let mut canvas = ImageTensor::filled(12, 12, 1, -1.0).unwrap();
        for &(x, y) in &[(0, 0), (5, 0), (0, 5), (5, 5)] {
            let tile = crop(&img, x, y, 7, 7).unwrap();
            for ty in 0..7 {
                for tx in 0..7 {
                    let prev = canvas.get(y + ty, x + tx, 0);
                    let v = tile.get(ty, tx, 0);
                    assert!(prev < 0.0 || prev == v);
                    canvas.set(y + ty, x + tx, 0, v);
                }
            }
        }
        assert_eq!(canvas, img);
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        for img in [
            ImageTensor::filled(4, 4, 3, 0.5).unwrap(),
            ImageTensor::filled(3, 5, 1, 0.0).unwrap(),
            random_image(17, 13, 3, 9),
        ] {
            save_image(&img, &path).unwrap();
            let back = load_image(&path).unwrap();
            assert_eq!(back.dims(), img.dims());
            for (a, b) in img.data().iter().zip(back.data()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7);
            }
        }
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        save_image(&random_image(8, 8, 3, 1), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_image(&path), Err(Error::Decode { .. })));
        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn load_scales_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        GrayImage::from_raw(1, 1, vec![128]).unwrap().save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.dims(), (1, 1, 1));
        assert!((img.get(0, 0, 0) - 128.0 / 255.0).abs() < 1e-7);
        RgbImage::from_raw(2, 2, vec![255; 12]).unwrap().save(&path).unwrap();
        assert!(load_image(&path).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
