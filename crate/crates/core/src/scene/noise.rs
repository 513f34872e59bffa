//! Five image-corruption families with severities 1..=10. Severity 0 is the
//! identity and is accepted by [`apply_noise_level`] for bracketing tests.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAX_SEVERITY: u8 = 10;
/// Zoom factors are `1 + ZOOM_STEP · k` for `k = 0..=severity`.
pub const ZOOM_STEP: f64 = 0.04;
/// Fog blend weight per severity level.
pub const FOG_WEIGHT: f64 = 0.05;
/// Fraction of the fog weight used as contrast reduction.
pub const FOG_CONTRAST: f64 = 0.5;
const FOG_ROUGHNESS: f64 = 0.6;
/// Glass blur: Gaussian σ before and after one local shuffle of at most
/// `GLASS_RADIUS` pixels.
pub const GLASS_SIGMA: f64 = 0.7;
pub const GLASS_RADIUS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    MotionBlur,
    GaussianBlur,
    ZoomBlur,
    Fog,
    GlassBlur,
}

impl NoiseFamily {
    pub const ALL: [NoiseFamily; 5] = [
        NoiseFamily::MotionBlur,
        NoiseFamily::GaussianBlur,
        NoiseFamily::ZoomBlur,
        NoiseFamily::Fog,
        NoiseFamily::GlassBlur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseFamily::MotionBlur => "motion_blur",
            NoiseFamily::GaussianBlur => "gaussian_blur",
            NoiseFamily::ZoomBlur => "zoom_blur",
            NoiseFamily::Fog => "fog",
            NoiseFamily::GlassBlur => "glass_blur",
        }
    }
}

impl fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown noise family '{s}'")))
    }
}

/// Applies `family` at `severity ∈ 1..=10`.
pub fn apply_noise(img: &Tensor, family: NoiseFamily, severity: u8, seed: u64) -> Result<Tensor> {
    if !(1..=MAX_SEVERITY).contains(&severity) {
        return Err(contract_err!("severity {severity} outside 1..={MAX_SEVERITY}"));
    }
    apply_noise_level(img, family, severity, seed)
}

/// Like [`apply_noise`] but also accepts severity 0, which returns the input.
pub fn apply_noise_level(img: &Tensor, family: NoiseFamily, severity: u8, seed: u64) -> Result<Tensor> {
    let shape = img.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(crate::error::shape_err!("noise expects H×W×3, got {shape:?}"));
    }
    if severity > MAX_SEVERITY {
        return Err(contract_err!("severity {severity} outside 0..={MAX_SEVERITY}"));
    }
    if severity == 0 {
        return Ok(img.clone());
    }
    let s = severity as usize;
    let out = match family {
        NoiseFamily::MotionBlur => box_blur_horizontal(img, s),
        NoiseFamily::GaussianBlur => gaussian_blur(img, s as f64),
        NoiseFamily::ZoomBlur => zoom_blur(img, s),
        NoiseFamily::Fog => fog(img, severity as f64 * FOG_WEIGHT, seed),
        NoiseFamily::GlassBlur => glass_blur(img, severity, seed),
    };
    Ok(out.map(|x| x.clamp(0.0, 1.0)))
}

fn dims(img: &Tensor) -> (usize, usize) {
    (img.shape()[0], img.shape()[1])
}

fn px(img: &Tensor, w: usize, y: usize, x: usize, c: usize) -> f64 {
    img.data()[(y * w + x) * 3 + c]
}

/// Horizontal box kernel of length `2·radius + 1`, edges replicated.
fn box_blur_horizontal(img: &Tensor, radius: usize) -> Tensor {
    let kernel = vec![1.0 / (2 * radius + 1) as f64; 2 * radius + 1];
    convolve_axis(img, &kernel, true)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Tensor {
    let k = gaussian_kernel(sigma);
    let tmp = convolve_axis(img, &k, true);
    convolve_axis(&tmp, &k, false)
}

fn convolve_axis(img: &Tensor, kernel: &[f64], horizontal: bool) -> Tensor {
    let (h, w) = dims(img);
    let r = (kernel.len() / 2) as i64;
    let mut out = Tensor::zeros(img.shape());
    let od = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, &kv) in kernel.iter().enumerate() {
                    let off = i as i64 - r;
                    let (yy, xx) = if horizontal {
                        (y as i64, (x as i64 + off).clamp(0, w as i64 - 1))
                    } else {
                        ((y as i64 + off).clamp(0, h as i64 - 1), x as i64)
                    };
                    acc += kv * px(img, w, yy as usize, xx as usize, c);
                }
                od[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    out
}

fn bilinear(img: &Tensor, fy: f64, fx: f64, c: usize) -> f64 {
    let (h, w) = dims(img);
    let fy = fy.clamp(0.0, (h - 1) as f64);
    let fx = fx.clamp(0.0, (w - 1) as f64);
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ty = fy - y0 as f64;
    let tx = fx - x0 as f64;
    let top = px(img, w, y0, x0, c) * (1.0 - tx) + px(img, w, y0, x1, c) * tx;
    let bot = px(img, w, y1, x0, c) * (1.0 - tx) + px(img, w, y1, x1, c) * tx;
    top * (1.0 - ty) + bot * ty
}

/// Average of the image magnified about its center by `1 + 0.04·k`.
fn zoom_blur(img: &Tensor, severity: usize) -> Tensor {
    let (h, w) = dims(img);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let mut out = Tensor::zeros(img.shape());
    let n = (severity + 1) as f64;
    let od = out.data_mut();
    for k in 0..=severity {
        let z = 1.0 + ZOOM_STEP * k as f64;
        for y in 0..h {
            for x in 0..w {
                let sy = (y as f64 + 0.5 - cy) / z + cy - 0.5;
                let sx = (x as f64 + 0.5 - cx) / z + cx - 0.5;
                for c in 0..3 {
                    od[(y * w + x) * 3 + c] += if k == 0 { px(img, w, y, x, c) } else { bilinear(img, sy, sx, c) } / n;
                }
            }
        }
    }
    out
}

/// Seeded diamond-square field on a `(2^k + 1)²` grid, rescaled to `[0, 1]`.
pub fn plasma_fractal(size: usize, seed: u64) -> Vec<f64> {
    let mut n = 1;
    while n + 1 < size {
        n *= 2;
    }
    let m = n + 1;
    let mut g = vec![0.0; m * m];
    let mut rng = Rng::with_stream(seed, 7);
    let mut step = n;
    let mut amp = 1.0;
    while step > 1 {
        let half = step / 2;
        for y in (half..m).step_by(step) {
            for x in (half..m).step_by(step) {
                let avg = (g[(y - half) * m + x - half]
                    + g[(y - half) * m + x + half]
                    + g[(y + half) * m + x - half]
                    + g[(y + half) * m + x + half])
                    / 4.0;
                g[y * m + x] = avg + amp * (rng.uniform() - 0.5);
            }
        }
        for y in (0..m).step_by(half) {
            let start = if (y / half) % 2 == 0 { half } else { 0 };
            for x in (start..m).step_by(step) {
                let mut sum = 0.0;
                let mut cnt = 0.0;
                if y >= half {
                    sum += g[(y - half) * m + x];
                    cnt += 1.0;
                }
                if y + half < m {
                    sum += g[(y + half) * m + x];
                    cnt += 1.0;
                }
                if x >= half {
                    sum += g[y * m + x - half];
                    cnt += 1.0;
                }
                if x + half < m {
                    sum += g[y * m + x + half];
                    cnt += 1.0;
                }
                g[y * m + x] = sum / cnt + amp * (rng.uniform() - 0.5);
            }
        }
        step = half;
        amp *= FOG_ROUGHNESS;
    }
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        out.extend_from_slice(&g[y * m..y * m + size]);
    }
    let lo = out.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    out.iter_mut().for_each(|v| *v = (*v - lo) / span);
    out
}

fn fog(img: &Tensor, weight: f64, seed: u64) -> Tensor {
    let (h, w) = dims(img);
    let field = plasma_fractal(h.max(w), seed);
    let mean = img.sum() / img.numel() as f64;
    let contrast = 1.0 - FOG_CONTRAST * weight;
    let mut out = img.clone();
    let od = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let f = 0.6 + 0.4 * field[y * h.max(w) + x];
            for c in 0..3 {
                let i = (y * w + x) * 3 + c;
                let reduced = mean + (od[i] - mean) * contrast;
                od[i] = (1.0 - weight) * reduced + weight * f;
            }
        }
    }
    out
}

/// Swaps each pixel with a random neighbour within `radius` (raster order).
/// Frosted-glass patches: a fraction `severity / MAX_SEVERITY` of pixels,
/// chosen by one uniform draw per pixel, shows the fully distorted image.
/// The covered sets are nested, so the error can only grow with severity.
fn glass_blur(img: &Tensor, severity: u8, seed: u64) -> Tensor {
    let mut rng = Rng::with_stream(seed, 11);
    let distorted = gaussian_blur(&local_shuffle(&gaussian_blur(img, GLASS_SIGMA), GLASS_RADIUS, &mut rng), GLASS_SIGMA);
    let (h, w) = dims(img);
    let cover = severity as f64 / MAX_SEVERITY as f64;
    let mut out = img.clone();
    let od = out.data_mut();
    for p in 0..h * w {
        if rng.uniform() < cover {
            od[p * 3..p * 3 + 3].copy_from_slice(&distorted.data()[p * 3..p * 3 + 3]);
        }
    }
    out
}

fn local_shuffle(img: &Tensor, radius: usize, rng: &mut Rng) -> Tensor {
    let (h, w) = dims(img);
    let mut out = img.clone();
    let r = radius as i64;
    let od = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let dy = rng.below(2 * radius + 1) as i64 - r;
            let dx = rng.below(2 * radius + 1) as i64 - r;
            let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
            let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
            for c in 0..3 {
                od.swap((y * w + x) * 3 + c, (yy * w + xx) * 3 + c);
            }
        }
    }
    out
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`; `+∞` if equal.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(crate::error::shape_err!("psnr of {:?} and {:?}", a.shape(), b.shape()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

pub fn pixel_variance(img: &Tensor) -> f64 {
    let n = img.numel() as f64;
    let mean = img.sum() / n;
    img.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}
