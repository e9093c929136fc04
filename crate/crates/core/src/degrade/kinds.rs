//! The fifteen corruption implementations.
//!
//! Severity maps bracketed parameter ranges linearly: severity 1 is the low
//! end, 3 the high end. Discrete sets {a,b,c} index directly by severity.
//! All randomness comes from the caller's seeded stream; outputs are
//! clamped by the dispatcher.

use crate::detmath;
use crate::img::{box_blur_plane, gaussian_blur_plane, hsv_to_rgb, rgb_to_hsv, RgbImage};
use crate::rng::Rng;

fn lin(lo: f64, hi: f64, severity: u8) -> f64 {
    lo + (hi - lo) * f64::from(severity - 1) / 2.0
}

fn pick3<T: Copy>(vals: [T; 3], severity: u8) -> T {
    vals[(severity - 1) as usize]
}

/// Snow: threshold smoothed white noise into flakes (coverage 1–5%),
/// brighten flake pixels toward 1, add a global brightness lift.
pub fn snow(img: &RgbImage, severity: u8, rng: &mut Rng) -> RgbImage {
    let (h, w) = (img.h, img.w);
    let coverage = lin(0.01, 0.05, severity);
    let lift = lin(0.02, 0.08, severity);
    let noise: Vec<f64> = (0..h * w).map(|_| rng.uniform()).collect();
    let smooth = box_blur_plane(&box_blur_plane(&noise, h, w, 1), h, w, 1);
    let mut sorted = smooth.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = ((coverage * (h * w) as f64).round() as usize).clamp(1, h * w);
    let thr = sorted[k - 1];
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let flake = smooth[y * w + x] >= thr;
            for c in 0..3 {
                let mut v = out.at(c, y, x);
                if flake {
                    v += (1.0 - v) * 0.75;
                }
                out.set(c, y, x, v + lift);
            }
        }
    }
    out
}

/// Fog: I' = I*t + A(1-t) with A = 0.9 and transmission
/// t = 1 - f * lowpass(noise); lowpass is a 9x9 box blur applied twice.
pub fn fog(img: &RgbImage, severity: u8, rng: &mut Rng) -> RgbImage {
    let (h, w) = (img.h, img.w);
    let f = lin(0.3, 0.7, severity);
    const AIRLIGHT: f64 = 0.9;
    let noise: Vec<f64> = (0..h * w).map(|_| rng.uniform()).collect();
    let lowpass = box_blur_plane(&box_blur_plane(&noise, h, w, 4), h, w, 4);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let t = 1.0 - f * lowpass[y * w + x];
            for c in 0..3 {
                out.set(c, y, x, img.at(c, y, x) * t + AIRLIGHT * (1.0 - t));
            }
        }
    }
    out
}

/// Rain: 40–120 anti-aliased streaks (length 8–20 px, angle 60–120 deg,
/// intensity 0.7); the streak layer alone gets a 3x3 box blur before the
/// additive composite.
pub fn rain(img: &RgbImage, severity: u8, rng: &mut Rng) -> RgbImage {
    let (h, w) = (img.h, img.w);
    let count = pick3([40usize, 80, 120], severity);
    let mut layer = vec![0.0f64; h * w];
    for _ in 0..count {
        let cy = rng.range(0.0, h as f64);
        let cx = rng.range(0.0, w as f64);
        let len = rng.range(8.0, 20.0);
        let angle = rng.range(60.0, 120.0).to_radians();
        let (dy, dx) = (detmath::sin(angle), detmath::cos(angle));
        let steps = (len * 2.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / 2.0 - len / 2.0;
            let (py, px) = (cy + t * dy, cx + t * dx);
            splat_bilinear(&mut layer, h, w, py, px, 0.5);
        }
    }
    for v in &mut layer {
        *v = v.min(1.0);
    }
    let blurred = box_blur_plane(&layer, h, w, 1);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let add = 0.7 * blurred[y * w + x];
            for c in 0..3 {
                out.set(c, y, x, img.at(c, y, x) + add);
            }
        }
    }
    out
}

fn splat_bilinear(layer: &mut [f64], h: usize, w: usize, y: f64, x: f64, weight: f64) {
    if y < 0.0 || x < 0.0 || y >= (h - 1) as f64 || x >= (w - 1) as f64 {
        return;
    }
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    layer[y0 * w + x0] += weight * (1.0 - fy) * (1.0 - fx);
    layer[y0 * w + x0 + 1] += weight * (1.0 - fy) * fx;
    layer[(y0 + 1) * w + x0] += weight * fy * (1.0 - fx);
    layer[(y0 + 1) * w + x0 + 1] += weight * fy * fx;
}

/// Additive zero-mean Gaussian noise, sigma 0.04–0.12.
pub fn gaussian_noise(img: &RgbImage, severity: u8, rng: &mut Rng) -> RgbImage {
    let sigma = lin(0.04, 0.12, severity);
    let mut out = img.clone();
    for v in &mut out.data {
        *v += sigma * rng.gaussian();
    }
    out
}

/// Luminance-proportional Gaussian plus independent chroma Gaussian.
pub fn iso_noise(img: &RgbImage, severity: u8, rng: &mut Rng) -> RgbImage {
    let sigma0 = lin(0.05, 0.10, severity);
    let sigma_chroma = lin(0.02, 0.05, severity);
    let mut out = img.clone();
    for y in 0..img.h {
        for x in 0..img.w {
            let luma = img.luma(y, x);
            let lum_noise = rng.gaussian() * sigma0 * (0.3 + luma);
            for c in 0..3 {
                let chroma = rng.gaussian() * sigma_chroma;
                out.set(c, y, x, img.at(c, y, x) + lum_noise + chroma);
            }
        }
    }
    out
}

/// Salt-and-pepper: whole pixels go to 0 or 1 with probability 1–5%.
pub fn impulse_noise(img: &RgbImage, severity: u8, rng: &mut Rng) -> RgbImage {
    let p = lin(0.01, 0.05, severity);
    let mut out = img.clone();
    for y in 0..img.h {
        for x in 0..img.w {
            if rng.uniform() < p {
                let v = if rng.uniform() < 0.5 { 0.0 } else { 1.0 };
                for c in 0..3 {
                    out.set(c, y, x, v);
                }
            }
        }
    }
    out
}

/// Bilinear downsample by factor {2,3,4} then upsample back.
pub fn resampling_blur(img: &RgbImage, severity: u8) -> RgbImage {
    let f = pick3([2usize, 3, 4], severity);
    let dh = (img.h / f).max(1);
    let dw = (img.w / f).max(1);
    img.resize_bilinear(dh, dw).resize_bilinear(img.h, img.w)
}

/// Normalized line kernel, length {5,9,13}, angle uniform in [0, pi).
pub fn motion_blur(img: &RgbImage, severity: u8, rng: &mut Rng) -> RgbImage {
    let len = pick3([5usize, 9, 13], severity);
    let angle = rng.range(0.0, std::f64::consts::PI);
    let (dy, dx) = (detmath::sin(angle), detmath::cos(angle));
    let k = len; // kernel is len x len
    let center = (len - 1) as f64 / 2.0;
    let mut kernel = vec![0.0f64; k * k];
    for i in 0..len {
        let t = i as f64 - center;
        let (py, px) = (center + t * dy, center + t * dx);
        let (y0, x0) = (py.floor(), px.floor());
        let (fy, fx) = (py - y0, px - x0);
        for (oy, ox, wgt) in [
            (y0, x0, (1.0 - fy) * (1.0 - fx)),
            (y0, x0 + 1.0, (1.0 - fy) * fx),
            (y0 + 1.0, x0, fy * (1.0 - fx)),
            (y0 + 1.0, x0 + 1.0, fy * fx),
        ] {
            if oy >= 0.0 && ox >= 0.0 && (oy as usize) < k && (ox as usize) < k && wgt > 0.0 {
                kernel[oy as usize * k + ox as usize] += wgt;
            }
        }
    }
    let total: f64 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= total;
    }
    // Convolve with clamp-to-edge padding.
    let r = (k / 2) as isize;
    let mut out = img.clone();
    for c in 0..3 {
        for y in 0..img.h {
            for x in 0..img.w {
                let mut s = 0.0;
                for ky in 0..k {
                    let yy = (y as isize + ky as isize - r).clamp(0, img.h as isize - 1) as usize;
                    for kx in 0..k {
                        let wgt = kernel[ky * k + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        let xx = (x as isize + kx as isize - r).clamp(0, img.w as isize - 1) as usize;
                        s += wgt * img.at(c, yy, xx);
                    }
                }
                out.set(c, y, x, s);
            }
        }
    }
    out
}

/// Mean of center-anchored rescalings at scales 1, 1+d, ..., 1+4d.
pub fn zoom_blur(img: &RgbImage, severity: u8) -> RgbImage {
    let delta = lin(0.01, 0.03, severity);
    let (cy, cx) = ((img.h - 1) as f64 / 2.0, (img.w - 1) as f64 / 2.0);
    let mut acc = vec![0.0f64; img.data.len()];
    for k in 0..5 {
        let scale = 1.0 + delta * k as f64;
        for c in 0..3 {
            for y in 0..img.h {
                let sy = cy + (y as f64 - cy) / scale;
                for x in 0..img.w {
                    let sx = cx + (x as f64 - cx) / scale;
                    acc[(c * img.h + y) * img.w + x] += img.sample_bilinear(c, sy, sx);
                }
            }
        }
    }
    let mut out = img.clone();
    for (o, a) in out.data.iter_mut().zip(&acc) {
        *o = a / 5.0;
    }
    out
}

/// Hue shift, saturation scale, brightness offset in HSV space. Magnitudes
/// scale with severity; shift directions are random.
pub fn color_jitter(img: &RgbImage, severity: u8, rng: &mut Rng) -> RgbImage {
    let hue_mag = lin(0.05, 0.15, severity);
    let sat_dev = 0.4 * f64::from(severity) / 3.0;
    let bright_mag = lin(0.05, 0.15, severity);
    let sign = |rng: &mut Rng| if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
    let hue_shift = hue_mag * sign(rng);
    let sat_scale = 1.0 + sat_dev * sign(rng);
    let brightness = bright_mag * sign(rng);
    let mut out = img.clone();
    for y in 0..img.h {
        for x in 0..img.w {
            let (h, s, v) = rgb_to_hsv(img.at(0, y, x), img.at(1, y, x), img.at(2, y, x));
            let (r, g, b) = hsv_to_rgb(
                h + hue_shift,
                (s * sat_scale).clamp(0.0, 1.0),
                (v + brightness).clamp(0.0, 1.0),
            );
            out.set(0, y, x, r);
            out.set(1, y, x, g);
            out.set(2, y, x, b);
        }
    }
    out
}

// Standard JPEG luminance quantization table, row-major.
const JPEG_LUMA_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

fn dct_basis() -> [f64; 64] {
    let mut c = [0.0; 64];
    for u in 0..8 {
        let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for x in 0..8 {
            c[u * 8 + x] =
                alpha * detmath::cos((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0);
        }
    }
    c
}

/// Blockwise 8x8 DCT quantization per channel (JPEG-like, no chroma
/// subsampling), quality {30,20,10} by severity. Extents are multiples of
/// 16 upstream, so blocks tile exactly.
pub fn compression(img: &RgbImage, severity: u8) -> RgbImage {
    let q = pick3([30.0f64, 20.0, 10.0], severity);
    let scale = 5000.0 / q; // q < 50 branch of the libjpeg rule
    let mut table = [0.0f64; 64];
    for i in 0..64 {
        table[i] = ((JPEG_LUMA_TABLE[i] * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    let basis = dct_basis();
    let mut out = img.clone();
    let mut block = [0.0f64; 64];
    let mut tmp = [0.0f64; 64];
    let mut coef = [0.0f64; 64];
    for c in 0..3 {
        for by in (0..img.h).step_by(8) {
            for bx in (0..img.w).step_by(8) {
                let bh = 8.min(img.h - by);
                let bw = 8.min(img.w - bx);
                // Load (replicating the edge for ragged blocks).
                for y in 0..8 {
                    for x in 0..8 {
                        let yy = by + y.min(bh - 1);
                        let xx = bx + x.min(bw - 1);
                        block[y * 8 + x] = img.at(c, yy, xx) * 255.0 - 128.0;
                    }
                }
                // coef = C * block * C^T
                for u in 0..8 {
                    for x in 0..8 {
                        let mut s = 0.0;
                        for y in 0..8 {
                            s += basis[u * 8 + y] * block[y * 8 + x];
                        }
                        tmp[u * 8 + x] = s;
                    }
                }
                for u in 0..8 {
                    for v in 0..8 {
                        let mut s = 0.0;
                        for x in 0..8 {
                            s += tmp[u * 8 + x] * basis[v * 8 + x];
                        }
                        coef[u * 8 + v] = s;
                    }
                }
                for i in 0..64 {
                    coef[i] = (coef[i] / table[i]).round() * table[i];
                }
                // block = C^T * coef * C
                for y in 0..8 {
                    for v in 0..8 {
                        let mut s = 0.0;
                        for u in 0..8 {
                            s += basis[u * 8 + y] * coef[u * 8 + v];
                        }
                        tmp[y * 8 + v] = s;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let mut s = 0.0;
                        for v in 0..8 {
                            s += tmp[y * 8 + v] * basis[v * 8 + x];
                        }
                        block[y * 8 + x] = s;
                    }
                }
                for y in 0..bh {
                    for x in 0..bw {
                        out.set(c, by + y, bx + x, (block[y * 8 + x] + 128.0) / 255.0);
                    }
                }
            }
        }
    }
    out
}

pub struct DisplacementField {
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

/// Gaussian-smoothed unit-variance noise scaled to alpha {4,8,12} px,
/// smoothing kernel sigma 8 px. The smoothed field is renormalized to unit
/// standard deviation before scaling so alpha is the actual displacement
/// scale in pixels.
pub fn elastic_field(h: usize, w: usize, severity: u8, rng: &mut Rng) -> DisplacementField {
    let alpha = lin(4.0, 12.0, severity);
    let make = |rng: &mut Rng| {
        let noise: Vec<f64> = (0..h * w).map(|_| rng.gaussian()).collect();
        let mut field = gaussian_blur_plane(&noise, h, w, 8.0);
        let mean = field.iter().sum::<f64>() / field.len() as f64;
        let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / field.len() as f64;
        let std = var.sqrt();
        if std > 0.0 {
            for v in &mut field {
                *v = (*v - mean) / std * alpha;
            }
        } else {
            field.fill(0.0);
        }
        field
    };
    let dx = make(rng);
    let dy = make(rng);
    DisplacementField { dx, dy }
}

pub fn elastic_warp_image(img: &RgbImage, field: &DisplacementField) -> RgbImage {
    let mut out = img.clone();
    for y in 0..img.h {
        for x in 0..img.w {
            let sy = y as f64 + field.dy[y * img.w + x];
            let sx = x as f64 + field.dx[y * img.w + x];
            for c in 0..3 {
                out.set(c, y, x, img.sample_bilinear(c, sy, sx));
            }
        }
    }
    out
}

pub fn elastic_warp_mask(mask: &[bool], h: usize, w: usize, field: &DisplacementField) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let sy = (y as f64 + field.dy[y * w + x]).round().clamp(0.0, (h - 1) as f64) as usize;
            let sx = (x as f64 + field.dx[y * w + x]).round().clamp(0.0, (w - 1) as f64) as usize;
            out[y * w + x] = mask[sy * w + sx];
        }
    }
    out
}

/// Each pixel replaced by a random neighbor within radius {2,3,4}, then a
/// 3x3 box blur.
pub fn frosted_glass(img: &RgbImage, severity: u8, rng: &mut Rng) -> RgbImage {
    let r = pick3([2i64, 3, 4], severity) as i64;
    let span = (2 * r + 1) as u64;
    let mut shuffled = img.clone();
    for y in 0..img.h {
        for x in 0..img.w {
            let dy = rng.below(span) as i64 - r;
            let dx = rng.below(span) as i64 - r;
            let sy = (y as i64 + dy).clamp(0, img.h as i64 - 1) as usize;
            let sx = (x as i64 + dx).clamp(0, img.w as i64 - 1) as usize;
            for c in 0..3 {
                shuffled.set(c, y, x, img.at(c, sy, sx));
            }
        }
    }
    crate::img::box_blur(&shuffled, 1)
}

/// Gamma curve 1.8–3.0 plus mild Gaussian noise (sigma 0.03).
pub fn low_light(img: &RgbImage, severity: u8, rng: &mut Rng) -> RgbImage {
    let gamma = lin(1.8, 3.0, severity);
    let mut out = img.clone();
    for v in &mut out.data {
        *v = detmath::pow(*v, gamma) + 0.03 * rng.gaussian();
    }
    out
}

/// Contrast compression toward the global mean, factor 0.3–0.6.
pub fn contrast(img: &RgbImage, severity: u8) -> RgbImage {
    let c = lin(0.3, 0.6, severity);
    let mean = img.mean();
    let mut out = img.clone();
    for v in &mut out.data {
        *v = (*v - mean) * c + mean;
    }
    out
}
