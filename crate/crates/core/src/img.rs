//! Planar RGB float images in [0,1] plus the sampling and filtering
//! primitives the degradation pipeline and dataset writer share.

use std::path::Path;

use crate::error::{Error, Result};

/// RGB image, channel-planar row-major: data[c*h*w + y*w + x], values in
/// [0,1] for all public pipeline inputs/outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(h: usize, w: usize) -> Self {
        RgbImage {
            h,
            w,
            data: vec![0.0; 3 * h * w],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn in_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Rec. 601 luma of a pixel.
    #[inline]
    pub fn luma(&self, y: usize, x: usize) -> f64 {
        0.299 * self.at(0, y, x) + 0.587 * self.at(1, y, x) + 0.114 * self.at(2, y, x)
    }

    pub fn mean_luma(&self) -> f64 {
        let mut s = 0.0;
        for y in 0..self.h {
            for x in 0..self.w {
                s += self.luma(y, x);
            }
        }
        s / (self.h * self.w) as f64
    }

    /// Clamped bilinear sample of one channel at fractional coordinates.
    pub fn sample_bilinear(&self, c: usize, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.h - 1);
        let x1 = (x0 + 1).min(self.w - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        self.at(c, y0, x0) * (1.0 - fy) * (1.0 - fx)
            + self.at(c, y0, x1) * (1.0 - fy) * fx
            + self.at(c, y1, x0) * fy * (1.0 - fx)
            + self.at(c, y1, x1) * fy * fx
    }

    /// Bilinear resize (align_corners = false).
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> RgbImage {
        let mut out = RgbImage::new(oh, ow);
        let sy = self.h as f64 / oh as f64;
        let sx = self.w as f64 / ow as f64;
        for c in 0..3 {
            for y in 0..oh {
                let src_y = (y as f64 + 0.5) * sy - 0.5;
                for x in 0..ow {
                    let src_x = (x as f64 + 0.5) * sx - 0.5;
                    out.set(c, y, x, self.sample_bilinear(c, src_y, src_x));
                }
            }
        }
        out
    }
}

/// Separable box blur with clamp-to-edge padding, applied to one plane.
pub fn box_blur_plane(plane: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    let mut out = vec![0.0; h * w];
    let k = (2 * radius + 1) as f64;
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut s = 0.0;
            for d in -(radius as isize)..=(radius as isize) {
                let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                s += row[xx];
            }
            tmp[y * w + x] = s / k;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in -(radius as isize)..=(radius as isize) {
                let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                s += tmp[yy * w + x];
            }
            out[y * w + x] = s / k;
        }
    }
    out
}

pub fn box_blur(img: &RgbImage, radius: usize) -> RgbImage {
    let mut out = img.clone();
    for c in 0..3 {
        let blurred = box_blur_plane(img.plane(c), img.h, img.w, radius);
        out.plane_mut(c).copy_from_slice(&blurred);
    }
    out
}

/// Separable Gaussian blur with clamp-to-edge padding; kernel truncated at
/// 3 sigma.
pub fn gaussian_blur_plane(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for d in -radius..=radius {
        let v = crate::detmath::exp(-(d as f64 * d as f64) / (2.0 * sigma * sigma));
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let mut tmp = vec![0.0; h * w];
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let xx = (x as isize + i as isize - radius).clamp(0, w as isize - 1) as usize;
                s += kv * plane[y * w + xx];
            }
            tmp[y * w + x] = s;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let yy = (y as isize + i as isize - radius).clamp(0, h as isize - 1) as usize;
                s += kv * tmp[yy * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// RGB -> HSV, all components in [0,1] (hue in turns).
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, v)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = (h6.floor() as i64).rem_euclid(6) as usize;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Quantize to 8-bit: round(v * 255).
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let mut buf = Vec::with_capacity(img.h * img.w * 3);
    for y in 0..img.h {
        for x in 0..img.w {
            for c in 0..3 {
                buf.push(quantize_u8(img.at(c, y, x)));
            }
        }
    }
    let out: image::RgbImage =
        image::ImageBuffer::from_raw(img.w as u32, img.h as u32, buf).expect("sized buffer");
    out.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let dyn_img = image::open(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let rgb = dyn_img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = RgbImage::new(h, w);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, px.0[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

/// Binary mask as PNG with values {0, 255}.
pub fn write_mask_png(path: &Path, mask: &[bool], h: usize, w: usize) -> Result<()> {
    let buf: Vec<u8> = mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let out: image::GrayImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, buf).expect("sized buffer");
    out.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn read_mask_png(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let dyn_img = image::open(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let gray = dyn_img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mask = gray.pixels().map(|p| p.0[0] >= 128).collect();
    Ok((mask, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn hsv_round_trip() {
        let mut rng = Rng::new(50);
        for _ in 0..5_000 {
            let (r, g, b) = (rng.uniform(), rng.uniform(), rng.uniform());
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-9 && (g - g2).abs() < 1e-9 && (b - b2).abs() < 1e-9);
        }
    }

    #[test]
    fn box_blur_preserves_constant() {
        let img = {
            let mut i = RgbImage::new(8, 8);
            i.data.fill(0.42);
            i
        };
        let out = box_blur(&img, 2);
        assert!(out.data.iter().all(|&v| (v - 0.42).abs() < 1e-12));
    }

    #[test]
    fn resize_identity() {
        let mut rng = Rng::new(51);
        let mut img = RgbImage::new(6, 7);
        for v in &mut img.data {
            *v = rng.uniform();
        }
        let same = img.resize_bilinear(6, 7);
        assert!(img.data.iter().zip(&same.data).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn png_round_trip_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(52);
        let mut img = RgbImage::new(16, 16);
        for v in &mut img.data {
            *v = rng.uniform();
        }
        let p1 = dir.path().join("a.png");
        write_png(&p1, &img).unwrap();
        let back = read_png(&p1).unwrap();
        // Quantization error bound: |round(v*255)/255 - v| <= 1/510.
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
        }
        // Idempotence: writing the read-back image reproduces the same file.
        let p2 = dir.path().join("b.png");
        write_png(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn mask_round_trip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(53);
        let mask: Vec<bool> = (0..64).map(|_| rng.uniform() < 0.5).collect();
        let p = dir.path().join("m.png");
        write_mask_png(&p, &mask, 8, 8).unwrap();
        let (back, h, w) = read_mask_png(&p).unwrap();
        assert_eq!((h, w), (8, 8));
        assert_eq!(mask, back);
    }
}
