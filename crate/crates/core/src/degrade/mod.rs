//! Deterministic synthesis of the 16 degradation kinds (15 corruptions +
//! identity). A [`DegradationSpec`] — kind, severity in {1,2,3}, seed —
//! fully determines the output, bit for bit.

mod golden;
mod kinds;

pub use golden::{compute_golden_table, golden_reference_image, hash_image, verify_golden_table, GOLDEN_TABLE};

use crate::error::{Error, Result};
use crate::img::RgbImage;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DegradationKind {
    Snow,
    Fog,
    Rain,
    GaussianNoise,
    IsoNoise,
    ImpulseNoise,
    ResamplingBlur,
    MotionBlur,
    ZoomBlur,
    ColorJitter,
    Compression,
    ElasticTransform,
    FrostedGlassBlur,
    LowLight,
    Contrast,
    Identity,
}

impl DegradationKind {
    pub fn token(self) -> &'static str {
        match self {
            DegradationKind::Snow => "snow",
            DegradationKind::Fog => "fog",
            DegradationKind::Rain => "rain",
            DegradationKind::GaussianNoise => "gaussian_noise",
            DegradationKind::IsoNoise => "iso_noise",
            DegradationKind::ImpulseNoise => "impulse_noise",
            DegradationKind::ResamplingBlur => "resampling_blur",
            DegradationKind::MotionBlur => "motion_blur",
            DegradationKind::ZoomBlur => "zoom_blur",
            DegradationKind::ColorJitter => "color_jitter",
            DegradationKind::Compression => "compression",
            DegradationKind::ElasticTransform => "elastic_transform",
            DegradationKind::FrostedGlassBlur => "frosted_glass_blur",
            DegradationKind::LowLight => "low_light",
            DegradationKind::Contrast => "contrast",
            DegradationKind::Identity => "identity",
        }
    }

    pub fn from_token(s: &str) -> Result<Self> {
        kinds_list()
            .iter()
            .copied()
            .find(|k| k.token() == s)
            .ok_or_else(|| Error::domain(format!("unknown degradation kind '{s}'")))
    }
}

/// All 16 kinds in the fixed enumeration order; Identity is last.
pub fn kinds_list() -> [DegradationKind; 16] {
    [
        DegradationKind::Snow,
        DegradationKind::Fog,
        DegradationKind::Rain,
        DegradationKind::GaussianNoise,
        DegradationKind::IsoNoise,
        DegradationKind::ImpulseNoise,
        DegradationKind::ResamplingBlur,
        DegradationKind::MotionBlur,
        DegradationKind::ZoomBlur,
        DegradationKind::ColorJitter,
        DegradationKind::Compression,
        DegradationKind::ElasticTransform,
        DegradationKind::FrostedGlassBlur,
        DegradationKind::LowLight,
        DegradationKind::Contrast,
        DegradationKind::Identity,
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub severity: u8,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=3).contains(&severity) {
            return Err(Error::domain(format!("severity {severity} not in 1..=3")));
        }
        Ok(DegradationSpec { kind, severity, seed })
    }

    pub fn identity() -> Self {
        DegradationSpec {
            kind: DegradationKind::Identity,
            severity: 1,
            seed: 0,
        }
    }

    /// Manifest/CLI token: "kind:severity:seed".
    pub fn to_token(self) -> String {
        format!("{}:{}:{}", self.kind.token(), self.severity, self.seed)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::domain(format!("bad degradation token '{s}'")));
        }
        let kind = DegradationKind::from_token(parts[0])?;
        let severity: u8 = parts[1]
            .parse()
            .map_err(|_| Error::domain(format!("bad severity in '{s}'")))?;
        let seed: u64 = parts[2]
            .parse()
            .map_err(|_| Error::domain(format!("bad seed in '{s}'")))?;
        DegradationSpec::new(kind, severity, seed)
    }
}

/// Uniform draw over all 16 kinds (identity has probability 1/16), severity
/// uniform over {1,2,3}, child seed from the stream.
pub fn sample_spec(rng: &mut Rng) -> DegradationSpec {
    let kind = kinds_list()[rng.below(16) as usize];
    let severity = 1 + rng.below(3) as u8;
    let seed = rng.next_u64();
    DegradationSpec { kind, severity, seed }
}

fn validate_input(image: &RgbImage) -> Result<()> {
    if image.h < 16 || image.w < 16 {
        return Err(Error::dimension(format!(
            "degradation input {}x{} below minimum extent 16",
            image.h, image.w
        )));
    }
    if !image.in_range() {
        return Err(Error::domain("degradation input values outside [0,1]"));
    }
    Ok(())
}

/// Apply a degradation. Output is clamped to [0,1] and has the input's
/// extents; Identity returns the input bit-exactly.
pub fn apply(image: &RgbImage, spec: &DegradationSpec) -> Result<RgbImage> {
    validate_input(image)?;
    if spec.kind == DegradationKind::Identity {
        return Ok(image.clone());
    }
    let mut rng = Rng::new(spec.seed);
    let s = spec.severity;
    let mut out = match spec.kind {
        DegradationKind::Snow => kinds::snow(image, s, &mut rng),
        DegradationKind::Fog => kinds::fog(image, s, &mut rng),
        DegradationKind::Rain => kinds::rain(image, s, &mut rng),
        DegradationKind::GaussianNoise => kinds::gaussian_noise(image, s, &mut rng),
        DegradationKind::IsoNoise => kinds::iso_noise(image, s, &mut rng),
        DegradationKind::ImpulseNoise => kinds::impulse_noise(image, s, &mut rng),
        DegradationKind::ResamplingBlur => kinds::resampling_blur(image, s),
        DegradationKind::MotionBlur => kinds::motion_blur(image, s, &mut rng),
        DegradationKind::ZoomBlur => kinds::zoom_blur(image, s),
        DegradationKind::ColorJitter => kinds::color_jitter(image, s, &mut rng),
        DegradationKind::Compression => kinds::compression(image, s),
        DegradationKind::ElasticTransform => {
            let field = kinds::elastic_field(image.h, image.w, s, &mut rng);
            kinds::elastic_warp_image(image, &field)
        }
        DegradationKind::FrostedGlassBlur => kinds::frosted_glass(image, s, &mut rng),
        DegradationKind::LowLight => kinds::low_light(image, s, &mut rng),
        DegradationKind::Contrast => kinds::contrast(image, s),
        DegradationKind::Identity => unreachable!(),
    };
    out.clamp01();
    Ok(out)
}

/// Apply a degradation to an image and its instance masks. Masks pass
/// through unchanged for every kind except ElasticTransform, where the same
/// displacement field warps image (bilinear) and masks (nearest).
pub fn apply_with_masks(
    image: &RgbImage,
    masks: &[Vec<bool>],
    spec: &DegradationSpec,
) -> Result<(RgbImage, Vec<Vec<bool>>)> {
    if spec.kind != DegradationKind::ElasticTransform {
        return Ok((apply(image, spec)?, masks.to_vec()));
    }
    validate_input(image)?;
    let mut rng = Rng::new(spec.seed);
    let field = kinds::elastic_field(image.h, image.w, spec.severity, &mut rng);
    let mut out = kinds::elastic_warp_image(image, &field);
    out.clamp01();
    let warped: Vec<Vec<bool>> = masks
        .iter()
        .map(|m| kinds::elastic_warp_mask(m, image.h, image.w, &field))
        .collect();
    Ok((out, warped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(seed: u64, h: usize, w: usize) -> RgbImage {
        let mut rng = Rng::new(seed);
        let mut img = RgbImage::new(h, w);
        for v in &mut img.data {
            *v = rng.uniform();
        }
        img
    }

    #[test]
    fn kinds_enumeration_contract() {
        let ks = kinds_list();
        assert_eq!(ks.len(), 16);
        assert_eq!(*ks.last().unwrap(), DegradationKind::Identity);
        let unique: std::collections::HashSet<_> = ks.iter().collect();
        assert_eq!(unique.len(), 16);
    }

    #[test]
    fn identity_is_bitwise_neutral() {
        let img = test_image(1, 32, 32);
        let out = apply(&img, &DegradationSpec::identity()).unwrap();
        assert!(img.data.iter().zip(&out.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn apply_is_deterministic() {
        let img = test_image(2, 32, 32);
        for kind in kinds_list() {
            let spec = DegradationSpec::new(kind, 2, 777).unwrap();
            let a = apply(&img, &spec).unwrap();
            let b = apply(&img, &spec).unwrap();
            assert!(
                a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{kind:?} not deterministic"
            );
        }
    }

    #[test]
    fn low_light_darkens() {
        let img = test_image(3, 64, 64);
        let spec = DegradationSpec::new(DegradationKind::LowLight, 2, 5).unwrap();
        let out = apply(&img, &spec).unwrap();
        assert!(out.mean_luma() < img.mean_luma());
    }

    #[test]
    fn gaussian_noise_sample_std_matches_sigma() {
        // sigma at severity 2 is 0.08; mid-gray keeps clamping negligible.
        let mut img = RgbImage::new(128, 128);
        img.data.fill(0.5);
        let spec = DegradationSpec::new(DegradationKind::GaussianNoise, 2, 11).unwrap();
        let out = apply(&img, &spec).unwrap();
        let n = out.data.len() as f64;
        let mean_diff: f64 = out.data.iter().zip(&img.data).map(|(a, b)| a - b).sum::<f64>() / n;
        let var: f64 = out
            .data
            .iter()
            .zip(&img.data)
            .map(|(a, b)| {
                let d = a - b - mean_diff;
                d * d
            })
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        assert!((std - 0.08).abs() / 0.08 < 0.15, "std {std}");
    }

    #[test]
    fn non_geometric_kinds_keep_masks() {
        let img = test_image(4, 32, 32);
        let mask: Vec<bool> = (0..32 * 32).map(|i| i % 5 == 0).collect();
        for kind in kinds_list() {
            if kind == DegradationKind::ElasticTransform {
                continue;
            }
            let spec = DegradationSpec::new(kind, 3, 99).unwrap();
            let (_, masks) = apply_with_masks(&img, &[mask.clone()], &spec).unwrap();
            assert_eq!(masks[0], mask, "{kind:?} moved the mask");
        }
    }

    #[test]
    fn elastic_zero_displacement_is_identity() {
        let img = test_image(5, 32, 32);
        let mask: Vec<bool> = (0..32 * 32).map(|i| i % 3 == 0).collect();
        let field = kinds::DisplacementField {
            dx: vec![0.0; 32 * 32],
            dy: vec![0.0; 32 * 32],
        };
        let out = kinds::elastic_warp_image(&img, &field);
        assert!(img.data.iter().zip(&out.data).all(|(a, b)| (a - b).abs() < 1e-12));
        let warped = kinds::elastic_warp_mask(&mask, 32, 32, &field);
        assert_eq!(warped, mask);
    }

    #[test]
    fn elastic_disk_area_change_bounded() {
        // Severity 1 on a centered disk of radius H/4: area changes < 20%.
        let (h, w) = (128usize, 128usize);
        let img = test_image(6, h, w);
        let mut mask = vec![false; h * w];
        let (cy, cx, r) = (64.0, 64.0, 32.0);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                mask[y * w + x] = dy * dy + dx * dx <= r * r;
            }
        }
        let area: usize = mask.iter().filter(|&&b| b).count();
        for seed in [1u64, 2, 3, 4, 5] {
            let spec = DegradationSpec::new(DegradationKind::ElasticTransform, 1, seed).unwrap();
            let (_, masks) = apply_with_masks(&img, &[mask.clone()], &spec).unwrap();
            let new_area: usize = masks[0].iter().filter(|&&b| b).count();
            let rel = (new_area as f64 - area as f64).abs() / area as f64;
            assert!(rel < 0.20, "seed {seed}: area change {rel}");
        }
    }

    #[test]
    fn sample_spec_is_uniform_over_kinds() {
        let mut rng = Rng::new(7);
        let mut counts = std::collections::HashMap::new();
        let n = 16_000;
        for _ in 0..n {
            let spec = sample_spec(&mut rng);
            *counts.entry(spec.kind).or_insert(0usize) += 1;
            assert!((1..=3).contains(&spec.severity));
        }
        for kind in kinds_list() {
            let freq = *counts.get(&kind).unwrap_or(&0) as f64 / n as f64;
            assert!((freq - 1.0 / 16.0).abs() <= 0.01, "{kind:?} freq {freq}");
        }
        // Same seed reproduces the same sequence.
        let mut a = Rng::new(8);
        let mut b = Rng::new(8);
        for _ in 0..64 {
            assert_eq!(sample_spec(&mut a), sample_spec(&mut b));
        }
    }

    #[test]
    fn token_round_trip() {
        let spec = DegradationSpec::new(DegradationKind::Fog, 2, 12345).unwrap();
        assert_eq!(spec.to_token(), "fog:2:12345");
        assert_eq!(DegradationSpec::parse("fog:2:12345").unwrap(), spec);
        assert!(DegradationSpec::parse("fog:9:1").is_err());
        assert!(DegradationSpec::parse("smog:1:1").is_err());
    }

    #[test]
    fn fuzz_outputs_in_range() {
        let mut rng = Rng::new(9);
        for case in 0..250 {
            let img = test_image(1000 + case, 32, 32);
            let spec = sample_spec(&mut rng);
            let out = apply(&img, &spec).unwrap();
            assert!(out.in_range(), "{spec:?} left range");
            assert!(out.data.iter().all(|v| v.is_finite()));
            assert_eq!((out.h, out.w), (img.h, img.w));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let small = RgbImage::new(8, 8);
        assert!(matches!(
            apply(&small, &DegradationSpec::identity()),
            Err(Error::Dimension(_))
        ));
        let mut bad = RgbImage::new(32, 32);
        bad.data[0] = 1.5;
        assert!(matches!(
            apply(&bad, &DegradationSpec::identity()),
            Err(Error::Domain(_))
        ));
    }
}
