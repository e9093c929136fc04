//! Prompt sampling from ground-truth masks: random foreground points or
//! the tight bounding box.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// A sparse prompt conditioning which object gets segmented. Point
/// coordinates are (x, y) with implicit foreground label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prompt {
    Points(Vec<(usize, usize)>),
    Box {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
    },
}

impl Prompt {
    pub fn token_count(&self) -> usize {
        match self {
            Prompt::Points(pts) => pts.len(),
            Prompt::Box { .. } => 2,
        }
    }
}

fn foreground_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &b)| if b { Some(i) } else { None })
        .collect()
}

/// Sample n distinct foreground pixels uniformly (with replacement only if
/// the mask has fewer than n pixels).
pub fn point_prompt(mask: &[bool], w: usize, n: usize, rng: &mut Rng) -> Result<Prompt> {
    if n == 0 {
        return Err(Error::contract("point_prompt: n must be >= 1"));
    }
    let fg = foreground_indices(mask);
    if fg.is_empty() {
        return Err(Error::domain("point_prompt: empty mask"));
    }
    let mut picks: Vec<usize> = Vec::with_capacity(n);
    if fg.len() < n {
        for _ in 0..n {
            picks.push(fg[rng.below(fg.len() as u64) as usize]);
        }
    } else {
        // Partial Fisher-Yates over a copy of the index list.
        let mut pool = fg;
        for i in 0..n {
            let j = i + rng.below((pool.len() - i) as u64) as usize;
            pool.swap(i, j);
            picks.push(pool[i]);
        }
    }
    Ok(Prompt::Points(picks.into_iter().map(|i| (i % w, i / w)).collect()))
}

/// Tight axis-aligned bounding box of the foreground.
pub fn box_prompt(mask: &[bool], w: usize) -> Result<Prompt> {
    let mut found = false;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for (i, &b) in mask.iter().enumerate() {
        if b {
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            found = true;
        }
    }
    if !found {
        return Err(Error::domain("box_prompt: empty mask"));
    }
    Ok(Prompt::Box { x0, y0, x1, y1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_lands_in_foreground() {
        let mut mask = vec![false; 16];
        mask[5] = true;
        let mut rng = Rng::new(1);
        let p = point_prompt(&mask, 4, 1, &mut rng).unwrap();
        assert_eq!(p, Prompt::Points(vec![(1, 1)]));
    }

    #[test]
    fn five_points_on_32_pixel_mask_distinct_foreground() {
        let mut mask = vec![false; 100];
        for i in 0..32 {
            mask[i * 3] = true;
        }
        let mut rng = Rng::new(2);
        if let Prompt::Points(pts) = point_prompt(&mask, 10, 5, &mut rng).unwrap() {
            assert_eq!(pts.len(), 5);
            let set: std::collections::HashSet<_> = pts.iter().collect();
            assert_eq!(set.len(), 5, "points not distinct");
            for &(x, y) in &pts {
                assert!(mask[y * 10 + x]);
            }
        } else {
            panic!("expected points");
        }
    }

    #[test]
    fn two_pixel_mask_sampling_is_uniform() {
        let mut mask = vec![false; 16];
        mask[3] = true;
        mask[12] = true;
        let mut rng = Rng::new(3);
        let mut count3 = 0usize;
        let n = 10_000;
        for _ in 0..n {
            if let Prompt::Points(pts) = point_prompt(&mask, 4, 1, &mut rng).unwrap() {
                if pts[0] == (3, 0) {
                    count3 += 1;
                }
            }
        }
        let freq = count3 as f64 / n as f64;
        assert!((freq - 0.5).abs() <= 0.02, "freq {freq}");
    }

    #[test]
    fn replacement_kicks_in_when_mask_smaller_than_n() {
        let mut mask = vec![false; 9];
        mask[4] = true;
        let mut rng = Rng::new(4);
        if let Prompt::Points(pts) = point_prompt(&mask, 3, 3, &mut rng).unwrap() {
            assert_eq!(pts, vec![(1, 1); 3]);
        } else {
            panic!();
        }
    }

    #[test]
    fn box_full_image_and_single_pixel() {
        let full = vec![true; 6 * 8];
        assert_eq!(
            box_prompt(&full, 8).unwrap(),
            Prompt::Box { x0: 0, y0: 0, x1: 7, y1: 5 }
        );
        let mut single = vec![false; 12 * 10];
        single[9 * 10 + 5] = true;
        assert_eq!(
            box_prompt(&single, 10).unwrap(),
            Prompt::Box { x0: 5, y0: 9, x1: 5, y1: 9 }
        );
    }

    #[test]
    fn box_on_l_shape_matches_scan_oracle() {
        // L-shape in a 7x7 grid.
        let w = 7;
        let mut mask = vec![false; 49];
        for y in 1..6 {
            mask[y * w + 2] = true;
        }
        for x in 2..5 {
            mask[5 * w + x] = true;
        }
        // Brute-force min/max scan.
        let (mut sx0, mut sy0, mut sx1, mut sy1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..7 {
            for x in 0..7 {
                if mask[y * w + x] {
                    sx0 = sx0.min(x);
                    sy0 = sy0.min(y);
                    sx1 = sx1.max(x);
                    sy1 = sy1.max(y);
                }
            }
        }
        assert_eq!(
            box_prompt(&mask, w).unwrap(),
            Prompt::Box { x0: sx0, y0: sy0, x1: sx1, y1: sy1 }
        );
    }

    #[test]
    fn empty_mask_is_domain_error() {
        let mask = vec![false; 16];
        let mut rng = Rng::new(5);
        assert!(matches!(point_prompt(&mask, 4, 1, &mut rng), Err(Error::Domain(_))));
        assert!(matches!(box_prompt(&mask, 4), Err(Error::Domain(_))));
    }

    #[test]
    fn box_tightness_property() {
        // Shrinking any side of the box by a pixel excludes some foreground.
        let mut rng = Rng::new(6);
        for _ in 0..50 {
            let w = 12;
            let mut mask = vec![false; w * w];
            for _ in 0..(3 + rng.below(20)) {
                let i = rng.below((w * w) as u64) as usize;
                mask[i] = true;
            }
            if mask.iter().all(|&b| !b) {
                continue;
            }
            if let Prompt::Box { x0, y0, x1, y1 } = box_prompt(&mask, w).unwrap() {
                let col_has = |x: usize| (y0..=y1).any(|y| mask[y * w + x]);
                let row_has = |y: usize| (x0..=x1).any(|x| mask[y * w + x]);
                assert!(col_has(x0) && col_has(x1) && row_has(y0) && row_has(y1));
            }
        }
    }
}
