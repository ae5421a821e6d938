//! Joint rotation of slices and masks, plus intensity noise on slices.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    /// Standard deviation of additive noise, in normalized intensity units.
    pub gaussian_sigma: f64,
    /// Fraction of pixels per slice forced to the slice minimum or maximum.
    pub salt_pepper_fraction: f64,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 20.0,
            gaussian_sigma: 0.03,
            salt_pepper_fraction: 0.01,
            enabled: true,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg <= 180.0) {
            return Err(invalid!("max_rotation_deg must lie in [0, 180]"));
        }
        if !(self.gaussian_sigma >= 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(invalid!("gaussian_sigma must be non-negative"));
        }
        if !(0.0..=0.2).contains(&self.salt_pepper_fraction) {
            return Err(invalid!("salt_pepper_fraction must lie in [0, 0.2]"));
        }
        Ok(())
    }
}

/// Maps output pixel `(x, y)` back to its source position under a rotation
/// by `angle` about the plane center.
fn source(extent: usize, angle: f64, x: usize, y: usize) -> (f64, f64) {
    let c = (extent as f64 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let (dx, dy) = (x as f64 - c, y as f64 - c);
    (cos * dx + sin * dy + c, -sin * dx + cos * dy + c)
}

/// Bilinear rotation; samples outside the plane repeat the nearest edge.
pub fn rotate_image(plane: &[f32], extent: usize, angle: f64) -> Vec<f32> {
    if angle == 0.0 {
        return plane.to_vec();
    }
    let max = (extent - 1) as f64;
    let mut out = Vec::with_capacity(plane.len());
    for y in 0..extent {
        for x in 0..extent {
            let (sx, sy) = source(extent, angle, x, y);
            let (sx, sy) = (sx.clamp(0.0, max), sy.clamp(0.0, max));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(extent - 1), (y0 + 1).min(extent - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let at = |xx: usize, yy: usize| f64::from(plane[yy * extent + xx]);
            let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
            let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    out
}

/// Nearest-neighbor rotation so mask values stay in {0, 1}; samples outside
/// the plane are background.
pub fn rotate_mask(plane: &[f32], extent: usize, angle: f64) -> Vec<f32> {
    if angle == 0.0 {
        return plane.to_vec();
    }
    let max = (extent - 1) as f64;
    let mut out = Vec::with_capacity(plane.len());
    for y in 0..extent {
        for x in 0..extent {
            let (sx, sy) = source(extent, angle, x, y);
            let (sx, sy) = (sx.round(), sy.round());
            out.push(if (0.0..=max).contains(&sx) && (0.0..=max).contains(&sy) {
                plane[sy as usize * extent + sx as usize]
            } else {
                0.0
            });
        }
    }
    out
}

/// Augments one training sample in place: every slice and mask is rotated
/// by the same random angle, then slices alone receive Gaussian and
/// salt-and-pepper noise. Returns the angle in radians.
pub fn augment_sample<R: Rng>(
    images: &mut [Vec<f32>],
    masks: &mut [Vec<f32>],
    extent: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<f64> {
    cfg.validate()?;
    let plane = extent * extent;
    if images.iter().chain(masks.iter()).any(|p| p.len() != plane) {
        return Err(invalid!("augmentation expects {extent}×{extent} planes"));
    }
    if !cfg.enabled {
        return Ok(0.0);
    }
    let angle = if cfg.max_rotation_deg > 0.0 {
        let limit = cfg.max_rotation_deg.to_radians();
        rng.random_range(-limit..=limit)
    } else {
        0.0
    };
    for img in images.iter_mut() {
        *img = rotate_image(img, extent, angle);
    }
    for m in masks.iter_mut() {
        *m = rotate_mask(m, extent, angle);
    }

    let noise = Normal::new(0.0, cfg.gaussian_sigma).map_err(|e| invalid!("{e}"))?;
    let flips = (cfg.salt_pepper_fraction * plane as f64).round() as usize;
    for img in images.iter_mut() {
        let (lo, hi) = img
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if cfg.gaussian_sigma > 0.0 {
            for v in img.iter_mut() {
                *v += noise.sample(rng) as f32;
            }
        }
        if flips > 0 {
            for i in sample(rng, plane, flips) {
                img[i] = if rng.random::<bool>() { hi } else { lo };
            }
        }
    }
    Ok(angle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const N: usize = 24;

    fn square_mask() -> Vec<f32> {
        (0..N * N)
            .map(|i| ((6..14).contains(&(i % N)) && (4..18).contains(&(i / N))) as u8 as f32)
            .collect()
    }

    fn gradient_image() -> Vec<f32> {
        (0..N * N)
            .map(|i| (i % N) as f32 / N as f32 + (i / N) as f32 * 0.01)
            .collect()
    }

    #[test]
    fn zero_magnitudes_are_identity() {
        let cfg = AugmentConfig {
            max_rotation_deg: 0.0,
            gaussian_sigma: 0.0,
            salt_pepper_fraction: 0.0,
            enabled: true,
        };
        let mut images = vec![gradient_image(); 2];
        let mut masks = vec![square_mask(); 2];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        augment_sample(&mut images, &mut masks, N, &cfg, &mut rng).unwrap();
        assert_eq!(images, vec![gradient_image(); 2]);
        assert_eq!(masks, vec![square_mask(); 2]);
    }

    #[test]
    fn disabled_is_identity() {
        let mut images = vec![gradient_image()];
        let mut masks = vec![square_mask()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        augment_sample(
            &mut images,
            &mut masks,
            N,
            &AugmentConfig::disabled(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(images[0], gradient_image());
        assert_eq!(masks[0], square_mask());
    }

    #[test]
    fn fixed_seed_repeats() {
        let run = || {
            let mut images = vec![gradient_image(); 3];
            let mut masks = vec![square_mask(); 3];
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            augment_sample(
                &mut images,
                &mut masks,
                N,
                &AugmentConfig::default(),
                &mut rng,
            )
            .unwrap();
            (images, masks)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn masks_share_the_drawn_rotation() {
        let mut images = vec![gradient_image(); 5];
        let mut masks = vec![square_mask(); 5];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AugmentConfig {
            max_rotation_deg: 30.0,
            ..AugmentConfig::default()
        };
        let angle = augment_sample(&mut images, &mut masks, N, &cfg, &mut rng).unwrap();
        assert!(angle != 0.0 && angle.abs() <= 30f64.to_radians());
        let alone = rotate_mask(&square_mask(), N, angle);
        for m in &masks {
            assert_eq!(m, &alone);
        }
        // Masks never receive intensity noise.
        assert!(masks.iter().flatten().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn salt_and_pepper_count() {
        let cfg = AugmentConfig {
            max_rotation_deg: 0.0,
            gaussian_sigma: 0.0,
            salt_pepper_fraction: 0.1,
            enabled: true,
        };
        let mut images = vec![vec![0.5f32; N * N]];
        images[0][0] = 0.0;
        images[0][1] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        augment_sample(&mut images, &mut [], N, &cfg, &mut rng).unwrap();
        let changed = images[0][2..].iter().filter(|&&v| v != 0.5).count();
        let expected = (0.1 * (N * N) as f64).round() as usize;
        assert!(changed <= expected && changed + 2 >= expected);
        assert!(images[0].iter().all(|&v| v == 0.0 || v == 0.5 || v == 1.0));
    }

    #[test]
    fn quarter_turn_matches_index_permutation() {
        let m = square_mask();
        let r = rotate_mask(&m, N, std::f64::consts::FRAC_PI_2);
        let c = N - 1;
        for y in 0..N {
            for x in 0..N {
                // Output (x, y) samples source (y, c - x).
                assert_eq!(r[y * N + x], m[(c - x) * N + y]);
            }
        }
        assert!(AugmentConfig {
            salt_pepper_fraction: 0.3,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn rotated_masks_stay_binary(seed in any::<u64>(), angle in -3.2f64..3.2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m: Vec<f32> = (0..N * N).map(|_| rng.random::<bool>() as u8 as f32).collect();
            let r = rotate_mask(&m, N, angle);
            prop_assert!(r.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
