//! Crop, isotropic resampling and intensity normalization.

use crate::error::{invalid, Result};
use crate::volume::{BinaryMask, Grid3, Volume};

pub const TARGET_SPACING_MM: f32 = 1.25;
pub const IN_PLANE_EXTENT: usize = 128;

/// For every output index on one axis, the source coordinate in input voxel
/// units, or `None` where the output is padding.
fn axis_samples(
    crop_start: usize,
    crop_len: usize,
    spacing: f32,
    target: f32,
    fixed_extent: Option<usize>,
) -> Vec<Option<f64>> {
    let step = f64::from(target) / f64::from(spacing);
    // Tolerance keeps exact multiples (e.g. 2.5 / 1.25) from losing a sample.
    let natural = (((crop_len - 1) as f64 / step) + 1e-9).floor() as usize + 1;
    let extent = fixed_extent.unwrap_or(natural);
    let offset = (natural as isize - extent as isize).div_euclid(2);
    let last = (crop_len - 1) as f64;
    (0..extent)
        .map(|i| {
            let j = i as isize + offset;
            (0..natural as isize)
                .contains(&j)
                .then(|| crop_start as f64 + (j as f64 * step).min(last))
        })
        .collect()
}

struct Resampling {
    axes: [Vec<Option<f64>>; 3],
    base_index: usize,
}

impl Resampling {
    fn new(v: &Volume, target: f32, in_plane: usize) -> Result<Self> {
        if !(target > 0.0 && target.is_finite()) {
            return Err(invalid!("target spacing must be positive, got {target}"));
        }
        let dims = v.dims();
        let (start, len) = match v.crop_box {
            Some(b) => (b.min, b.extent()),
            None => ([0; 3], dims),
        };
        if len.contains(&1) {
            return Err(invalid!(
                "cannot resample a volume with a single-voxel axis (extent {len:?})"
            ));
        }
        let axes = [0, 1, 2].map(|a| {
            let fixed = (a < 2).then_some(in_plane);
            axis_samples(start[a], len[a], v.spacing[a], target, fixed)
        });
        let step = f64::from(target) / f64::from(v.spacing[2]);
        let rel = v.base_index.saturating_sub(start[2]) as f64;
        let base_index = ((rel / step).round() as usize).min(axes[2].len() - 1);
        Ok(Self { axes, base_index })
    }

    fn dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.axes[a].len())
    }
}

/// Linear interpolation weights `(i0, i1, frac)` for a coordinate on an
/// axis of `n ≥ 2` samples.
fn lerp_at(c: f64, n: usize) -> (usize, usize, f64) {
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f64)
}

/// Trilinear resampling of the crop box onto a `target_mm` isotropic grid,
/// then center padding (with the volume minimum) or cropping to
/// `in_plane × in_plane`.
pub fn resample_isotropic_to(v: &Volume, target_mm: f32, in_plane: usize) -> Result<Volume> {
    let r = Resampling::new(v, target_mm, in_plane)?;
    let [nx, ny, nz] = v.dims();
    let src = v.grid.data();
    let pad = src.iter().copied().fold(f32::INFINITY, f32::min);
    let at = |x: usize, y: usize, z: usize| f64::from(src[x + nx * (y + ny * z)]);
    let mut out = Vec::with_capacity(r.dims().iter().product());
    for cz in &r.axes[2] {
        for cy in &r.axes[1] {
            for cx in &r.axes[0] {
                let (Some(cx), Some(cy), Some(cz)) = (cx, cy, cz) else {
                    out.push(pad);
                    continue;
                };
                let (x0, x1, fx) = lerp_at(*cx, nx);
                let (y0, y1, fy) = lerp_at(*cy, ny);
                let (z0, z1, fz) = lerp_at(*cz, nz);
                let plane = |z: usize| {
                    let a = at(x0, y0, z) * (1.0 - fx) + at(x1, y0, z) * fx;
                    let b = at(x0, y1, z) * (1.0 - fx) + at(x1, y1, z) * fx;
                    a * (1.0 - fy) + b * fy
                };
                out.push((plane(z0) * (1.0 - fz) + plane(z1) * fz) as f32);
            }
        }
    }
    let s = target_mm;
    Volume::new(Grid3::new(r.dims(), out)?, [s, s, s], r.base_index, None)
}

/// [`resample_isotropic_to`] at the standard 128 in-plane extent.
pub fn resample_isotropic(v: &Volume, target_mm: f32) -> Result<Volume> {
    resample_isotropic_to(v, target_mm, IN_PLANE_EXTENT)
}

/// Resamples a mask defined on `v`'s grid exactly as [`resample_isotropic_to`]
/// resamples `v`, using nearest-neighbor lookup so values stay binary.
pub fn resample_mask_like(
    v: &Volume,
    mask: &BinaryMask,
    target_mm: f32,
    in_plane: usize,
) -> Result<BinaryMask> {
    if mask.dims() != v.dims() {
        return Err(invalid!(
            "mask {:?} does not match volume {:?}",
            mask.dims(),
            v.dims()
        ));
    }
    let r = Resampling::new(v, target_mm, in_plane)?;
    let mut out = Vec::with_capacity(r.dims().iter().product());
    for cz in &r.axes[2] {
        for cy in &r.axes[1] {
            for cx in &r.axes[0] {
                out.push(match (cx, cy, cz) {
                    (Some(x), Some(y), Some(z)) => {
                        mask.get(x.round() as usize, y.round() as usize, z.round() as usize)
                    }
                    _ => 0,
                });
            }
        }
    }
    BinaryMask::new(r.dims(), out)
}

/// Percentile of sorted data with linear interpolation between ranks.
fn percentile(sorted: &[f32], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let f = rank - lo as f64;
    f64::from(sorted[lo]) * (1.0 - f) + f64::from(sorted[hi]) * f
}

/// Maps the 1st and 99th intensity percentiles to 0 and 1, clamping outside.
/// A constant volume maps to zeros with a warning.
pub fn normalize_intensity(v: &Volume) -> Volume {
    let mut sorted = v.grid.data().to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    let (mut lo, mut hi) = (percentile(&sorted, 0.01), percentile(&sorted, 0.99));
    if hi <= lo {
        // Fewer than 2% of voxels differ from the rest; fall back to the range.
        lo = f64::from(sorted[0]);
        hi = f64::from(sorted[sorted.len() - 1]);
    }
    let mut out = v.clone();
    if hi <= lo {
        log::warn!("constant-intensity volume; normalized to zeros");
        out.grid.data_mut().fill(0.0);
        return out;
    }
    let scale = 1.0 / (hi - lo);
    for x in out.grid.data_mut() {
        *x = ((f64::from(*x) - lo) * scale).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Resampling to the network grid followed by intensity normalization.
pub fn preprocess(v: &Volume) -> Result<Volume> {
    Ok(normalize_intensity(&resample_isotropic(
        v,
        TARGET_SPACING_MM,
    )?))
}

/// Applies [`preprocess`] to a volume and its ground-truth mask alike.
pub fn preprocess_pair(v: &Volume, gt: &BinaryMask) -> Result<(Volume, BinaryMask)> {
    let mask = resample_mask_like(v, gt, TARGET_SPACING_MM, IN_PLANE_EXTENT)?;
    Ok((preprocess(v)?, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::CropBox;
    use proptest::prelude::*;

    fn volume(
        dims: [usize; 3],
        spacing: [f32; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Volume {
        let mut data = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume::new(Grid3::new(dims, data).unwrap(), spacing, dims[2] - 1, None).unwrap()
    }

    #[test]
    fn isotropic_128_is_identity() {
        let v = volume([128, 128, 5], [1.25; 3], |x, y, z| {
            (x * 3 + y * 7 + z * 11) as f32 % 17.0
        });
        let r = resample_isotropic(&v, 1.25).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn midpoint_interpolation_along_z() {
        let v = volume([128, 128, 2], [1.25, 1.25, 2.5], |_, _, z| 2.0 * z as f32);
        let r = resample_isotropic(&v, 1.25).unwrap();
        assert_eq!(r.dims(), [128, 128, 3]);
        let column: Vec<f32> = (0..3).map(|z| r.grid.get(64, 64, z)).collect();
        assert_eq!(column, vec![0.0, 1.0, 2.0]);
        assert_eq!(r.base_index, 2);
    }

    #[test]
    fn constants_survive_resampling() {
        let v = volume([40, 50, 7], [2.0, 1.5, 3.3], |_, _, _| 4.25);
        let r = resample_isotropic(&v, 1.25).unwrap();
        assert!(r.grid.data().iter().all(|&x| (x - 4.25).abs() < 1e-6));
        assert_eq!(r.spacing, [1.25; 3]);
        assert_eq!(r.dims()[0..2], [128, 128]);
    }

    #[test]
    fn padding_centers_and_uses_minimum() {
        let v = volume(
            [100, 100, 2],
            [1.25; 3],
            |x, _, _| if x == 0 { -1.0 } else { 5.0 },
        );
        let r = resample_isotropic(&v, 1.25).unwrap();
        // 28 pad columns: 14 left, 14 right.
        assert_eq!(r.grid.get(13, 50, 0), -1.0);
        assert_eq!(r.grid.get(14, 50, 0), -1.0);
        assert_eq!(r.grid.get(15, 50, 0), 5.0);
        assert_eq!(r.grid.get(113, 50, 0), 5.0);
        assert_eq!(r.grid.get(114, 50, 0), -1.0);
    }

    #[test]
    fn crop_box_and_base_remap() {
        let mut v = volume([200, 200, 30], [1.25, 1.25, 2.5], |x, _, _| x as f32);
        v.crop_box = Some(CropBox {
            min: [50, 40, 10],
            max: [178, 168, 30],
        });
        v.base_index = 20;
        let r = resample_isotropic(&v, 1.25).unwrap();
        assert_eq!(r.dims(), [128, 128, 39]);
        assert_eq!(r.grid.get(0, 0, 0), 50.0);
        assert_eq!(r.base_index, 20);
        assert!(r.crop_box.is_none());
    }

    #[test]
    fn single_voxel_axis_is_rejected() {
        let v = volume([10, 10, 1], [1.0; 3], |_, _, _| 0.0);
        assert!(resample_isotropic(&v, 1.25).is_err());
    }

    #[test]
    fn mask_resampling_stays_binary_and_aligned() {
        let v = volume([64, 64, 4], [2.5; 3], |x, _, _| x as f32);
        let m = v.grid.map(|x| (x >= 32.0) as u8);
        let rm = resample_mask_like(&v, &m, 1.25, 128).unwrap();
        let rv = resample_isotropic(&v, 1.25).unwrap();
        assert!(rm.is_binary());
        assert_eq!(rm.dims(), rv.dims());
        for x in 0..128 {
            let value = rv.grid.get(x, 60, 2);
            if value > 33.0 {
                assert_eq!(rm.get(x, 60, 2), 1);
            }
            if (1.0..31.0).contains(&value) {
                assert_eq!(rm.get(x, 60, 2), 0);
            }
        }
    }

    #[test]
    fn percentile_normalization() {
        let v = volume([101, 1, 2], [1.0; 3], |x, _, _| x as f32);
        let n = normalize_intensity(&v);
        assert_eq!(n.grid.get(0, 0, 0), 0.0);
        assert_eq!(n.grid.get(100, 0, 0), 1.0);
        assert!((n.grid.get(50, 0, 0) - 0.5).abs() < 1e-6);
        assert!((n.grid.get(1, 0, 0) - 0.0).abs() < 1e-6);
        assert!((n.grid.get(99, 0, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_volume_normalizes_to_zero() {
        let v = volume([8, 8, 2], [1.0; 3], |_, _, _| 3.0);
        assert!(normalize_intensity(&v)
            .grid
            .data()
            .iter()
            .all(|&x| x == 0.0));
    }

    proptest! {
        #[test]
        fn normalization_is_nearly_idempotent(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let v = volume([30, 30, 3], [1.0; 3], |_, _, _| rng.random_range(-5.0f32..20.0));
            let once = normalize_intensity(&v);
            let twice = normalize_intensity(&once);
            prop_assert!(once.grid.data().iter().all(|x| (0.0..=1.0).contains(x)));
            for (a, b) in once.grid.data().iter().zip(twice.grid.data()) {
                prop_assert!((a - b).abs() < 1e-2);
            }
        }
    }
}
