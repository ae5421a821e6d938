//! Training samples cut from preprocessed volumes and their ground truth.

use crate::error::{invalid, shape_err, Result};
use crate::networks::LOOKAHEAD;
use crate::volume::{BinaryMask, Volume};

/// One slice and its mask, both `extent × extent`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitSample {
    pub extent: usize,
    pub image: Vec<f32>,
    pub mask: Vec<f32>,
}

/// An anchor slice followed by [`LOOKAHEAD`] neighbors in propagation
/// order, with masks for all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct PropSample {
    pub extent: usize,
    pub images: Vec<Vec<f32>>,
    pub masks: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Toward the base (increasing slice index).
    Up,
    /// Toward the apex.
    Down,
}

impl Direction {
    /// Slice index `steps` away from `from`, if it is not negative.
    pub fn step(self, from: usize, steps: usize) -> Option<usize> {
        match self {
            Direction::Up => from.checked_add(steps),
            Direction::Down => from.checked_sub(steps),
        }
    }
}

fn check_pair(volume: &Volume, gt: &BinaryMask) -> Result<usize> {
    let [nx, ny, _] = volume.dims();
    if gt.dims() != volume.dims() {
        return Err(shape_err!(
            "ground truth {:?} does not match volume {:?}",
            gt.dims(),
            volume.dims()
        ));
    }
    if nx != ny {
        return Err(shape_err!("slices must be square, got {nx}×{ny}"));
    }
    Ok(nx)
}

fn mask_plane(gt: &BinaryMask, z: usize) -> Vec<f32> {
    gt.slice(z).iter().map(|&v| f32::from(v)).collect()
}

impl InitSample {
    pub fn from_volume(volume: &Volume, gt: &BinaryMask, z: usize) -> Result<Self> {
        let extent = check_pair(volume, gt)?;
        if z >= volume.dims()[2] {
            return Err(invalid!("slice {z} outside volume"));
        }
        Ok(Self {
            extent,
            image: volume.grid.slice(z).to_vec(),
            mask: mask_plane(gt, z),
        })
    }
}

impl PropSample {
    /// Window anchored at `anchor` stepping in `direction`; every slice must
    /// lie in `0..=base_index`.
    pub fn from_volume(
        volume: &Volume,
        gt: &BinaryMask,
        anchor: usize,
        direction: Direction,
    ) -> Result<Self> {
        let extent = check_pair(volume, gt)?;
        let indices: Vec<usize> = (0..=LOOKAHEAD)
            .map(|k| {
                direction
                    .step(anchor, k)
                    .filter(|&z| z <= volume.base_index)
            })
            .collect::<Option<_>>()
            .ok_or_else(|| {
                invalid!(
                    "window at slice {anchor} going {direction:?} leaves slices 0..={}",
                    volume.base_index
                )
            })?;
        Ok(Self {
            extent,
            images: indices
                .iter()
                .map(|&z| volume.grid.slice(z).to_vec())
                .collect(),
            masks: indices.iter().map(|&z| mask_plane(gt, z)).collect(),
        })
    }
}

/// Slices below the base, minus the top and bottom sixth.
pub fn init_samples(volume: &Volume, gt: &BinaryMask) -> Result<Vec<InitSample>> {
    let n = volume.base_index + 1;
    let skip = n / 6;
    (skip..n - skip)
        .map(|z| InitSample::from_volume(volume, gt, z))
        .collect()
}

/// Every complete window below the base, in both directions: upward
/// windows anchored at `0..=base-4`, then downward ones anchored at
/// `4..=base`.
pub fn prop_samples(volume: &Volume, gt: &BinaryMask) -> Result<Vec<PropSample>> {
    let base = volume.base_index;
    if base < LOOKAHEAD {
        return Ok(Vec::new());
    }
    let up = (0..=base - LOOKAHEAD).map(|z| (z, Direction::Up));
    let down = (LOOKAHEAD..=base).map(|z| (z, Direction::Down));
    up.chain(down)
        .map(|(z, d)| PropSample::from_volume(volume, gt, z, d))
        .collect()
}
