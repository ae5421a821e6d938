//! Dice overlap, per slice and pooled over a stack.

use std::io::Write;

use crate::error::{shape_err, Result};
use crate::volume::BinaryMask;

fn overlap_counts(a: &[u8], b: &[u8]) -> (usize, usize, usize) {
    a.iter()
        .zip(b)
        .fold((0, 0, 0), |(inter, na, nb), (&x, &y)| {
            let (x, y) = (x != 0, y != 0);
            (inter + (x && y) as usize, na + x as usize, nb + y as usize)
        })
}

fn dice_from_counts(inter: usize, na: usize, nb: usize) -> f64 {
    if na + nb == 0 {
        // Both empty: perfect agreement on absence.
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// `2|a ∩ b| / (|a| + |b|)` over two equally sized binary planes; 1 when both
/// are empty.
pub fn dice_2d(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err!("dice over {} and {} pixels", a.len(), b.len()));
    }
    let (i, na, nb) = overlap_counts(a, b);
    Ok(dice_from_counts(i, na, nb))
}

/// Dice pooled over every voxel of the stack (not a mean of slice scores).
pub fn dice_3d(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(shape_err!(
            "dice over stacks {:?} and {:?}",
            a.dims(),
            b.dims()
        ));
    }
    let (i, na, nb) = overlap_counts(a.data(), b.data());
    Ok(dice_from_counts(i, na, nb))
}

/// Slice-wise Dice series with its largest jump between adjacent slices.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceProfile {
    pub per_slice: Vec<f64>,
    pub smoothness: f64,
}

impl DiceProfile {
    /// `slice_index,dice` rows with a header line.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["slice_index", "dice"]).map_err(csv_err)?;
        for (z, d) in self.per_slice.iter().enumerate() {
            w.write_record([z.to_string(), format!("{d:.6}")])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean Dice over slices `range`.
    pub fn mean_over(&self, range: std::ops::Range<usize>) -> f64 {
        let values = &self.per_slice[range];
        values.iter().sum::<f64>() / values.len().max(1) as f64
    }
}

pub(crate) fn csv_err(e: csv::Error) -> crate::error::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io.into(),
        other => crate::error::Error::Format(format!("csv: {other:?}")),
    }
}

pub fn slicewise_dice_profile(pred: &BinaryMask, gt: &BinaryMask) -> Result<DiceProfile> {
    if pred.dims() != gt.dims() {
        return Err(shape_err!(
            "profile over stacks {:?} and {:?}",
            pred.dims(),
            gt.dims()
        ));
    }
    let per_slice = (0..pred.dims()[2])
        .map(|z| dice_2d(pred.slice(z), gt.slice(z)))
        .collect::<Result<Vec<_>>>()?;
    let smoothness = per_slice
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .fold(0.0, f64::max);
    Ok(DiceProfile {
        per_slice,
        smoothness,
    })
}
