//! 3D grids, volumes and masks. Storage is x-fastest, so each z slice is a
//! contiguous `ny × nx` plane.

use crate::error::{invalid, shape_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

/// Per-voxel myocardium indicator, values in {0, 1}.
pub type BinaryMask = Grid3<u8>;
/// Per-voxel myocardium probability in [0, 1].
pub type ProbabilityMask = Grid3<f32>;

impl<T: Copy> Grid3<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(shape_err!("grid dimensions must be positive, got {dims:?}"));
        }
        let len = dims.iter().product::<usize>();
        if data.len() != len {
            return Err(shape_err!(
                "grid {dims:?} needs {len} values, got {}",
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: T) -> Result<Self> {
        Self::new(dims, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn slice(&self, z: usize) -> &[T] {
        let n = self.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut [T] {
        let n = self.slice_len();
        &mut self.data[z * n..(z + 1) * n]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }
}

/// Half-open voxel box `[min, max)` on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl CropBox {
    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.max[a] - self.min[a])
    }

    fn validate(&self, dims: [usize; 3]) -> Result<()> {
        for a in 0..3 {
            if self.min[a] >= self.max[a] || self.max[a] > dims[a] {
                return Err(invalid!("crop box {self:?} does not fit volume {dims:?}"));
            }
        }
        Ok(())
    }
}

/// Scalar image volume with physical voxel spacing and short-axis metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid3<f32>,
    /// Voxel spacing in mm along x, y, z.
    pub spacing: [f32; 3],
    /// Slice index of the ventricular base; slices `0..=base_index` lie below it.
    pub base_index: usize,
    pub crop_box: Option<CropBox>,
}

impl Volume {
    pub fn new(
        grid: Grid3<f32>,
        spacing: [f32; 3],
        base_index: usize,
        crop_box: Option<CropBox>,
    ) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(invalid!("voxel spacing must be positive, got {spacing:?}"));
        }
        let dims = grid.dims();
        if base_index >= dims[2] {
            return Err(invalid!(
                "base index {base_index} outside 0..{} slices",
                dims[2]
            ));
        }
        if let Some(b) = &crop_box {
            b.validate(dims)?;
        }
        Ok(Self {
            grid,
            spacing,
            base_index,
            crop_box,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims()
    }
}
