//! Dense NCHW tensors and the layer primitives used by the segmentation
//! networks, each with an explicit forward and backward pass.
//!
//! There is no computation graph. Callers keep whatever the backward pass
//! needs (inputs, outputs or caches) and thread gradients through by hand.

mod batch_norm;
mod concat;
mod conv;
mod elementwise;
mod resize;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use crate::error::{invalid, shape_err, Result};

pub use batch_norm::{
    batch_norm, batch_norm_backward, batch_norm_forward, BatchNormCache, BatchNormConfig,
    BatchNormGrads, BatchStats, RunningStats,
};
pub use concat::{concat_channels, split_channels};
pub use conv::{conv2d, conv2d_backward, conv2d_output_extent, Conv2dGrads};
pub use elementwise::{leaky_relu, leaky_relu_backward, sigmoid, sigmoid_backward, LEAKY_SLOPE};
pub use resize::{downscale, downscale_backward, upscale, upscale_backward};

/// Floating point element type. `f64` is used for gradient checks, `f32`
/// everywhere at runtime.
pub trait Scalar: Float + Default + Debug + Display + Send + Sync + Sum + 'static {
    /// `c = a · b (+ c if accumulate)` for row/column strided matrices.
    /// `a` is `m × k`, `b` is `k × n`, `c` is `m × n` and row-major with
    /// row stride `ldc ≥ n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        c: &mut [Self],
        ldc: usize,
        accumulate: bool,
    );

    fn from_f64(v: f64) -> Self;
}

#[allow(clippy::too_many_arguments)]
fn check_gemm_bounds<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_strides: (usize, usize),
    b: &[T],
    b_strides: (usize, usize),
    c: &[T],
    ldc: usize,
) {
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(last(m, k, a_strides) <= a.len(), "gemm: lhs out of bounds");
    assert!(last(k, n, b_strides) <= b.len(), "gemm: rhs out of bounds");
    assert!(ldc >= n, "gemm: output row stride shorter than a row");
    assert!(
        last(m, n, (ldc, 1)) <= c.len(),
        "gemm: output out of bounds"
    );
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                c: &mut [Self],
                ldc: usize,
                accumulate: bool,
            ) {
                check_gemm_bounds(m, k, n, a, a_strides, b, b_strides, c, ldc);
                if m == 0 || n == 0 {
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every index the kernel touches was bounds-checked above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        ldc as isize,
                        1,
                    );
                }
            }

            fn from_f64(v: f64) -> Self {
                v as $t
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Selects batch-norm statistics and whether augmentation noise is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Row-major tensor of order at most 4. Four-dimensional tensors are laid
/// out batch × channel × height × width.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(shape_err!(
            "tensor order must be 1..=4, got {}",
            shape.len()
        ));
    }
    for (axis, &extent) in shape.iter().enumerate() {
        // A zero channel extent is allowed so that "no extra channels" can be
        // concatenated; every other extent must be positive.
        let channel_axis = shape.len() == 4 && axis == 1;
        if extent == 0 && !channel_axis {
            return Err(shape_err!("zero extent on axis {axis} of {shape:?}"));
        }
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        validate_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        validate_shape(shape)?;
        let len = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        validate_shape(shape)?;
        let len = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        })
    }

    /// Internal constructor for shapes already known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(batch, channels, height, width)`; errors unless the tensor is 4D.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err!(
                "expected a 4D NCHW tensor, got {:?}",
                self.shape
            )),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "cannot add {:?} to {:?}",
                other.shape,
                self.shape
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        )
    }

    /// Channel `c` of batch item `n` as a contiguous `h × w` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let (_, channels, h, w) = self.dims4().expect("plane() on a non-4D tensor");
        let start = (n * channels + c) * h * w;
        &self.data[start..start + h * w]
    }
}

pub(crate) fn ensure_positive(name: &str, value: usize) -> Result<()> {
    if value == 0 {
        return Err(invalid!("{name} must be positive"));
    }
    Ok(())
}
