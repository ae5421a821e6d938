use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

/// Negative-part coefficient of the leaky ReLU in every convolution group.
pub const LEAKY_SLOPE: f64 = 0.25;

pub fn leaky_relu<T: Scalar>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    input.map(|x| if x >= T::zero() { x } else { slope * x })
}

/// Gradient with respect to the leaky ReLU input. The derivative at exactly
/// zero is taken from the non-negative branch.
pub fn leaky_relu_backward<T: Scalar>(
    input: &Tensor<T>,
    grad_output: &Tensor<T>,
    slope: T,
) -> Result<Tensor<T>> {
    if input.shape() != grad_output.shape() {
        return Err(shape_err!(
            "leaky_relu gradient {:?} does not match input {:?}",
            grad_output.shape(),
            input.shape()
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_output.data())
        .map(|(&x, &g)| if x >= T::zero() { g } else { slope * g })
        .collect();
    Ok(Tensor::from_parts(input.shape().to_vec(), data))
}

/// Logistic function confined to the open interval (0, 1): in single
/// precision the raw value rounds to exactly 1 above x ≈ 17.
#[inline]
fn logistic<T: Scalar>(x: T) -> T {
    // Split on sign so exp never overflows.
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let below_one = T::one() - T::epsilon() / T::from_f64(2.0);
    y.max(T::min_positive_value()).min(below_one)
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(logistic)
}

/// Gradient with respect to the sigmoid input, from its output `y`.
pub fn sigmoid_backward<T: Scalar>(
    output: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<Tensor<T>> {
    if output.shape() != grad_output.shape() {
        return Err(shape_err!(
            "sigmoid gradient {:?} does not match output {:?}",
            grad_output.shape(),
            output.shape()
        ));
    }
    let data = output
        .data()
        .iter()
        .zip(grad_output.data())
        .map(|(&y, &g)| g * y * (T::one() - y))
        .collect();
    Ok(Tensor::from_parts(output.shape().to_vec(), data))
}
