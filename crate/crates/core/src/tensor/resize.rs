use super::{ensure_positive, Scalar, Tensor};
use crate::error::{shape_err, Result};

/// Average pooling over non-overlapping `factor × factor` blocks.
pub fn downscale<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    ensure_positive("downscale factor", factor)?;
    let (n, c, h, w) = input.dims4()?;
    if h % factor != 0 || w % factor != 0 {
        return Err(shape_err!(
            "spatial extent {h}×{w} is not divisible by downscale factor {factor}"
        ));
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = T::from_f64(1.0 / (factor * factor) as f64);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (plane_idx, dst) in out.chunks_exact_mut(oh * ow).enumerate() {
        let src = &input.data()[plane_idx * h * w..(plane_idx + 1) * h * w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let out_row = &mut dst[(y / factor) * ow..(y / factor + 1) * ow];
            for (x, &v) in row.iter().enumerate() {
                out_row[x / factor] = out_row[x / factor] + v;
            }
        }
        dst.iter_mut().for_each(|v| *v = *v * norm);
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

/// Spreads each output gradient evenly over its source block.
pub fn downscale_backward<T: Scalar>(grad_output: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    ensure_positive("downscale factor", factor)?;
    let mut grad = upscale(grad_output, factor)?;
    let norm = T::from_f64(1.0 / (factor * factor) as f64);
    grad.data_mut().iter_mut().for_each(|v| *v = *v * norm);
    Ok(grad)
}

/// Nearest-neighbour replication by `factor` along both spatial axes.
pub fn upscale<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    ensure_positive("upscale factor", factor)?;
    let (n, c, h, w) = input.dims4()?;
    if factor == 1 {
        return Ok(input.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (plane_idx, dst) in out.chunks_exact_mut(oh * ow).enumerate() {
        let src = &input.data()[plane_idx * h * w..(plane_idx + 1) * h * w];
        for y in 0..oh {
            let src_row = &src[(y / factor) * w..(y / factor + 1) * w];
            for (x, v) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *v = src_row[x / factor];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

/// Sums the gradient over each replicated block.
pub fn upscale_backward<T: Scalar>(grad_output: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let mut grad = downscale(grad_output, factor)?;
    let block = T::from_f64((factor * factor) as f64);
    grad.data_mut().iter_mut().for_each(|v| *v = *v * block);
    Ok(grad)
}
