use std::ops::Range;

use super::{ensure_positive, Scalar, Tensor};
use crate::error::{shape_err, Result};

/// Gradients of a conv2d call with respect to its input, weights and bias.
#[derive(Debug, Clone)]
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

/// `floor((extent + 2·padding − kernel) / stride) + 1`, or an error when the
/// kernel does not fit.
pub fn conv2d_output_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    ensure_positive("stride", stride)?;
    let padded = extent + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(shape_err!(
            "kernel extent {kernel} does not fit input extent {extent} with padding {padding}"
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn new<T: Scalar>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (batch, in_c, in_h, in_w) = input.dims4()?;
        let (out_c, w_in_c, k_h, k_w) = weight.dims4()?;
        if w_in_c != in_c {
            return Err(shape_err!(
                "conv2d weights expect {w_in_c} input channels, input {:?} has {in_c}",
                input.shape()
            ));
        }
        if out_c == 0 {
            return Err(shape_err!("conv2d needs at least one output channel"));
        }
        let out_h = conv2d_output_extent(in_h, k_h, stride, padding)?;
        let out_w = conv2d_output_extent(in_w, k_w, stride, padding)?;
        Ok(Self {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            k_h,
            k_w,
            out_h,
            out_w,
            stride,
            padding,
        })
    }

    /// Rows of the lowered patch matrix.
    fn patch_len(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1×1, stride 1, unpadded conv reads the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Input coordinate hit by output coordinate `o` at kernel tap `k`.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
    #[inline]
    fn valid_columns(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        // ox·s + kx − p ≤ in_w − 1
        let hi = if self.in_w + p > kx {
            ((self.in_w + p - kx - 1) / s + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Lowers output rows `rows` of one batch item into a
/// `(in_c·k_h·k_w) × (rows.len()·out_w)` matrix.
fn im2col<T: Scalar>(g: &Geometry, image: &[T], rows: Range<usize>, cols: &mut [T]) {
    let pixels = rows.len() * g.out_w;
    for c in 0..g.in_c {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                let (lo, hi) = g.valid_columns(kx);
                for (i, oy) in rows.clone().enumerate() {
                    let line = &mut dst[i * g.out_w..(i + 1) * g.out_w];
                    let Some(iy) = g.source(oy, ky, g.in_h) else {
                        line.fill(T::zero());
                        continue;
                    };
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let first = lo * g.stride + kx - g.padding;
                        let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, &x) in line[lo..hi]
                                .iter_mut()
                                .zip(src[first..].iter().step_by(g.stride))
                            {
                                *v = x;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds the patch-matrix gradient of output rows `rows` back onto
/// one batch item.
fn col2im<T: Scalar>(g: &Geometry, cols: &[T], rows: Range<usize>, image: &mut [T]) {
    let pixels = rows.len() * g.out_w;
    for c in 0..g.in_c {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let src = &cols[row * pixels..(row + 1) * pixels];
                let (lo, hi) = g.valid_columns(kx);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.padding;
                for (i, oy) in rows.clone().enumerate() {
                    let Some(iy) = g.source(oy, ky, g.in_h) else {
                        continue;
                    };
                    let line = &src[i * g.out_w + lo..i * g.out_w + hi];
                    let dst = &mut plane[iy * g.in_w + first..(iy + 1) * g.in_w];
                    if g.stride == 1 {
                        for (d, &v) in dst.iter_mut().zip(line) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in dst.iter_mut().step_by(g.stride).zip(line) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Output-row blocks whose lowered patches fit in roughly a megabyte, so
/// each block is consumed by the GEMM while still in cache.
fn row_blocks(g: &Geometry) -> impl Iterator<Item = Range<usize>> {
    const BLOCK_ELEMENTS: usize = 1 << 18;
    let per_row = (g.patch_len() * g.out_w).max(1);
    let step = if g.is_pointwise() {
        g.out_h
    } else {
        (BLOCK_ELEMENTS / per_row).clamp(1, g.out_h)
    };
    let out_h = g.out_h;
    (0..out_h)
        .step_by(step)
        .map(move |r| r..(r + step).min(out_h))
}

/// 2D cross-correlation with zero padding. `weight` is
/// `out_c × in_c × k_h × k_w`; `bias`, when given, has `out_c` entries.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input, weight, stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.out_c {
            return Err(shape_err!(
                "conv2d bias has {} entries for {} output channels",
                b.len(),
                g.out_c
            ));
        }
    }

    let k = g.patch_len();
    let pixels = g.out_pixels();
    let in_len = g.in_c * g.in_h * g.in_w;
    let mut out = vec![T::zero(); g.batch * g.out_c * pixels];
    let mut cols = Vec::new();

    for n in 0..g.batch {
        let image = &input.data()[n * in_len..(n + 1) * in_len];
        let dst = &mut out[n * g.out_c * pixels..(n + 1) * g.out_c * pixels];
        for rows in row_blocks(&g) {
            let offset = rows.start * g.out_w;
            let block = rows.len() * g.out_w;
            let (patches, ld): (&[T], usize) = if g.is_pointwise() {
                (&image[offset..], pixels)
            } else {
                cols.resize(k * block, T::zero());
                im2col(&g, image, rows, &mut cols);
                (&cols, block)
            };
            T::gemm(
                g.out_c,
                k,
                block,
                weight.data(),
                (k, 1),
                patches,
                (ld, 1),
                &mut dst[offset..],
                pixels,
                false,
            );
        }
        if let Some(b) = bias {
            for (co, plane) in dst.chunks_exact_mut(pixels).enumerate() {
                plane.iter_mut().for_each(|v| *v = *v + b[co]);
            }
        }
    }

    Ok(Tensor::from_parts(
        vec![g.batch, g.out_c, g.out_h, g.out_w],
        out,
    ))
}

/// Backward pass of [`conv2d`] given the upstream gradient.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_output: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Conv2dGrads<T>> {
    let g = Geometry::new(input, weight, stride, padding)?;
    let expected = [g.batch, g.out_c, g.out_h, g.out_w];
    if grad_output.shape() != expected {
        return Err(shape_err!(
            "conv2d upstream gradient {:?} does not match output {expected:?}",
            grad_output.shape()
        ));
    }

    let k = g.patch_len();
    let pixels = g.out_pixels();
    let in_len = g.in_c * g.in_h * g.in_w;
    let out_len = g.out_c * pixels;

    let mut grad_weight = vec![T::zero(); g.out_c * k];
    let mut grad_bias = vec![T::zero(); g.out_c];
    // Stride-1 square kernels: the input gradient is itself a correlation of
    // the upstream gradient with flipped, transposed weights. That lowers
    // out_c rows per tap instead of in_c, so it only pays when out_c ≤ in_c.
    let transposed =
        g.stride == 1 && g.k_h == g.k_w && g.k_h > 1 && g.padding < g.k_h && g.out_c <= g.in_c;
    let mut grad_input = if transposed {
        let kk = g.k_h * g.k_w;
        let mut flipped = vec![T::zero(); weight.len()];
        for co in 0..g.out_c {
            for ci in 0..g.in_c {
                let src = &weight.data()[(co * g.in_c + ci) * kk..][..kk];
                let dst = &mut flipped[(ci * g.out_c + co) * kk..][..kk];
                for (d, &v) in dst.iter_mut().zip(src.iter().rev()) {
                    *d = v;
                }
            }
        }
        let flipped = Tensor::from_parts(vec![g.in_c, g.out_c, g.k_h, g.k_w], flipped);
        conv2d(grad_output, &flipped, None, 1, g.k_h - 1 - g.padding)?.into_data()
    } else {
        vec![T::zero(); input.len()]
    };
    let mut cols = Vec::new();
    let mut grad_cols = Vec::new();

    for n in 0..g.batch {
        let image = &input.data()[n * in_len..(n + 1) * in_len];
        let upstream = &grad_output.data()[n * out_len..(n + 1) * out_len];
        let dst = &mut grad_input[n * in_len..(n + 1) * in_len];

        for (co, plane) in upstream.chunks_exact(pixels).enumerate() {
            grad_bias[co] = grad_bias[co] + plane.iter().copied().sum::<T>();
        }

        if g.is_pointwise() {
            // dX (in_c × P) = Wᵀ (in_c × out_c) · dY (out_c × P)
            T::gemm(
                k,
                g.out_c,
                pixels,
                weight.data(),
                (1, k),
                upstream,
                (pixels, 1),
                dst,
                pixels,
                false,
            );
        }

        for rows in row_blocks(&g) {
            let offset = rows.start * g.out_w;
            let block = rows.len() * g.out_w;
            let (patches, ld): (&[T], usize) = if g.is_pointwise() {
                (&image[offset..], pixels)
            } else {
                cols.resize(k * block, T::zero());
                im2col(&g, image, rows.clone(), &mut cols);
                (&cols, block)
            };
            // dW (out_c × k) += dY (out_c × B) · patchesᵀ (B × k)
            T::gemm(
                g.out_c,
                block,
                k,
                &upstream[offset..],
                (pixels, 1),
                patches,
                (1, ld),
                &mut grad_weight,
                k,
                true,
            );

            if !transposed && !g.is_pointwise() {
                // dPatches (k × B) = Wᵀ (k × out_c) · dY (out_c × B)
                grad_cols.resize(k * block, T::zero());
                T::gemm(
                    k,
                    g.out_c,
                    block,
                    weight.data(),
                    (1, k),
                    &upstream[offset..],
                    (pixels, 1),
                    &mut grad_cols,
                    block,
                    false,
                );
                col2im(&g, &grad_cols, rows, dst);
            }
        }
    }

    Ok(Conv2dGrads {
        input: Tensor::from_parts(input.shape().to_vec(), grad_input),
        weight: Tensor::from_parts(weight.shape().to_vec(), grad_weight),
        bias: grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    /// Direct quadruple loop, independent of the im2col path.
    fn naive(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &[f64],
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4().unwrap();
        let (co, _, kh, kw) = w.dims4().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * co * oh * ow];
        for b_i in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b[o];
                        for c in 0..ci {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (y * stride + i) as isize - pad as isize;
                                    let ix = (xx * stride + j) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()
                                        [((b_i * ci + c) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * ci + c) * kh + i) * kw + j];
                                }
                            }
                        }
                        out[((b_i * co + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, co, oh, ow], out).unwrap()
    }

    #[test]
    fn identity_kernel_returns_input() {
        let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d(&x, &w, Some(&[0.0]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_sums_window() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0).unwrap();
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0).unwrap();
        let y = conv2d(&x, &w, Some(&[0.0]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn rejects_bad_shapes_and_zero_stride() {
        let x = Tensor::<f64>::zeros(&[1, 2, 5, 5]).unwrap();
        let w = Tensor::<f64>::zeros(&[3, 1, 3, 3]).unwrap();
        assert!(conv2d(&x, &w, None, 1, 0).is_err());
        let w = Tensor::<f64>::zeros(&[3, 2, 3, 3]).unwrap();
        assert!(conv2d(&x, &w, None, 0, 0).is_err());
        assert!(conv2d(&x, &w, Some(&[0.0; 2]), 1, 0).is_err());
        let w = Tensor::<f64>::zeros(&[3, 2, 7, 7]).unwrap();
        assert!(conv2d(&x, &w, None, 1, 0).is_err());
    }

    #[test]
    fn matches_naive_reference_with_stride_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(stride, pad, k) in &[
            (1, 0, 3),
            (1, 1, 3),
            (2, 1, 3),
            (3, 2, 5),
            (1, 0, 1),
            (2, 0, 1),
        ] {
            let x = random(&[2, 3, 9, 11], &mut rng);
            let w = random(&[4, 3, k, k], &mut rng);
            let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
            let slow = naive(&x, &w, &b, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (stride, pad, k) in [
            (2, 1, 3),
            (1, 1, 3),
            (1, 0, 3),
            (1, 2, 3),
            (1, 0, 1),
            (1, 3, 3),
        ] {
            check_backward(stride, pad, k, 4);
            check_backward(stride, pad, k, 2);
        }
    }

    fn check_backward(stride: usize, pad: usize, k: usize, out_c: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 8, 8], &mut rng);
        let w = random(&[out_c, 3, k, k], &mut rng);
        let b: Vec<f64> = (0..out_c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
        let r = random(y.shape(), &mut rng);
        let objective = |x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]| -> f64 {
            let y = conv2d(x, w, Some(b), stride, pad).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let grads = conv2d_backward(&x, &w, &r, stride, pad).unwrap();
        let h = 1e-5;
        for i in 0..w.len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.data_mut()[i] += h;
            wm.data_mut()[i] -= h;
            let fd = (objective(&x, &wp, &b) - objective(&x, &wm, &b)) / (2.0 * h);
            let an = grads.weight.data()[i];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) < 1e-4);
        }
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (objective(&xp, &w, &b) - objective(&xm, &w, &b)) / (2.0 * h);
            let an = grads.input.data()[i];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) < 1e-4);
        }
        let bias_sum: Vec<f64> = (0..out_c)
            .map(|c| (0..2).flat_map(|n| r.plane(n, c).to_vec()).sum())
            .collect();
        for (a, e) in grads.bias.iter().zip(&bias_sum) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}
