//! Stabilized, class-balanced cross entropy.
//!
//! Each prediction `p` is first squeezed into `p' = a·p + b`, which keeps the
//! logarithm away from zero for any `p ∈ [0, 1]`. Pixels whose squeezed
//! prediction lies within `t` of the ground truth contribute neither loss nor
//! gradient; the remaining pixels pay the usual binary cross entropy on `p'`.
//! Since background dominates the image, the dead zone stops well-predicted
//! background pixels from swamping the myocardium signal.

use crate::error::{invalid, shape_err, Result};
use crate::networks::NetworkKind;
use crate::tensor::{Scalar, Tensor};

/// Parameters `(a, b, t)` of the stabilized loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    a: f64,
    b: f64,
    t: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            a: 0.999,
            b: 0.0005,
            t: 0.02,
        }
    }
}

impl LossConfig {
    /// Requires `a > 0`, `b > 0`, `a + 2b = 1` and `0 < t < 1`.
    pub fn new(a: f64, b: f64, t: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0) {
            return Err(invalid!("loss requires a > 0 and b > 0, got a={a}, b={b}"));
        }
        if (a + 2.0 * b - 1.0).abs() > 1e-12 {
            return Err(invalid!("loss requires a + 2b = 1, got {}", a + 2.0 * b));
        }
        if !(t > 0.0 && t < 1.0) {
            return Err(invalid!("loss threshold t must lie in (0, 1), got {t}"));
        }
        Ok(Self { a, b, t })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    fn squeeze(&self, p: f64) -> f64 {
        self.a * p + self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Branch {
    DeadZone,
    Foreground,
    Background,
}

fn branch(p: f64, g: f64, cfg: &LossConfig) -> Result<(Branch, f64)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid!("predicted probability {p} outside [0, 1]"));
    }
    if g != 0.0 && g != 1.0 {
        return Err(invalid!("ground truth {g} is not 0 or 1"));
    }
    let q = cfg.squeeze(p);
    let b = if (g - q).abs() < cfg.t {
        Branch::DeadZone
    } else if g == 1.0 {
        // Outside the dead zone with g = 1 implies q ≤ 1 − t.
        Branch::Foreground
    } else {
        Branch::Background
    };
    Ok((b, q))
}

/// Loss of a single pixel.
pub fn pixel_loss(p: f64, g: f64, cfg: &LossConfig) -> Result<f64> {
    let (b, q) = branch(p, g, cfg)?;
    Ok(match b {
        Branch::DeadZone => 0.0,
        Branch::Foreground => -q.ln(),
        Branch::Background => -(1.0 - q).ln(),
    })
}

/// `d pixel_loss / d p`.
pub fn pixel_loss_grad(p: f64, g: f64, cfg: &LossConfig) -> Result<f64> {
    let (b, q) = branch(p, g, cfg)?;
    Ok(match b {
        Branch::DeadZone => 0.0,
        Branch::Foreground => -cfg.a / q,
        Branch::Background => cfg.a / (1.0 - q),
    })
}

fn check_same_shape<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(shape_err!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.shape(),
            gt.shape()
        ));
    }
    Ok(())
}

/// Sum of pixel losses over the whole mask.
pub fn mask_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    check_same_shape(pred, gt)?;
    pred.data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| pixel_loss(p.to_f64().unwrap(), g.to_f64().unwrap(), cfg))
        .sum()
}

/// Summed loss together with its gradient with respect to `pred`.
pub fn mask_loss_with_grad<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(f64, Tensor<T>)> {
    check_same_shape(pred, gt)?;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p.to_f64().unwrap(), g.to_f64().unwrap());
        total += pixel_loss(p, g, cfg)?;
        grad.push(T::from_f64(pixel_loss_grad(p, g, cfg)?));
    }
    Ok((total, Tensor::new(pred.shape().to_vec(), grad)?))
}

/// Coarsens a binary mask: block mean, then `≥ 0.5 → 1` so that exact ties
/// keep myocardium.
pub fn downsample_gt<T: Scalar>(gt: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let mean = crate::tensor::downscale(gt, factor)?;
    let half = T::from_f64(0.5);
    Ok(mean.map(|v| if v >= half { T::one() } else { T::zero() }))
}

/// Per-scale and total multi-scale loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleLoss {
    /// `(extent, loss)` from coarsest to finest.
    pub per_scale: Vec<(usize, f64)>,
    pub total: f64,
}

/// Expected output extents for a network kind, coarsest first.
pub fn scales_for(kind: NetworkKind, finest: usize) -> Vec<usize> {
    match kind {
        NetworkKind::Init => vec![finest / 4, finest / 2, finest],
        NetworkKind::Propagation => vec![finest / 2, finest],
    }
}

fn check_scales<T: Scalar>(
    kind: NetworkKind,
    preds: &[Tensor<T>],
    gt_full: &Tensor<T>,
) -> Result<Vec<usize>> {
    let (_, _, h, w) = gt_full.dims4()?;
    if h != w {
        return Err(shape_err!("ground truth must be square, got {h}×{w}"));
    }
    let expected = scales_for(kind, h);
    let got: Vec<usize> = preds
        .iter()
        .map(|p| p.dims4().map(|d| d.2))
        .collect::<Result<_>>()?;
    if got != expected {
        return Err(invalid!(
            "{kind:?} network predictions at scales {got:?}, expected {expected:?}"
        ));
    }
    Ok(expected)
}

/// Unweighted sum of the mask losses at every scale, with coarse ground
/// truth derived by [`downsample_gt`].
pub fn multiscale_loss<T: Scalar>(
    kind: NetworkKind,
    preds: &[Tensor<T>],
    gt_full: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<MultiScaleLoss> {
    Ok(multiscale_loss_with_grad(kind, preds, gt_full, cfg)?.0)
}

/// [`multiscale_loss`] plus the gradient with respect to each prediction.
pub fn multiscale_loss_with_grad<T: Scalar>(
    kind: NetworkKind,
    preds: &[Tensor<T>],
    gt_full: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(MultiScaleLoss, Vec<Tensor<T>>)> {
    let scales = check_scales(kind, preds, gt_full)?;
    let finest = *scales.last().expect("at least one scale");
    let mut per_scale = Vec::with_capacity(scales.len());
    let mut grads = Vec::with_capacity(scales.len());
    for (pred, &extent) in preds.iter().zip(&scales) {
        let gt = downsample_gt(gt_full, finest / extent)?;
        let (loss, grad) = mask_loss_with_grad(pred, &gt, cfg)?;
        per_scale.push((extent, loss));
        grads.push(grad);
    }
    let total = per_scale.iter().map(|(_, l)| l).sum();
    Ok((MultiScaleLoss { per_scale, total }, grads))
}
