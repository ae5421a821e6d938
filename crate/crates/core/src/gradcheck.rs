//! Central finite-difference checks of every backward pass, in double
//! precision.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{multiscale_loss_with_grad, pixel_loss, pixel_loss_grad, LossConfig};
use crate::networks::{
    backward, forward_train, init_parameters, Architecture, ModelParameters, NetworkKind,
};
use crate::tensor::{
    batch_norm_backward, batch_norm_forward, conv2d, conv2d_backward, downscale,
    downscale_backward, leaky_relu, leaky_relu_backward, sigmoid, sigmoid_backward, upscale,
    upscale_backward, BatchNormConfig, Mode, RunningStats, Tensor, LEAKY_SLOPE,
};

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-6;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-5;
const LOSS_STEP: f64 = 1e-7;

/// Deliberate corruption of analytic gradients, for exercising the checker.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    pub conv2d: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub samples: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub checks: Vec<OpCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(OpCheck::passed)
    }

    pub fn offenders(&self) -> Vec<&OpCheck> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<20} max_rel_error {:.3e}  tolerance {:.0e}  samples {:>5}  {}",
                c.op,
                c.max_rel_error,
                c.tolerance,
                c.samples,
                if c.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).expect("valid shape")
}

fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Compares `analytic[i]` with central differences of `objective` with
/// respect to coordinate `i` of `point`, for every `stride`-th coordinate.
fn compare(
    op: &str,
    point: &[f64],
    analytic: &[f64],
    stride: usize,
    mut objective: impl FnMut(&[f64]) -> f64,
) -> OpCheck {
    let mut worst: f64 = 0.0;
    let mut samples = 0;
    let mut work = point.to_vec();
    for i in (0..point.len()).step_by(stride) {
        work[i] = point[i] + STEP;
        let plus = objective(&work);
        work[i] = point[i] - STEP;
        let minus = objective(&work);
        work[i] = point[i];
        worst = worst.max(rel_error(analytic[i], (plus - minus) / (2.0 * STEP)));
        samples += 1;
    }
    OpCheck {
        op: op.to_string(),
        max_rel_error: worst,
        tolerance: LAYER_TOLERANCE,
        samples,
    }
}

fn with_data(t: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor::new(t.shape().to_vec(), data.to_vec()).expect("same length")
}

fn check_conv(
    rng: &mut ChaCha8Rng,
    stride: usize,
    padding: usize,
    faults: Faults,
    label: &str,
) -> Result<Vec<OpCheck>> {
    let x = random(&[2, 3, 8, 8], rng);
    let w = random(&[4, 3, 3, 3], rng);
    let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = conv2d(&x, &w, Some(&b), stride, padding)?;
    let r = random(y.shape(), rng);
    let mut g = conv2d_backward(&x, &w, &r, stride, padding)?;
    if faults.conv2d {
        for v in g.weight.data_mut() {
            *v *= 1.01;
        }
    }
    let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]| {
        weighted_sum(
            &conv2d(x, w, Some(b), stride, padding).expect("valid conv"),
            &r,
        )
    };
    Ok(vec![
        compare(
            &format!("{label}.input"),
            x.data(),
            g.input.data(),
            1,
            |d| f(&with_data(&x, d), &w, &b),
        ),
        compare(
            &format!("{label}.weight"),
            w.data(),
            g.weight.data(),
            1,
            |d| f(&x, &with_data(&w, d), &b),
        ),
        compare(&format!("{label}.bias"), &b, &g.bias, 1, |d| f(&x, &w, d)),
    ])
}

fn check_batch_norm(rng: &mut ChaCha8Rng) -> Result<Vec<OpCheck>> {
    let x = random(&[2, 3, 4, 4], rng);
    let gamma: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..1.5)).collect();
    let beta: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
    let running = RunningStats::new(3);
    let cfg = BatchNormConfig::default();
    let run = |x: &Tensor<f64>, gamma: &[f64], beta: &[f64]| {
        batch_norm_forward(x, gamma, beta, Mode::Train, &running, &cfg).expect("valid batch norm")
    };
    let (y, cache, _) = run(&x, &gamma, &beta);
    let r = random(y.shape(), rng);
    let g = batch_norm_backward(&cache, &gamma, &r)?;
    let f = |x: &Tensor<f64>, gamma: &[f64], beta: &[f64]| weighted_sum(&run(x, gamma, beta).0, &r);
    Ok(vec![
        compare("batch_norm.input", x.data(), g.input.data(), 1, |d| {
            f(&with_data(&x, d), &gamma, &beta)
        }),
        compare("batch_norm.gamma", &gamma, &g.gamma, 1, |d| f(&x, d, &beta)),
        compare("batch_norm.beta", &beta, &g.beta, 1, |d| f(&x, &gamma, d)),
    ])
}

fn check_elementwise(rng: &mut ChaCha8Rng) -> Result<Vec<OpCheck>> {
    // Keep samples away from the leaky ReLU kink.
    let x = Tensor::from_fn(&[2, 2, 6, 6], |_| loop {
        let v: f64 = rng.random_range(-2.0..2.0);
        if v.abs() > 1e-3 {
            break v;
        }
    })?;
    let r = random(x.shape(), rng);
    let slope = LEAKY_SLOPE;
    let g_relu = leaky_relu_backward(&x, &r, slope)?;
    let g_sig = sigmoid_backward(&sigmoid(&x), &r)?;
    let r_down = random(&[2, 2, 3, 3], rng);
    let g_down = downscale_backward(&r_down, 2)?;
    let r_up = random(&[2, 2, 12, 12], rng);
    let g_up = upscale_backward(&r_up, 2)?;
    Ok(vec![
        compare("leaky_relu", x.data(), g_relu.data(), 1, |d| {
            weighted_sum(&leaky_relu(&with_data(&x, d), slope), &r)
        }),
        compare("sigmoid", x.data(), g_sig.data(), 1, |d| {
            weighted_sum(&sigmoid(&with_data(&x, d)), &r)
        }),
        compare("downscale", x.data(), g_down.data(), 1, |d| {
            weighted_sum(
                &downscale(&with_data(&x, d), 2).expect("divisible"),
                &r_down,
            )
        }),
        compare("upscale", x.data(), g_up.data(), 1, |d| {
            weighted_sum(&upscale(&with_data(&x, d), 2).expect("valid"), &r_up)
        }),
    ])
}

/// `(p, g)` pairs whose squeezed prediction stays more than 1e-3 from both
/// dead-zone edges, checked with a smaller step since the log steepens
/// near zero.
fn check_pixel_loss(rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let cfg = LossConfig::default();
    let mut worst: f64 = 0.0;
    let mut samples = 0;
    while samples < 200 {
        let g = f64::from(u8::from(rng.random::<bool>()));
        let p: f64 = rng.random_range(LOSS_STEP..1.0 - LOSS_STEP);
        let q = cfg.a() * p + cfg.b();
        let gap = (g - q).abs();
        if (gap - cfg.t()).abs() <= 1e-3 {
            continue;
        }
        let fd = (pixel_loss(p + LOSS_STEP, g, &cfg)? - pixel_loss(p - LOSS_STEP, g, &cfg)?)
            / (2.0 * LOSS_STEP);
        let an = pixel_loss_grad(p, g, &cfg)?;
        if an != 0.0 || fd != 0.0 {
            worst = worst.max(rel_error(an, fd));
        }
        samples += 1;
    }
    Ok(OpCheck {
        op: "pixel_loss".into(),
        max_rel_error: worst,
        tolerance: LOSS_TOLERANCE,
        samples,
    })
}

/// Total multi-scale loss against every third conv weight of a tiny network.
fn check_network(kind: NetworkKind, seed: u64, rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let arch = Architecture::with_widths(16, &[3, 4, 2]);
    let params = init_parameters::<f64>(kind, &arch, seed)?;
    let x = Tensor::from_fn(&[1, kind.input_channels(), 16, 16], |_| {
        rng.random_range(0.0..1.0)
    })?;
    let gt = Tensor::from_fn(&[1, kind.output_channels(), 16, 16], |i| {
        ((i / 5) % 2) as f64
    })?;
    let cfg = LossConfig::default();
    let loss_at = |p: &ModelParameters<f64>| -> f64 {
        let mut p = p.clone();
        let (out, _) = forward_train(&mut p, &x).expect("valid forward");
        multiscale_loss_with_grad(kind, &out, &gt, &cfg)
            .expect("valid loss")
            .0
            .total
    };
    let mut work = params.clone();
    let (out, tape) = forward_train(&mut work, &x)?;
    let (_, grads) = multiscale_loss_with_grad(kind, &out, &gt, &cfg)?;
    let analytic = backward(&params, &tape, &grads)?;
    let analytic: Vec<(String, Vec<f64>)> = analytic
        .learnables(&params)
        .into_iter()
        .filter(|(n, _)| n.ends_with("weight"))
        .map(|(n, v)| (n, v.to_vec()))
        .collect();
    let mut worst: f64 = 0.0;
    let mut samples = 0;
    for (name, grad) in &analytic {
        for i in (0..grad.len()).step_by(3) {
            let shifted = |delta: f64| {
                let mut p = params.clone();
                for (n, v) in p.learnables_mut() {
                    if n == *name {
                        v[i] += delta;
                    }
                }
                loss_at(&p)
            };
            let fd = (shifted(STEP) - shifted(-STEP)) / (2.0 * STEP);
            worst = worst.max((grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6));
            samples += 1;
        }
    }
    Ok(OpCheck {
        op: format!("network.{kind}"),
        max_rel_error: worst,
        tolerance: NETWORK_TOLERANCE,
        samples,
    })
}

pub fn run_gradcheck(seed: u64) -> Result<GradcheckReport> {
    run_gradcheck_with(seed, Faults::default())
}

pub fn run_gradcheck_with(seed: u64, faults: Faults) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = check_conv(&mut rng, 1, 1, faults, "conv2d")?;
    checks.extend(check_conv(&mut rng, 2, 0, faults, "conv2d.strided")?);
    checks.extend(check_batch_norm(&mut rng)?);
    checks.extend(check_elementwise(&mut rng)?);
    checks.push(check_pixel_loss(&mut rng)?);
    checks.push(check_network(NetworkKind::Init, seed, &mut rng)?);
    checks.push(check_network(NetworkKind::Propagation, seed, &mut rng)?);
    Ok(GradcheckReport { seed, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes() {
        let report = run_gradcheck(0).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.checks.iter().any(|c| c.op == "pixel_loss"));
    }

    #[test]
    fn corrupted_conv_is_named() {
        let report = run_gradcheck_with(1, Faults { conv2d: true }).unwrap();
        let names: Vec<&str> = report.offenders().iter().map(|c| c.op.as_str()).collect();
        assert!(!names.is_empty());
        assert!(names.iter().all(|n| n.starts_with("conv2d")), "{names:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1.0, 1.01) - 0.01 / 1.01).abs() < 1e-15);
    }
}
