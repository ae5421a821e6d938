use super::{Mode, Scalar, Tensor};
use crate::error::{invalid, shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    /// Weight of the previous running value in the moving average.
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            epsilon: 1e-5,
        }
    }
}

impl BatchNormConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(invalid!(
                "batch-norm epsilon must be > 0, got {}",
                self.epsilon
            ));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(invalid!(
                "batch-norm momentum must lie in [0, 1], got {}",
                self.momentum
            ));
        }
        Ok(())
    }
}

/// Per-channel running mean and (biased) variance used at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// `running ← momentum·running + (1 − momentum)·batch`
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: f64) {
        let m = T::from_f64(momentum);
        let keep = T::from_f64(1.0 - momentum);
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = m * *r + keep * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = m * *r + keep * b;
        }
    }
}

/// Statistics of one training batch, per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    mode: Mode,
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

fn check_params<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: &RunningStats<T>,
    cfg: &BatchNormConfig,
) -> Result<(usize, usize, usize)> {
    cfg.validate()?;
    let (n, c, h, w) = input.dims4()?;
    let lens = [
        gamma.len(),
        beta.len(),
        running.mean.len(),
        running.var.len(),
    ];
    if lens.iter().any(|&l| l != c) {
        return Err(shape_err!(
            "batch-norm parameters {lens:?} do not match {c} channels"
        ));
    }
    if n * h * w == 0 {
        return Err(invalid!("batch-norm over an empty batch × spatial extent"));
    }
    Ok((n, c, h * w))
}

const LANES: usize = 8;

/// Sum of `f(v)` in f64 with independent partial sums, so the adds pipeline.
fn lane_sum<T: Scalar>(values: &[T], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = [0.0f64; LANES];
    let chunks = values.chunks_exact(LANES);
    let tail: f64 = chunks
        .remainder()
        .iter()
        .map(|v| f(v.to_f64().unwrap()))
        .sum();
    for chunk in chunks {
        for (a, v) in acc.iter_mut().zip(chunk) {
            *a += f(v.to_f64().unwrap());
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn lane_sum2<T: Scalar>(a: &[T], b: &[T], f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut acc = [0.0f64; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| f(x.to_f64().unwrap(), y.to_f64().unwrap()))
        .sum();
    for (xa, xb) in ca.zip(cb) {
        for ((s, x), y) in acc.iter_mut().zip(xa).zip(xb) {
            *s += f(x.to_f64().unwrap(), y.to_f64().unwrap());
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Normalized output, backward cache and (train mode) batch statistics.
pub type BatchNormOutput<T> = (Tensor<T>, BatchNormCache<T>, Option<BatchStats<T>>);

/// Batch normalisation without touching the running statistics. In train
/// mode the batch statistics are returned so the caller can fold them into
/// its running state.
pub fn batch_norm_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mode: Mode,
    running: &RunningStats<T>,
    cfg: &BatchNormConfig,
) -> Result<BatchNormOutput<T>> {
    let (n, c, plane) = check_params(input, gamma, beta, running, cfg)?;
    let count = (n * plane) as f64;

    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Inference => (
            running.mean.iter().map(|v| v.to_f64().unwrap()).collect(),
            running.var.iter().map(|v| v.to_f64().unwrap()).collect(),
        ),
        Mode::Train => (0..c)
            .map(|ch| {
                let planes = || (0..n).map(|b| input.plane(b, ch));
                let mean = planes().map(|p| lane_sum(p, |v| v)).sum::<f64>() / count;
                let var = planes()
                    .map(|p| lane_sum(p, |v| (v - mean) * (v - mean)))
                    .sum::<f64>()
                    / count;
                (mean, var)
            })
            .unzip(),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + cfg.epsilon).sqrt()).collect();
    let mut normalized = vec![T::zero(); input.len()];
    let mut out = vec![T::zero(); input.len()];
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * plane;
            let mu = T::from_f64(mean[ch]);
            let scale = T::from_f64(inv_std[ch]);
            for i in start..start + plane {
                let x_hat = (input.data()[i] - mu) * scale;
                normalized[i] = x_hat;
                out[i] = gamma[ch] * x_hat + beta[ch];
            }
        }
    }

    let batch = (mode == Mode::Train).then(|| BatchStats {
        mean: mean.iter().map(|&v| T::from_f64(v)).collect(),
        var: var.iter().map(|&v| T::from_f64(v)).collect(),
    });
    let cache = BatchNormCache {
        mode,
        normalized: Tensor::from_parts(input.shape().to_vec(), normalized),
        inv_std: inv_std.into_iter().map(T::from_f64).collect(),
    };
    Ok((
        Tensor::from_parts(input.shape().to_vec(), out),
        cache,
        batch,
    ))
}

/// Batch normalisation that folds train-mode batch statistics into
/// `running` by exponential moving average.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mode: Mode,
    running: &mut RunningStats<T>,
    cfg: &BatchNormConfig,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (out, cache, batch) = batch_norm_forward(input, gamma, beta, mode, running, cfg)?;
    if let Some(batch) = batch {
        running.update(&batch, cfg.momentum);
    }
    Ok((out, cache))
}

pub fn batch_norm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &[T],
    grad_output: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    if grad_output.shape() != cache.normalized.shape() {
        return Err(shape_err!(
            "batch-norm upstream gradient {:?} does not match {:?}",
            grad_output.shape(),
            cache.normalized.shape()
        ));
    }
    let (n, c, h, w) = grad_output.dims4()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let dy = grad_output.data();
    let x_hat = cache.normalized.data();

    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    let mut grad_input = vec![T::zero(); dy.len()];
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..n {
            let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            sum_dy += lane_sum(&dy[range.clone()], |g| g);
            sum_dy_xhat += lane_sum2(&dy[range.clone()], &x_hat[range], |g, x| g * x);
        }
        grad_gamma[ch] = T::from_f64(sum_dy_xhat);
        grad_beta[ch] = T::from_f64(sum_dy);

        let scale = gamma[ch].to_f64().unwrap() * cache.inv_std[ch].to_f64().unwrap();
        for b in 0..n {
            let start = (b * c + ch) * plane;
            for i in start..start + plane {
                let g = dy[i].to_f64().unwrap();
                let v = match cache.mode {
                    Mode::Inference => scale * g,
                    Mode::Train => {
                        let xh = x_hat[i].to_f64().unwrap();
                        scale * (g - sum_dy / count - xh * sum_dy_xhat / count)
                    }
                };
                grad_input[i] = T::from_f64(v);
            }
        }
    }

    Ok(BatchNormGrads {
        input: Tensor::from_parts(grad_output.shape().to_vec(), grad_input),
        gamma: grad_gamma,
        beta: grad_beta,
    })
}
