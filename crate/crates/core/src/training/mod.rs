//! Plain SGD training loops for both networks.

mod augment;
mod dataset;

use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use augment::{augment_sample, rotate_image, rotate_mask, AugmentConfig};
pub use dataset::{init_samples, prop_samples, Direction, InitSample, PropSample};

pub use crate::networks::{load_checkpoint, save_checkpoint};

use crate::error::{invalid, Error, Result};
use crate::loss::{multiscale_loss_with_grad, LossConfig};
use crate::metrics::csv_err;
use crate::networks::{
    backward, forward_train, init_parameters, Architecture, ModelGrads, ModelParameters,
    NetworkKind,
};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub augmentation: AugmentConfig,
    /// Save to `checkpoint_path` every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub log_every: usize,
    pub loss: LossConfig,
}

impl TrainConfig {
    /// Full-length schedule for a network kind.
    pub fn for_kind(kind: NetworkKind) -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 1,
            iterations: match kind {
                NetworkKind::Init => 300_000,
                NetworkKind::Propagation => 600_000,
            },
            seed: 0,
            augmentation: AugmentConfig::default(),
            checkpoint_every: 0,
            checkpoint_path: None,
            log_every: 100,
            loss: LossConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.iterations == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(invalid!(
                "iterations, batch size and log interval must be at least 1"
            ));
        }
        self.augmentation.validate()
    }
}

/// Loss observed at one iteration (before that iteration's update).
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f64,
    /// `(extent, loss)`, coarsest first.
    pub per_scale: Vec<(usize, f64)>,
}

pub struct TrainOutcome {
    pub params: ModelParameters<f32>,
    pub log: Vec<LossRecord>,
}

/// Writes a loss log as CSV: `iteration,total_loss,loss_<extent>...`.
pub fn write_loss_csv<W: Write>(log: &[LossRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(first) = log.first() {
        let mut header = vec!["iteration".to_string(), "total_loss".to_string()];
        header.extend(first.per_scale.iter().map(|(e, _)| format!("loss_{e}")));
        w.write_record(&header).map_err(csv_err)?;
    }
    for r in log {
        let mut row = vec![r.iteration.to_string(), format!("{:.9e}", r.total)];
        row.extend(r.per_scale.iter().map(|(_, l)| format!("{l:.9e}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `w ← w − lr·∇w` for every learnable tensor. Gradients are checked before
/// anything is modified, so a non-finite gradient leaves `params` intact.
pub fn sgd_step<T: Scalar>(
    params: &mut ModelParameters<T>,
    grads: &ModelGrads<T>,
    lr: T,
) -> Result<()> {
    let g = grads.learnables(params);
    let mut targets = params.learnables_mut();
    if g.len() != targets.len()
        || g.iter()
            .zip(&targets)
            .any(|((gn, gv), (pn, pv))| gn != pn || gv.len() != pv.len())
    {
        return Err(invalid!("gradients do not match the parameter layout"));
    }
    if let Some((name, _)) = g.iter().find(|(_, v)| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFiniteGradient {
            layer: name.clone(),
        });
    }
    for ((_, values), (_, grad)) in targets.iter_mut().zip(&g) {
        for (w, &d) in values.iter_mut().zip(grad.iter()) {
            *w = *w - lr * d;
        }
    }
    Ok(())
}

/// Hooks invoked while training.
pub trait TrainObserver {
    fn on_log(&mut self, _record: &LossRecord) {}
}

impl TrainObserver for () {}

impl<F: FnMut(&LossRecord)> TrainObserver for F {
    fn on_log(&mut self, record: &LossRecord) {
        self(record)
    }
}

fn stack(planes: Vec<Vec<f32>>, batch: usize, extent: usize) -> Result<Tensor<f32>> {
    let channels = planes.len() / batch;
    Tensor::new(vec![batch, channels, extent, extent], planes.concat())
}

/// Shared loop: draws a batch of sample indices, lets `build` turn them into
/// an (input, ground truth) pair, then forward, loss, backward, update.
fn train_loop<B>(
    kind: NetworkKind,
    arch: &Architecture,
    dataset_len: usize,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
    mut build: B,
) -> Result<TrainOutcome>
where
    B: FnMut(&[usize], &mut ChaCha8Rng) -> Result<(Tensor<f32>, Tensor<f32>)>,
{
    cfg.validate()?;
    arch.validate(kind)?;
    if dataset_len == 0 {
        return Err(invalid!("training dataset is empty"));
    }
    let mut params = init_parameters::<f32>(kind, arch, cfg.seed)?;
    // Separate streams for sampling/augmentation and weight initialisation.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let lr = cfg.learning_rate as f32;
    let mut log = Vec::with_capacity(cfg.iterations.div_ceil(cfg.log_every));
    let mut picks = vec![0; cfg.batch_size];
    for iteration in 1..=cfg.iterations {
        for p in picks.iter_mut() {
            *p = rng.random_range(0..dataset_len);
        }
        let (input, gt) = build(&picks, &mut rng)?;
        let (outputs, tape) = forward_train(&mut params, &input)?;
        if !outputs.iter().all(Tensor::all_finite) {
            return Err(Error::NonFiniteLoss { iteration });
        }
        let (loss, grads) = multiscale_loss_with_grad(kind, &outputs, &gt, &cfg.loss)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        if (iteration - 1) % cfg.log_every == 0 {
            let record = LossRecord {
                iteration,
                total: loss.total,
                per_scale: loss.per_scale,
            };
            observer.on_log(&record);
            log.push(record);
        }
        let grads = backward(&params, &tape, &grads)?;
        sgd_step(&mut params, &grads, lr).map_err(|e| match e {
            Error::NonFiniteGradient { layer } => Error::NonFiniteUpdate { layer, iteration },
            other => other,
        })?;
        if cfg.checkpoint_every > 0 && iteration % cfg.checkpoint_every == 0 {
            if let Some(path) = &cfg.checkpoint_path {
                save_checkpoint(&params, path)?;
            }
        }
    }
    if let Some(path) = &cfg.checkpoint_path {
        save_checkpoint(&params, path)?;
    }
    Ok(TrainOutcome { params, log })
}

fn check_extent(arch: &Architecture, extent: usize) -> Result<()> {
    if extent != arch.finest_size {
        return Err(invalid!(
            "samples are {extent}×{extent}, network expects {}×{}",
            arch.finest_size,
            arch.finest_size
        ));
    }
    Ok(())
}

/// Trains the initialization network on single slices with masks at three
/// scales.
pub fn train_init(
    dataset: &[InitSample],
    arch: &Architecture,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    for s in dataset {
        check_extent(arch, s.extent)?;
    }
    let extent = arch.finest_size;
    train_loop(
        NetworkKind::Init,
        arch,
        dataset.len(),
        cfg,
        observer,
        |picks, rng| {
            let mut images = Vec::with_capacity(picks.len());
            let mut masks = Vec::with_capacity(picks.len());
            for &i in picks {
                let mut img = [dataset[i].image.clone()];
                let mut mask = [dataset[i].mask.clone()];
                augment_sample(&mut img, &mut mask, extent, &cfg.augmentation, rng)?;
                let [img] = img;
                let [mask] = mask;
                images.push(img);
                masks.push(mask);
            }
            Ok((
                stack(images, picks.len(), extent)?,
                stack(masks, picks.len(), extent)?,
            ))
        },
    )
}

/// Trains the propagation network. The anchor's ground-truth mask is fed as
/// input (teacher forcing); the loss covers the four predicted masks at two
/// scales.
pub fn train_prop(
    dataset: &[PropSample],
    arch: &Architecture,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    for s in dataset {
        check_extent(arch, s.extent)?;
        if s.images.len() != 5 || s.masks.len() != 5 {
            return Err(invalid!(
                "propagation samples need an anchor and four lookahead slices"
            ));
        }
    }
    let extent = arch.finest_size;
    train_loop(
        NetworkKind::Propagation,
        arch,
        dataset.len(),
        cfg,
        observer,
        |picks, rng| {
            let mut inputs = Vec::with_capacity(6 * picks.len());
            let mut targets = Vec::with_capacity(4 * picks.len());
            for &i in picks {
                let mut images = dataset[i].images.clone();
                let mut masks = dataset[i].masks.clone();
                augment_sample(&mut images, &mut masks, extent, &cfg.augmentation, rng)?;
                let mut images = images.into_iter();
                let mut masks = masks.into_iter();
                inputs.push(images.next().unwrap());
                inputs.push(masks.next().unwrap());
                inputs.extend(images);
                targets.extend(masks);
            }
            Ok((
                stack(inputs, picks.len(), extent)?,
                stack(targets, picks.len(), extent)?,
            ))
        },
    )
}
