//! The initialization and propagation networks.
//!
//! Both networks are chains of sub-networks working at increasing
//! resolution. Every sub-network but the first receives the input resampled
//! to its own extent, concatenated with the coarser sub-network's prediction
//! upscaled by two, and emits a probability mask at its own extent:
//!
//! ```text
//! init:        32 ──▶ 64 ──▶ 128          1 input channel, 1 output channel
//! propagation:        64 ──▶ 128          6 input channels, 4 output channels
//! ```
//!
//! A sub-network body is a stack of convolution groups (conv → batch norm →
//! leaky ReLU) followed by a 1×1 convolution head and a sigmoid.

mod checkpoint;
mod forward;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::tensor::{BatchNormConfig, RunningStats, Scalar, Tensor};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    FORMAT_VERSION,
};
pub use forward::{
    backward, forward_inference, forward_train, init_net_forward, prop_net_forward, ForwardTape,
    PropagationInput, LOOKAHEAD,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NetworkKind {
    /// Segments a single slice from scratch.
    Init,
    /// Extends an anchor slice's mask to the next four slices.
    Propagation,
}

impl NetworkKind {
    pub fn input_channels(self) -> usize {
        match self {
            NetworkKind::Init => 1,
            NetworkKind::Propagation => 2 + LOOKAHEAD,
        }
    }

    pub fn output_channels(self) -> usize {
        match self {
            NetworkKind::Init => 1,
            NetworkKind::Propagation => LOOKAHEAD,
        }
    }

    /// Number of coarse-to-fine stages.
    pub fn stages(self) -> usize {
        match self {
            NetworkKind::Init => 3,
            NetworkKind::Propagation => 2,
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            NetworkKind::Init => 0,
            NetworkKind::Propagation => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(NetworkKind::Init),
            1 => Some(NetworkKind::Propagation),
            _ => None,
        }
    }
}

impl std::fmt::Display for NetworkKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NetworkKind::Init => "init",
            NetworkKind::Propagation => "prop",
        })
    }
}

impl std::str::FromStr for NetworkKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(NetworkKind::Init),
            "prop" | "propagation" => Ok(NetworkKind::Propagation),
            other => Err(invalid!(
                "unknown network kind `{other}` (expected init or prop)"
            )),
        }
    }
}

/// One entry of a sub-network layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDesc {
    /// Same-padded `kernel × kernel` convolution, batch norm, leaky ReLU.
    ConvGroup { kernel: usize, channels: usize },
    /// Average pooling by the given factor.
    Downscale(usize),
    /// Nearest-neighbour upsampling by the given factor.
    Upscale(usize),
    /// 1×1 convolution with bias followed by a sigmoid.
    Head { channels: usize },
}

/// Declared hyperparameters shared by every sub-network of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    /// Extent of the finest stage (and of the network input).
    pub finest_size: usize,
    /// Layers of each sub-network body; the output head is appended.
    pub body: Vec<LayerDesc>,
    pub slope: f32,
    pub bn_momentum: f32,
    pub bn_epsilon: f32,
}

impl Default for Architecture {
    fn default() -> Self {
        Self::with_widths(128, &[16, 32, 32, 16])
    }
}

impl Architecture {
    /// A plain stack of 3×3 convolution groups with the given widths.
    pub fn with_widths(finest_size: usize, widths: &[usize]) -> Self {
        Self {
            finest_size,
            body: widths
                .iter()
                .map(|&channels| LayerDesc::ConvGroup {
                    kernel: 3,
                    channels,
                })
                .collect(),
            slope: crate::tensor::LEAKY_SLOPE as f32,
            bn_momentum: 0.9,
            bn_epsilon: 1e-5,
        }
    }

    pub fn bn_config(&self) -> BatchNormConfig {
        BatchNormConfig {
            momentum: f64::from(self.bn_momentum),
            epsilon: f64::from(self.bn_epsilon),
        }
    }

    /// Sub-network specifications from coarsest to finest.
    pub fn subnets(&self, kind: NetworkKind) -> Vec<SubNetSpec> {
        let stages = kind.stages();
        (0..stages)
            .map(|stage| {
                let io_size = self.finest_size >> (stages - 1 - stage);
                let takes_coarse_mask = stage > 0;
                let in_channels = kind.input_channels()
                    + if takes_coarse_mask {
                        kind.output_channels()
                    } else {
                        0
                    };
                let mut layers = self.body.clone();
                layers.push(LayerDesc::Head {
                    channels: kind.output_channels(),
                });
                SubNetSpec {
                    io_size,
                    in_channels,
                    layers,
                    takes_coarse_mask,
                }
            })
            .collect()
    }

    pub fn validate(&self, kind: NetworkKind) -> Result<()> {
        let stages = kind.stages();
        if self.finest_size == 0 || !self.finest_size.is_multiple_of(1 << (stages - 1)) {
            return Err(invalid!(
                "finest size {} must be a positive multiple of {}",
                self.finest_size,
                1 << (stages - 1)
            ));
        }
        if !(self.slope.is_finite() && self.bn_momentum.is_finite()) {
            return Err(invalid!("non-finite architecture constant"));
        }
        self.bn_config().validate()?;
        for spec in self.subnets(kind) {
            spec.validate(kind.output_channels())?;
        }
        Ok(())
    }
}

/// Layer stack and wiring of one sub-network.
#[derive(Debug, Clone, PartialEq)]
pub struct SubNetSpec {
    pub io_size: usize,
    pub in_channels: usize,
    pub layers: Vec<LayerDesc>,
    pub takes_coarse_mask: bool,
}

impl SubNetSpec {
    /// Checks that the declared layers map `io_size` back to `io_size` and
    /// end in `out_channels` channels.
    pub fn validate(&self, out_channels: usize) -> Result<()> {
        let mut extent = self.io_size;
        let mut channels = self.in_channels;
        for layer in &self.layers {
            match *layer {
                LayerDesc::ConvGroup {
                    kernel,
                    channels: c,
                } => {
                    if kernel % 2 == 0 || c == 0 {
                        return Err(invalid!("conv group needs an odd kernel and ≥ 1 channel"));
                    }
                    channels = c;
                }
                LayerDesc::Head { channels: c } => {
                    if c == 0 {
                        return Err(invalid!("head needs ≥ 1 channel"));
                    }
                    channels = c;
                }
                LayerDesc::Downscale(f) => {
                    if f == 0 || !extent.is_multiple_of(f) {
                        return Err(invalid!("extent {extent} not divisible by {f}"));
                    }
                    extent /= f;
                }
                LayerDesc::Upscale(f) => {
                    if f == 0 {
                        return Err(invalid!("upscale factor must be positive"));
                    }
                    extent *= f;
                }
            }
        }
        if extent != self.io_size || channels != out_channels {
            return Err(invalid!(
                "sub-network maps {}×{} to {extent}×{extent}×{channels}, expected {}×{}×{out_channels}",
                self.io_size,
                self.io_size,
                self.io_size,
                self.io_size
            ));
        }
        if !matches!(self.layers.last(), Some(LayerDesc::Head { .. })) {
            return Err(invalid!("sub-network must end in an output head"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGroupParams<T> {
    pub weight: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running: RunningStats<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T> {
    ConvGroup(ConvGroupParams<T>),
    Head(HeadParams<T>),
    /// Parameter-free resampling.
    Resample,
}

/// All learnable weights and batch-norm state of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T = f32> {
    pub kind: NetworkKind,
    pub arch: Architecture,
    /// Per sub-network (coarsest first), per layer.
    pub subnets: Vec<Vec<LayerParams<T>>>,
}

/// He-style initialisation: conv weights `~ N(0, 2 / fan_in)`, batch-norm
/// scale 1 and shift 0, running mean 0 and variance 1, head bias 0.
pub fn init_parameters<T: Scalar>(
    kind: NetworkKind,
    arch: &Architecture,
    seed: u64,
) -> Result<ModelParameters<T>> {
    arch.validate(kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut he = |shape: [usize; 4]| -> Tensor<T> {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        Tensor::from_parts(
            shape.to_vec(),
            (0..shape.iter().product::<usize>())
                .map(|_| T::from_f64(normal.sample(&mut rng)))
                .collect(),
        )
    };

    let subnets = arch
        .subnets(kind)
        .iter()
        .map(|spec| {
            let mut channels = spec.in_channels;
            spec.layers
                .iter()
                .map(|layer| match *layer {
                    LayerDesc::ConvGroup {
                        kernel,
                        channels: out,
                    } => {
                        let weight = he([out, channels, kernel, kernel]);
                        channels = out;
                        LayerParams::ConvGroup(ConvGroupParams {
                            weight,
                            gamma: vec![T::one(); out],
                            beta: vec![T::zero(); out],
                            running: RunningStats::new(out),
                        })
                    }
                    LayerDesc::Head { channels: out } => {
                        let weight = he([out, channels, 1, 1]);
                        channels = out;
                        LayerParams::Head(HeadParams {
                            weight,
                            bias: vec![T::zero(); out],
                        })
                    }
                    LayerDesc::Downscale(_) | LayerDesc::Upscale(_) => LayerParams::Resample,
                })
                .collect()
        })
        .collect();

    Ok(ModelParameters {
        kind,
        arch: arch.clone(),
        subnets,
    })
}

fn stage_name(arch: &Architecture, kind: NetworkKind, stage: usize) -> String {
    format!("subnet{}", arch.finest_size >> (kind.stages() - 1 - stage))
}

impl<T: Scalar> ModelParameters<T> {
    /// Every learnable tensor with a stable name, in a fixed order.
    pub fn learnables_mut(&mut self) -> Vec<(String, &mut [T])> {
        let (arch, kind) = (&self.arch, self.kind);
        let mut out = Vec::new();
        for (stage, layers) in self.subnets.iter_mut().enumerate() {
            let stage = stage_name(arch, kind, stage);
            for (idx, layer) in layers.iter_mut().enumerate() {
                match layer {
                    LayerParams::ConvGroup(p) => {
                        out.push((format!("{stage}.layer{idx}.weight"), p.weight.data_mut()));
                        out.push((format!("{stage}.layer{idx}.gamma"), &mut p.gamma[..]));
                        out.push((format!("{stage}.layer{idx}.beta"), &mut p.beta[..]));
                    }
                    LayerParams::Head(p) => {
                        out.push((format!("{stage}.layer{idx}.weight"), p.weight.data_mut()));
                        out.push((format!("{stage}.layer{idx}.bias"), &mut p.bias[..]));
                    }
                    LayerParams::Resample => {}
                }
            }
        }
        out
    }

    /// Conv weight tensors with their names, in layer order.
    pub fn conv_weights(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (stage, layers) in self.subnets.iter().enumerate() {
            let stage = stage_name(&self.arch, self.kind, stage);
            for (idx, layer) in layers.iter().enumerate() {
                match layer {
                    LayerParams::ConvGroup(p) => {
                        out.push((format!("{stage}.layer{idx}.weight"), &p.weight))
                    }
                    LayerParams::Head(p) => {
                        out.push((format!("{stage}.layer{idx}.weight"), &p.weight))
                    }
                    LayerParams::Resample => {}
                }
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        let mut copy = self.clone();
        copy.learnables_mut().iter().map(|(_, v)| v.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        let vec =
            |v: &[T]| -> Vec<U> { v.iter().map(|x| U::from_f64(x.to_f64().unwrap())).collect() };
        ModelParameters {
            kind: self.kind,
            arch: self.arch.clone(),
            subnets: self
                .subnets
                .iter()
                .map(|layers| {
                    layers
                        .iter()
                        .map(|layer| match layer {
                            LayerParams::ConvGroup(p) => LayerParams::ConvGroup(ConvGroupParams {
                                weight: p.weight.cast(),
                                gamma: vec(&p.gamma),
                                beta: vec(&p.beta),
                                running: RunningStats {
                                    mean: vec(&p.running.mean),
                                    var: vec(&p.running.var),
                                },
                            }),
                            LayerParams::Head(p) => LayerParams::Head(HeadParams {
                                weight: p.weight.cast(),
                                bias: vec(&p.bias),
                            }),
                            LayerParams::Resample => LayerParams::Resample,
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

/// Gradient of a scalar objective with respect to every learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrads<T> {
    ConvGroup {
        weight: Tensor<T>,
        gamma: Vec<T>,
        beta: Vec<T>,
    },
    Head {
        weight: Tensor<T>,
        bias: Vec<T>,
    },
    Resample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub subnets: Vec<Vec<LayerGrads<T>>>,
}

impl<T: Scalar> ModelGrads<T> {
    /// Same order and naming as [`ModelParameters::learnables_mut`].
    pub fn learnables(&self, params: &ModelParameters<T>) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (stage, layers) in self.subnets.iter().enumerate() {
            let stage = stage_name(&params.arch, params.kind, stage);
            for (idx, layer) in layers.iter().enumerate() {
                match layer {
                    LayerGrads::ConvGroup {
                        weight,
                        gamma,
                        beta,
                    } => {
                        out.push((format!("{stage}.layer{idx}.weight"), weight.data()));
                        out.push((format!("{stage}.layer{idx}.gamma"), &gamma[..]));
                        out.push((format!("{stage}.layer{idx}.beta"), &beta[..]));
                    }
                    LayerGrads::Head { weight, bias } => {
                        out.push((format!("{stage}.layer{idx}.weight"), weight.data()));
                        out.push((format!("{stage}.layer{idx}.bias"), &bias[..]));
                    }
                    LayerGrads::Resample => {}
                }
            }
        }
        out
    }

    /// Scales every gradient in place.
    pub fn scale(&mut self, factor: T) {
        for layer in self.subnets.iter_mut().flatten() {
            let parts: Vec<&mut [T]> = match layer {
                LayerGrads::ConvGroup {
                    weight,
                    gamma,
                    beta,
                } => vec![weight.data_mut(), gamma, beta],
                LayerGrads::Head { weight, bias } => vec![weight.data_mut(), bias],
                LayerGrads::Resample => vec![],
            };
            for part in parts {
                part.iter_mut().for_each(|v| *v = *v * factor);
            }
        }
    }
}
