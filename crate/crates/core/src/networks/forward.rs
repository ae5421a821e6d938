use super::{
    Architecture, ConvGroupParams, HeadParams, LayerDesc, LayerGrads, LayerParams, ModelGrads,
    ModelParameters, NetworkKind, SubNetSpec,
};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{
    batch_norm_backward, batch_norm_forward, concat_channels, conv2d, conv2d_backward, downscale,
    leaky_relu, leaky_relu_backward, sigmoid, sigmoid_backward, split_channels, upscale,
    upscale_backward, BatchNormCache, BatchStats, Mode, Scalar, Tensor,
};

/// Number of slices the propagation network predicts per step.
pub const LOOKAHEAD: usize = 4;

/// Anchor slice, its mask and the next [`LOOKAHEAD`] slices, all square
/// planes of the same extent.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationInput<T> {
    extent: usize,
    anchor_slice: Vec<T>,
    anchor_mask: Vec<T>,
    lookahead: Vec<Vec<T>>,
}

impl<T: Scalar> PropagationInput<T> {
    pub fn new(
        extent: usize,
        anchor_slice: Vec<T>,
        anchor_mask: Vec<T>,
        lookahead: Vec<Vec<T>>,
    ) -> Result<Self> {
        let plane = extent * extent;
        if lookahead.len() != LOOKAHEAD {
            return Err(invalid!(
                "propagation needs {LOOKAHEAD} lookahead slices, got {}",
                lookahead.len()
            ));
        }
        if anchor_slice.len() != plane
            || anchor_mask.len() != plane
            || lookahead.iter().any(|s| s.len() != plane)
        {
            return Err(shape_err!(
                "propagation planes must all be {extent}×{extent}"
            ));
        }
        if anchor_mask
            .iter()
            .any(|&v| !(v >= T::zero() && v <= T::one()))
        {
            return Err(invalid!("anchor mask values must lie in [0, 1]"));
        }
        Ok(Self {
            extent,
            anchor_slice,
            anchor_mask,
            lookahead,
        })
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    /// `1 × 6 × extent × extent`: anchor slice, anchor mask, lookahead slices.
    pub fn to_tensor(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity((2 + LOOKAHEAD) * self.extent * self.extent);
        data.extend_from_slice(&self.anchor_slice);
        data.extend_from_slice(&self.anchor_mask);
        for s in &self.lookahead {
            data.extend_from_slice(s);
        }
        Tensor::from_parts(vec![1, 2 + LOOKAHEAD, self.extent, self.extent], data)
    }
}

enum LayerTape<T> {
    ConvGroup {
        input: Tensor<T>,
        bn: BatchNormCache<T>,
        pre_activation: Tensor<T>,
    },
    Head {
        input: Tensor<T>,
        output: Tensor<T>,
    },
    Downscale(usize),
    Upscale(usize),
}

/// Activations recorded by [`forward_train`] for the backward pass.
pub struct ForwardTape<T> {
    kind: NetworkKind,
    subnets: Vec<Vec<LayerTape<T>>>,
}

fn check_input<T: Scalar>(kind: NetworkKind, arch: &Architecture, input: &Tensor<T>) -> Result<()> {
    let (_, c, h, w) = input.dims4()?;
    if c != kind.input_channels() {
        return Err(invalid!(
            "{kind} network expects {} input channels, got {c}",
            kind.input_channels()
        ));
    }
    if h != arch.finest_size || w != arch.finest_size {
        return Err(shape_err!(
            "{kind} network expects {}×{} input, got {h}×{w}",
            arch.finest_size,
            arch.finest_size
        ));
    }
    Ok(())
}

/// Runs one sub-network. Batch statistics of every train-mode batch-norm
/// layer are pushed to `stats`; activations are pushed to `tape` if given.
fn subnet_forward<T: Scalar>(
    spec: &SubNetSpec,
    layers: &[LayerParams<T>],
    arch: &Architecture,
    mut x: Tensor<T>,
    mode: Mode,
    stats: &mut Vec<BatchStats<T>>,
    mut tape: Option<&mut Vec<LayerTape<T>>>,
) -> Result<Tensor<T>> {
    let slope = T::from_f64(f64::from(arch.slope));
    let bn_cfg = arch.bn_config();
    for (desc, params) in spec.layers.iter().zip(layers) {
        x = match (desc, params) {
            (
                &LayerDesc::ConvGroup { kernel, .. },
                LayerParams::ConvGroup(ConvGroupParams {
                    weight,
                    gamma,
                    beta,
                    running,
                }),
            ) => {
                let z = conv2d(&x, weight, None, 1, kernel / 2)?;
                let (y, bn, batch) = batch_norm_forward(&z, gamma, beta, mode, running, &bn_cfg)?;
                stats.extend(batch);
                let a = leaky_relu(&y, slope);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(LayerTape::ConvGroup {
                        input: x,
                        bn,
                        pre_activation: y,
                    });
                }
                a
            }
            (LayerDesc::Head { .. }, LayerParams::Head(HeadParams { weight, bias })) => {
                let z = conv2d(&x, weight, Some(bias), 1, 0)?;
                let y = sigmoid(&z);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(LayerTape::Head {
                        input: x,
                        output: y.clone(),
                    });
                }
                y
            }
            (&LayerDesc::Downscale(f), LayerParams::Resample) => {
                if let Some(t) = tape.as_deref_mut() {
                    t.push(LayerTape::Downscale(f));
                }
                downscale(&x, f)?
            }
            (&LayerDesc::Upscale(f), LayerParams::Resample) => {
                if let Some(t) = tape.as_deref_mut() {
                    t.push(LayerTape::Upscale(f));
                }
                upscale(&x, f)?
            }
            _ => return Err(invalid!("parameters do not match layer {desc:?}")),
        };
    }
    Ok(x)
}

fn subnet_backward<T: Scalar>(
    layers: &[LayerParams<T>],
    arch: &Architecture,
    tape: &[LayerTape<T>],
    mut grad: Tensor<T>,
) -> Result<(Tensor<T>, Vec<LayerGrads<T>>)> {
    let slope = T::from_f64(f64::from(arch.slope));
    let mut grads = Vec::with_capacity(layers.len());
    for (params, record) in layers.iter().zip(tape).rev() {
        let (g_in, layer_grads) = match (params, record) {
            (
                LayerParams::ConvGroup(p),
                LayerTape::ConvGroup {
                    input,
                    bn,
                    pre_activation,
                },
            ) => {
                let g_y = leaky_relu_backward(pre_activation, &grad, slope)?;
                let bn_grads = batch_norm_backward(bn, &p.gamma, &g_y)?;
                let kernel = p.weight.shape()[2];
                let conv = conv2d_backward(input, &p.weight, &bn_grads.input, 1, kernel / 2)?;
                (
                    conv.input,
                    LayerGrads::ConvGroup {
                        weight: conv.weight,
                        gamma: bn_grads.gamma,
                        beta: bn_grads.beta,
                    },
                )
            }
            (LayerParams::Head(p), LayerTape::Head { input, output }) => {
                let g_z = sigmoid_backward(output, &grad)?;
                let conv = conv2d_backward(input, &p.weight, &g_z, 1, 0)?;
                (
                    conv.input,
                    LayerGrads::Head {
                        weight: conv.weight,
                        bias: conv.bias,
                    },
                )
            }
            (LayerParams::Resample, &LayerTape::Downscale(f)) => (
                crate::tensor::downscale_backward(&grad, f)?,
                LayerGrads::Resample,
            ),
            (LayerParams::Resample, &LayerTape::Upscale(f)) => {
                (upscale_backward(&grad, f)?, LayerGrads::Resample)
            }
            _ => return Err(invalid!("tape does not match parameters")),
        };
        grad = g_in;
        grads.push(layer_grads);
    }
    grads.reverse();
    Ok((grad, grads))
}

fn check_params<T: Scalar>(params: &ModelParameters<T>) -> Result<Vec<SubNetSpec>> {
    let specs = params.arch.subnets(params.kind);
    if specs.len() != params.subnets.len()
        || specs
            .iter()
            .zip(&params.subnets)
            .any(|(s, l)| s.layers.len() != l.len())
    {
        return Err(invalid!("parameters do not match their architecture"));
    }
    Ok(specs)
}

/// Shared coarse-to-fine driver.
fn run<T: Scalar>(
    params: &ModelParameters<T>,
    input: &Tensor<T>,
    mode: Mode,
    stats: &mut Vec<BatchStats<T>>,
    mut tape: Option<&mut Vec<Vec<LayerTape<T>>>>,
) -> Result<Vec<Tensor<T>>> {
    check_input(params.kind, &params.arch, input)?;
    let specs = check_params(params)?;
    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(specs.len());
    for (spec, layers) in specs.iter().zip(&params.subnets) {
        let mut x = downscale(input, params.arch.finest_size / spec.io_size)?;
        if let Some(coarse) = outputs.last() {
            x = concat_channels(&x, &upscale(coarse, 2)?)?;
        }
        let sub_tape = tape.as_deref_mut().map(|t| {
            t.push(Vec::new());
            t.last_mut().unwrap()
        });
        let out = subnet_forward(spec, layers, &params.arch, x, mode, stats, sub_tape)?;
        outputs.push(out);
    }
    Ok(outputs)
}

/// Train-mode forward pass. Uses batch statistics, folds them into the
/// running statistics, and records what [`backward`] needs.
pub fn forward_train<T: Scalar>(
    params: &mut ModelParameters<T>,
    input: &Tensor<T>,
) -> Result<(Vec<Tensor<T>>, ForwardTape<T>)> {
    let mut stats = Vec::new();
    let mut layers = Vec::new();
    let outputs = run(params, input, Mode::Train, &mut stats, Some(&mut layers))?;
    let momentum = f64::from(params.arch.bn_momentum);
    let running = params.subnets.iter_mut().flatten().filter_map(|l| match l {
        LayerParams::ConvGroup(p) => Some(&mut p.running),
        _ => None,
    });
    for (r, batch) in running.zip(&stats) {
        r.update(batch, momentum);
    }
    Ok((
        outputs,
        ForwardTape {
            kind: params.kind,
            subnets: layers,
        },
    ))
}

/// Inference-mode forward pass; parameters are read only.
pub fn forward_inference<T: Scalar>(
    params: &ModelParameters<T>,
    input: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    run(params, input, Mode::Inference, &mut Vec::new(), None)
}

/// Gradients of an objective with respect to all learnables, given its
/// gradient with respect to each stage's output (coarsest first). Gradient
/// reaching a stage through the next stage's coarse-mask input is included.
pub fn backward<T: Scalar>(
    params: &ModelParameters<T>,
    tape: &ForwardTape<T>,
    output_grads: &[Tensor<T>],
) -> Result<ModelGrads<T>> {
    if tape.kind != params.kind || tape.subnets.len() != params.subnets.len() {
        return Err(invalid!("forward tape belongs to a different network"));
    }
    if output_grads.len() != params.subnets.len() {
        return Err(invalid!(
            "expected {} output gradients, got {}",
            params.subnets.len(),
            output_grads.len()
        ));
    }
    let input_channels = params.kind.input_channels();
    let mut carried: Option<Tensor<T>> = None;
    let mut per_stage = Vec::with_capacity(params.subnets.len());
    for stage in (0..params.subnets.len()).rev() {
        let mut grad = output_grads[stage].clone();
        if let Some(extra) = carried.take() {
            grad.add_assign(&extra)?;
        }
        let (g_in, grads) = subnet_backward(
            &params.subnets[stage],
            &params.arch,
            &tape.subnets[stage],
            grad,
        )?;
        if stage > 0 {
            let (_, g_mask) = split_channels(&g_in, input_channels)?;
            carried = Some(upscale_backward(&g_mask, 2)?);
        }
        per_stage.push(grads);
    }
    per_stage.reverse();
    Ok(ModelGrads { subnets: per_stage })
}

fn forward_mode<T: Scalar>(
    params: &mut ModelParameters<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<Vec<Tensor<T>>> {
    match mode {
        Mode::Train => forward_train(params, input).map(|(out, _)| out),
        Mode::Inference => forward_inference(params, input),
    }
}

/// Segments one `1 × 1 × 128 × 128` slice; masks at 32, 64 and 128.
pub fn init_net_forward<T: Scalar>(
    slice: &Tensor<T>,
    params: &mut ModelParameters<T>,
    mode: Mode,
) -> Result<Vec<Tensor<T>>> {
    if params.kind != NetworkKind::Init {
        return Err(invalid!(
            "expected init network parameters, got {}",
            params.kind
        ));
    }
    forward_mode(params, slice, mode)
}

/// Predicts the next four masks; 4-channel stacks at 64 and 128.
pub fn prop_net_forward<T: Scalar>(
    input: &PropagationInput<T>,
    params: &mut ModelParameters<T>,
    mode: Mode,
) -> Result<Vec<Tensor<T>>> {
    if params.kind != NetworkKind::Propagation {
        return Err(invalid!(
            "expected propagation network parameters, got {}",
            params.kind
        ));
    }
    forward_mode(params, &input.to_tensor(), mode)
}
