//! `CSEG` checkpoint files.
//!
//! Layout, all little endian:
//!
//! ```text
//! "CSEG"  u32 format_version  u32 network_kind (0 init, 1 propagation)
//! u32 finest_size  f32 slope  f32 bn_momentum  f32 bn_epsilon
//! u32 body_len, then body_len × (u32 tag, u32 a, u32 b)
//!     tag 0 conv group (a = kernel, b = channels), 1 downscale (a = factor),
//!     2 upscale (a = factor)
//! u32 tensor_count, then per tensor: u32 ndim, ndim × u32 extent, f32 values
//! ```
//!
//! Tensors follow sub-network order (coarsest first) and layer order. A conv
//! group stores weight, gamma, beta, running mean, running variance; a head
//! stores weight and bias.

use std::fs;
use std::path::Path;

use super::{
    init_parameters, Architecture, ConvGroupParams, HeadParams, LayerDesc, LayerParams,
    ModelParameters, NetworkKind,
};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSEG";
pub const FORMAT_VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor<T: Scalar>(&mut self, shape: &[usize], values: &[T]) {
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u32(d as u32);
        }
        for v in values {
            self.f32(v.to_f32().unwrap_or(f32::NAN));
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| format_err("checkpoint is truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self, expected: &[usize]) -> Result<Vec<f32>> {
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(4));
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        if shape != expected {
            return Err(format_err(format!(
                "tensor shape {shape:?} does not match architecture ({expected:?})"
            )));
        }
        let len: usize = shape.iter().product();
        let raw = self.take(
            len.checked_mul(4)
                .ok_or_else(|| format_err("tensor too large"))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Serialises parameters; values are stored in single precision.
pub fn encode_checkpoint<T: Scalar>(params: &ModelParameters<T>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(params.kind.code());

    let arch = &params.arch;
    w.u32(arch.finest_size as u32);
    w.f32(arch.slope);
    w.f32(arch.bn_momentum);
    w.f32(arch.bn_epsilon);
    w.u32(arch.body.len() as u32);
    for layer in &arch.body {
        let (tag, a, b) = match *layer {
            LayerDesc::ConvGroup { kernel, channels } => (0, kernel, channels),
            LayerDesc::Downscale(f) => (1, f, 0),
            LayerDesc::Upscale(f) => (2, f, 0),
            LayerDesc::Head { .. } => unreachable!("heads are implied, never part of the body"),
        };
        w.u32(tag);
        w.u32(a as u32);
        w.u32(b as u32);
    }

    let layers = params.subnets.iter().flatten();
    let count: usize = layers
        .clone()
        .map(|l| match l {
            LayerParams::ConvGroup(_) => 5,
            LayerParams::Head(_) => 2,
            LayerParams::Resample => 0,
        })
        .sum();
    w.u32(count as u32);
    for layer in layers {
        match layer {
            LayerParams::ConvGroup(p) => {
                let c = [p.gamma.len()];
                w.tensor(p.weight.shape(), p.weight.data());
                w.tensor(&c, &p.gamma);
                w.tensor(&c, &p.beta);
                w.tensor(&c, &p.running.mean);
                w.tensor(&c, &p.running.var);
            }
            LayerParams::Head(p) => {
                w.tensor(p.weight.shape(), p.weight.data());
                w.tensor(&[p.bias.len()], &p.bias);
            }
            LayerParams::Resample => {}
        }
    }
    w.0
}

/// Parses a checkpoint, validating magic, version, kind, architecture and
/// every tensor shape.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParameters<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)
        .map_err(|_| format_err("checkpoint is truncated"))?
        != CHECKPOINT_MAGIC
    {
        return Err(format_err("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format_err(format!(
            "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let kind = NetworkKind::from_code(r.u32()?)
        .ok_or_else(|| format_err("unknown network kind in checkpoint"))?;

    let finest_size = r.u32()? as usize;
    let slope = r.f32()?;
    let bn_momentum = r.f32()?;
    let bn_epsilon = r.f32()?;
    let body_len = r.u32()? as usize;
    if body_len > 1024 {
        return Err(format_err("implausible architecture size"));
    }
    let mut body = Vec::with_capacity(body_len);
    for _ in 0..body_len {
        let (tag, a, b) = (r.u32()?, r.u32()? as usize, r.u32()? as usize);
        body.push(match tag {
            0 => LayerDesc::ConvGroup {
                kernel: a,
                channels: b,
            },
            1 => LayerDesc::Downscale(a),
            2 => LayerDesc::Upscale(a),
            _ => return Err(format_err(format!("unknown layer tag {tag}"))),
        });
    }
    let arch = Architecture {
        finest_size,
        body,
        slope,
        bn_momentum,
        bn_epsilon,
    };
    arch.validate(kind)
        .map_err(|e| format_err(format!("invalid architecture: {e}")))?;

    // Shapes come from a freshly built skeleton; values are then overwritten.
    let mut params = init_parameters::<f32>(kind, &arch, 0)?;
    let expected: usize = params
        .subnets
        .iter()
        .flatten()
        .map(|l| match l {
            LayerParams::ConvGroup(_) => 5,
            LayerParams::Head(_) => 2,
            LayerParams::Resample => 0,
        })
        .sum();
    let count = r.u32()? as usize;
    if count != expected {
        return Err(format_err(format!(
            "checkpoint holds {count} tensors, architecture needs {expected}"
        )));
    }
    for layer in params.subnets.iter_mut().flatten() {
        match layer {
            LayerParams::ConvGroup(ConvGroupParams {
                weight,
                gamma,
                beta,
                running,
            }) => {
                let c = [gamma.len()];
                *weight = Tensor::new(weight.shape().to_vec(), r.tensor(weight.shape())?)?;
                *gamma = r.tensor(&c)?;
                *beta = r.tensor(&c)?;
                running.mean = r.tensor(&c)?;
                running.var = r.tensor(&c)?;
            }
            LayerParams::Head(HeadParams { weight, bias }) => {
                *weight = Tensor::new(weight.shape().to_vec(), r.tensor(weight.shape())?)?;
                *bias = r.tensor(&[bias.len()])?;
            }
            LayerParams::Resample => {}
        }
    }
    if r.pos != bytes.len() {
        return Err(format_err("trailing bytes after checkpoint"));
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParameters<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParameters<f32>> {
    decode_checkpoint(&fs::read(path)?)
}
