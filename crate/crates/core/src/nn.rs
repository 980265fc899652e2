//! Small layer toolkit on top of `candle_core`: named parameter stores, the
//! handful of layers the networks need, and numerically careful activations.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::{channel, conv};

pub const INIT_STD: f64 = 0.02;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Whether batch-norm layers normalize with batch statistics (and update their
/// running estimates) or with the stored running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named, ordered collection of variables.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, t: Tensor) -> Result<Var> {
        if self.vars.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name, var.clone());
        Ok(var)
    }

    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        self.insert(name.into(), t)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, self.dtype, &self.device)? * value)?;
        self.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Merges another store under a name prefix, sharing the same variables.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.vars.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn digest(&self) -> Result<[u8; 32]> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(tensor_bytes(var.as_tensor())?);
        }
        Ok(h.finalize().into())
    }

    /// Replaces every variable's value from `values`, which must hold exactly
    /// the same names and shapes.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.vars.len(),
                values.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }
}

/// Little-endian raw bytes of a tensor in its own dtype.
pub fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::InvalidInput(format!("unsupported dtype {other:?}"))),
    })
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.normal(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], INIT_STD, rng)?,
            bias: store.constant(format!("{name}.bias"), &[c_out], 0.0)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv::conv2d(x, self.weight.as_tensor(), self.stride, self.padding)?;
        channel::add(&y, self.bias.as_tensor())
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.normal(format!("{name}.weight"), &[c_out, c_in, kernel], std, rng)?,
            bias: store.constant(format!("{name}.bias"), &[c_out], 0.0)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv::conv1d(x, self.weight.as_tensor(), self.stride, self.padding)?;
        channel::add(&y, self.bias.as_tensor())
    }
}

/// Transpose convolution, weight layout `(c_in, c_out, k, k)`. The weight can
/// be replaced per call, which is how decoder gating is applied.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.normal(format!("{name}.weight"), &[c_in, c_out, kernel, kernel], INIT_STD, rng)?,
            bias: store.constant(format!("{name}.bias"), &[c_out], 0.0)?,
            stride,
            padding,
            output_padding,
        })
    }

    pub fn forward_with_weight(&self, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
        if weight.dims() != self.weight.dims() {
            return Err(Error::Shape(format!(
                "transpose-conv weight {:?} does not match {:?}",
                weight.dims(),
                self.weight.dims()
            )));
        }
        let y = conv::conv_transpose2d(x, weight, self.stride, self.padding, self.output_padding)?;
        channel::add(&y, self.bias.as_tensor())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with_weight(x, self.weight.as_tensor())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.normal(format!("{name}.weight"), &[d_out, d_in], std, rng)?,
            bias: store.constant(format!("{name}.bias"), &[d_out], 0.0)?,
        })
    }

    /// `x`: `(n, in)` → `(n, out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Batch normalization over every axis except the channel axis (axis 1).
/// Works for `(n, c, l)` and `(n, c, h, w)` inputs.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
}

impl BatchNorm {
    pub fn new(params: &mut ParamStore, buffers: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: params.constant(format!("{name}.gamma"), &[channels], 1.0)?,
            beta: params.constant(format!("{name}.beta"), &[channels], 0.0)?,
            running_mean: buffers.constant(format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: buffers.constant(format!("{name}.running_var"), &[channels], 1.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        if dims.len() < 3 {
            return Err(Error::Shape(format!(
                "batch norm needs (n, c, ...) input, got {dims:?}"
            )));
        }
        let c = dims[1];
        let (centered, var) = match mode {
            Mode::Train => {
                let count = x.elem_count() / c;
                let mean = channel::mean(x)?;
                let centered = channel::add(x, &mean.neg()?)?;
                let var = channel::mean(&centered.sqr()?)?;
                let unbiased = if count > 1 {
                    (var.detach() * (count as f64 / (count - 1) as f64))?
                } else {
                    var.detach()
                };
                let m = BN_MOMENTUM;
                let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach() * m)?)?;
                let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
                (centered, var)
            }
            Mode::Eval => (
                channel::add(x, &self.running_mean.as_tensor().neg()?)?,
                self.running_var.as_tensor().clone(),
            ),
        };
        let normed = channel::mul(&centered, &(var + BN_EPS)?.sqrt()?.recip()?)?;
        channel::add(&channel::mul(&normed, self.gamma.as_tensor())?, self.beta.as_tensor())
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(((x.relu()? * (1.0 - LEAKY_SLOPE))? + (x * LEAKY_SLOPE)?)?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Log-softmax along the last axis.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    Ok(log_softmax(x)?.exp()?)
}

/// First element of a tensor as `f64`, whatever its dtype.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
