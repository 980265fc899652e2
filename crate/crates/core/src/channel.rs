//! Per-channel add, multiply and sum on `(n, c, ...)` tensors.
//!
//! Broadcasting a `(c)` vector over a feature map makes candle's backward pass
//! reduce the gradient over strided axes, which dominates training time on
//! CPU. These ops do the same arithmetic with direct loops and give each
//! other as their gradients.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};

use crate::conv::{contiguous_slice, map_storage};
use crate::error::{Error, Result};

/// `(n, c, l)` view of a shape with at least two dimensions.
fn split_dims(dims: &[usize]) -> candle_core::Result<(usize, usize, usize)> {
    if dims.len() < 2 {
        return Err(candle_core::Error::Msg(format!(
            "channel op needs (n, c, ...), got {dims:?}"
        )));
    }
    Ok((dims[0], dims[1], dims[2..].iter().product()))
}

fn sum_kernel<T: WithDType>(x: &[T], (n, c, l): (usize, usize, usize)) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            let row = &x[(b * c + ch) * l..][..l];
            *acc += row.iter().fold(T::zero(), |s, &v| s + v);
        }
    }
    out
}

fn apply_kernel<T: WithDType>(x: &[T], v: &[T], (n, c, l): (usize, usize, usize), mul: bool) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for (ch, &k) in v.iter().enumerate().take(c) {
            let row = &x[(b * c + ch) * l..][..l];
            if mul {
                out.extend(row.iter().map(|&e| e * k));
            } else {
                out.extend(row.iter().map(|&e| e + k));
            }
        }
    }
    out
}

struct ChannelSum;

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = split_dims(layout.dims())?;
        let out = map_storage(storage, layout, |x| sum_kernel(x, d), |x| sum_kernel(x, d))?;
        Ok((out, Shape::from(d.1)))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let zeros = arg.zeros_like()?;
        Ok(Some(zeros.apply_op2(&grad.contiguous()?, ChannelApply { mul: false })?))
    }
}

/// `x + v` or `x * v` with `v` of length `c` broadcast over everything but
/// the channel axis.
struct ChannelApply {
    mul: bool,
}

impl CustomOp2 for ChannelApply {
    fn name(&self) -> &'static str {
        if self.mul {
            "channel-mul"
        } else {
            "channel-add"
        }
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = split_dims(l1.dims())?;
        if l2.dims() != [d.1] {
            return Err(candle_core::Error::Msg(format!(
                "{}: vector {:?} does not match {} channels",
                self.name(),
                l2.dims(),
                d.1
            )));
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(v)) => CpuStorage::F32(apply_kernel(
                contiguous_slice(x, l1)?,
                contiguous_slice(v, l2)?,
                d,
                self.mul,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(v)) => CpuStorage::F64(apply_kernel(
                contiguous_slice(x, l1)?,
                contiguous_slice(v, l2)?,
                d,
                self.mul,
            )),
            _ => {
                return Err(candle_core::Error::Msg(format!(
                    "{}: f32/f64 operands of one dtype",
                    self.name()
                )))
            }
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        v: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        if self.mul {
            let gx = grad.apply_op2(v, ChannelApply { mul: true })?;
            let gv = (&grad * x)?.apply_op1(ChannelSum)?;
            Ok((Some(gx), Some(gv)))
        } else {
            Ok((Some(grad.clone()), Some(grad.apply_op1(ChannelSum)?)))
        }
    }
}

fn check(x: &Tensor, v: &Tensor) -> Result<()> {
    let dims = x.dims();
    if dims.len() < 2 || v.dims() != [dims[1]] {
        return Err(Error::Shape(format!(
            "channel vector {:?} does not fit input {dims:?}",
            v.dims()
        )));
    }
    Ok(())
}

/// Sum over every axis except the channel axis: `(n, c, ...)` → `(c)`.
pub fn sum(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::Shape(format!(
            "channel sum needs (n, c, ...), got {:?}",
            x.dims()
        )));
    }
    Ok(x.contiguous()?.apply_op1(ChannelSum)?)
}

/// Mean over every axis except the channel axis.
pub fn mean(x: &Tensor) -> Result<Tensor> {
    let count = x.elem_count() / x.dim(1)?.max(1);
    Ok((sum(x)? / count as f64)?)
}

/// `x + v[c]` for every element of channel `c`.
pub fn add(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    check(x, v)?;
    Ok(x.contiguous()?
        .apply_op2(&v.contiguous()?, ChannelApply { mul: false })?)
}

/// `x * v[c]` for every element of channel `c`.
pub fn mul(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    check(x, v)?;
    Ok(x.contiguous()?
        .apply_op2(&v.contiguous()?, ChannelApply { mul: true })?)
}
