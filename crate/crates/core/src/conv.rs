//! Convolutions as patch extraction plus matrix multiply.
//!
//! `Im2Col` and `Col2Im` are adjoint linear maps, so each one's backward pass
//! is the other. Everything else goes through candle's matmul, which keeps the
//! backward pass about as cheap as the forward pass on CPU.
//!
//! 2x2 max pooling lives here too: candle's own max-pool backward divides the
//! gradient of a unique maximum by the window size.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

/// Patch geometry for a `(c, h, w)` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patches {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Patches {
    fn out_dim(len: usize, k: usize, s: usize, p: usize) -> Option<usize> {
        (len + 2 * p).checked_sub(k).map(|v| v / s + 1)
    }

    pub fn out_height(&self) -> usize {
        Self::out_dim(self.height, self.kernel.0, self.stride.0, self.padding.0).unwrap_or(0)
    }

    pub fn out_width(&self) -> usize {
        Self::out_dim(self.width, self.kernel.1, self.stride.1, self.padding.1).unwrap_or(0)
    }

    /// Rows of the column matrix: `c * kh * kw`.
    pub fn rows(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    /// Columns of the column matrix: one per output position.
    pub fn cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn validate(&self) -> Result<()> {
        let ok = self.stride.0 > 0
            && self.stride.1 > 0
            && Self::out_dim(self.height, self.kernel.0, self.stride.0, self.padding.0).is_some()
            && Self::out_dim(self.width, self.kernel.1, self.stride.1, self.padding.1).is_some();
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!("kernel does not fit the input: {self:?}")))
        }
    }

    /// Calls `f(row, col, image_offset, count)` for each run of in-bounds taps:
    /// columns `col..col + count` read image offsets `image_offset + i * stride.1`.
    fn for_each_span(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let (oh, ow) = (self.out_height(), self.out_width());
        for c in 0..self.channels {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    // ix = ox * sw + kj - pw must land in [0, width)
                    let lo = pw.saturating_sub(kj).div_ceil(sw);
                    let hi = ((self.width + pw).saturating_sub(kj + 1) / sw + 1).min(ow);
                    if lo >= hi || self.width + pw <= kj {
                        continue;
                    }
                    for oy in 0..oh {
                        let Some(iy) = (oy * sh + ki).checked_sub(ph).filter(|&y| y < self.height) else {
                            continue;
                        };
                        let ix = lo * sw + kj - pw;
                        f(row, oy * ow + lo, (c * self.height + iy) * self.width + ix, hi - lo);
                    }
                }
            }
        }
    }
}

pub(crate) fn contiguous_slice<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(candle_core::Error::Msg("custom op expects a contiguous input".into())),
    }
}

/// Applies `f32`/`f64` kernels to a contiguous CPU storage.
pub(crate) fn map_storage(
    storage: &CpuStorage,
    layout: &Layout,
    f32_fn: impl FnOnce(&[f32]) -> Vec<f32>,
    f64_fn: impl FnOnce(&[f64]) -> Vec<f64>,
) -> candle_core::Result<CpuStorage> {
    match storage {
        CpuStorage::F32(d) => Ok(CpuStorage::F32(f32_fn(contiguous_slice(d, layout)?))),
        CpuStorage::F64(d) => Ok(CpuStorage::F64(f64_fn(contiguous_slice(d, layout)?))),
        _ => Err(candle_core::Error::Msg("only f32/f64 supported".into())),
    }
}

/// `(n, c, h, w)` → `(c*kh*kw, n*oh*ow)`; sample `b` owns columns
/// `b*oh*ow..(b+1)*oh*ow`. Putting the batch in the columns lets a single
/// matmul with the weight matrix cover every sample.
struct Im2Col(Patches);

/// `(c*kh*kw, n*oh*ow)` → `(n, c, h, w)`, summing overlapping taps.
struct Col2Im(Patches);

impl Im2Col {
    fn run<T: WithDType>(&self, src: &[T], n: usize) -> Vec<T> {
        let p = self.0;
        let (img, cols) = (p.channels * p.height * p.width, p.cols());
        let stride = n * cols;
        let mut out = vec![T::zero(); p.rows() * stride];
        let sw = p.stride.1;
        for b in 0..n {
            let src = &src[b * img..(b + 1) * img];
            p.for_each_span(|row, c, off, count| {
                let d = &mut out[row * stride + b * cols + c..][..count];
                for (i, v) in d.iter_mut().enumerate() {
                    *v = src[off + i * sw];
                }
            });
        }
        out
    }
}

impl Col2Im {
    fn run<T: WithDType>(&self, src: &[T], n: usize) -> Vec<T> {
        let p = self.0;
        let (img, cols) = (p.channels * p.height * p.width, p.cols());
        let stride = n * cols;
        let mut out = vec![T::zero(); n * img];
        let sw = p.stride.1;
        for b in 0..n {
            let dst = &mut out[b * img..(b + 1) * img];
            p.for_each_span(|row, c, off, count| {
                let s = &src[row * stride + b * cols + c..][..count];
                for (i, v) in s.iter().enumerate() {
                    dst[off + i * sw] += *v;
                }
            });
        }
        out
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let p = self.0;
        let dims = layout.dims();
        if dims.len() != 4 || dims[1..] != [p.channels, p.height, p.width] {
            return Err(candle_core::Error::Msg(format!(
                "im2col: unexpected input shape {dims:?}"
            )));
        }
        let n = dims[0];
        let out = map_storage(storage, layout, |d| self.run(d, n), |d| self.run(d, n))?;
        Ok((out, Shape::from((p.rows(), n * p.cols()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let p = self.0;
        let dims = layout.dims();
        if dims.len() != 2 || dims[0] != p.rows() || p.cols() == 0 || !dims[1].is_multiple_of(p.cols()) {
            return Err(candle_core::Error::Msg(format!(
                "col2im: unexpected input shape {dims:?}"
            )));
        }
        let n = dims[1] / p.cols();
        let out = map_storage(storage, layout, |d| self.run(d, n), |d| self.run(d, n))?;
        Ok((out, Shape::from((n, p.channels, p.height, p.width))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

pub fn im2col(x: &Tensor, p: Patches) -> Result<Tensor> {
    p.validate()?;
    Ok(x.contiguous()?.apply_op1(Im2Col(p))?)
}

pub fn col2im(x: &Tensor, p: Patches) -> Result<Tensor> {
    p.validate()?;
    Ok(x.contiguous()?.apply_op1(Col2Im(p))?)
}

fn dims4(x: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    x.dims4()
        .map_err(|_| Error::Shape(format!("{what} expects a 4-d input, got {:?}", x.dims())))
}

/// Cross-correlation with weight `(c_out, c_in, kh, kw)`, no bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x, "conv2d")?;
    let (c_out, c_in, kh, kw) = dims4(weight, "conv2d weight")?;
    if c_in != c {
        return Err(Error::Shape(format!(
            "conv2d: input has {c} channels, weight expects {c_in}"
        )));
    }
    let p = Patches {
        channels: c,
        height: h,
        width: w,
        kernel: (kh, kw),
        stride: (stride, stride),
        padding: (padding, padding),
    };
    let y = weight.reshape((c_out, p.rows()))?.matmul(&im2col(x, p)?)?;
    unbatch(&y, n, &[c_out, p.out_height(), p.out_width()])
}

/// `(c, n*l)` → `(n, c, ...)`.
fn unbatch(y: &Tensor, n: usize, per_sample: &[usize]) -> Result<Tensor> {
    let mut shape = vec![n];
    shape.extend_from_slice(per_sample);
    if n == 1 {
        return Ok(y.reshape(shape)?);
    }
    let c = per_sample[0];
    Ok(y.reshape((c, n, ()))?.transpose(0, 1)?.contiguous()?.reshape(shape)?)
}

/// `(n, c, ...)` → `(c, n*l)`.
fn batch_columns(x: &Tensor) -> Result<Tensor> {
    let (n, c) = (x.dim(0)?, x.dim(1)?);
    if n == 1 {
        return Ok(x.reshape((c, ()))?);
    }
    Ok(x.reshape((n, c, ()))?.transpose(0, 1)?.contiguous()?.reshape((c, ()))?)
}

/// Cross-correlation over time with weight `(c_out, c_in, k)`, no bias.
pub fn conv1d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, c, t) = x
        .dims3()
        .map_err(|_| Error::Shape(format!("conv1d expects a 3-d input, got {:?}", x.dims())))?;
    let (c_out, c_in, k) = weight
        .dims3()
        .map_err(|_| Error::Shape(format!("conv1d weight must be 3-d, got {:?}", weight.dims())))?;
    if c_in != c {
        return Err(Error::Shape(format!(
            "conv1d: input has {c} channels, weight expects {c_in}"
        )));
    }
    let p = Patches {
        channels: c,
        height: 1,
        width: t,
        kernel: (1, k),
        stride: (1, stride),
        padding: (0, padding),
    };
    let cols = im2col(&x.reshape((n, c, 1, t))?, p)?;
    let y = weight.reshape((c_out, p.rows()))?.matmul(&cols)?;
    unbatch(&y, n, &[c_out, p.out_width()])
}

/// Transposed convolution with weight `(c_in, c_out, k, k)`, no bias. Output
/// side is `(h - 1) * stride - 2 * padding + k + output_padding`.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor> {
    let (_, c, h, w) = dims4(x, "conv_transpose2d")?;
    let (c_in, c_out, kh, kw) = dims4(weight, "conv_transpose2d weight")?;
    if c_in != c {
        return Err(Error::Shape(format!(
            "conv_transpose2d: input has {c} channels, weight expects {c_in}"
        )));
    }
    let out = |len: usize, k: usize| ((len - 1) * stride + k + output_padding).checked_sub(2 * padding);
    let (Some(oh), Some(ow)) = (out(h, kh), out(w, kw)) else {
        return Err(Error::Shape("conv_transpose2d: padding exceeds output".into()));
    };
    let p = Patches {
        channels: c_out,
        height: oh,
        width: ow,
        kernel: (kh, kw),
        stride: (stride, stride),
        padding: (padding, padding),
    };
    if p.out_height() != h || p.out_width() != w {
        return Err(Error::Shape(format!(
            "conv_transpose2d: inconsistent geometry {p:?} for input {h}x{w}"
        )));
    }
    let wt = weight.reshape((c_in, p.rows()))?.t()?;
    col2im(&wt.matmul(&batch_columns(x)?)?, p)
}

/// Index of the first maximum of each 2x2 window, relative to the plane.
fn pool_argmax<T: WithDType>(plane: &[T], w: usize, oi: usize, oj: usize) -> usize {
    let base = 2 * oi * w + 2 * oj;
    [base, base + 1, base + w, base + w + 1]
        .into_iter()
        .fold(base, |best, k| if plane[k] > plane[best] { k } else { best })
}

struct MaxPool2x2;

/// Routes `grad` (pooled shape) to the winning input positions of `x`.
struct MaxPool2x2Backward;

fn pool_kernel<T: WithDType>(x: &[T], (nc, h, w): (usize, usize, usize)) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(nc * oh * ow);
    for plane in x.chunks_exact(h * w).take(nc) {
        for oi in 0..oh {
            for oj in 0..ow {
                out.push(plane[pool_argmax(plane, w, oi, oj)]);
            }
        }
    }
    out
}

fn unpool_kernel<T: WithDType>(x: &[T], g: &[T], (nc, h, w): (usize, usize, usize)) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); nc * h * w];
    for p in 0..nc {
        let plane = &x[p * h * w..][..h * w];
        for oi in 0..oh {
            for oj in 0..ow {
                out[p * h * w + pool_argmax(plane, w, oi, oj)] = g[(p * oh + oi) * ow + oj];
            }
        }
    }
    out
}

fn pool_dims(dims: &[usize]) -> candle_core::Result<(usize, usize, usize)> {
    match dims {
        [n, c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok((n * c, *h, *w)),
        _ => Err(candle_core::Error::Msg(format!(
            "max_pool2x2: needs (n, c, even, even), got {dims:?}"
        ))),
    }
}

impl CustomOp1 for MaxPool2x2 {
    fn name(&self) -> &'static str {
        "max-pool-2x2"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = pool_dims(layout.dims())?;
        let dims = layout.dims();
        let out = map_storage(storage, layout, |x| pool_kernel(x, d), |x| pool_kernel(x, d))?;
        Ok((out, Shape::from((dims[0], dims[1], d.1 / 2, d.2 / 2))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(
            arg.contiguous()?
                .apply_op2_no_bwd(&grad.contiguous()?, &MaxPool2x2Backward)?,
        ))
    }
}

impl CustomOp2 for MaxPool2x2Backward {
    fn name(&self) -> &'static str {
        "max-pool-2x2-backward"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = pool_dims(l1.dims())?;
        if l2.dims().iter().product::<usize>() != d.0 * (d.1 / 2) * (d.2 / 2) {
            return Err(candle_core::Error::Msg(format!(
                "max_pool2x2 backward: gradient {:?}",
                l2.dims()
            )));
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(unpool_kernel(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?, d))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(unpool_kernel(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?, d))
            }
            _ => {
                return Err(candle_core::Error::Msg(
                    "max_pool2x2 backward: f32/f64 operands of one dtype".into(),
                ))
            }
        };
        Ok((out, l1.shape().clone()))
    }
}

/// 2x2 max pooling with stride 2. Ties go to the first position in
/// row-major order, which also receives the whole gradient.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = dims4(x, "max_pool2x2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "max_pool2x2 needs even height and width, got {h}x{w}"
        )));
    }
    Ok(x.contiguous()?.apply_op1(MaxPool2x2)?)
}
