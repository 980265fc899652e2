//! The controlled autoencoder: a U-net over 3x64x64 faces whose decoder
//! transpose-convolution filters are multiplied, element by element, by
//! sigmoid gates computed from a voice embedding.
//!
//! Encoder: four DoubleConv blocks (64, 128, 256, 512 channels at full width),
//! each followed by 2x2 max pooling, leaving a 512x4x4 bottleneck. Decoder:
//! four stride-2 transpose convolutions back up to 64x64, each followed by
//! concatenation with the matching encoder feature map and a DoubleConv. A 1x1
//! convolution and `tanh` produce the RGB output.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv;
use crate::embedder::{VoiceEmbedding, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::nn::{self, BatchNorm, Conv2d, ConvTranspose2d, Linear, Mode, ParamStore, INIT_STD};

pub const IMAGE_SIZE: usize = 64;
pub const IMAGE_CHANNELS: usize = 3;
pub const FULL_WIDTH_CHANNELS: [usize; 4] = [64, 128, 256, 512];
pub const TRANSPOSE_KERNEL: usize = 3;

/// A face as a `(3, 64, 64)` tensor with values in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct FaceImage(Tensor);

impl FaceImage {
    pub fn new(t: Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            _ => t,
        };
        if t.dims() != [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::Shape(format!("face image must be 3x64x64, got {:?}", t.dims())));
        }
        let v = nn::to_f64_vec(&t)?;
        if v.iter().any(|x| !x.is_finite() || x.abs() > 1.0) {
            return Err(Error::InvalidInput("face values must lie in [-1, 1]".into()));
        }
        Ok(Self(t.detach()))
    }

    pub fn from_vec(values: Vec<f32>) -> Result<Self> {
        if values.len() != IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE {
            return Err(Error::Shape(format!(
                "face image needs 12288 values, got {}",
                values.len()
            )));
        }
        Self::new(Tensor::from_vec(
            values,
            (IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE),
            &Device::Cpu,
        )?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// `(1, 3, 64, 64)` in the requested dtype.
    pub fn batch(&self, dtype: DType) -> Result<Tensor> {
        Ok(self.0.to_dtype(dtype)?.unsqueeze(0)?)
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.0.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
    }
}

impl PartialEq for FaceImage {
    fn eq(&self, other: &Self) -> bool {
        match (self.to_vec(), other.to_vec()) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Channel-width multiplier applied to 64/128/256/512.
    pub width: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { width: 1.0 }
    }
}

impl GeneratorConfig {
    pub fn toy() -> Self {
        Self { width: 0.125 }
    }

    pub fn channels(&self) -> [usize; 4] {
        FULL_WIDTH_CHANNELS.map(|c| ((c as f64 * self.width).round() as usize).max(1))
    }

    pub fn architecture(&self) -> String {
        let c = self.channels();
        format!(
            "cae-generator:unet:{}-{}-{}-{}:tconv-k{TRANSPOSE_KERNEL}s2:gated-tconv-4",
            c[0], c[1], c[2], c[3]
        )
    }
}

/// Per-decoder-layer gates, each shaped like that layer's transpose-conv weight.
#[derive(Debug, Clone)]
pub struct GateSet(Vec<Tensor>);

impl GateSet {
    pub fn new(gates: Vec<Tensor>) -> Self {
        Self(gates)
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.0
    }

    pub fn num_gates(&self) -> usize {
        self.0.iter().map(|g| g.elem_count()).sum()
    }

    /// Every gate set to `value`, shaped for `g`.
    pub fn constant(g: &Generator, value: f64) -> Result<Self> {
        let dtype = g.params.dtype();
        Ok(Self(
            g.up.iter()
                .map(|t| Ok((Tensor::ones(t.weight.dims(), dtype, g.params.device())? * value)?))
                .collect::<Result<Vec<_>>>()?,
        ))
    }

    pub fn to_f64_vecs(&self) -> Result<Vec<Vec<f64>>> {
        self.0.iter().map(nn::to_f64_vec).collect()
    }
}

/// Encoder feature maps, shallowest first, plus the pooled bottleneck.
#[derive(Debug, Clone)]
pub struct SkipStack {
    pub skips: Vec<Tensor>,
    pub bottleneck: Tensor,
}

impl SkipStack {
    pub fn spatial_sizes(&self) -> Vec<usize> {
        self.skips
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .map(|t| t.dims()[2])
            .collect()
    }
}

#[derive(Debug, Clone)]
struct DoubleConv {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
}

impl DoubleConv {
    fn new(
        params: &mut ParamStore,
        buffers: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(params, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1, rng)?,
            bn1: BatchNorm::new(params, buffers, &format!("{name}.bn1"), c_out)?,
            conv2: Conv2d::new(params, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, rng)?,
            bn2: BatchNorm::new(params, buffers, &format!("{name}.bn2"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        Ok(self.bn2.forward(&self.conv2.forward(&h)?, mode)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    params: ParamStore,
    buffers: ParamStore,
    down: Vec<DoubleConv>,
    up: Vec<ConvTranspose2d>,
    up_conv: Vec<DoubleConv>,
    out: Conv2d,
    gate_proj: Vec<Linear>,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if !(cfg.width > 0.0 && cfg.width.is_finite()) {
            return Err(Error::Config(format!("invalid width multiplier {}", cfg.width)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(dtype, device);
        let mut buffers = ParamStore::new(dtype, device);
        let c = cfg.channels();

        let mut down = Vec::with_capacity(4);
        let mut c_in = IMAGE_CHANNELS;
        for (i, &c_out) in c.iter().enumerate() {
            down.push(DoubleConv::new(
                &mut params,
                &mut buffers,
                &format!("enc{i}"),
                c_in,
                c_out,
                &mut rng,
            )?);
            c_in = c_out;
        }

        // Decoder stage j upsamples from depth 4-j to depth 3-j and merges the
        // encoder map at that depth.
        let up_io = [
            (c[3], c[2], c[3]),
            (c[2], c[1], c[2]),
            (c[1], c[0], c[1]),
            (c[0], c[0], c[0]),
        ];
        let mut up = Vec::with_capacity(4);
        let mut up_conv = Vec::with_capacity(4);
        let mut gate_proj = Vec::with_capacity(4);
        for (j, &(t_in, t_out, skip)) in up_io.iter().enumerate() {
            let tconv = ConvTranspose2d::new(
                &mut params,
                &format!("dec{j}.up"),
                t_in,
                t_out,
                TRANSPOSE_KERNEL,
                2,
                1,
                1,
                &mut rng,
            )?;
            let n_weights = tconv.weight.elem_count();
            up.push(tconv);
            up_conv.push(DoubleConv::new(
                &mut params,
                &mut buffers,
                &format!("dec{j}.conv"),
                t_out + skip,
                t_out,
                &mut rng,
            )?);
            gate_proj.push(Linear::new(
                &mut params,
                &format!("gate{j}"),
                EMBEDDING_DIM,
                n_weights,
                INIT_STD,
                &mut rng,
            )?);
        }
        let out = Conv2d::new(&mut params, "out", c[0], IMAGE_CHANNELS, 1, 1, 0, &mut rng)?;
        Ok(Self {
            cfg,
            params,
            buffers,
            down,
            up,
            up_conv,
            out,
            gate_proj,
        })
    }

    pub fn config(&self) -> GeneratorConfig {
        self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Shapes of the gated transpose-conv weights, `(c_in, c_out, k, k)`.
    pub fn gated_weight_shapes(&self) -> Vec<Vec<usize>> {
        self.up.iter().map(|t| t.weight.dims().to_vec()).collect()
    }

    pub fn gate_projection_sizes(&self) -> Vec<(usize, usize)> {
        self.gate_proj
            .iter()
            .map(|l| (l.weight.dims()[1], l.weight.dims()[0]))
            .collect()
    }

    /// `x`: `(1, 3, 64, 64)`.
    pub fn encode(&self, x: &Tensor, mode: Mode) -> Result<SkipStack> {
        if x.dims() != [1, IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::Shape(format!(
                "generator input must be 1x3x64x64, got {:?}",
                x.dims()
            )));
        }
        let mut h = x.clone();
        let mut skips = Vec::with_capacity(4);
        for block in &self.down {
            let f = block.forward(&h, mode)?;
            h = conv::max_pool2x2(&f)?;
            skips.push(f);
        }
        Ok(SkipStack { skips, bottleneck: h })
    }

    /// `e`: `(1, 64)`. Gate for layer j is `sigmoid(W_j e + b_j)` reshaped to
    /// the layer's weight shape.
    pub fn compute_gates(&self, e: &Tensor) -> Result<GateSet> {
        if e.dims() != [1, EMBEDDING_DIM] {
            return Err(Error::Shape(format!(
                "voice embedding must be 1x64, got {:?}",
                e.dims()
            )));
        }
        let gates = self
            .gate_proj
            .iter()
            .zip(&self.up)
            .map(|(proj, tconv)| Ok(nn::sigmoid(&proj.forward(e)?)?.reshape(tconv.weight.dims())?))
            .collect::<Result<Vec<_>>>()?;
        Ok(GateSet(gates))
    }

    /// Gated decoding. `None` runs the plain U-net with the stored weights.
    pub fn decode(&self, s: &SkipStack, gates: Option<&GateSet>, mode: Mode) -> Result<Tensor> {
        if s.skips.len() != self.down.len() {
            return Err(Error::Shape(format!(
                "expected {} skip maps, got {}",
                self.down.len(),
                s.skips.len()
            )));
        }
        if let Some(g) = gates {
            if g.0.len() != self.up.len() {
                return Err(Error::Shape(format!(
                    "expected {} gate arrays, got {}",
                    self.up.len(),
                    g.0.len()
                )));
            }
        }
        let mut h = s.bottleneck.clone();
        for (j, (tconv, conv)) in self.up.iter().zip(&self.up_conv).enumerate() {
            h = match gates {
                Some(g) => {
                    let gate = &g.0[j];
                    if gate.dims() != tconv.weight.dims() {
                        return Err(Error::Shape(format!(
                            "gate {j} has shape {:?}, weight has {:?}",
                            gate.dims(),
                            tconv.weight.dims()
                        )));
                    }
                    let effective = (tconv.weight.as_tensor() * gate)?;
                    tconv.forward_with_weight(&h, &effective)?
                }
                None => tconv.forward(&h)?,
            };
            let skip = &s.skips[s.skips.len() - 1 - j];
            h = conv.forward(&Tensor::cat(&[&h, skip], 1)?, mode)?;
        }
        Ok(self.out.forward(&h)?.tanh()?)
    }

    /// Full differentiable pass: `(1,3,64,64)`, `(1,64)` → `(1,3,64,64)`.
    pub fn forward(&self, x: &Tensor, e: &Tensor, mode: Mode) -> Result<Tensor> {
        let s = self.encode(x, mode)?;
        let g = self.compute_gates(e)?;
        self.decode(&s, Some(&g), mode)
    }

    /// The un-gated autoencoder.
    pub fn forward_ungated(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let s = self.encode(x, mode)?;
        self.decode(&s, None, mode)
    }

    /// Inference: morph `f` toward the owner of `e`.
    pub fn generate(&self, f: &FaceImage, e: &VoiceEmbedding) -> Result<FaceImage> {
        let x = f.batch(self.dtype())?;
        let e = e.to_tensor(self.dtype(), self.device())?;
        FaceImage::new(self.forward(&x, &e, Mode::Eval)?.detach())
    }

    /// One independent forward per pair; weights are modulated per sample.
    pub fn generate_each(&self, pairs: &[(FaceImage, VoiceEmbedding)]) -> Result<Vec<FaceImage>> {
        pairs.iter().map(|(f, e)| self.generate(f, e)).collect()
    }

    pub fn digest(&self) -> Result<[u8; 32]> {
        self.params.digest()
    }
}
