//! Discriminator and identity classifier sharing one convolutional trunk.
//!
//! Trunk: 1x1 conv to 32 channels, four 3x3 stride-2 convs (64, 128, 256,
//! 512), then a 4x4 valid conv down to a 64-d feature, all with LeakyReLU(0.2).
//! The discriminator head is `64 -> 1` + sigmoid, the classifier head
//! `64 -> k` + softmax.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::generator::{FaceImage, IMAGE_CHANNELS, IMAGE_SIZE};
use crate::nn::{self, Conv2d, Linear, ParamStore, INIT_STD};

pub const FEATURE_DIM: usize = 64;

/// `(c_out, kernel, stride, padding)` for each trunk layer.
pub const TRUNK_LAYERS: [(usize, usize, usize, usize); 6] = [
    (32, 1, 1, 0),
    (64, 3, 2, 1),
    (128, 3, 2, 1),
    (256, 3, 2, 1),
    (512, 3, 2, 1),
    (FEATURE_DIM, 4, 1, 0),
];

#[derive(Debug, Clone)]
pub struct Critics {
    trunk_params: ParamStore,
    disc_params: ParamStore,
    cls_params: ParamStore,
    trunk: Vec<Conv2d>,
    disc_head: Linear,
    cls_head: Linear,
    identities: usize,
}

impl Critics {
    pub fn new(identities: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if identities < 2 {
            return Err(Error::InvalidInput(format!(
                "classifier needs at least 2 identities, got {identities}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trunk_params = ParamStore::new(dtype, device);
        let mut c_in = IMAGE_CHANNELS;
        let mut trunk = Vec::with_capacity(TRUNK_LAYERS.len());
        for (i, &(c_out, k, s, p)) in TRUNK_LAYERS.iter().enumerate() {
            trunk.push(Conv2d::new(
                &mut trunk_params,
                &format!("trunk{i}"),
                c_in,
                c_out,
                k,
                s,
                p,
                &mut rng,
            )?);
            c_in = c_out;
        }
        let mut disc_params = ParamStore::new(dtype, device);
        let disc_head = Linear::new(&mut disc_params, "disc", FEATURE_DIM, 1, INIT_STD, &mut rng)?;
        let mut cls_params = ParamStore::new(dtype, device);
        let cls_head = Linear::new(&mut cls_params, "cls", FEATURE_DIM, identities, INIT_STD, &mut rng)?;
        Ok(Self {
            trunk_params,
            disc_params,
            cls_params,
            trunk,
            disc_head,
            cls_head,
            identities,
        })
    }

    pub fn identities(&self) -> usize {
        self.identities
    }

    pub fn trunk_params(&self) -> &ParamStore {
        &self.trunk_params
    }

    pub fn disc_head_params(&self) -> &ParamStore {
        &self.disc_params
    }

    pub fn cls_head_params(&self) -> &ParamStore {
        &self.cls_params
    }

    /// Trunk plus discriminator head.
    pub fn discriminator_params(&self) -> ParamStore {
        let mut p = self.trunk_params.clone();
        p.extend_prefixed("", &self.disc_params);
        p
    }

    /// Trunk plus classifier head.
    pub fn classifier_params(&self) -> ParamStore {
        let mut p = self.trunk_params.clone();
        p.extend_prefixed("", &self.cls_params);
        p
    }

    pub fn all_params(&self) -> ParamStore {
        let mut p = self.trunk_params.clone();
        p.extend_prefixed("", &self.disc_params);
        p.extend_prefixed("", &self.cls_params);
        p
    }

    pub fn architecture(&self) -> String {
        let chain: Vec<String> = TRUNK_LAYERS
            .iter()
            .map(|(c, k, s, p)| format!("{c}k{k}s{s}p{p}"))
            .collect();
        format!("critic-trunk:{}:heads-1-{}", chain.join("-"), self.identities)
    }

    /// `(n, 3, 64, 64)` → `(n, 64)`; also returns each layer's output shape.
    pub fn trunk_traced(&self, x: &Tensor) -> Result<(Tensor, Vec<Vec<usize>>)> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1..] != [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::Shape(format!("critic input must be nx3x64x64, got {dims:?}")));
        }
        let mut h = x.clone();
        let mut shapes = Vec::with_capacity(self.trunk.len());
        for conv in &self.trunk {
            h = nn::leaky_relu(&conv.forward(&h)?)?;
            shapes.push(h.dims().to_vec());
        }
        Ok((h.flatten_from(1)?, shapes))
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.trunk_traced(x)?.0)
    }

    /// Discriminator pre-sigmoid output, `(n, 1)`.
    pub fn disc_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.disc_head.forward(&self.features(x)?)
    }

    /// Classifier pre-softmax output, `(n, k)`.
    pub fn cls_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.cls_head.forward(&self.features(x)?)
    }

    pub fn disc_head_forward(&self, features: &Tensor) -> Result<Tensor> {
        self.disc_head.forward(features)
    }

    pub fn cls_head_forward(&self, features: &Tensor) -> Result<Tensor> {
        self.cls_head.forward(features)
    }

    pub fn trunk_features(&self, f: &FaceImage) -> Result<Vec<f64>> {
        nn::to_f64_vec(&self.features(&f.batch(self.trunk_params.dtype())?)?)
    }

    /// Probability that `f` is a real face.
    pub fn discriminate(&self, f: &FaceImage) -> Result<f64> {
        let z = self.disc_logits(&f.batch(self.trunk_params.dtype())?)?;
        nn::scalar(&nn::sigmoid(&z)?)
    }

    /// Probability over identities.
    pub fn classify(&self, f: &FaceImage) -> Result<Vec<f64>> {
        let z = self.cls_logits(&f.batch(self.trunk_params.dtype())?)?;
        nn::to_f64_vec(&nn::softmax(&z)?)
    }

    pub fn digest(&self) -> Result<[u8; 32]> {
        self.all_params().digest()
    }
}
