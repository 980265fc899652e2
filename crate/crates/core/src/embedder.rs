//! Voice embedding network: five stride-2 1-D convolutions over the 64 mel
//! bands (treated as channels) followed by global average pooling over time.

use candle_core::{DType, Device, Tensor};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{MelSpectrogram, MEL_BANDS};
use crate::error::{Error, Result};
use crate::nn::{self, BatchNorm, Conv1d, Linear, Mode, ParamStore, INIT_STD};
use crate::optim::{Adam, AdamConfig};

pub const EMBEDDING_DIM: usize = 64;
/// Channel progression of the five convolution layers, input first.
pub const CHANNELS: [usize; 6] = [MEL_BANDS, 256, 384, 576, 864, EMBEDDING_DIM];

#[derive(Debug, Clone, PartialEq)]
pub struct VoiceEmbedding(Vec<f64>);

impl VoiceEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != EMBEDDING_DIM {
            return Err(Error::Shape(format!(
                "voice embedding must have {EMBEDDING_DIM} entries, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite embedding entry".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; EMBEDDING_DIM])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// `(1, 64)` row.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.0, (1, EMBEDDING_DIM), device)?.to_dtype(dtype)?)
    }

    /// Convex combination `(1 - t) * self + t * other`.
    pub fn lerp(&self, other: &VoiceEmbedding, t: f64) -> VoiceEmbedding {
        VoiceEmbedding(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| (1.0 - t) * a + t * b)
                .collect(),
        )
    }
}

/// Output length of one `kernel 3 / stride 2 / padding 1` layer.
pub fn conv_output_len(t: usize) -> usize {
    (t - 1) / 2 + 1
}

/// `[t0, t1, ..., t5]` for an input of `t0` frames.
pub fn temporal_lengths(t0: usize) -> [usize; 6] {
    let mut out = [t0; 6];
    for i in 1..6 {
        out[i] = conv_output_len(out[i - 1]);
    }
    out
}

#[derive(Debug, Clone)]
struct Block {
    conv: Conv1d,
    bn: BatchNorm,
}

/// Embedder parameters plus batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct VoiceEmbedder {
    params: ParamStore,
    buffers: ParamStore,
    blocks: Vec<Block>,
    frozen: bool,
}

impl VoiceEmbedder {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(dtype, device);
        let mut buffers = ParamStore::new(dtype, device);
        let blocks = CHANNELS
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Ok(Block {
                    conv: Conv1d::new(
                        &mut params,
                        &format!("conv{i}"),
                        w[0],
                        w[1],
                        3,
                        2,
                        1,
                        INIT_STD,
                        &mut rng,
                    )?,
                    bn: BatchNorm::new(&mut params, &mut buffers, &format!("bn{i}"), w[1])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params,
            buffers,
            blocks,
            frozen: false,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn architecture() -> String {
        let chain: Vec<String> = CHANNELS.iter().map(|c| c.to_string()).collect();
        format!("voice-embedder:conv1d-k3s2p1:{}", chain.join("-"))
    }

    /// `(n, 64, t)` → pooled `(n, 64)`.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_traced(x, mode)?.0)
    }

    /// Also returns the shape after the input and after every layer.
    pub fn forward_traced(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Vec<Vec<usize>>)> {
        let (_, bands, _) = x.dims3()?;
        if bands != MEL_BANDS {
            return Err(Error::Shape(format!("expected {MEL_BANDS} mel bands, got {bands}")));
        }
        let mode = if self.frozen { Mode::Eval } else { mode };
        let mut h = x.clone();
        let mut shapes = vec![h.dims().to_vec()];
        for b in &self.blocks {
            h = b.bn.forward(&b.conv.forward(&h)?, mode)?.relu()?;
            shapes.push(h.dims().to_vec());
        }
        Ok((h.mean(2)?, shapes))
    }

    /// Embedding of one (already normalized) spectrogram. Gradients never flow
    /// back into the embedder through this call.
    pub fn embed(&self, m: &MelSpectrogram) -> Result<VoiceEmbedding> {
        let x = m.to_tensor(self.params.dtype(), self.params.device())?.unsqueeze(0)?;
        let e = self.forward(&x, Mode::Eval)?.detach();
        VoiceEmbedding::new(nn::to_f64_vec(&e)?)
    }

    pub fn digest(&self) -> Result<[u8; 32]> {
        let mut all = self.params.clone();
        all.extend_prefixed("buffer.", &self.buffers);
        all.digest()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Upper bound on the random crop length in frames.
    pub crop_frames: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 8,
            crop_frames: 100,
            adam: AdamConfig {
                learning_rate: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub train_accuracy: f64,
    pub final_loss: f64,
    pub speakers: usize,
}

/// Speaker-classification pre-training with a temporary softmax head. Returns
/// the embedder frozen.
pub fn pretrain_embedder(
    corpus: &[(MelSpectrogram, usize)],
    cfg: &PretrainConfig,
    dtype: DType,
    device: &Device,
) -> Result<(VoiceEmbedder, PretrainReport)> {
    let speakers = corpus.iter().map(|(_, s)| s + 1).max().unwrap_or(0);
    let mut counts = vec![0usize; speakers];
    for (_, s) in corpus {
        counts[*s] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::InvalidCorpus(format!(
            "speaker pre-training needs at least 2 speakers, found {present}"
        )));
    }
    if let Some(s) = counts.iter().position(|&c| c == 1) {
        return Err(Error::InvalidCorpus(format!("speaker {s} has a single recording")));
    }
    let min_frames = corpus.iter().map(|(m, _)| m.frames()).min().unwrap_or(0);
    let crop = cfg.crop_frames.min(min_frames).max(1);

    let embedder = VoiceEmbedder::new(cfg.seed, dtype, device)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_d0fa_0d10);
    let mut head_store = ParamStore::new(dtype, device);
    let head = Linear::new(
        &mut head_store,
        "head",
        EMBEDDING_DIM,
        speakers,
        INIT_STD * 5.0,
        &mut rng,
    )?;
    let mut all = embedder.params.clone();
    all.extend_prefixed("head.", &head_store);
    let mut opt = Adam::new(&all, cfg.adam)?;

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut xs = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (m, s) = &corpus[i];
                let start = rng.random_range(0..=m.frames() - crop);
                xs.push(m.crop(start, crop)?.to_tensor(dtype, device)?);
                labels.push(*s as u32);
            }
            let x = Tensor::stack(&xs, 0)?;
            let logits = head.forward(&embedder.forward(&x, Mode::Train)?)?;
            let loss = cross_entropy(&logits, &labels)?;
            final_loss = nn::scalar(&loss)?;
            if !final_loss.is_finite() {
                return Err(Error::NonFinite(format!("pre-training loss at epoch {epoch}")));
            }
            epoch_loss += final_loss;
            batches += 1;
            opt.step(&loss.backward()?)?;
        }
        info!("pretrain epoch {epoch}: mean loss {:.4}", epoch_loss / batches as f64);
    }

    let mut embedder = embedder;
    embedder.freeze();
    let mut correct = 0;
    for (m, s) in corpus {
        let x = m.to_tensor(dtype, device)?.unsqueeze(0)?;
        let logits = nn::to_f64_vec(&head.forward(&embedder.forward(&x, Mode::Eval)?)?)?;
        let pred = argmax(&logits);
        if pred == *s {
            correct += 1;
        }
    }
    let report = PretrainReport {
        train_accuracy: correct as f64 / corpus.len() as f64,
        final_loss,
        speakers: present,
    };
    info!("pretrain accuracy {:.3}", report.train_accuracy);
    Ok((embedder, report))
}

/// Mean cross-entropy of `(n, k)` logits against integer labels.
pub(crate) fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let logp = nn::log_softmax(logits)?;
    let idx = Tensor::from_slice(labels, (labels.len(), 1), logits.device())?;
    Ok(logp.gather(&idx, 1)?.neg()?.mean_all()?)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temporal_chain_for_298_frames() {
        assert_eq!(temporal_lengths(298), [298, 149, 75, 38, 19, 10]);
        assert_eq!(temporal_lengths(1), [1; 6]);
    }

    #[test]
    fn forward_shapes_follow_recurrence() {
        let e = VoiceEmbedder::new(0, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 64, 298), DType::F32, &Device::Cpu).unwrap();
        let (y, shapes) = e.forward_traced(&x, Mode::Eval).unwrap();
        let t: Vec<usize> = shapes.iter().map(|s| s[2]).collect();
        assert_eq!(t, vec![298, 149, 75, 38, 19, 10]);
        let c: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
        assert_eq!(c, CHANNELS.to_vec());
        assert_eq!(y.dims(), &[1, 64]);
    }

    #[test]
    fn zero_input_gives_zero_embedding() {
        let e = VoiceEmbedder::new(3, DType::F64, &Device::Cpu).unwrap();
        let m = MelSpectrogram::from_values(vec![0.0; 64 * 7], 64, 7).unwrap();
        let v = e.embed(&m).unwrap();
        assert!(v.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn wrong_band_count_is_shape_error() {
        let e = VoiceEmbedder::new(0, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 40, 10), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(e.forward(&x, Mode::Eval), Err(Error::Shape(_))));
        assert!(VoiceEmbedding::new(vec![0.0; 63]).is_err());
    }

    #[test]
    fn single_speaker_corpus_rejected() {
        let m = MelSpectrogram::from_values(vec![0.5; 64 * 20], 64, 20).unwrap();
        let corpus = vec![(m.clone(), 0), (m, 0)];
        let r = pretrain_embedder(&corpus, &PretrainConfig::default(), DType::F32, &Device::Cpu);
        assert!(matches!(r, Err(Error::InvalidCorpus(_))));
    }
}
