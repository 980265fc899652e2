//! Browser demo. Three operations over a toy world of synthetic speakers and
//! faces: look at a voice's log-mel spectrogram, morph a proposal face towards
//! a blend of two voices, and inspect the decoder gates a voice produces.
//!
//! Without a checkpoint the models are freshly initialized; loading one trained
//! by the `cae` command line on a toy corpus with the same seed makes the
//! morphs meaningful.

use cae::audio::{self, Waveform, CANONICAL_SAMPLE_RATE, DEFAULT_ENERGY_QUANTILE};
use cae::checkpoint::Checkpoint;
use cae::critics::Critics;
use cae::data::{face_archetype, face_to_rgb, render_face, render_voice, voice_archetype};
use cae::embedder::{VoiceEmbedder, VoiceEmbedding};
use cae::generator::{FaceImage, Generator, GeneratorConfig};
use cae::training::TrainedModels;
use candle_core::{DType, Device};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js_err(e: cae::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// RGBA pixels plus their size, ready for `ImageData`.
#[wasm_bindgen]
pub struct Picture {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    start_seconds: f64,
    end_seconds: f64,
}

#[wasm_bindgen]
impl Picture {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// Speech start for spectrograms, in seconds; 0 for faces.
    #[wasm_bindgen(getter)]
    pub fn start_seconds(&self) -> f64 {
        self.start_seconds
    }

    #[wasm_bindgen(getter)]
    pub fn end_seconds(&self) -> f64 {
        self.end_seconds
    }
}

/// The demo's state without any JavaScript types.
pub struct ToyWorld {
    models: TrainedModels,
    trained: bool,
    seed: u64,
}

fn fresh_models(identities: usize, seed: u64) -> cae::Result<TrainedModels> {
    let device = Device::Cpu;
    let mut embedder = VoiceEmbedder::new(seed, DType::F32, &device)?;
    embedder.freeze();
    Ok(TrainedModels {
        labels: (0..identities).map(|i| format!("id{i:02}")).collect(),
        generator: Generator::new(GeneratorConfig::toy(), seed.wrapping_add(1), DType::F32, &device)?,
        critics: Critics::new(identities, seed.wrapping_add(2), DType::F32, &device)?,
        embedder,
    })
}

fn instance_rng(seed: u64, identity: usize, instance: u32, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt ^ ((identity as u64) << 40));
    rng.set_stream(instance as u64);
    rng
}

impl ToyWorld {
    /// Untrained models over `identities` toy identities whose archetypes are
    /// derived from `seed`.
    pub fn new(identities: usize, seed: u64) -> cae::Result<Self> {
        Ok(Self {
            models: fresh_models(identities, seed)?,
            trained: false,
            seed,
        })
    }

    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> cae::Result<()> {
        self.models = TrainedModels::from_checkpoint(&Checkpoint::from_bytes(bytes)?)?;
        self.trained = true;
        Ok(())
    }

    pub fn identities(&self) -> usize {
        self.models.labels.len()
    }

    fn check(&self, identity: usize) -> cae::Result<()> {
        if identity >= self.identities() {
            return Err(cae::Error::InvalidInput(format!("identity {identity} out of range")));
        }
        Ok(())
    }

    pub fn face_image(&self, identity: usize, instance: u32) -> cae::Result<FaceImage> {
        self.check(identity)?;
        let a = face_archetype(identity, self.identities(), self.seed);
        render_face(&a, &mut instance_rng(self.seed, identity, instance, 0xfa_ce))
    }

    pub fn voice_wave(&self, identity: usize, instance: u32) -> cae::Result<Waveform> {
        self.check(identity)?;
        let a = voice_archetype(identity, self.identities(), self.seed);
        render_voice(
            &a,
            CANONICAL_SAMPLE_RATE,
            &mut instance_rng(self.seed, identity, instance, 0x50_1ce),
        )
    }

    pub fn embedding(&self, identity: usize, instance: u32) -> cae::Result<VoiceEmbedding> {
        let mel = audio::voice_features(&self.voice_wave(identity, instance)?, CANONICAL_SAMPLE_RATE)?;
        self.models.embed(&mel)
    }

    pub fn morph(
        &self,
        face_identity: usize,
        face_instance: u32,
        voice_a: usize,
        voice_b: usize,
        voice_instance: u32,
        t: f64,
    ) -> cae::Result<FaceImage> {
        let f = self.face_image(face_identity, face_instance)?;
        let ea = self.embedding(voice_a, voice_instance)?;
        let eb = self.embedding(voice_b, voice_instance)?;
        self.models.generator.generate(&f, &ea.lerp(&eb, t.clamp(0.0, 1.0)))
    }

    pub fn gates(&self, identity: usize, instance: u32) -> cae::Result<Vec<Vec<f64>>> {
        let e = self.embedding(identity, instance)?;
        let gates = self
            .models
            .generator
            .compute_gates(&e.to_tensor(DType::F32, &Device::Cpu)?)?;
        gates.to_f64_vecs()
    }
}

#[wasm_bindgen]
pub struct Demo(ToyWorld);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(identities: usize, seed: u64) -> Result<Demo, JsError> {
        ToyWorld::new(identities, seed).map(Demo).map_err(js_err)
    }

    /// Replaces the models with those in a training checkpoint file.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<(), JsError> {
        self.0.load_checkpoint(bytes).map_err(js_err)
    }

    #[wasm_bindgen(getter)]
    pub fn identities(&self) -> usize {
        self.0.identities()
    }

    #[wasm_bindgen(getter)]
    pub fn trained(&self) -> bool {
        self.0.trained
    }

    /// A toy proposal face.
    pub fn face(&self, identity: usize, instance: u32) -> Result<Picture, JsError> {
        face_picture(&self.0.face_image(identity, instance).map_err(js_err)?).map_err(js_err)
    }

    /// Log-mel spectrogram of a toy recording, frames left to right and low
    /// bands at the bottom, with the detected speech span.
    pub fn spectrogram(&self, identity: usize, instance: u32) -> Result<Picture, JsError> {
        spectrogram_picture(&self.0.voice_wave(identity, instance).map_err(js_err)?).map_err(js_err)
    }

    /// Morphs a proposal face towards `(1 - t) * voice_a + t * voice_b`.
    pub fn morph(
        &self,
        face_identity: usize,
        face_instance: u32,
        voice_a: usize,
        voice_b: usize,
        voice_instance: u32,
        t: f64,
    ) -> Result<Picture, JsError> {
        let f = self
            .0
            .morph(face_identity, face_instance, voice_a, voice_b, voice_instance, t)
            .map_err(js_err)?;
        face_picture(&f).map_err(js_err)
    }

    /// Per decoder layer `[mean, std, min, max]` of the gates, flattened.
    pub fn gate_stats(&self, identity: usize, instance: u32) -> Result<Vec<f64>, JsError> {
        let gates = self.0.gates(identity, instance).map_err(js_err)?;
        Ok(gates.iter().flat_map(|g| summarize(g)).collect())
    }

    /// Gates of one decoder layer counted into `bins` equal-width bins over [0, 1].
    pub fn gate_histogram(
        &self,
        identity: usize,
        instance: u32,
        layer: usize,
        bins: usize,
    ) -> Result<Vec<u32>, JsError> {
        let gates = self.0.gates(identity, instance).map_err(js_err)?;
        let g = gates
            .get(layer)
            .ok_or_else(|| JsError::new(&format!("no decoder layer {layer}")))?;
        Ok(histogram(g, bins.max(1)))
    }
}

fn summarize(g: &[f64]) -> [f64; 4] {
    let n = g.len().max(1) as f64;
    let mean = g.iter().sum::<f64>() / n;
    let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let min = g.iter().copied().fold(f64::INFINITY, f64::min);
    let max = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [mean, var.sqrt(), min, max]
}

fn histogram(values: &[f64], bins: usize) -> Vec<u32> {
    let mut out = vec![0u32; bins];
    for v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        out[b] += 1;
    }
    out
}

fn face_picture(f: &FaceImage) -> cae::Result<Picture> {
    let rgb = face_to_rgb(f)?;
    let rgba = rgb.pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect();
    Ok(Picture {
        width: rgb.width() as usize,
        height: rgb.height() as usize,
        rgba,
        start_seconds: 0.0,
        end_seconds: 0.0,
    })
}

/// Dark blue → yellow ramp.
fn heat(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * t.powf(0.8)) as u8;
    let g = (255.0 * t.powf(1.6)) as u8;
    let b = (255.0 * (0.35 + 0.4 * (1.0 - t)) * (1.0 - t * t)) as u8;
    [r, g, b]
}

fn spectrogram_picture(w: &Waveform) -> cae::Result<Picture> {
    let mel = audio::log_mel(w)?;
    let (start, end) = audio::endpoint_bounds(w, DEFAULT_ENERGY_QUANTILE)?;
    let (bands, frames) = (mel.bands(), mel.frames());
    let (lo, hi) = mel
        .values()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    // show the top 12 nats so the silence floor does not flatten the picture
    let lo = lo.max(hi - 12.0);
    let span = (hi - lo).max(1e-6);
    let mut rgba = Vec::with_capacity(bands * frames * 4);
    for row in 0..bands {
        let band = bands - 1 - row;
        for t in 0..frames {
            let [r, g, b] = heat((mel.get(band, t) - lo) / span);
            rgba.extend_from_slice(&[r, g, b, 255]);
        }
    }
    let rate = w.sample_rate() as f64;
    Ok(Picture {
        width: frames,
        height: bands,
        rgba,
        start_seconds: start as f64 / rate,
        end_seconds: end as f64 / rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operations_produce_pictures() {
        let w = ToyWorld::new(4, 0).unwrap();
        let f = face_picture(&w.face_image(1, 0).unwrap()).unwrap();
        assert_eq!((f.width, f.height, f.rgba.len()), (64, 64, 64 * 64 * 4));
        let s = spectrogram_picture(&w.voice_wave(2, 3).unwrap()).unwrap();
        assert_eq!(s.height, 64);
        assert_eq!(s.rgba.len(), s.width * 64 * 4);
        assert!(s.start_seconds > 0.0 && s.end_seconds > s.start_seconds);
        let m0 = w.morph(0, 0, 1, 2, 0, 0.0).unwrap();
        let m1 = w.morph(0, 0, 1, 2, 0, 1.0).unwrap();
        assert_ne!(m0, m1);
        let gates = w.gates(3, 0).unwrap();
        assert_eq!(gates.len(), 4);
        let shapes = w.models.generator.gated_weight_shapes();
        for (g, shape) in gates.iter().zip(&shapes) {
            assert_eq!(g.len(), shape.iter().product::<usize>());
            let [mean, _, min, max] = summarize(g);
            assert!(0.0 < min && min <= mean && mean <= max && max < 1.0);
        }
        assert!(w.face_image(4, 0).is_err());
    }

    #[test]
    fn same_request_same_picture() {
        let w = ToyWorld::new(3, 5).unwrap();
        assert_eq!(
            w.morph(2, 1, 0, 1, 2, 0.4).unwrap(),
            w.morph(2, 1, 0, 1, 2, 0.4).unwrap()
        );
    }

    #[test]
    fn histogram_bins_edges() {
        assert_eq!(histogram(&[0.0, 0.5, 1.0, 0.99], 2), vec![1, 3]);
    }
}
