//! Adversarial training of the controlled autoencoder.
//!
//! Each step draws `(f_A, I_A)` from all faces and `(v_B, I_B)` from all
//! voices, then a face of B and a voice of A. It updates, in order: the
//! discriminator on real `f_A` vs. the (detached) fake `G(f_A, e_B)`; the
//! classifier on real `f_A`; the generator on
//!
//! ```text
//! l1 * L1(fake, f_A) + l2 * L1(fake, f_B) + l3 * Lc(C(fake), I_B)
//!   + l4 * Ld(D(fake), 1) + l5 * L1(G(fake, e_A), f_A)
//! ```
//!
//! with the critics held fixed. The voice embedder is frozen throughout.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::checkpoint::{self, Checkpoint};
use crate::critics::Critics;
use crate::data::Corpus;
use crate::embedder::{VoiceEmbedder, VoiceEmbedding};
use crate::error::{Error, Result};
use crate::generator::{FaceImage, Generator, GeneratorConfig};
use crate::losses::{classifier_loss, discriminator_loss, l1_loss};
use crate::nn::{self, Mode, ParamStore};
use crate::optim::{Adam, AdamConfig};

pub const TRAINING_KIND: &str = "cae-training";
pub const EMBEDDER_KIND: &str = "voice-embedder";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Training hyper-parameters. Defaults: Adam with learning rate 2e-4 and betas
/// (0.5, 0.999), batch size 1, one discriminator update per generator update,
/// loss weights (1, 10, 1, 1, 10).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub d_to_g_ratio: usize,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_interval: u64,
    /// Moving-average window for the plateau stop; 0 disables it.
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    pub width: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 10.0,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 10.0,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            d_to_g_ratio: 1,
            batch_size: 1,
            max_steps: 2000,
            seed: 0,
            checkpoint_interval: 500,
            plateau_window: 200,
            plateau_tolerance: 1e-3,
            width: 0.125,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn lambdas(&self) -> [f64; 5] {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5]
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambdas().iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got {l}"
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!(
                "batch size must be 1 (gates are per sample), got {}",
                self.batch_size
            )));
        }
        if self.d_to_g_ratio == 0 {
            return Err(Error::Config("d_to_g_ratio must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::Config(format!(
                "width multiplier must be positive, got {}",
                self.width
            )));
        }
        Ok(())
    }

    /// Parses flat `key = value` text; unknown keys are rejected.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Overrides one key, with the value parsed as in the config file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        if !table.contains_key(key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        table.insert(key.to_string(), parsed);
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// One sampled training tuple.
#[derive(Debug, Clone)]
pub struct TrainingInstance {
    pub face_a: FaceImage,
    pub id_a: usize,
    pub voice_a: MelSpectrogram,
    pub face_b: FaceImage,
    pub id_b: usize,
    pub voice_b: MelSpectrogram,
}

/// Per-step RNG: the same `(seed, step)` always draws the same instance, so a
/// resumed run continues the original sample sequence.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Draws one instance: a face from all faces, a voice from all voices, then a
/// face of the voice's owner and a voice of the face's owner. A and B may be
/// the same identity.
pub fn sample_instance<R: Rng + ?Sized>(corpus: &Corpus, rng: &mut R) -> Result<TrainingInstance> {
    let faces: usize = corpus.faces.iter().map(Vec::len).sum();
    let voices: usize = corpus.voices.iter().map(Vec::len).sum();
    if faces == 0 || voices == 0 {
        return Err(Error::Data("corpus has no faces or no voices".into()));
    }
    let (id_a, face_a) = nth_item(&corpus.faces, rng.random_range(0..faces));
    let (id_b, voice_b) = nth_item(&corpus.voices, rng.random_range(0..voices));
    let faces_b = &corpus.faces[id_b];
    let voices_a = &corpus.voices[id_a];
    if faces_b.is_empty() {
        return Err(Error::Data(format!("identity {} has no face", corpus.labels[id_b])));
    }
    if voices_a.is_empty() {
        return Err(Error::Data(format!("identity {} has no voice", corpus.labels[id_a])));
    }
    let face_b = faces_b[rng.random_range(0..faces_b.len())].clone();
    let voice_a = voices_a[rng.random_range(0..voices_a.len())].clone();
    Ok(TrainingInstance {
        face_a: face_a.clone(),
        id_a,
        voice_a,
        face_b,
        id_b,
        voice_b: voice_b.clone(),
    })
}

fn nth_item<T>(groups: &[Vec<T>], mut n: usize) -> (usize, &T) {
    for (i, g) in groups.iter().enumerate() {
        if n < g.len() {
            return (i, &g[n]);
        }
        n -= g.len();
    }
    unreachable!("index within total count")
}

/// Loss values of one step. Generator terms are unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub d_real: f64,
    pub d_fake: f64,
    pub c_loss: f64,
    pub l1_proposal: f64,
    pub l1_target: f64,
    pub cls_gen: f64,
    pub adv_gen: f64,
    pub cycle: f64,
    /// Weighted generator objective.
    pub objective: f64,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "step,L_d_real,L_d_fake,L_c,L1_proposal,L1_target,L_c_gen,L_d_gen,L1_cycle";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.d_real,
            self.d_fake,
            self.c_loss,
            self.l1_proposal,
            self.l1_target,
            self.cls_gen,
            self.adv_gen,
            self.cycle
        )
    }

    pub fn generator_terms(&self) -> [f64; 5] {
        [self.l1_proposal, self.l1_target, self.cls_gen, self.adv_gen, self.cycle]
    }

    fn all_finite(&self) -> bool {
        [self.d_real, self.d_fake, self.c_loss, self.objective]
            .iter()
            .chain(self.generator_terms().iter())
            .all(|v| v.is_finite())
    }
}

/// Tensors shared by the three sub-updates of one step.
#[derive(Debug)]
pub struct StepContext {
    pub x_a: Tensor,
    pub x_b: Tensor,
    pub e_a: Tensor,
    pub e_b: Tensor,
    pub id_a: usize,
    pub id_b: usize,
    /// `G(f_A, e_B)`, still attached to the generator graph.
    pub fake: Tensor,
}

/// The five unweighted generator loss terms as graph tensors.
#[derive(Debug)]
pub struct GeneratorTerms {
    pub l1_proposal: Tensor,
    pub l1_target: Tensor,
    pub cls_gen: Tensor,
    pub adv_gen: Tensor,
    pub cycle: Tensor,
}

impl GeneratorTerms {
    pub fn weighted(&self, lambdas: [f64; 5]) -> Result<Tensor> {
        let terms = [
            &self.l1_proposal,
            &self.l1_target,
            &self.cls_gen,
            &self.adv_gen,
            &self.cycle,
        ];
        let mut total = (terms[0] * lambdas[0])?;
        for (t, l) in terms.iter().zip(lambdas).skip(1) {
            total = (total + (*t * l)?)?;
        }
        Ok(total)
    }

    pub fn values(&self) -> Result<[f64; 5]> {
        Ok([
            nn::scalar(&self.l1_proposal)?,
            nn::scalar(&self.l1_target)?,
            nn::scalar(&self.cls_gen)?,
            nn::scalar(&self.adv_gen)?,
            nn::scalar(&self.cycle)?,
        ])
    }
}

/// Models, optimizer states and the step counter.
pub struct Trainer {
    cfg: TrainConfig,
    labels: Vec<String>,
    generator: Generator,
    critics: Critics,
    embedder: VoiceEmbedder,
    opt_g: Adam,
    opt_d: Adam,
    opt_c: Adam,
    step: u64,
}

impl Trainer {
    /// Fresh models. The embedder must already be pre-trained; it is frozen here.
    pub fn new(cfg: TrainConfig, labels: Vec<String>, mut embedder: VoiceEmbedder) -> Result<Self> {
        cfg.validate()?;
        if labels.len() < 2 {
            return Err(Error::InvalidCorpus(format!(
                "need at least 2 identities, found {}",
                labels.len()
            )));
        }
        embedder.freeze();
        let dtype = cfg.precision.dtype();
        let device = Device::Cpu;
        if embedder.params().dtype() != dtype {
            embedder = convert_embedder(&embedder, dtype)?;
        }
        let generator = Generator::new(
            GeneratorConfig { width: cfg.width },
            cfg.seed.wrapping_add(1),
            dtype,
            &device,
        )?;
        let critics = Critics::new(labels.len(), cfg.seed.wrapping_add(2), dtype, &device)?;
        let opt_g = Adam::new(generator.params(), cfg.adam())?;
        let opt_d = Adam::new(&critics.discriminator_params(), cfg.adam())?;
        let opt_c = Adam::new(&critics.classifier_params(), cfg.adam())?;
        Ok(Self {
            cfg,
            labels,
            generator,
            critics,
            embedder,
            opt_g,
            opt_d,
            opt_c,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn critics(&self) -> &Critics {
        &self.critics
    }

    pub fn embedder(&self) -> &VoiceEmbedder {
        &self.embedder
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn dtype(&self) -> DType {
        self.cfg.precision.dtype()
    }

    fn embed(&self, m: &MelSpectrogram) -> Result<Tensor> {
        self.embedder.embed(m)?.to_tensor(self.dtype(), &Device::Cpu)
    }

    /// Embeds both voices and produces the fake `G(f_A, e_B)`.
    pub fn prepare(&self, inst: &TrainingInstance) -> Result<StepContext> {
        let k = self.labels.len();
        if inst.id_a >= k || inst.id_b >= k {
            return Err(Error::Data(format!("identity index out of range for {k} identities")));
        }
        let x_a = inst.face_a.batch(self.dtype())?;
        let x_b = inst.face_b.batch(self.dtype())?;
        let e_b = self.embed(&inst.voice_b)?;
        let e_a = self.embed(&inst.voice_a)?;
        let fake = self.generator.forward(&x_a, &e_b, Mode::Train)?;
        Ok(StepContext {
            x_a,
            x_b,
            e_a,
            e_b,
            id_a: inst.id_a,
            id_b: inst.id_b,
            fake,
        })
    }

    /// Discriminator update on `Ld(D(fake), 0) + Ld(D(f_A), 1)`. Returns
    /// `(real term, fake term)`.
    pub fn update_discriminator(&mut self, ctx: &StepContext) -> Result<(f64, f64)> {
        let batch = Tensor::cat(&[&ctx.x_a, &ctx.fake.detach()], 0)?;
        let logits = self.critics.disc_logits(&batch)?;
        let l_real = discriminator_loss(&logits.get(0)?, true)?;
        let l_fake = discriminator_loss(&logits.get(1)?, false)?;
        let loss = (&l_fake + &l_real)?;
        self.opt_d.step(&loss.backward()?)?;
        Ok((nn::scalar(&l_real)?, nn::scalar(&l_fake)?))
    }

    /// Classifier update on the real face only.
    pub fn update_classifier(&mut self, ctx: &StepContext) -> Result<f64> {
        let loss = classifier_loss(&self.critics.cls_logits(&ctx.x_a)?, ctx.id_a)?;
        self.opt_c.step(&loss.backward()?)?;
        nn::scalar(&loss)
    }

    /// The five generator terms for `ctx` under the current critics.
    pub fn generator_terms(&self, ctx: &StepContext) -> Result<GeneratorTerms> {
        let cycle_out = self.generator.forward(&ctx.fake, &ctx.e_a, Mode::Train)?;
        let features = self.critics.features(&ctx.fake)?;
        Ok(GeneratorTerms {
            l1_proposal: l1_loss(&ctx.fake, &ctx.x_a)?,
            l1_target: l1_loss(&ctx.fake, &ctx.x_b)?,
            cls_gen: classifier_loss(&self.critics.cls_head_forward(&features)?, ctx.id_b)?,
            adv_gen: discriminator_loss(&self.critics.disc_head_forward(&features)?, true)?,
            cycle: l1_loss(&cycle_out, &ctx.x_a)?,
        })
    }

    /// Generator update; critic and embedder parameters are not stepped.
    pub fn update_generator(&mut self, ctx: &StepContext) -> Result<([f64; 5], f64)> {
        let terms = self.generator_terms(ctx)?;
        let total = terms.weighted(self.cfg.lambdas())?;
        let values = terms.values()?;
        let objective = nn::scalar(&total)?;
        if objective.is_finite() {
            self.opt_g.step(&total.backward()?)?;
        }
        Ok((values, objective))
    }

    /// One full iteration.
    pub fn train_step(&mut self, inst: &TrainingInstance) -> Result<StepReport> {
        let ctx = self.prepare(inst)?;
        let mut d = (0.0, 0.0);
        for _ in 0..self.cfg.d_to_g_ratio {
            d = self.update_discriminator(&ctx)?;
        }
        let c_loss = self.update_classifier(&ctx)?;
        let (g, objective) = self.update_generator(&ctx)?;
        let report = StepReport {
            step: self.step,
            d_real: d.0,
            d_fake: d.1,
            c_loss,
            l1_proposal: g[0],
            l1_target: g[1],
            cls_gen: g[2],
            adv_gen: g[3],
            cycle: g[4],
            objective,
        };
        self.step += 1;
        Ok(report)
    }

    /// Runs from the current step up to (excluding) `until`, calling `on_step`
    /// after each step. Stops early on a plateau of the generator objective.
    pub fn run<F>(&mut self, corpus: &Corpus, until: u64, mut on_step: F) -> Result<Vec<StepReport>>
    where
        F: FnMut(&Trainer, &StepReport) -> Result<()>,
    {
        if corpus.identity_count() != self.labels.len() {
            return Err(Error::InvalidCorpus(format!(
                "corpus has {} identities, model expects {}",
                corpus.identity_count(),
                self.labels.len()
            )));
        }
        let window = self.cfg.plateau_window;
        let mut recent: VecDeque<f64> = VecDeque::with_capacity(2 * window.max(1));
        let mut reports = Vec::new();
        while self.step < until {
            let mut rng = step_rng(self.cfg.seed, self.step);
            let inst = sample_instance(corpus, &mut rng)?;
            let report = self.train_step(&inst)?;
            if !report.all_finite() {
                return Err(Error::NonFinite(format!("loss at step {}: {report:?}", report.step)));
            }
            on_step(self, &report)?;
            reports.push(report);
            if window > 0 {
                recent.push_back(report.objective);
                if recent.len() > 2 * window {
                    recent.pop_front();
                }
                if recent.len() == 2 * window && self.step.is_multiple_of(window as u64) {
                    let prev: f64 = recent.iter().take(window).sum::<f64>() / window as f64;
                    let cur: f64 = recent.iter().skip(window).sum::<f64>() / window as f64;
                    if (prev - cur) / prev.abs().max(f64::MIN_POSITIVE) < self.cfg.plateau_tolerance {
                        info!("objective plateaued at step {} ({prev:.3} -> {cur:.3})", self.step);
                        break;
                    }
                }
            }
        }
        Ok(reports)
    }

    /// Parameter digests of `(generator, discriminator, classifier, embedder)`.
    /// Generator and embedder digests include batch-norm running statistics.
    pub fn digests(&self) -> Result<GroupDigests> {
        let mut g = self.generator.params().clone();
        g.extend_prefixed("buffer.", self.generator.buffers());
        Ok(GroupDigests {
            generator: g.digest()?,
            discriminator: self.critics.discriminator_params().digest()?,
            classifier: self.critics.classifier_params().digest()?,
            disc_head: self.critics.disc_head_params().digest()?,
            cls_head: self.critics.cls_head_params().digest()?,
            embedder: self.embedder.digest()?,
        })
    }

    pub fn architecture(&self) -> String {
        format!(
            "{}|{}|{}|{:?}",
            self.generator.config().architecture(),
            self.critics.architecture(),
            VoiceEmbedder::architecture(),
            self.cfg.precision
        )
    }

    pub fn fingerprint(&self) -> String {
        checkpoint::fingerprint(&self.architecture())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "step": self.step,
            "labels": self.labels,
            "train_config": self.cfg,
            "generator": self.generator.config(),
            "identities": self.labels.len(),
            "optimizer_steps": {
                "g": self.opt_g.steps_taken(),
                "d": self.opt_d.steps_taken(),
                "c": self.opt_c.steps_taken(),
            },
        });
        let mut c = Checkpoint::new(TRAINING_KIND, self.fingerprint(), meta);
        c.insert_all("gen.param.", self.generator.params().snapshot()?);
        c.insert_all("gen.buffer.", self.generator.buffers().snapshot()?);
        c.insert_all("critic.param.", self.critics.all_params().snapshot()?);
        c.insert_all("emb.param.", self.embedder.params().snapshot()?);
        c.insert_all("emb.buffer.", self.embedder.buffers().snapshot()?);
        c.insert_all("opt.g.", self.opt_g.state_tensors());
        c.insert_all("opt.d.", self.opt_d.state_tensors());
        c.insert_all("opt.c.", self.opt_c.state_tensors());
        Ok(c)
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::to_checkpoint`].
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.kind != TRAINING_KIND {
            return Err(Error::VersionMismatch {
                expected: TRAINING_KIND.into(),
                found: c.kind.clone(),
            });
        }
        let cfg: TrainConfig = serde_json::from_value(c.meta["train_config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad train_config: {e}")))?;
        let labels: Vec<String> = serde_json::from_value(c.meta["labels"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad labels: {e}")))?;
        let embedder = VoiceEmbedder::new(0, cfg.precision.dtype(), &Device::Cpu)?;
        let mut t = Trainer::new(cfg, labels, embedder)?;
        t.restore(c)?;
        Ok(t)
    }

    /// Loads all state into this trainer's models; the checkpoint must have
    /// been written by a trainer with the same architecture.
    pub fn restore(&mut self, c: &Checkpoint) -> Result<()> {
        c.expect(TRAINING_KIND, &self.fingerprint())?;
        let step = c.meta["step"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing step".into()))?;
        let opt_steps = |k: &str| {
            c.meta["optimizer_steps"][k]
                .as_u64()
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer step for {k}")))
        };
        self.generator.params().assign(&c.group("gen.param."))?;
        self.generator.buffers().assign(&c.group("gen.buffer."))?;
        self.critics.all_params().assign(&c.group("critic.param."))?;
        self.embedder.params().assign(&c.group("emb.param."))?;
        self.embedder.buffers().assign(&c.group("emb.buffer."))?;
        self.opt_g.restore(opt_steps("g")?, &c.group("opt.g."))?;
        self.opt_d.restore(opt_steps("d")?, &c.group("opt.d."))?;
        self.opt_c.restore(opt_steps("c")?, &c.group("opt.c."))?;
        self.step = step;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupDigests {
    pub generator: [u8; 32],
    pub discriminator: [u8; 32],
    pub classifier: [u8; 32],
    pub disc_head: [u8; 32],
    pub cls_head: [u8; 32],
    pub embedder: [u8; 32],
}

fn convert_embedder(e: &VoiceEmbedder, dtype: DType) -> Result<VoiceEmbedder> {
    let mut out = VoiceEmbedder::new(0, dtype, &Device::Cpu)?;
    out.params().assign(&e.params().snapshot()?)?;
    out.buffers().assign(&e.buffers().snapshot()?)?;
    out.set_frozen(e.is_frozen());
    Ok(out)
}

/// Standalone checkpoint for a pre-trained embedder.
pub fn embedder_checkpoint(e: &VoiceEmbedder, meta: serde_json::Value) -> Result<Checkpoint> {
    let mut c = Checkpoint::new(
        EMBEDDER_KIND,
        checkpoint::fingerprint(&VoiceEmbedder::architecture()),
        meta,
    );
    c.insert_all("emb.param.", e.params().snapshot()?);
    c.insert_all("emb.buffer.", e.buffers().snapshot()?);
    Ok(c)
}

pub fn embedder_from_checkpoint(c: &Checkpoint, dtype: DType) -> Result<VoiceEmbedder> {
    let fp = checkpoint::fingerprint(&VoiceEmbedder::architecture());
    let mut e = VoiceEmbedder::new(0, dtype, &Device::Cpu)?;
    match c.kind.as_str() {
        EMBEDDER_KIND => c.expect(EMBEDDER_KIND, &fp)?,
        TRAINING_KIND => {}
        other => {
            return Err(Error::VersionMismatch {
                expected: EMBEDDER_KIND.into(),
                found: other.into(),
            })
        }
    }
    e.params().assign(&c.group("emb.param."))?;
    e.buffers().assign(&c.group("emb.buffer."))?;
    e.freeze();
    Ok(e)
}

/// Everything needed to run inference and evaluation.
pub struct TrainedModels {
    pub labels: Vec<String>,
    pub generator: Generator,
    pub critics: Critics,
    pub embedder: VoiceEmbedder,
}

impl TrainedModels {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            labels: t.labels.clone(),
            generator: t.generator.clone(),
            critics: t.critics.clone(),
            embedder: t.embedder.clone(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        Ok(Self::from_trainer(&Trainer::from_checkpoint(c)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn embed(&self, m: &MelSpectrogram) -> Result<VoiceEmbedding> {
        self.embedder.embed(m)
    }
}

/// Outcome of [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub reports: Vec<StepReport>,
}

/// Full training run writing `losses.csv`, periodic `step-<n>.ckpt` files and
/// `final.ckpt` into `out_dir`. On a non-finite loss a `diagnostic.ckpt` is
/// written before the error is returned.
pub fn train(corpus: &Corpus, embedder: VoiceEmbedder, cfg: TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    corpus.validate()?;
    let mut trainer = Trainer::new(cfg, corpus.labels.clone(), embedder)?;
    resume_training(&mut trainer, corpus, out_dir)
}

/// Continues `trainer` up to its `max_steps`. Rows of an existing
/// `losses.csv` for steps before the trainer's current step are kept.
pub fn resume_training(trainer: &mut Trainer, corpus: &Corpus, out_dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("losses.csv");
    let mut csv = String::from(StepReport::CSV_HEADER);
    csv.push('\n');
    if trainer.step() > 0 {
        if let Ok(old) = fs::read_to_string(&csv_path) {
            for line in old.lines().skip(1) {
                let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if step.is_some_and(|s| s < trainer.step()) {
                    csv.push_str(line);
                    csv.push('\n');
                }
            }
        }
    }
    let interval = trainer.config().checkpoint_interval;
    let until = trainer.config().max_steps;
    info!("training: {}", trainer.config().to_kv_text().replace('\n', "; "));
    let result = trainer.run(corpus, until, |t, r| {
        let _ = writeln!(csv, "{}", r.csv_row());
        if r.step % 100 == 0 {
            info!(
                "step {}: objective {:.2} | D {:.3}/{:.3} | C {:.3}",
                r.step, r.objective, r.d_real, r.d_fake, r.c_loss
            );
        }
        if interval > 0 && (r.step + 1) % interval == 0 {
            t.to_checkpoint()?
                .save(&out_dir.join(format!("step-{}.ckpt", r.step + 1)))?;
        }
        Ok(())
    });
    fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
    let reports = match result {
        Ok(r) => r,
        Err(e @ Error::NonFinite(_)) => {
            let diag = out_dir.join("diagnostic.ckpt");
            warn!("aborting on non-finite loss; writing {}", diag.display());
            trainer.to_checkpoint()?.save(&diag)?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let final_checkpoint = out_dir.join("final.ckpt");
    trainer.to_checkpoint()?.save(&final_checkpoint)?;
    Ok(TrainOutcome {
        final_checkpoint,
        loss_csv: csv_path,
        reports,
    })
}

/// Concatenated parameter digests, handy for equality checks in tests.
pub fn store_digest(stores: &[&ParamStore]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in stores {
        out.extend_from_slice(&s.digest()?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.lambdas(), [1.0, 10.0, 1.0, 1.0, 10.0]);
        assert_eq!(c.learning_rate, 2e-4);
        assert_eq!((c.beta1, c.beta2), (0.5, 0.999));
        assert_eq!((c.batch_size, c.d_to_g_ratio), (1, 1));
    }

    #[test]
    fn config_text_round_trip_and_overrides() {
        let c = TrainConfig::from_kv_text("lambda2 = 3.5\nmax_steps = 10\n").unwrap();
        assert_eq!(c.lambda2, 3.5);
        assert_eq!(c.max_steps, 10);
        assert_eq!(c.lambda5, 10.0);
        let again = TrainConfig::from_kv_text(&c.to_kv_text()).unwrap();
        assert_eq!(again, c);
        let mut c = c;
        c.set("seed", "42").unwrap();
        c.set("precision", "f64").unwrap();
        assert_eq!((c.seed, c.precision), (42, Precision::F64));
        assert!(c.set("bogus", "1").is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(TrainConfig::from_kv_text("batch_size = 2").is_err());
        assert!(TrainConfig::from_kv_text("lambda1 = -1.0").is_err());
        assert!(TrainConfig::from_kv_text("learning_rate = 0.0").is_err());
        assert!(TrainConfig::from_kv_text("unknown_key = 1").is_err());
    }

    #[test]
    fn step_rng_is_reproducible_per_step() {
        let a: u64 = step_rng(7, 3).random();
        let b: u64 = step_rng(7, 3).random();
        let c: u64 = step_rng(7, 4).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
