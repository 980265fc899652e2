//! Corpus manifests, face/voice file I/O and the synthetic toy corpus.
//!
//! A manifest is plain text, one record per line, tab separated:
//!
//! ```text
//! # comment
//! face    <identity>  <train|eval>  <path>
//! voice   <identity>  <train|eval>  <path>
//! ```
//!
//! Relative paths resolve against `$CAE_CORPUS_ROOT` when set, otherwise
//! against the manifest's directory. Identity labels map to dense indices in
//! sorted label order.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::{DynamicImage, ImageBuffer, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::{self, MelSpectrogram, Waveform, CANONICAL_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::generator::{FaceImage, IMAGE_SIZE};

pub const CORPUS_ROOT_ENV: &str = "CAE_CORPUS_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Face,
    Voice,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub modality: Modality,
    pub label: String,
    pub split: Split,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    root: PathBuf,
    records: Vec<Record>,
    labels: Vec<String>,
}

impl CorpusManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<Record>) -> Result<Self> {
        let labels: Vec<String> = records
            .iter()
            .map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        for label in &labels {
            for m in [Modality::Face, Modality::Voice] {
                if !records.iter().any(|r| &r.label == label && r.modality == m) {
                    return Err(Error::InvalidCorpus(format!(
                        "identity {label:?} has no {} record",
                        if m == Modality::Face { "face" } else { "voice" }
                    )));
                }
            }
        }
        Ok(Self {
            root: root.into(),
            records,
            labels,
        })
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Data(format!(
                    "manifest line {}: expected 4 tab-separated fields",
                    n + 1
                )));
            }
            let modality = match fields[0] {
                "face" => Modality::Face,
                "voice" => Modality::Voice,
                other => return Err(Error::Data(format!("manifest line {}: unknown kind {other:?}", n + 1))),
            };
            records.push(Record {
                modality,
                label: fields[1].to_string(),
                split: fields[2].parse()?,
                path: PathBuf::from(fields[3]),
            });
        }
        Self::new(root, records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = match std::env::var_os(CORPUS_ROOT_ENV) {
            Some(r) => PathBuf::from(r),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        Self::parse(&text, root)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# kind\tidentity\tsplit\tpath\n");
        for r in &self.records {
            let kind = match r.modality {
                Modality::Face => "face",
                Modality::Voice => "voice",
            };
            out.push_str(&format!("{kind}\t{}\t{}\t{}\n", r.label, r.split, r.path.display()));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn identity_count(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// `(identity index, resolved path)` for matching records.
    pub fn entries(&self, modality: Modality, split: Option<Split>) -> Vec<(usize, PathBuf)> {
        self.records
            .iter()
            .filter(|r| r.modality == modality && split.is_none_or(|s| r.split == s))
            .map(|r| {
                (
                    self.label_index(&r.label).expect("label indexed"),
                    self.resolve(&r.path),
                )
            })
            .collect()
    }
}

/// Reads an image, converts it to RGB, rescales to 64x64 (bilinear) and maps
/// 8-bit values to `[-1, 1]`. Non-RGB images are converted unless
/// `reject_non_rgb` is set.
pub fn load_face_with(path: &Path, reject_non_rgb: bool) -> Result<FaceImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    })?;
    if reject_non_rgb && !matches!(img, DynamicImage::ImageRgb8(_)) {
        return Err(Error::Data(format!("{}: not an 8-bit RGB image", path.display())));
    }
    face_from_rgb(&img.to_rgb8())
}

pub fn load_face(path: &Path) -> Result<FaceImage> {
    load_face_with(path, false)
}

pub fn face_from_rgb(img: &RgbImage) -> Result<FaceImage> {
    let img = if img.dimensions() == (IMAGE_SIZE as u32, IMAGE_SIZE as u32) {
        img.clone()
    } else {
        image::imageops::resize(img, IMAGE_SIZE as u32, IMAGE_SIZE as u32, FilterType::Triangle)
    };
    let n = IMAGE_SIZE * IMAGE_SIZE;
    let mut values = vec![0f32; 3 * n];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * IMAGE_SIZE + x as usize;
        for c in 0..3 {
            values[c * n + i] = 2.0 * px[c] as f32 / 255.0 - 1.0;
        }
    }
    FaceImage::from_vec(values)
}

pub fn face_to_rgb(face: &FaceImage) -> Result<RgbImage> {
    let v = face.to_vec()?;
    let n = IMAGE_SIZE * IMAGE_SIZE;
    Ok(ImageBuffer::from_fn(IMAGE_SIZE as u32, IMAGE_SIZE as u32, |x, y| {
        let i = y as usize * IMAGE_SIZE + x as usize;
        Rgb(std::array::from_fn(|c| {
            (((v[c * n + i] + 1.0) * 0.5 * 255.0).round()).clamp(0.0, 255.0) as u8
        }))
    }))
}

pub fn save_face(face: &FaceImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    face_to_rgb(face)?.save(path)?;
    Ok(())
}

/// Encoded PNG bytes.
pub fn face_png_bytes(face: &FaceImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    face_to_rgb(face)?.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Reads a PCM or float WAV file, averaging channels down to mono.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
    };
    let ch = spec.channels.max(1) as usize;
    let mono = interleaved
        .chunks(ch)
        .map(|frame| frame.iter().sum::<f32>() / frame.len() as f32)
        .collect();
    Waveform::new(mono, spec.sample_rate)
}

pub fn save_wav(w: &Waveform, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in w.samples() {
        writer.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Faces and voice features of one split, grouped by identity index.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub labels: Vec<String>,
    pub faces: Vec<Vec<FaceImage>>,
    pub voices: Vec<Vec<MelSpectrogram>>,
}

impl Corpus {
    /// Loads the records of `split`, running every recording through the voice
    /// front end at `sample_rate`. Every identity must keep at least one face
    /// and one voice in the split.
    pub fn load(manifest: &CorpusManifest, split: Split, sample_rate: u32) -> Result<Self> {
        let k = manifest.identity_count();
        let mut faces = vec![Vec::new(); k];
        let mut voices = vec![Vec::new(); k];
        for (id, path) in manifest.entries(Modality::Face, Some(split)) {
            faces[id].push(load_face(&path)?);
        }
        for (id, path) in manifest.entries(Modality::Voice, Some(split)) {
            voices[id].push(audio::voice_features(&load_wav(&path)?, sample_rate)?);
        }
        let corpus = Self {
            labels: manifest.labels().to_vec(),
            faces,
            voices,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() < 2 {
            return Err(Error::InvalidCorpus(format!(
                "need at least 2 identities, found {}",
                self.labels.len()
            )));
        }
        for (i, label) in self.labels.iter().enumerate() {
            if self.faces[i].is_empty() || self.voices[i].is_empty() {
                return Err(Error::Data(format!(
                    "identity {label:?} lacks a face or a voice in this split"
                )));
            }
        }
        Ok(())
    }

    pub fn identity_count(&self) -> usize {
        self.labels.len()
    }

    pub fn labeled_voices(&self) -> Vec<(MelSpectrogram, usize)> {
        self.voices
            .iter()
            .enumerate()
            .flat_map(|(i, v)| v.iter().map(move |m| (m.clone(), i)))
            .collect()
    }

    pub fn labeled_faces(&self) -> Vec<(FaceImage, usize)> {
        self.faces
            .iter()
            .enumerate()
            .flat_map(|(i, v)| v.iter().map(move |f| (f.clone(), i)))
            .collect()
    }
}

/// Attributes shared by every face of one toy identity.
#[derive(Debug, Clone, Copy)]
pub struct FaceArchetype {
    pub skin: [f32; 3],
    pub hair: [f32; 3],
    pub eyes: [f32; 3],
    /// Face ellipse half-width and half-height as fractions of the image.
    pub half_width: f32,
    pub half_height: f32,
    pub eye_spacing: f32,
    pub hair_line: f32,
    pub background: [f32; 3],
}

/// Attributes shared by every recording of one toy speaker.
#[derive(Debug, Clone, Copy)]
pub struct VoiceArchetype {
    pub f0: f64,
    pub formants: [f64; 3],
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn face_archetype(identity: usize, n_identities: usize, seed: u64) -> FaceArchetype {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(identity as u64 * 7919));
    let frac = identity as f32 / n_identities as f32;
    FaceArchetype {
        skin: hsv(frac + rng.random_range(-0.03..0.03), 0.55, 0.9),
        hair: hsv(frac + 0.5, 0.8, 0.35 + 0.3 * (identity % 2) as f32),
        eyes: hsv(frac + 0.25, 0.9, 0.6),
        half_width: 0.27 + 0.1 * ((identity * 3) % n_identities) as f32 / n_identities as f32,
        half_height: 0.34 + 0.08 * ((identity * 5 + 1) % n_identities) as f32 / n_identities as f32,
        eye_spacing: 0.08 + 0.06 * ((identity * 7 + 2) % n_identities) as f32 / n_identities as f32,
        hair_line: 0.2 + rng.random_range(0.0..0.1),
        background: hsv(frac + 0.75, 0.15, 0.55),
    }
}

pub fn voice_archetype(identity: usize, n_identities: usize, seed: u64) -> VoiceArchetype {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x85eb_ca6b).wrapping_add(identity as u64 * 104_729));
    let frac = if n_identities > 1 {
        identity as f64 / (n_identities - 1) as f64
    } else {
        0.0
    };
    let f0 = 90.0 * (320.0f64 / 90.0).powf(frac);
    let shift = ((identity * 3) % n_identities) as f64 / n_identities as f64;
    VoiceArchetype {
        f0: f0 * rng.random_range(0.98..1.02),
        formants: [
            500.0 + 500.0 * shift,
            1200.0 + 1200.0 * (1.0 - shift),
            2800.0 + 600.0 * frac,
        ],
    }
}

/// Draws one face of an archetype with instance-level variation: sub-pixel
/// jitter, lighting and faint pixel noise.
pub fn render_face<R: Rng + ?Sized>(a: &FaceArchetype, rng: &mut R) -> Result<FaceImage> {
    let n = IMAGE_SIZE;
    let noise = Normal::new(0.0f32, 0.004).expect("valid");
    let dx = rng.random_range(-0.004f32..0.004);
    let dy = rng.random_range(-0.004f32..0.004);
    let light = rng.random_range(0.98f32..1.02);
    let mut values = vec![0f32; 3 * n * n];
    for yi in 0..n {
        for xi in 0..n {
            let x = (xi as f32 + 0.5) / n as f32 - 0.5 - dx;
            let y = (yi as f32 + 0.5) / n as f32 - 0.5 - dy;
            let face = (x / a.half_width).powi(2) + (y / a.half_height).powi(2) < 1.0;
            let hair = (x / (a.half_width * 1.15)).powi(2) + ((y + 0.04) / (a.half_height * 1.1)).powi(2) < 1.0
                && y < -a.half_height + a.hair_line;
            let eye_y = -0.06;
            let eye = [-a.eye_spacing, a.eye_spacing]
                .iter()
                .any(|ex| (x - ex).powi(2) + (y - eye_y).powi(2) < 0.035f32.powi(2));
            let mouth = x.abs() < a.half_width * 0.45 && (y - a.half_height * 0.5).abs() < 0.02;
            let color = if hair {
                a.hair
            } else if eye && face {
                a.eyes
            } else if mouth && face {
                [0.6, 0.15, 0.2]
            } else if face {
                a.skin
            } else {
                a.background
            };
            for c in 0..3 {
                let v = (color[c] * light + noise.sample(rng)).clamp(0.0, 1.0);
                values[c * n * n + yi * n + xi] = 2.0 * v - 1.0;
            }
        }
    }
    FaceImage::from_vec(values)
}

/// Synthesizes one recording: a harmonic stack shaped by the archetype's
/// formants, with pitch jitter, breath noise and silent padding.
pub fn render_voice<R: Rng + ?Sized>(a: &VoiceArchetype, sample_rate: u32, rng: &mut R) -> Result<Waveform> {
    let sr = sample_rate as f64;
    let lead = (rng.random_range(0.1..0.3) * sr) as usize;
    let body = (rng.random_range(1.4..2.2) * sr) as usize;
    let tail = (rng.random_range(0.1..0.3) * sr) as usize;
    let f0 = a.f0 * rng.random_range(0.97..1.03);
    let vibrato_rate = rng.random_range(4.0..6.0);
    let gain = rng.random_range(0.3..0.6) as f32;
    let floor = Normal::new(0.0f32, 0.002).expect("valid");
    let breath = Normal::new(0.0f32, 0.01).expect("valid");
    let harmonics: Vec<(f64, f64)> = (1..)
        .map(|h| h as f64 * f0)
        .take_while(|&f| f < sr / 2.0 * 0.9)
        .map(|f| {
            let amp: f64 = a
                .formants
                .iter()
                .map(|&fc| (-((f - fc) / 250.0).powi(2)).exp())
                .sum::<f64>()
                + 0.05;
            (f, amp)
        })
        .collect();
    let norm: f64 = harmonics.iter().map(|(_, a)| a).sum();
    let phases: Vec<f64> = harmonics
        .iter()
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let mut samples = Vec::with_capacity(lead + body + tail);
    samples.extend((0..lead).map(|_| floor.sample(rng)));
    for i in 0..body {
        let t = i as f64 / sr;
        let env = ((i as f64 / (0.02 * sr)).min(1.0)) * (((body - i) as f64 / (0.02 * sr)).min(1.0));
        let wobble = 1.0 + 0.01 * (std::f64::consts::TAU * vibrato_rate * t).sin();
        let s: f64 = harmonics
            .iter()
            .zip(&phases)
            .map(|((f, amp), ph)| amp * (std::f64::consts::TAU * f * wobble * t + ph).sin())
            .sum::<f64>()
            / norm;
        samples.push(gain * (env * s) as f32 + breath.sample(rng));
    }
    samples.extend((0..tail).map(|_| floor.sample(rng)));
    Waveform::new(samples, sample_rate)
}

/// Writes a procedurally generated corpus (PNG faces, 16 kHz WAV voices and a
/// manifest) under `dir`. The last fifth of each identity's faces and clips
/// (at least one, when there are two or more) is tagged `eval`.
pub fn make_toy_corpus(
    dir: &Path,
    n_identities: usize,
    faces_per_id: usize,
    clips_per_id: usize,
    seed: u64,
) -> Result<CorpusManifest> {
    if n_identities < 2 {
        return Err(Error::Config(format!(
            "toy corpus needs at least 2 identities, got {n_identities}"
        )));
    }
    if faces_per_id == 0 || clips_per_id == 0 {
        return Err(Error::Config("faces and clips per identity must be positive".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let eval_count = |n: usize| if n >= 2 { (n / 5).max(1) } else { 0 };
    let mut records = Vec::new();
    for id in 0..n_identities {
        let label = format!("id{id:02}");
        let fa = face_archetype(id, n_identities, seed);
        let va = voice_archetype(id, n_identities, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((id as u64 + 1) << 32));
        for j in 0..faces_per_id {
            let rel = PathBuf::from("faces").join(format!("{label}_{j:03}.png"));
            save_face(&render_face(&fa, &mut rng)?, &dir.join(&rel))?;
            let split = if j >= faces_per_id - eval_count(faces_per_id) {
                Split::Eval
            } else {
                Split::Train
            };
            records.push(Record {
                modality: Modality::Face,
                label: label.clone(),
                split,
                path: rel,
            });
        }
        for j in 0..clips_per_id {
            let rel = PathBuf::from("voices").join(format!("{label}_{j:03}.wav"));
            save_wav(&render_voice(&va, CANONICAL_SAMPLE_RATE, &mut rng)?, &dir.join(&rel))?;
            let split = if j >= clips_per_id - eval_count(clips_per_id) {
                Split::Eval
            } else {
                Split::Train
            };
            records.push(Record {
                modality: Modality::Voice,
                label: label.clone(),
                split,
                path: rel,
            });
        }
    }
    let manifest = CorpusManifest::new(dir, records)?;
    manifest.write(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// `(3, 64, 64)` tensor of a face in the given dtype.
pub fn face_tensor(face: &FaceImage, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(face.tensor().to_dtype(dtype)?.to_device(device)?)
}
