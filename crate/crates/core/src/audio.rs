//! Voice front end: endpointing and the 64-band log mel spectrogram.
//!
//! Framing is fixed at a 25 ms analysis window with a 10 ms shift. The mel
//! filterbank is HTK-style (`2595 * log10(1 + f / 700)`) with triangular
//! filters spanning 0 Hz to Nyquist.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;
pub const MEL_BANDS: usize = 64;
pub const WINDOW_SECONDS: f64 = 0.025;
pub const SHIFT_SECONDS: f64 = 0.010;
/// Floor added to mel energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;
pub const DEFAULT_ENERGY_QUANTILE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidInput("waveform is empty".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Linear-interpolation resampling. Returns a clone when the rate already matches.
    pub fn resample(&self, target_rate: u32) -> Result<Waveform> {
        if target_rate == 0 {
            return Err(Error::InvalidInput("target sample rate must be positive".into()));
        }
        if target_rate == self.sample_rate {
            return Ok(self.clone());
        }
        let ratio = self.sample_rate as f64 / target_rate as f64;
        let out_len = ((self.samples.len() as f64) / ratio).floor().max(1.0) as usize;
        let last = self.samples.len() - 1;
        let samples = (0..out_len)
            .map(|i| {
                let pos = i as f64 * ratio;
                let lo = (pos.floor() as usize).min(last);
                let hi = (lo + 1).min(last);
                let frac = (pos - lo as f64) as f32;
                self.samples[lo] * (1.0 - frac) + self.samples[hi] * frac
            })
            .collect();
        Waveform::new(samples, target_rate)
    }
}

/// Frame geometry in samples for a given rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Framing {
    pub window: usize,
    pub shift: usize,
}

impl Framing {
    pub fn for_rate(sample_rate: u32) -> Self {
        let window = (WINDOW_SECONDS * sample_rate as f64).round().max(1.0) as usize;
        let shift = (SHIFT_SECONDS * sample_rate as f64).round().max(1.0) as usize;
        Self { window, shift }
    }

    /// Number of full windows that fit in `len` samples; zero if none.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.window {
            0
        } else {
            1 + (len - self.window) / self.shift
        }
    }
}

/// Short-time energy (mean square) of every full frame.
pub fn frame_energies(samples: &[f32], framing: Framing) -> Vec<f64> {
    (0..framing.frame_count(samples.len()))
        .map(|t| {
            let frame = &samples[t * framing.shift..t * framing.shift + framing.window];
            frame.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / framing.window as f64
        })
        .collect()
}

/// Sample range `[start, end)` left after trimming leading and trailing
/// low-energy audio.
///
/// The threshold sits 1% of the way from the `energy_quantile` frame energy to
/// the loudest frame energy, so a recording whose frames are all equally loud
/// (or all silent) has no frame strictly above it and keeps its full range.
pub fn endpoint_bounds(w: &Waveform, energy_quantile: f64) -> Result<(usize, usize)> {
    if w.is_empty() {
        return Err(Error::InvalidInput("cannot endpoint an empty waveform".into()));
    }
    if !(0.0..=1.0).contains(&energy_quantile) {
        return Err(Error::InvalidInput(format!(
            "energy quantile {energy_quantile} outside [0, 1]"
        )));
    }
    let framing = Framing::for_rate(w.sample_rate);
    let energies = frame_energies(&w.samples, framing);
    if energies.is_empty() {
        return Ok((0, w.len()));
    }
    let mut sorted = energies.clone();
    sorted.sort_by(f64::total_cmp);
    let idx = ((sorted.len() - 1) as f64 * energy_quantile).round() as usize;
    let floor = sorted[idx];
    let peak = sorted[sorted.len() - 1];
    let threshold = floor + 0.01 * (peak - floor);

    let first = energies.iter().position(|&e| e > threshold);
    let last = energies.iter().rposition(|&e| e > threshold);
    match (first, last) {
        (Some(first), Some(last)) => Ok((
            first * framing.shift,
            (last * framing.shift + framing.window).min(w.len()),
        )),
        _ => Ok((0, w.len())),
    }
}

/// The part of `w` between the endpoints found by [`endpoint_bounds`].
pub fn endpoint(w: &Waveform, energy_quantile: f64) -> Result<Waveform> {
    let (start, end) = endpoint_bounds(w, energy_quantile)?;
    if (start, end) == (0, w.len()) {
        return Ok(w.clone());
    }
    Waveform::new(w.samples[start..end].to_vec(), w.sample_rate)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// Row-major `bands x frames`.
    values: Vec<f32>,
    frames: usize,
    pub frame_shift: f64,
    pub window: f64,
}

impl MelSpectrogram {
    pub fn from_values(values: Vec<f32>, bands: usize, frames: usize) -> Result<Self> {
        if bands != MEL_BANDS {
            return Err(Error::Shape(format!("expected {MEL_BANDS} mel bands, got {bands}")));
        }
        if frames == 0 || values.len() != bands * frames {
            return Err(Error::Shape(format!(
                "mel array of {} values does not match {bands}x{frames}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite mel value".into()));
        }
        Ok(Self {
            values,
            frames,
            frame_shift: SHIFT_SECONDS,
            window: WINDOW_SECONDS,
        })
    }

    pub fn bands(&self) -> usize {
        MEL_BANDS
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, band: usize, frame: usize) -> f32 {
        self.values[band * self.frames + frame]
    }

    /// Whole-array mean/variance normalization.
    pub fn normalized(&self) -> MelSpectrogram {
        let n = self.values.len() as f64;
        let mean = self.values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 1e-12 { var.sqrt() } else { 1.0 };
        MelSpectrogram {
            values: self.values.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect(),
            ..self.clone()
        }
    }

    /// Contiguous frame range `[start, start + len)`.
    pub fn crop(&self, start: usize, len: usize) -> Result<MelSpectrogram> {
        if len == 0 || start + len > self.frames {
            return Err(Error::Shape(format!(
                "crop [{start}, {}) outside {} frames",
                start + len,
                self.frames
            )));
        }
        let values = (0..MEL_BANDS)
            .flat_map(|b| {
                self.values[b * self.frames + start..b * self.frames + start + len]
                    .iter()
                    .copied()
            })
            .collect();
        Ok(MelSpectrogram {
            values,
            frames: len,
            ..self.clone()
        })
    }

    /// `(64, frames)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (MEL_BANDS, self.frames), device)?.to_dtype(dtype)?)
    }
}

/// Reusable log-mel analyzer for one sample rate.
pub struct MelFrontend {
    sample_rate: u32,
    framing: Framing,
    fft_len: usize,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// `MEL_BANDS` rows of `fft_len / 2 + 1` weights.
    filters: Vec<Vec<f64>>,
}

impl std::fmt::Debug for MelFrontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFrontend")
            .field("sample_rate", &self.sample_rate)
            .field("framing", &self.framing)
            .field("fft_len", &self.fft_len)
            .finish()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl MelFrontend {
    pub fn new(sample_rate: u32) -> Self {
        let framing = Framing::for_rate(sample_rate);
        let fft_len = framing.window.next_power_of_two();
        let fft = FftPlanner::new().plan_fft_forward(fft_len);
        let n = framing.window;
        let window = (0..n)
            .map(|i| {
                if n == 1 {
                    1.0
                } else {
                    0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()
                }
            })
            .collect();
        let filters = mel_filterbank(sample_rate, fft_len);
        Self {
            sample_rate,
            framing,
            fft_len,
            fft,
            window,
            filters,
        }
    }

    pub fn framing(&self) -> Framing {
        self.framing
    }

    pub fn log_mel(&self, w: &Waveform) -> Result<MelSpectrogram> {
        if w.sample_rate() != self.sample_rate {
            return Err(Error::InvalidInput(format!(
                "front end expects {} Hz audio, got {} Hz",
                self.sample_rate,
                w.sample_rate()
            )));
        }
        let frames = self.framing.frame_count(w.len());
        if frames == 0 {
            return Err(Error::InvalidInput(format!(
                "waveform of {} samples is shorter than one {}-sample window",
                w.len(),
                self.framing.window
            )));
        }
        let bins = self.fft_len / 2 + 1;
        let mut values = vec![0f32; MEL_BANDS * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_len];
        let mut power = vec![0f64; bins];
        for t in 0..frames {
            let frame = &w.samples()[t * self.framing.shift..t * self.framing.shift + self.framing.window];
            for (slot, (&s, &win)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *slot = Complex::new(s as f64 * win, 0.0);
            }
            for slot in buf.iter_mut().skip(frame.len()) {
                *slot = Complex::new(0.0, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (b, filter) in self.filters.iter().enumerate() {
                let energy: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
                values[b * frames + t] = (energy + LOG_FLOOR).ln() as f32;
            }
        }
        MelSpectrogram::from_values(values, MEL_BANDS, frames)
    }
}

fn mel_filterbank(sample_rate: u32, fft_len: usize) -> Vec<Vec<f64>> {
    let bins = fft_len / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..MEL_BANDS + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (MEL_BANDS + 1) as f64))
        .collect();
    (0..MEL_BANDS)
        .map(|b| {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / fft_len as f64;
                    let up = (f - lo) / (mid - lo);
                    let down = (hi - f) / (hi - mid);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Log mel spectrogram at the waveform's own sample rate.
pub fn log_mel(w: &Waveform) -> Result<MelSpectrogram> {
    MelFrontend::new(w.sample_rate()).log_mel(w)
}

/// Resample, endpoint, analyze and normalize: the full path from a recording to
/// embedder input.
pub fn voice_features(w: &Waveform, sample_rate: u32) -> Result<MelSpectrogram> {
    let w = w.resample(sample_rate)?;
    let trimmed = endpoint(&w, DEFAULT_ENERGY_QUANTILE)?;
    let trimmed = if Framing::for_rate(sample_rate).frame_count(trimmed.len()) == 0 {
        w
    } else {
        trimmed
    };
    Ok(log_mel(&trimmed)?.normalized())
}
