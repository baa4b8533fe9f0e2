//! Audio decoding and feature extraction.
//!
//! The front end is a magnitude-squared STFT with a periodic Hann window,
//! pooled through triangular filters spaced on the HTK mel scale
//! (`2595·log10(1 + f/700)`), followed by a natural log with an absolute
//! floor. Each filter has unit area in Hz; the weight of an FFT bin is the
//! filter area falling inside that bin's frequency interval, so bands
//! narrower than a bin still receive energy. The canonical configuration uses a
//! 2048-sample window with half overlap and 299 mel bands at 44.1 kHz.

use std::io::{Cursor, Read, Write};
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CANONICAL_SAMPLE_RATE: u32 = 44_100;
pub const PITCH_CLASS_NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];
const MELS_MAGIC: &[u8; 4] = b"MELS";

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid audio: {0}")]
    InvalidAudio(String),
    #[error("audio too short: {len} samples, need at least {min} (one window)")]
    TooShort { len: usize, min: usize },
    #[error("expected sample rate {expected} Hz, got {actual} Hz")]
    SampleRate { expected: u32, actual: u32 },
    #[error("invalid feature config: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Mono samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidAudio("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(AudioError::InvalidAudio("non-finite sample".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// The first `seconds` of audio (or all of it, if shorter).
    pub fn head(&self, seconds: f64) -> Self {
        let n = ((seconds * f64::from(self.sample_rate)).round() as usize).min(self.samples.len());
        Self { samples: self.samples[..n].to_vec(), sample_rate: self.sample_rate }
    }

    pub fn scaled(&self, gain: f32) -> Self {
        Self { samples: self.samples.iter().map(|s| s * gain).collect(), sample_rate: self.sample_rate }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleEncoding {
    Pcm16,
    Float32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WavInfo {
    pub channels: u16,
    pub sample_rate: u32,
    pub encoding: SampleEncoding,
    pub frames: usize,
}

/// Decodes a PCM16 or float32 WAV file, averaging stereo channels.
pub fn decode_wav(bytes: &[u8]) -> Result<(AudioBuffer, WavInfo), AudioError> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|e| AudioError::UnsupportedFormat(e.to_string()))?;
    let spec = reader.spec();
    if !(1..=2).contains(&spec.channels) {
        return Err(AudioError::UnsupportedFormat(format!("{} channels", spec.channels)));
    }
    let channels = usize::from(spec.channels);
    let (interleaved, encoding): (Vec<f32>, _) = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => (
            reader
                .into_samples::<i16>()
                .map(|s| s.map(|v| f32::from(v) / 32768.0))
                .collect::<Result<_, _>>()
                .map_err(|e| AudioError::UnsupportedFormat(e.to_string()))?,
            SampleEncoding::Pcm16,
        ),
        (hound::SampleFormat::Float, 32) => (
            reader
                .into_samples::<f32>()
                .collect::<Result<_, _>>()
                .map_err(|e| AudioError::UnsupportedFormat(e.to_string()))?,
            SampleEncoding::Float32,
        ),
        (fmt, bits) => return Err(AudioError::UnsupportedFormat(format!("{fmt:?} with {bits} bits per sample"))),
    };
    let samples: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    let info = WavInfo { channels: spec.channels, sample_rate: spec.sample_rate, encoding, frames: samples.len() };
    Ok((AudioBuffer::new(samples, spec.sample_rate)?, info))
}

pub fn read_wav_file(path: &std::path::Path) -> Result<AudioBuffer, AudioError> {
    let bytes = std::fs::read(path)?;
    decode_wav(&bytes).map(|(b, _)| b)
}

/// Encodes mono audio as a PCM16 WAV file, clipping to [-1, 1].
pub fn encode_wav_pcm16(buffer: &AudioBuffer) -> Result<Vec<u8>, AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buffer.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut out = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut out, spec).map_err(|e| AudioError::InvalidAudio(e.to_string()))?;
        for &s in &buffer.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            w.write_sample(v).map_err(|e| AudioError::InvalidAudio(e.to_string()))?;
        }
        w.finalize().map_err(|e| AudioError::InvalidAudio(e.to_string()))?;
    }
    Ok(out.into_inner())
}

/// Linear-interpolation resampling to 44.1 kHz.
pub fn resample_to_44100(buffer: &AudioBuffer) -> AudioBuffer {
    resample_linear(buffer, CANONICAL_SAMPLE_RATE)
}

pub fn resample_linear(buffer: &AudioBuffer, target: u32) -> AudioBuffer {
    if buffer.sample_rate == target || buffer.is_empty() {
        return AudioBuffer { samples: buffer.samples.clone(), sample_rate: target };
    }
    let src = &buffer.samples;
    let ratio = f64::from(buffer.sample_rate) / f64::from(target);
    let out_len = (src.len() as f64 / ratio).round() as usize;
    let last = src.len() - 1;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let k = (pos.floor() as usize).min(last);
            let frac = (pos - k as f64) as f32;
            let next = src[(k + 1).min(last)];
            src[k] + (next - src[k]) * frac
        })
        .collect();
    AudioBuffer { samples, sample_rate: target }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    /// Hann window length in samples.
    pub window: usize,
    /// Must be `window / 2`.
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// `None` means Nyquist.
    pub fmax: Option<f64>,
    pub log_floor: f64,
    /// Pitch range considered by the chroma extractor.
    pub chroma_fmin: f64,
    pub chroma_fmax: f64,
    /// Spectral peaks weaker than this (relative to the frame maximum) are
    /// ignored by the chroma extractor.
    pub chroma_peak_threshold_db: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: CANONICAL_SAMPLE_RATE,
            window: 2048,
            hop: 1024,
            n_mels: 299,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-10,
            chroma_fmin: 55.0,
            chroma_fmax: 4186.0,
            chroma_peak_threshold_db: -30.0,
        }
    }
}

impl FeatureConfig {
    pub fn fmax(&self) -> f64 {
        self.fmax.unwrap_or(f64::from(self.sample_rate) / 2.0)
    }

    pub fn validate(&self) -> Result<(), AudioError> {
        if self.window < 2 || self.window % 2 != 0 {
            return Err(AudioError::Config(format!("window must be even and >= 2, got {}", self.window)));
        }
        if self.hop != self.window / 2 {
            return Err(AudioError::Config(format!("hop must be window/2 = {}, got {}", self.window / 2, self.hop)));
        }
        if self.n_mels < 1 {
            return Err(AudioError::Config("n_mels must be >= 1".into()));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax()) || self.fmax() > f64::from(self.sample_rate) / 2.0 {
            return Err(AudioError::Config(format!("need 0 <= fmin < fmax <= Nyquist, got {}..{}", self.fmin, self.fmax())));
        }
        if !(self.log_floor > 0.0) {
            return Err(AudioError::Config("log_floor must be positive".into()));
        }
        Ok(())
    }

    /// Number of frames for a signal of `len` samples (no padding).
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.window {
            0
        } else {
            (len - self.window) / self.hop + 1
        }
    }

    pub fn bin_hz(&self) -> f64 {
        f64::from(self.sample_rate) / self.window as f64
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Sparse triangular filter: weights for consecutive FFT bins from `start`.
/// Weights sum to 1 for filters that lie inside the analysed band.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilter {
    pub center_hz: f64,
    pub start: usize,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub filters: Vec<MelFilter>,
    n_bins: usize,
}

impl MelFilterbank {
    pub fn new(config: &FeatureConfig) -> Result<Self, AudioError> {
        config.validate()?;
        let n_bins = config.window / 2 + 1;
        let (mlo, mhi) = (hz_to_mel(config.fmin), hz_to_mel(config.fmax()));
        let edges: Vec<f64> = (0..config.n_mels + 2)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (config.n_mels + 1) as f64))
            .collect();
        let bin_hz = config.bin_hz();
        let filters = edges
            .windows(3)
            .map(|w| {
                let (lo, center, hi) = (w[0], w[1], w[2]);
                // area under the unit-area triangle from lo up to x
                let cumulative = |x: f64| -> f64 {
                    let area = if x <= lo {
                        0.0
                    } else if x <= center {
                        (x - lo).powi(2) / (2.0 * (center - lo))
                    } else if x < hi {
                        (center - lo) / 2.0 + ((hi - center).powi(2) - (hi - x).powi(2)) / (2.0 * (hi - center))
                    } else {
                        (hi - lo) / 2.0
                    };
                    area * 2.0 / (hi - lo)
                };
                let first = ((lo / bin_hz - 0.5).floor().max(0.0) as usize).min(n_bins - 1);
                let last = ((hi / bin_hz + 0.5).ceil() as usize).min(n_bins - 1);
                let mut start = None;
                let mut weights = Vec::new();
                for k in first..=last {
                    let (a, b) = ((k as f64 - 0.5) * bin_hz, (k as f64 + 0.5) * bin_hz);
                    let w = cumulative(b) - cumulative(a);
                    if w > 0.0 {
                        start.get_or_insert(k);
                        weights.push(w);
                    } else if start.is_some() {
                        break;
                    }
                }
                MelFilter { center_hz: center, start: start.unwrap_or(0), weights }
            })
            .collect();
        Ok(Self { filters, n_bins })
    }

    pub fn centers_hz(&self) -> Vec<f64> {
        self.filters.iter().map(|f| f.center_hz).collect()
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        debug_assert_eq!(power.len(), self.n_bins);
        self.filters
            .iter()
            .map(|f| f.weights.iter().zip(&power[f.start..]).map(|(w, p)| w * p).sum())
            .collect()
    }
}

/// Short-time power spectra, one `window/2 + 1` row per frame.
pub fn power_spectrogram(samples: &[f32], window: usize, hop: usize) -> Vec<Vec<f64>> {
    if samples.len() < window {
        return Vec::new();
    }
    let frames = (samples.len() - window) / hop + 1;
    let hann: Vec<f64> = (0..window)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / window as f64).cos())
        .collect();
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(window);
    (0..frames)
        .into_par_iter()
        .map_init(
            || (vec![Complex::new(0.0, 0.0); window], vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()]),
            |(buf, scratch), t| {
                let seg = &samples[t * hop..t * hop + window];
                for ((b, &s), w) in buf.iter_mut().zip(seg).zip(&hann) {
                    *b = Complex::new(f64::from(s) * w, 0.0);
                }
                fft.process_with_scratch(buf, scratch);
                buf[..window / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
            },
        )
        .collect()
}

/// Log-mel spectrogram, row-major `frames × n_mels`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub item_id: String,
    pub frames: usize,
    pub n_mels: usize,
    pub values: Vec<f32>,
}

impl MelSpectrogram {
    pub fn new(item_id: impl Into<String>, frames: usize, n_mels: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), frames * n_mels, "values must be frames × n_mels");
        Self { item_id: item_id.into(), frames, n_mels, values }
    }

    pub fn at(&self, frame: usize, mel: usize) -> f32 {
        self.values[frame * self.n_mels + mel]
    }

    pub fn frame(&self, frame: usize) -> &[f32] {
        &self.values[frame * self.n_mels..(frame + 1) * self.n_mels]
    }

    /// Serializes as `MELS`, u32 frames, u32 n_mels, little-endian f32 cells.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(MELS_MAGIC)?;
        out.write_all(&(self.frames as u32).to_le_bytes())?;
        out.write_all(&(self.n_mels as u32).to_le_bytes())?;
        let mut bytes = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)
    }

    pub fn read_from<R: Read>(mut input: R, item_id: impl Into<String>) -> Result<Self, AudioError> {
        let mut header = [0u8; 12];
        input
            .read_exact(&mut header)
            .map_err(|_| AudioError::UnsupportedFormat("truncated MELS header".into()))?;
        if &header[..4] != MELS_MAGIC {
            return Err(AudioError::UnsupportedFormat("missing MELS magic".into()));
        }
        let frames = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes")) as usize;
        let n_mels = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
        let mut body = Vec::new();
        input.read_to_end(&mut body)?;
        if body.len() != frames * n_mels * 4 {
            return Err(AudioError::UnsupportedFormat(format!(
                "MELS body has {} bytes, expected {}",
                body.len(),
                frames * n_mels * 4
            )));
        }
        let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Self::new(item_id, frames, n_mels, values))
    }
}

fn check_input(buffer: &AudioBuffer, config: &FeatureConfig) -> Result<(), AudioError> {
    config.validate()?;
    if buffer.sample_rate != config.sample_rate {
        return Err(AudioError::SampleRate { expected: config.sample_rate, actual: buffer.sample_rate });
    }
    if buffer.len() < config.window {
        return Err(AudioError::TooShort { len: buffer.len(), min: config.window });
    }
    Ok(())
}

/// Mel-band power per frame, before the log.
pub fn mel_energies(buffer: &AudioBuffer, config: &FeatureConfig) -> Result<Vec<Vec<f64>>, AudioError> {
    check_input(buffer, config)?;
    let bank = MelFilterbank::new(config)?;
    Ok(power_spectrogram(&buffer.samples, config.window, config.hop)
        .iter()
        .map(|p| bank.apply(p))
        .collect())
}

pub fn mel_spectrogram(buffer: &AudioBuffer, config: &FeatureConfig) -> Result<MelSpectrogram, AudioError> {
    mel_spectrogram_for("", buffer, config)
}

pub fn mel_spectrogram_for(item_id: &str, buffer: &AudioBuffer, config: &FeatureConfig) -> Result<MelSpectrogram, AudioError> {
    let energies = mel_energies(buffer, config)?;
    let frames = energies.len();
    let values = energies
        .into_iter()
        .flatten()
        .map(|e| e.max(config.log_floor).ln() as f32)
        .collect();
    Ok(MelSpectrogram::new(item_id, frames, config.n_mels, values))
}

/// Pitch-class energy distribution, C first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChromaVector {
    pub energies: [f64; 12],
    /// No spectral peak was found in range; `energies` is all zero.
    pub silent: bool,
}

impl ChromaVector {
    /// Normalizes raw energies to unit sum; all-zero input yields a silent vector.
    pub fn from_energies(raw: [f64; 12]) -> Self {
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) {
            return Self { energies: [0.0; 12], silent: true };
        }
        Self { energies: raw.map(|e| e / total), silent: false }
    }

    /// Pitch classes sorted by descending energy.
    pub fn ranked_classes(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..12).collect();
        idx.sort_by(|&a, &b| self.energies[b].total_cmp(&self.energies[a]).then(a.cmp(&b)));
        idx
    }

    /// Rotates so that pitch class `i` moves to `i + semitones`.
    pub fn transposed(&self, semitones: usize) -> Self {
        let mut e = [0.0; 12];
        for (i, v) in self.energies.iter().enumerate() {
            e[(i + semitones) % 12] = *v;
        }
        Self { energies: e, silent: self.silent }
    }
}

/// Nearest pitch class for a frequency, C = 0.
pub fn pitch_class(freq_hz: f64) -> usize {
    ((12.0 * (freq_hz / 440.0).log2()).round() as i64 + 9).rem_euclid(12) as usize
}

/// Chroma from spectral peaks, summed over all frames.
pub fn chroma(buffer: &AudioBuffer, config: &FeatureConfig) -> Result<ChromaVector, AudioError> {
    check_input(buffer, config)?;
    let bin_hz = config.bin_hz();
    let rel = 10f64.powf(config.chroma_peak_threshold_db / 10.0);
    let kmin = ((config.chroma_fmin / bin_hz).floor() as usize).max(1);
    let spectra = power_spectrogram(&buffer.samples, config.window, config.hop);
    let mut raw = [0.0; 12];
    for p in &spectra {
        let kmax = ((config.chroma_fmax / bin_hz).ceil() as usize).min(p.len() - 2);
        let peak_max = p.iter().copied().fold(0.0, f64::max);
        if !(peak_max > 0.0) {
            continue;
        }
        let threshold = peak_max * rel;
        for k in kmin..=kmax {
            let (a, b, c) = (p[k - 1], p[k], p[k + 1]);
            if b < threshold || b <= a || b < c {
                continue;
            }
            // Gaussian (log-parabolic) peak interpolation
            let offset = if a > 0.0 && c > 0.0 {
                let (la, lb, lc) = (a.ln(), b.ln(), c.ln());
                let denom = la - 2.0 * lb + lc;
                if denom < 0.0 {
                    (0.5 * (la - lc) / denom).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            } else {
                0.0
            };
            let freq = (k as f64 + offset) * bin_hz;
            if freq < config.chroma_fmin || freq > config.chroma_fmax {
                continue;
            }
            raw[pitch_class(freq)] += b;
        }
    }
    Ok(ChromaVector::from_energies(raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(freqs: &[f64], seconds: f64, sr: u32, amp: f32) -> AudioBuffer {
        let n = (seconds * f64::from(sr)) as usize;
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / f64::from(sr);
                freqs.iter().map(|f| (2.0 * std::f64::consts::PI * f * t).sin()).sum::<f64>() as f32 * amp
            })
            .collect();
        AudioBuffer::new(samples, sr).unwrap()
    }

    fn stereo_wav(left: &[f32], right: &[f32]) -> Vec<u8> {
        let spec = hound::WavSpec { channels: 2, sample_rate: 44100, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut out = Cursor::new(Vec::new());
        let mut w = hound::WavWriter::new(&mut out, spec).unwrap();
        for (l, r) in left.iter().zip(right) {
            w.write_sample((l * 32767.0) as i16).unwrap();
            w.write_sample((r * 32767.0) as i16).unwrap();
        }
        w.finalize().unwrap();
        out.into_inner()
    }

    #[test]
    fn pcm16_round_trip() {
        let buf = sine(&[440.0], 1.0, 44100, 0.5);
        let bytes = encode_wav_pcm16(&buf).unwrap();
        let (back, info) = decode_wav(&bytes).unwrap();
        assert_eq!(back.len(), 44100);
        assert_eq!(info.encoding, SampleEncoding::Pcm16);
        let peak = back.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
        assert!((peak - 0.5).abs() < 1e-3, "{peak}");
    }

    #[test]
    fn stereo_identical_channels_equals_mono() {
        let buf = sine(&[440.0], 0.1, 44100, 0.5);
        let (mono, _) = decode_wav(&encode_wav_pcm16(&buf).unwrap()).unwrap();
        let (stereo, info) = decode_wav(&stereo_wav(&mono.samples, &mono.samples)).unwrap();
        assert_eq!(info.channels, 2);
        for (a, b) in mono.samples.iter().zip(&stereo.samples) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn float32_is_supported() {
        let spec = hound::WavSpec { channels: 1, sample_rate: 22050, bits_per_sample: 32, sample_format: hound::SampleFormat::Float };
        let mut out = Cursor::new(Vec::new());
        let mut w = hound::WavWriter::new(&mut out, spec).unwrap();
        for v in [0.25f32, -0.5, 1.0] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let (buf, info) = decode_wav(&out.into_inner()).unwrap();
        assert_eq!(buf.samples, vec![0.25, -0.5, 1.0]);
        assert_eq!(info.encoding, SampleEncoding::Float32);
        assert_eq!(buf.sample_rate, 22050);
    }

    #[test]
    fn truncated_or_foreign_bytes_are_rejected() {
        let bytes = encode_wav_pcm16(&sine(&[440.0], 0.01, 44100, 0.5)).unwrap();
        assert!(matches!(decode_wav(&bytes[..20]), Err(AudioError::UnsupportedFormat(_))));
        assert!(matches!(decode_wav(b"ID3\x03not a wav at all"), Err(AudioError::UnsupportedFormat(_))));
    }

    #[test]
    fn pcm24_is_unsupported() {
        let spec = hound::WavSpec { channels: 1, sample_rate: 44100, bits_per_sample: 24, sample_format: hound::SampleFormat::Int };
        let mut out = Cursor::new(Vec::new());
        let mut w = hound::WavWriter::new(&mut out, spec).unwrap();
        w.write_sample(1000i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(decode_wav(&out.into_inner()), Err(AudioError::UnsupportedFormat(_))));
    }

    #[test]
    fn resample_is_noop_at_target_rate() {
        let buf = sine(&[440.0], 0.1, 44100, 0.5);
        assert_eq!(resample_to_44100(&buf), buf);
        let empty = AudioBuffer::new(vec![], 8000).unwrap();
        assert!(resample_to_44100(&empty).is_empty());
    }

    #[test]
    fn resample_preserves_dominant_frequency() {
        let buf = sine(&[1000.0], 1.0, 22050, 0.5);
        let up = resample_to_44100(&buf);
        assert_eq!(up.len(), 44100);
        let n = 4096;
        let spectra = power_spectrogram(&up.samples, n, n / 2);
        let p = &spectra[spectra.len() / 2];
        let argmax = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let expected = 1000.0 / (44100.0 / n as f64);
        assert!((argmax as f64 - expected).abs() <= 1.0, "{argmax} vs {expected}");
    }

    #[test]
    fn twelve_seconds_give_515_frames() {
        let cfg = FeatureConfig::default();
        let buf = sine(&[440.0], 12.0, 44100, 0.1);
        assert_eq!(buf.len(), 529_200);
        let mel = mel_spectrogram(&buf, &cfg).unwrap();
        assert_eq!(mel.frames, 515);
        assert_eq!(mel.n_mels, 299);
    }

    #[test]
    fn silence_is_floored_everywhere() {
        let cfg = FeatureConfig::default();
        let buf = AudioBuffer::new(vec![0.0; 8192], 44100).unwrap();
        let mel = mel_spectrogram(&buf, &cfg).unwrap();
        let floor = cfg.log_floor.ln() as f32;
        assert!(mel.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn short_audio_names_minimum() {
        let cfg = FeatureConfig::default();
        let buf = AudioBuffer::new(vec![0.0; 100], 44100).unwrap();
        match mel_spectrogram(&buf, &cfg) {
            Err(AudioError::TooShort { min, .. }) => assert_eq!(min, 2048),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_rejects_non_half_overlap() {
        let cfg = FeatureConfig { hop: 512, ..FeatureConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = FeatureConfig { fmin: 30000.0, ..FeatureConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn filterbank_centers_follow_htk_scale() {
        let cfg = FeatureConfig::default();
        let bank = MelFilterbank::new(&cfg).unwrap();
        let top = 2595.0 * (1.0f64 + 22050.0 / 700.0).log10();
        for (i, c) in bank.centers_hz().iter().enumerate() {
            let m = top * (i + 1) as f64 / 300.0;
            let expected = 700.0 * (10f64.powf(m / 2595.0) - 1.0);
            assert!((c - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn mels_file_round_trip() {
        let mel = MelSpectrogram::new("x", 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, -6.5]);
        let mut buf = Vec::new();
        mel.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MELS");
        assert_eq!(buf.len(), 12 + 24);
        assert_eq!(MelSpectrogram::read_from(buf.as_slice(), "x").unwrap(), mel);
        assert!(MelSpectrogram::read_from(&buf[..20], "x").is_err());
    }

    #[test]
    fn a4_dominates_chroma() {
        let c = chroma(&sine(&[440.0], 1.0, 44100, 0.3), &FeatureConfig::default()).unwrap();
        assert!(c.energies[9] > 0.8, "{:?}", c.energies);
        assert!((c.energies.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn silence_chroma_is_flagged() {
        let c = chroma(&AudioBuffer::new(vec![0.0; 8192], 44100).unwrap(), &FeatureConfig::default()).unwrap();
        assert!(c.silent);
        assert_eq!(c.energies, [0.0; 12]);
    }

    #[test]
    fn pitch_class_arithmetic() {
        assert_eq!(pitch_class(440.0), 9);
        assert_eq!(pitch_class(261.63), 0);
        assert_eq!(pitch_class(329.63), 4);
        assert_eq!(pitch_class(392.0), 7);
        assert_eq!(pitch_class(55.0), 9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn frame_count_formula(len in 2048usize..60_000) {
            let cfg = FeatureConfig::default();
            let spectra = power_spectrogram(&vec![0.0; len], cfg.window, cfg.hop);
            prop_assert_eq!(spectra.len(), (len - 2048) / 1024 + 1);
            prop_assert_eq!(cfg.frame_count(len), spectra.len());
        }

        #[test]
        fn gain_shifts_log_mel(exponent in -8i32..8, gain in 0.05f32..4.0) {
            let cfg = FeatureConfig::default();
            let buf = sine(&[330.0, 1234.5], 0.2, 44100, 0.2);
            let a = mel_energies(&buf, &cfg).unwrap();
            // power-of-two gains scale f32 samples exactly
            let exact = 2f32.powi(exponent);
            let b = mel_energies(&buf.scaled(exact), &cfg).unwrap();
            let shift = 2.0 * f64::from(exact).ln();
            for (ra, rb) in a.iter().zip(&b) {
                for (&x, &y) in ra.iter().zip(rb) {
                    if x > 0.0 {
                        prop_assert!((y.ln() - x.ln() - shift).abs() < 1e-9, "x={x} y={y}");
                    }
                }
            }
            // arbitrary gains round every sample; check cells well above that noise
            let b = mel_energies(&buf.scaled(gain), &cfg).unwrap();
            let shift = 2.0 * f64::from(gain).ln();
            for (ra, rb) in a.iter().zip(&b) {
                let top = ra.iter().copied().fold(0.0, f64::max);
                for (&x, &y) in ra.iter().zip(rb) {
                    if x > 1e-6 * top {
                        prop_assert!((y.ln() - x.ln() - shift).abs() < 1e-4, "x={x} y={y}");
                    }
                }
            }
        }

        #[test]
        fn chroma_ignores_gain(gain in 0.05f32..4.0) {
            let cfg = FeatureConfig::default();
            let buf = sine(&[261.63, 311.13, 392.0], 0.3, 44100, 0.1);
            let a = chroma(&buf, &cfg).unwrap();
            let b = chroma(&buf.scaled(gain), &cfg).unwrap();
            for (x, y) in a.energies.iter().zip(&b.energies) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }
    }
}
