//! Audio decoding and the log-mel frontend.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DspError {
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported WAV codec (format tag {0}); only PCM is supported")]
    UnsupportedCodec(u16),
    #[error("unsupported bit depth {0}; only 16-bit PCM is supported")]
    UnsupportedBitDepth(u16),
    #[error("unsupported channel count {0}; expected 1 or 2")]
    UnsupportedChannels(u16),
    #[error("audio clip has no samples")]
    Empty,
    #[error("audio sample {0} is not finite")]
    NonFinite(usize),
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("clip sample rate {clip} Hz does not match frontend rate {config} Hz")]
    RateMismatch { clip: u32, config: u32 },
    #[error("invalid frontend config: {0}")]
    InvalidConfig(String),
    #[error("malformed spectrogram file: {0}")]
    MalformedSpectrogram(String),
}

/// Mono waveform with amplitudes nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
    source_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32, source_id: impl Into<String>) -> Result<Self, DspError> {
        if samples.is_empty() {
            return Err(DspError::Empty);
        }
        if sample_rate == 0 {
            return Err(DspError::ZeroSampleRate);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(DspError::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
            source_id: source_id.into(),
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }
}

pub fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop_len: usize,
    pub n_mels: usize,
    pub clip_seconds: f64,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_len: 1024,
            hop_len: 512,
            n_mels: 64,
            clip_seconds: 3.0,
            fmin: 50.0,
            fmax: 8000.0,
        }
    }
}

pub const EPS_POWER: f64 = 1e-10;
pub const FLOOR_DB: f64 = -100.0;

impl DspConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        let bad = |m: String| Err(DspError::InvalidConfig(m));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if !self.window_len.is_power_of_two() || self.window_len < 2 {
            return bad(format!("window_len {} is not a power of two", self.window_len));
        }
        if self.hop_len == 0 || self.hop_len > self.window_len {
            return bad(format!("hop_len {} outside (0, window_len]", self.hop_len));
        }
        if self.n_mels < 2 {
            return bad("n_mels must be at least 2".into());
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return bad(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got fmin {} fmax {}",
                self.fmin, self.fmax
            ));
        }
        if !(self.clip_seconds.is_finite() && self.clip_seconds > 0.0) || self.clip_samples() == 0 {
            return bad(format!("clip_seconds {} too short", self.clip_seconds));
        }
        Ok(())
    }

    /// Fixed analysis length in samples.
    pub fn clip_samples(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    /// Frames produced by centered framing of the fixed-length clip.
    pub fn n_frames(&self) -> usize {
        1 + self.clip_samples() / self.hop_len
    }

    pub fn n_bins(&self) -> usize {
        self.window_len / 2 + 1
    }
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a RIFF/WAVE PCM-16 file, averaging stereo to mono.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip, DspError> {
    let malformed = |m: &str| DspError::MalformedHeader(m.to_string());
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(malformed("missing RIFF/WAVE signature"));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u32)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(malformed("fmt chunk too short"));
                }
                let mut tag = read_u16(bytes, body);
                // WAVE_FORMAT_EXTENSIBLE carries the real tag in its subformat GUID.
                if tag == 0xFFFE && size >= 40 && body + 26 <= bytes.len() {
                    tag = read_u16(bytes, body + 24);
                }
                let channels = read_u16(bytes, body + 2);
                let rate = read_u32(bytes, body + 4);
                let bits = read_u16(bytes, body + 14);
                if tag != 1 {
                    return Err(DspError::UnsupportedCodec(tag));
                }
                if bits != 16 {
                    return Err(DspError::UnsupportedBitDepth(bits));
                }
                if channels != 1 && channels != 2 {
                    return Err(DspError::UnsupportedChannels(channels));
                }
                if rate == 0 {
                    return Err(malformed("zero sample rate"));
                }
                format = Some((channels, rate));
            }
            b"data" => {
                let (channels, rate) = format.ok_or_else(|| malformed("data chunk before fmt chunk"))?;
                if body + size > bytes.len() {
                    return Err(malformed("data chunk runs past end of file"));
                }
                let frame = 2 * channels as usize;
                let data = &bytes[body..body + size - size % frame];
                let samples: Vec<f64> = data
                    .chunks_exact(frame)
                    .map(|f| {
                        let sum: f64 = f
                            .chunks_exact(2)
                            .map(|s| i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0)
                            .sum();
                        sum / channels as f64
                    })
                    .collect();
                return AudioClip::new(samples, rate, "");
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(malformed("no data chunk"))
}

/// Encodes a clip as mono PCM-16 WAV.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let n = clip.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in &clip.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

/// Linear-interpolation resampling.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, DspError> {
    if target_rate == 0 {
        return Err(DspError::ZeroSampleRate);
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    let out_len = ((clip.len() as f64 / ratio).round() as usize).max(1);
    let src = &clip.samples;
    let last = src.len() - 1;
    let samples = (0..out_len)
        .map(|i| {
            let t = i as f64 * ratio;
            let k = (t.floor() as usize).min(last);
            let frac = t - k as f64;
            if k >= last {
                src[last]
            } else {
                src[k] * (1.0 - frac) + src[k + 1] * frac
            }
        })
        .collect();
    AudioClip::new(samples, target_rate, clip.source_id.clone())
}

/// Zero-pads symmetrically or center-crops to exactly `len` samples.
pub fn fit_length(samples: &[f64], len: usize) -> Vec<f64> {
    let n = samples.len();
    if n >= len {
        let start = (n - len) / 2;
        samples[start..start + len].to_vec()
    } else {
        let left = (len - n) / 2;
        let mut out = vec![0.0; len];
        out[left..left + n].copy_from_slice(samples);
        out
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Row-major `[n_frames x n_bins]` power spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerSpectrogram {
    pub values: Vec<f64>,
    pub n_frames: usize,
    pub n_bins: usize,
}

impl PowerSpectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_bins..(t + 1) * self.n_bins]
    }
}

/// Frames of the fitted clip, each centered on `t * hop` with zero padding.
pub(crate) fn frames(samples: &[f64], config: &DspConfig) -> Vec<Vec<f64>> {
    let fitted = fit_length(samples, config.clip_samples());
    let half = config.window_len / 2;
    (0..config.n_frames())
        .map(|t| {
            let center = t * config.hop_len;
            (0..config.window_len)
                .map(|n| {
                    let idx = (center + n) as isize - half as isize;
                    if idx < 0 || idx as usize >= fitted.len() {
                        0.0
                    } else {
                        fitted[idx as usize]
                    }
                })
                .collect()
        })
        .collect()
}

pub fn power_spectrogram(clip: &AudioClip, config: &DspConfig) -> Result<PowerSpectrogram, DspError> {
    config.validate()?;
    if clip.sample_rate != config.sample_rate {
        return Err(DspError::RateMismatch {
            clip: clip.sample_rate,
            config: config.sample_rate,
        });
    }
    let window = hann(config.window_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(config.window_len);
    let n_bins = config.n_bins();
    let mut buf = vec![Complex::new(0.0, 0.0); config.window_len];
    let mut values = Vec::with_capacity(config.n_frames() * n_bins);
    for frame in frames(&clip.samples, config) {
        for ((b, x), w) in buf.iter_mut().zip(&frame).zip(&window) {
            *b = Complex::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        values.extend(buf[..n_bins].iter().map(|c| c.norm_sqr()));
    }
    Ok(PowerSpectrogram {
        values,
        n_frames: config.n_frames(),
        n_bins,
    })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Row-major `[n_mels x n_bins]` triangular filterbank with unit peaks.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub n_bins: usize,
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }
}

pub fn mel_filterbank(config: &DspConfig) -> Result<MelFilterbank, DspError> {
    config.validate()?;
    let n_bins = config.n_bins();
    let (lo, hi) = (hz_to_mel(config.fmin), hz_to_mel(config.fmax));
    let edges: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect();
    let bin_hz = config.sample_rate as f64 / config.window_len as f64;
    let mut weights = vec![0.0; config.n_mels * n_bins];
    for m in 0..config.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            *w = up.min(down).max(0.0);
        }
        // A triangle narrower than the bin spacing can miss every bin center.
        if row.iter().all(|w| *w == 0.0) {
            let nearest = ((center / bin_hz).round() as usize).min(n_bins - 1);
            row[nearest] = 1.0;
        }
    }
    Ok(MelFilterbank {
        weights,
        n_mels: config.n_mels,
        n_bins,
        centers_hz: edges[1..=config.n_mels].to_vec(),
    })
}

/// Row-major `[n_frames x n_mels]` log-mel features.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f64>,
    n_frames: usize,
    n_mels: usize,
}

impl MelSpectrogram {
    pub fn from_values(values: Vec<f64>, n_frames: usize, n_mels: usize) -> Result<Self, DspError> {
        if values.len() != n_frames * n_mels {
            return Err(DspError::MalformedSpectrogram(format!(
                "{} values for {n_frames}x{n_mels}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DspError::MalformedSpectrogram("non-finite value".into()));
        }
        Ok(Self {
            values,
            n_frames,
            n_mels,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_frames, self.n_mels)
    }

    /// Header of two little-endian `u32` (rows, cols) then row-major `f32` data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.values.len());
        out.extend_from_slice(&(self.n_frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_mels as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DspError> {
        if bytes.len() < 8 {
            return Err(DspError::MalformedSpectrogram("missing header".into()));
        }
        let rows = read_u32(bytes, 0) as usize;
        let cols = read_u32(bytes, 4) as usize;
        let body = &bytes[8..];
        if body.len() != rows * cols * 4 {
            return Err(DspError::MalformedSpectrogram(format!(
                "{} data bytes for {rows}x{cols}",
                body.len()
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::from_values(values, rows, cols)
    }
}

/// Log-mel power in dB, clamped at [`FLOOR_DB`], before standardization.
pub fn log_mel_db(clip: &AudioClip, config: &DspConfig) -> Result<MelSpectrogram, DspError> {
    let power = power_spectrogram(clip, config)?;
    let fb = mel_filterbank(config)?;
    let mut values = Vec::with_capacity(power.n_frames * fb.n_mels);
    for t in 0..power.n_frames {
        let frame = power.frame(t);
        for m in 0..fb.n_mels {
            let e: f64 = fb.row(m).iter().zip(frame).map(|(w, p)| w * p).sum();
            values.push((10.0 * (e + EPS_POWER).log10()).max(FLOOR_DB));
        }
    }
    MelSpectrogram::from_values(values, power.n_frames, fb.n_mels)
}

/// Standardized log-mel features: zero mean, unit (population) variance
/// per spectrogram. A constant spectrogram maps to all zeros.
pub fn log_mel(clip: &AudioClip, config: &DspConfig) -> Result<MelSpectrogram, DspError> {
    let mut spec = log_mel_db(clip, config)?;
    standardize(&mut spec.values);
    Ok(spec)
}

fn standardize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v = if std > 0.0 { (*v - mean) / std } else { 0.0 };
    }
}
