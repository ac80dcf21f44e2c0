use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stft::{Stft, StftConfig};
use super::wav::Waveform;
use crate::error::{Error, Result};

pub const MEL_CHANNELS: usize = 80;
pub const CLAMP_FLOOR: f64 = 1e-5;
const MEL_MAGIC: &[u8; 4] = b"MEL1";

/// HTK mel scale, `2595·log10(1 + f/700)`.
pub fn mel_hz(f_hz: f64) -> Result<f64> {
    if f_hz.is_nan() || f_hz < 0.0 {
        return Err(Error::invalid(format!("frequency {f_hz} Hz is negative")));
    }
    Ok(2595.0 * (1.0 + f_hz / 700.0).log10())
}

/// Inverse of [`mel_hz`].
pub fn hz_mel(m: f64) -> Result<f64> {
    if m.is_nan() || m < 0.0 {
        return Err(Error::invalid(format!("mel value {m} is negative")));
    }
    Ok(700.0 * (10f64.powf(m / 2595.0) - 1.0))
}

/// Triangular filters, peak-normalized, equally spaced on the mel scale.
///
/// The lowest channel is flat below its centre and the highest flat above
/// its centre, so every bin in `[f_min, f_max]` has some filter weight.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    weights: Vec<f64>,
    n_mels: usize,
    n_bins: usize,
    f_min: f64,
    f_max: f64,
    centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate_hz: u32, f_min: f64, f_max: f64) -> Result<Self> {
        let nyquist = sample_rate_hz as f64 / 2.0;
        if n_mels == 0 || n_fft < 2 || !(f_min >= 0.0 && f_min < f_max && f_max <= nyquist) {
            return Err(Error::invalid(format!(
                "bad filterbank: {n_mels} mels, n_fft {n_fft}, band [{f_min}, {f_max}] Hz at {sample_rate_hz} Hz"
            )));
        }
        let n_bins = n_fft / 2 + 1;
        let (lo, hi) = (mel_hz(f_min)?, mel_hz(f_max)?);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| hz_mel(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect::<Result<_>>()?;
        let bin_hz = sample_rate_hz as f64 / n_fft as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        for c in 0..n_mels {
            let (left, center, right) = (edges[c], edges[c + 1], edges[c + 2]);
            for b in 0..n_bins {
                let f = b as f64 * bin_hz;
                if f < f_min || f > f_max {
                    continue;
                }
                let w = if f <= center {
                    if c == 0 {
                        1.0
                    } else {
                        (f - left) / (center - left)
                    }
                } else if c == n_mels - 1 {
                    1.0
                } else {
                    (right - f) / (right - center)
                };
                weights[c * n_bins + b] = w.max(0.0);
            }
        }
        let fb = Self {
            weights,
            n_mels,
            n_bins,
            f_min,
            f_max,
            centers: edges[1..=n_mels].to_vec(),
        };
        for c in 0..n_mels {
            if fb.channel(c).iter().all(|w| *w == 0.0) {
                return Err(Error::invalid(format!(
                    "mel channel {c} covers no FFT bin; use fewer channels or a larger FFT"
                )));
            }
        }
        Ok(fb)
    }

    /// 80 channels over 0–8000 Hz for a 1024-point FFT at 16 kHz.
    pub fn standard() -> Self {
        Self::for_stft(&StftConfig::default()).expect("standard geometry is valid")
    }

    pub fn for_stft(c: &StftConfig) -> Result<Self> {
        Self::new(MEL_CHANNELS, c.n_fft, c.sample_rate_hz, 0.0, c.sample_rate_hz as f64 / 2.0)
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn f_min(&self) -> f64 {
        self.f_min
    }

    pub fn f_max(&self) -> f64 {
        self.f_max
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers
    }

    /// Row-major `[n_mels × n_bins]`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.weights[c * self.n_bins..(c + 1) * self.n_bins]
    }

    /// `fb · spectrum` for one frame.
    pub fn apply(&self, spectrum: &[f64]) -> Vec<f64> {
        (0..self.n_mels)
            .map(|c| self.channel(c).iter().zip(spectrum).map(|(w, s)| w * s).sum())
            .collect()
    }

    /// `fbᵀ · mel` for one frame.
    pub fn apply_transpose(&self, mel: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_bins];
        for (c, m) in mel.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.channel(c)) {
                *o += w * m;
            }
        }
        out
    }

    /// Per-bin sum of weights over channels.
    pub fn column_sums(&self) -> Vec<f64> {
        self.apply_transpose(&vec![1.0; self.n_mels])
    }
}

/// Log-mel matrix `[frames × 80]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    data: Vec<f64>,
    frames: usize,
    pub frame_length_samples: usize,
    pub hop_samples: usize,
    pub sample_rate_hz: u32,
}

impl MelSpectrogram {
    /// Values below `ln(CLAMP_FLOOR)` are raised to it.
    pub fn new(data: Vec<f64>, frames: usize, config: &StftConfig) -> Result<Self> {
        if data.len() != frames * MEL_CHANNELS {
            return Err(Error::ShapeMismatch {
                op: "mel spectrogram",
                lhs: vec![frames, MEL_CHANNELS],
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mel spectrogram"));
        }
        let floor = CLAMP_FLOOR.ln();
        Ok(Self {
            data: data.into_iter().map(|v| v.max(floor)).collect(),
            frames,
            frame_length_samples: config.frame_length,
            hop_samples: config.hop,
            sample_rate_hz: config.sample_rate_hz,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        MEL_CHANNELS
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * MEL_CHANNELS..(t + 1) * MEL_CHANNELS]
    }

    pub fn stft_config(&self) -> StftConfig {
        StftConfig {
            sample_rate_hz: self.sample_rate_hz,
            frame_length: self.frame_length_samples,
            hop: self.hop_samples,
            ..StftConfig::default()
        }
    }

    /// Samples spanned by the frames.
    pub fn span_samples(&self) -> usize {
        self.stft_config().span(self.frames)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MEL_MAGIC)?;
        out.write_all(&(self.frames as u32).to_le_bytes())?;
        out.write_all(&(MEL_CHANNELS as u32).to_le_bytes())?;
        for v in &self.data {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a MEL1 file; geometry other than frame counts is assumed default.
    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut head = [0u8; 12];
        input
            .read_exact(&mut head)
            .map_err(|_| Error::MelFormat("truncated header".into()))?;
        if &head[..4] != MEL_MAGIC {
            return Err(Error::MelFormat(format!("bad magic {:?}", &head[..4])));
        }
        let frames = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let channels = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        if channels != MEL_CHANNELS {
            return Err(Error::MelFormat(format!("expected {MEL_CHANNELS} channels, found {channels}")));
        }
        let mut payload = vec![0u8; frames * channels * 4];
        input
            .read_exact(&mut payload)
            .map_err(|_| Error::MelFormat(format!("truncated payload for {frames} frames")))?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Self::new(data, frames, &StftConfig::default())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::path(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::path(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::path(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

/// `ln(max(fb · |STFT|, 1e-5))` for each frame.
pub fn mel_spectrogram(w: &Waveform, fb: &MelFilterbank) -> Result<MelSpectrogram> {
    mel_spectrogram_with(w, fb, &StftConfig::default())
}

pub fn mel_spectrogram_with(w: &Waveform, fb: &MelFilterbank, config: &StftConfig) -> Result<MelSpectrogram> {
    if fb.n_bins() != config.n_bins() || fb.n_mels() != MEL_CHANNELS {
        return Err(Error::ShapeMismatch {
            op: "mel_spectrogram filterbank",
            lhs: vec![fb.n_mels(), fb.n_bins()],
            rhs: vec![MEL_CHANNELS, config.n_bins()],
        });
    }
    let stft = Stft::new(*config)?;
    let mag = stft.magnitude(w.samples())?;
    let n_bins = config.n_bins();
    let frames = mag.len() / n_bins;
    let data = mag
        .chunks_exact(n_bins)
        .flat_map(|frame| fb.apply(frame).into_iter().map(|m| m.max(CLAMP_FLOOR).ln()))
        .collect();
    MelSpectrogram::new(data, frames, config)
}
