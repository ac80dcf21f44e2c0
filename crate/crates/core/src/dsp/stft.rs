use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;

/// STFT geometry. Defaults: 50 ms Hann frames, 12 ms hop, 1024-point FFT at 16 kHz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub sample_rate_hz: u32,
    pub frame_length: usize,
    pub hop: usize,
    pub n_fft: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            frame_length: 800,
            hop: 192,
            n_fft: 1024,
        }
    }
}

impl StftConfig {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// `floor((n − frame_length) / hop) + 1`, no centre padding.
    pub fn frame_count(&self, n_samples: usize) -> Result<usize> {
        if n_samples < self.frame_length {
            return Err(Error::invalid(format!(
                "input of {n_samples} samples is shorter than one {}-sample frame",
                self.frame_length
            )));
        }
        Ok((n_samples - self.frame_length) / self.hop + 1)
    }

    /// Samples spanned by `frames` overlapping frames.
    pub fn span(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.frame_length
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_length == 0 || self.hop == 0 || self.n_fft < self.frame_length || self.sample_rate_hz == 0 {
            return Err(Error::invalid(format!("invalid STFT configuration {self:?}")));
        }
        Ok(())
    }

    /// Periodic Hann window of `frame_length` samples.
    pub fn window(&self) -> Vec<f64> {
        let n = self.frame_length as f64;
        (0..self.frame_length)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
            .collect()
    }
}

/// Reusable FFT plans for one configuration.
pub struct Stft {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: config.window(),
            forward: planner.plan_fft_forward(config.n_fft),
            inverse: planner.plan_fft_inverse(config.n_fft),
            config,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Complex spectra `[frames][n_fft/2 + 1]`.
    pub fn complex(&self, x: &[f64]) -> Result<Vec<Vec<Complex<f64>>>> {
        let c = &self.config;
        let frames = c.frame_count(x.len())?;
        Ok(parallel::map_indexed(frames, |f| {
            let start = f * c.hop;
            let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); c.n_fft];
            for (i, b) in buf.iter_mut().take(c.frame_length).enumerate() {
                *b = Complex::new(x[start + i] * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            buf.truncate(c.n_bins());
            buf
        }))
    }

    /// Magnitude spectrogram `[frames × (n_fft/2 + 1)]`, row-major.
    pub fn magnitude(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .complex(x)?
            .into_iter()
            .flat_map(|frame| frame.into_iter().map(|z| z.norm()))
            .collect())
    }

    /// Least-squares inverse: windowed overlap-add divided by the summed
    /// squared window. Output spans `(frames − 1)·hop + frame_length` samples.
    pub fn inverse(&self, spectra: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let c = &self.config;
        let n = c.span(spectra.len());
        let frames: Vec<Vec<f64>> = parallel::map_slice(spectra, |half| {
            let mut buf = vec![Complex::new(0.0, 0.0); c.n_fft];
            buf[..half.len()].copy_from_slice(half);
            for k in 1..c.n_fft / 2 {
                buf[c.n_fft - k] = half[k].conj();
            }
            self.inverse.process(&mut buf);
            let scale = 1.0 / c.n_fft as f64;
            (0..c.frame_length)
                .map(|i| buf[i].re * scale * self.window[i])
                .collect()
        });
        let mut out = vec![0.0; n];
        let mut norm = vec![0.0; n];
        for (f, frame) in frames.iter().enumerate() {
            let start = f * c.hop;
            for (i, v) in frame.iter().enumerate() {
                out[start + i] += v;
                norm[start + i] += self.window[i] * self.window[i];
            }
        }
        for (o, w) in out.iter_mut().zip(&norm) {
            if *w > 1e-8 {
                *o /= w;
            }
        }
        out
    }
}

/// Magnitude STFT with the default geometry.
pub fn stft_magnitude(x: &[f64]) -> Result<Vec<f64>> {
    Stft::new(StftConfig::default())?.magnitude(x)
}
