//! Audio I/O, resampling, STFT and the log-mel front end.

pub mod griffin_lim;
pub mod mel;
pub mod resample;
pub mod stft;
pub mod wav;

pub use griffin_lim::{griffin_lim, griffin_lim_traced, mel_spectral_error, GriffinLimOutput};
pub use mel::{hz_mel, mel_hz, mel_spectrogram, mel_spectrogram_with, MelFilterbank, MelSpectrogram, CLAMP_FLOOR, MEL_CHANNELS};
pub use resample::resample;
pub use stft::{stft_magnitude, Stft, StftConfig};
pub use wav::{decode_wav, encode_wav, load_wav, load_wav_any, probe_wav, save_wav, WavInfo, Waveform, MAX_SAMPLE, SAMPLE_RATE};

/// Sine tone of `n_samples` samples.
pub fn tone(freq_hz: f64, amplitude: f64, sample_rate_hz: u32, n_samples: usize) -> Waveform {
    let samples = (0..n_samples)
        .map(|i| amplitude * (2.0 * std::f64::consts::PI * freq_hz * i as f64 / sample_rate_hz as f64).sin())
        .collect();
    Waveform::clamped(samples, sample_rate_hz).expect("positive rate")
}

/// Frequency of the largest FFT magnitude bin (excluding DC) after zero padding to `n_fft`.
pub fn dominant_frequency(samples: &[f64], sample_rate_hz: u32, n_fft: usize) -> f64 {
    let mut buf: Vec<rustfft::num_complex::Complex<f64>> = samples
        .iter()
        .take(n_fft)
        .map(|s| rustfft::num_complex::Complex::new(*s, 0.0))
        .collect();
    buf.resize(n_fft, rustfft::num_complex::Complex::new(0.0, 0.0));
    rustfft::FftPlanner::new().plan_fft_forward(n_fft).process(&mut buf);
    let peak = (1..=n_fft / 2)
        .max_by(|a, b| buf[*a].norm().total_cmp(&buf[*b].norm()))
        .unwrap_or(0);
    peak as f64 * sample_rate_hz as f64 / n_fft as f64
}
