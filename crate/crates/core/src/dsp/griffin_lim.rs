//! Griffin-Lim phase reconstruction from a log-mel spectrogram.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use super::mel::{MelFilterbank, MelSpectrogram};
use super::stft::Stft;
use super::wav::Waveform;
use crate::error::{Error, Result};

const NNLS_ITERS: usize = 200;
/// Momentum of the accelerated projection step.
const MOMENTUM: f64 = 0.99;
const OUTPUT_PEAK: f64 = 0.95;
const PHASE_SEED: u64 = 0x6772_6966;

/// Reconstruction plus the spectral convergence after every iteration.
#[derive(Debug, Clone)]
pub struct GriffinLimOutput {
    pub waveform: Waveform,
    /// `‖ |STFT(xᵢ)| − S ‖ / ‖S‖` over the full two-sided spectrum.
    pub convergence: Vec<f64>,
    /// Linear magnitude target recovered from the mel input, `[frames × bins]`.
    pub target: Vec<f64>,
}

/// Non-negative least-squares estimate of linear magnitudes from mel
/// magnitudes: starts from `fbᵀ·m` normalized per bin, refined by
/// multiplicative updates.
pub fn mel_to_linear(mel_mag: &[f64], fb: &MelFilterbank) -> Vec<f64> {
    let col = fb.column_sums();
    let fbt_m = fb.apply_transpose(mel_mag);
    let mut s: Vec<f64> = fbt_m
        .iter()
        .zip(&col)
        .map(|(v, c)| if *c > 0.0 { v / c } else { 0.0 })
        .collect();
    for _ in 0..NNLS_ITERS {
        let denom = fb.apply_transpose(&fb.apply(&s));
        for ((x, num), d) in s.iter_mut().zip(&fbt_m).zip(&denom) {
            if *d > 1e-300 {
                *x *= num / d;
            }
        }
    }
    s
}

/// Relative Frobenius error between the linear mel magnitudes of
/// `reference` and those of `w`, after the least-squares gain that best
/// matches them (reconstructions are peak-normalized, so level is arbitrary).
pub fn mel_spectral_error(reference: &MelSpectrogram, w: &Waveform, fb: &MelFilterbank) -> Result<f64> {
    let rebuilt = super::mel::mel_spectrogram_with(w, fb, &reference.stft_config())?;
    let frames = reference.frames().min(rebuilt.frames());
    let n = frames * reference.channels();
    let a: Vec<f64> = reference.data()[..n].iter().map(|v| v.exp()).collect();
    let b: Vec<f64> = rebuilt.data()[..n].iter().map(|v| v.exp()).collect();
    let bb: f64 = b.iter().map(|y| y * y).sum();
    let gain = if bb > 0.0 {
        a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / bb
    } else {
        0.0
    };
    let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - gain * y).powi(2)).sum();
    let den: f64 = a.iter().map(|x| x * x).sum();
    Ok((num / den.max(1e-300)).sqrt())
}

fn bin_weight(k: usize, n_bins: usize) -> f64 {
    if k == 0 || k + 1 == n_bins {
        1.0
    } else {
        2.0
    }
}

fn convergence(spec: &[Vec<Complex<f64>>], target: &[f64], n_bins: usize, target_norm: f64) -> f64 {
    let mut err = 0.0;
    for (f, frame) in spec.iter().enumerate() {
        for (k, z) in frame.iter().enumerate() {
            let d = z.norm() - target[f * n_bins + k];
            err += bin_weight(k, n_bins) * d * d;
        }
    }
    err.sqrt() / target_norm
}

/// Runs `iters` accelerated Griffin-Lim iterations and peak-normalizes the
/// result to 0.95. Steps use momentum 0.99 and fall back to a plain
/// projection whenever momentum would raise the spectral convergence.
pub fn griffin_lim(mel: &MelSpectrogram, fb: &MelFilterbank, iters: usize) -> Result<Waveform> {
    Ok(griffin_lim_traced(mel, fb, iters)?.waveform)
}

pub fn griffin_lim_traced(mel: &MelSpectrogram, fb: &MelFilterbank, iters: usize) -> Result<GriffinLimOutput> {
    if iters == 0 {
        return Err(Error::invalid("griffin_lim needs at least one iteration"));
    }
    let config = mel.stft_config();
    if fb.n_bins() != config.n_bins() {
        return Err(Error::ShapeMismatch {
            op: "griffin_lim filterbank",
            lhs: vec![fb.n_mels(), fb.n_bins()],
            rhs: vec![mel.channels(), config.n_bins()],
        });
    }
    let stft = Stft::new(config)?;
    let n_bins = config.n_bins();
    let target: Vec<f64> = (0..mel.frames())
        .flat_map(|t| {
            let mag: Vec<f64> = mel.row(t).iter().map(|v| v.exp()).collect();
            mel_to_linear(&mag, fb)
        })
        .collect();
    let target_norm = target
        .iter()
        .enumerate()
        .map(|(i, v)| bin_weight(i % n_bins, n_bins) * v * v)
        .sum::<f64>()
        .sqrt()
        .max(1e-300);

    let mut rng = ChaCha8Rng::seed_from_u64(PHASE_SEED);
    let mut spec: Vec<Vec<Complex<f64>>> = (0..mel.frames())
        .map(|t| {
            (0..n_bins)
                .map(|k| {
                    let phase = if k == 0 || k + 1 == n_bins {
                        0.0
                    } else {
                        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)
                    };
                    Complex::from_polar(target[t * n_bins + k], phase)
                })
                .collect()
        })
        .collect();

    let project = |rebuilt: &[Vec<Complex<f64>>]| -> Vec<Vec<Complex<f64>>> {
        rebuilt
            .iter()
            .enumerate()
            .map(|(f, frame)| {
                frame
                    .iter()
                    .enumerate()
                    .map(|(k, z)| {
                        let mag = target[f * n_bins + k];
                        let n = z.norm();
                        if n > 1e-12 {
                            z * (mag / n)
                        } else {
                            Complex::new(mag, 0.0)
                        }
                    })
                    .collect()
            })
            .collect()
    };

    let mut x = stft.inverse(&spec);
    let mut rebuilt = stft.complex(&x)?;
    let mut error = convergence(&rebuilt, &target, n_bins, target_norm);
    let mut trace = Vec::with_capacity(iters);
    let mut prev: Option<Vec<Vec<Complex<f64>>>> = None;
    for _ in 0..iters {
        let proj = project(&rebuilt);
        if let Some(p) = &prev {
            for ((frame, cur), old) in spec.iter_mut().zip(&proj).zip(p) {
                for ((s, c), o) in frame.iter_mut().zip(cur).zip(old) {
                    *s = c + (c - o) * MOMENTUM;
                }
            }
        } else {
            spec.clone_from(&proj);
        }
        let mut cand = stft.inverse(&spec);
        let mut cand_spec = stft.complex(&cand)?;
        let mut cand_error = convergence(&cand_spec, &target, n_bins, target_norm);
        if prev.is_some() && cand_error > error {
            // Restart: a plain projection step never increases the error.
            cand = stft.inverse(&proj);
            cand_spec = stft.complex(&cand)?;
            cand_error = convergence(&cand_spec, &target, n_bins, target_norm);
            prev = None;
        } else {
            prev = Some(proj);
        }
        x = cand;
        rebuilt = cand_spec;
        error = cand_error;
        trace.push(error);
    }
    let waveform = Waveform::clamped(x, config.sample_rate_hz)?.peak_normalized(OUTPUT_PEAK);
    Ok(GriffinLimOutput {
        waveform,
        convergence: trace,
        target,
    })
}
