//! Polyphase windowed-sinc resampling (64 taps, Kaiser β = 8).

use std::f64::consts::PI;

use super::wav::Waveform;

const TAPS: usize = 64;
const HALF: isize = (TAPS / 2) as isize;
const KAISER_BETA: f64 = 8.0;
/// Phase tables larger than this are computed on the fly.
const MAX_TABLE_PHASES: usize = 4096;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Taps for fractional offset `frac ∈ [0, 1)`, normalized to unit DC gain.
/// Tap `j` multiplies source sample `i + j − HALF + 1`.
fn taps(frac: f64, cutoff: f64) -> [f64; TAPS] {
    let mut h = [0.0; TAPS];
    let i0_beta = bessel_i0(KAISER_BETA);
    for (j, tap) in h.iter_mut().enumerate() {
        let u = (j as isize - HALF + 1) as f64 - frac;
        let r = u / HALF as f64;
        let window = if r.abs() >= 1.0 {
            0.0
        } else {
            bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta
        };
        *tap = cutoff * sinc(cutoff * u) * window;
    }
    let total: f64 = h.iter().sum();
    if total.abs() > 1e-12 {
        h.iter_mut().for_each(|t| *t /= total);
    }
    h
}

/// Band-limited resampling. Output length is `round(len · target / source)`.
pub fn resample(w: &Waveform, target_hz: u32) -> Waveform {
    let source_hz = w.sample_rate_hz();
    assert!(target_hz > 0, "target rate must be positive");
    if source_hz == target_hz {
        return w.clone();
    }
    let g = gcd(source_hz as u64, target_hz as u64);
    let up = target_hz as u64 / g;
    let down = source_hz as u64 / g;
    let x = w.samples();
    let out_len = (x.len() as f64 * target_hz as f64 / source_hz as f64).round() as usize;
    let cutoff = (target_hz as f64 / source_hz as f64).min(1.0);
    let table: Option<Vec<[f64; TAPS]>> = (up as usize <= MAX_TABLE_PHASES)
        .then(|| (0..up).map(|p| taps(p as f64 / up as f64, cutoff)).collect());

    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        let pos = n * down;
        let i = (pos / up) as isize;
        let phase = (pos % up) as usize;
        let computed;
        let h = match &table {
            Some(t) => &t[phase],
            None => {
                computed = taps(phase as f64 / up as f64, cutoff);
                &computed
            }
        };
        let mut acc = 0.0;
        for (j, tap) in h.iter().enumerate() {
            let src = i + j as isize - HALF + 1;
            if src >= 0 && (src as usize) < x.len() {
                acc += tap * x[src as usize];
            }
        }
        out.push(acc);
    }
    Waveform::clamped(out, target_hz).expect("positive rate")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::test_util::{dominant_frequency, tone};

    #[test]
    fn identity_when_rates_match() {
        let w = tone(440.0, 0.3, 16_000, 1000);
        assert_eq!(resample(&w, 16_000), w);
    }

    #[test]
    fn length_law() {
        let w = Waveform::new(vec![0.0; 22_050], 22_050).unwrap();
        assert_eq!(resample(&w, 16_000).len(), 16_000);
        let w = Waveform::new(vec![0.0; 1001], 44_100).unwrap();
        assert_eq!(resample(&w, 16_000).len(), (1001.0f64 * 16_000.0 / 44_100.0).round() as usize);
    }

    #[test]
    fn preserves_dc_away_from_edges() {
        for (src, dst) in [(22_050, 16_000), (8_000, 16_000), (48_000, 16_000), (16_000, 44_100)] {
            let w = Waveform::new(vec![0.25; src as usize / 4], src).unwrap();
            let out = resample(&w, dst);
            let n = out.len();
            for s in &out.samples()[64..n - 64] {
                assert!((s - 0.25).abs() < 1e-3, "{src}->{dst}: {s}");
            }
        }
    }

    #[test]
    fn keeps_tone_frequency_when_downsampling() {
        let w = tone(440.0, 0.5, 22_050, 22_050);
        let out = resample(&w, 16_000);
        let f = dominant_frequency(out.samples(), 16_000, 1 << 16);
        assert!((f - 440.0).abs() <= 2.0, "{f}");
    }

    #[test]
    fn upsampled_tone_keeps_peak_bin() {
        let w = tone(440.0, 0.5, 8_000, 8_000);
        let out = resample(&w, 16_000);
        assert_eq!(out.len(), 16_000);
        let f = dominant_frequency(out.samples(), 16_000, 16_384);
        assert!((f - 440.0).abs() <= 16_000.0 / 16_384.0, "{f}");
    }
}
