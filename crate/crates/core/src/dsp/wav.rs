use std::io::{Read, Seek, Write};
use std::path::Path;

use super::resample::resample;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Largest sample value a 16-bit PCM file can represent after scaling.
pub const MAX_SAMPLE: f64 = 32767.0 / 32768.0;

/// Mono audio with samples in `[-1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(bad) = samples.iter().find(|s| !(-1.0..1.0).contains(*s)) {
            return Err(Error::invalid(format!("sample {bad} outside [-1, 1)")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    /// Clamps into the representable range instead of rejecting.
    pub fn clamped(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        let samples = samples
            .into_iter()
            .map(|s| if s.is_nan() { 0.0 } else { s.clamp(-1.0, MAX_SAMPLE) })
            .collect();
        Self::new(samples, sample_rate_hz)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Scales so the largest absolute sample equals `peak` (silence is left alone).
    pub fn peak_normalized(&self, peak: f64) -> Self {
        let max = self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if max == 0.0 {
            return self.clone();
        }
        let k = peak / max;
        Self::clamped(self.samples.iter().map(|s| s * k).collect(), self.sample_rate_hz)
            .expect("rate already validated")
    }
}

fn read_pcm16<R: Read>(reader: hound::WavReader<R>) -> Result<Waveform> {
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::WavFormat("only integer PCM is supported (got IEEE float)".into()));
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::WavFormat(format!(
            "only 16-bit PCM is supported (got {} bits)",
            spec.bits_per_sample
        )));
    }
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::WavFormat("zero channels".into()));
    }
    let expected = reader.len() as usize;
    let mut raw = Vec::with_capacity(expected);
    for s in reader.into_samples::<i16>() {
        raw.push(s.map_err(|e| Error::WavFormat(format!("truncated or unreadable sample data: {e}")))?);
    }
    if raw.len() != expected || raw.len() % channels != 0 {
        return Err(Error::WavFormat(format!(
            "truncated data chunk: expected {expected} samples, read {}",
            raw.len()
        )));
    }
    let samples = raw
        .chunks(channels)
        .map(|frame| frame.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / channels as f64)
        .collect();
    let w = Waveform::new(samples, spec.sample_rate)?;
    Ok(if w.sample_rate_hz == SAMPLE_RATE {
        w
    } else {
        resample(&w, SAMPLE_RATE)
    })
}

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::WavFormat("truncated file".into())
        }
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::WavFormat(other.to_string()),
    }
}

fn read_any<R: Read>(reader: hound::WavReader<R>) -> Result<Waveform> {
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::WavFormat("zero channels".into()));
    }
    let expected = reader.len() as usize;
    let bad = |e: hound::Error| Error::WavFormat(format!("truncated or unreadable sample data: {e}"));
    let raw: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from).map_err(bad))
            .collect::<Result<_>>()?,
        (hound::SampleFormat::Int, bits @ 8..=32) => {
            let full = (1i64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full).map_err(bad))
                .collect::<Result<_>>()?
        }
        (fmt, bits) => return Err(Error::WavFormat(format!("unsupported sample format {fmt:?} at {bits} bits"))),
    };
    if raw.len() != expected || raw.len() % channels != 0 {
        return Err(Error::WavFormat(format!(
            "truncated data chunk: expected {expected} samples, read {}",
            raw.len()
        )));
    }
    let samples = raw
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    let w = Waveform::clamped(samples, spec.sample_rate)?;
    Ok(if w.sample_rate_hz == SAMPLE_RATE {
        w
    } else {
        resample(&w, SAMPLE_RATE)
    })
}

/// Reads any integer (8–32 bit) or 32-bit float WAV, downmixes to mono and
/// resamples to 16 kHz. Used when ingesting raw corpora.
pub fn load_wav_any(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::path(path, e))?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file))
        .map_err(|e| Error::WavFormat(format!("{}: {}", path.display(), map_hound(e))))?;
    read_any(reader).map_err(|e| match e {
        Error::WavFormat(msg) => Error::WavFormat(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Header facts of a WAV file, read without decoding samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WavInfo {
    pub sample_rate_hz: u32,
    pub channels: u16,
    pub bits_per_sample: u16,
    pub float: bool,
    /// Samples per channel.
    pub frames: u32,
}

impl WavInfo {
    /// 16 kHz mono 16-bit integer PCM.
    pub fn is_canonical(&self) -> bool {
        self.sample_rate_hz == SAMPLE_RATE && self.channels == 1 && self.bits_per_sample == 16 && !self.float
    }
}

pub fn probe_wav(path: impl AsRef<Path>) -> Result<WavInfo> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| Error::WavFormat(format!("{}: {}", path.display(), map_hound(e))))?;
    let spec = reader.spec();
    Ok(WavInfo {
        sample_rate_hz: spec.sample_rate,
        channels: spec.channels,
        bits_per_sample: spec.bits_per_sample,
        float: spec.sample_format == hound::SampleFormat::Float,
        frames: reader.duration(),
    })
}

/// Reads 16-bit PCM, downmixes to mono and resamples to 16 kHz.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::path(path, e))?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file))
        .map_err(|e| Error::WavFormat(format!("{}: {}", path.display(), map_hound(e))))?;
    read_pcm16(reader).map_err(|e| match e {
        Error::WavFormat(msg) => Error::WavFormat(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Decodes an in-memory WAV file (same rules as [`load_wav`]).
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    let reader = hound::WavReader::new(std::io::Cursor::new(bytes)).map_err(map_hound)?;
    read_pcm16(reader)
}

fn quantize(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

fn write_pcm16<W: Write + Seek>(w: &Waveform, out: W) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::new(out, spec).map_err(map_hound)?;
    for &s in &w.samples {
        writer.write_sample(quantize(s)).map_err(map_hound)?;
    }
    writer.finalize().map_err(map_hound)
}

/// Writes mono 16-bit PCM. Samples that came from a 16-bit file round-trip exactly.
pub fn save_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::path(path, e))?;
    write_pcm16(w, std::io::BufWriter::new(file))
}

pub fn encode_wav(w: &Waveform) -> Result<Vec<u8>> {
    let mut cursor = std::io::Cursor::new(Vec::new());
    write_pcm16(w, &mut cursor)?;
    Ok(cursor.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pcm_bytes(samples: &[i16], rate: u32, channels: u16) -> Vec<u8> {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut cursor = std::io::Cursor::new(Vec::new());
        let mut w = hound::WavWriter::new(&mut cursor, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        cursor.into_inner()
    }

    #[test]
    fn scales_pcm_values() {
        let w = decode_wav(&pcm_bytes(&[16384, -32768, 0, 32767], 16_000, 1)).unwrap();
        assert_eq!(w.samples(), &[0.5, -1.0, 0.0, 32767.0 / 32768.0]);
    }

    #[test]
    fn downmixes_stereo_by_mean() {
        let w = decode_wav(&pcm_bytes(&[16384, 0, -16384, -16384], 16_000, 2)).unwrap();
        assert_eq!(w.samples(), &[0.25, -0.5]);
    }

    #[test]
    fn rejects_float_and_other_depths() {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut cursor = std::io::Cursor::new(Vec::new());
        let mut w = hound::WavWriter::new(&mut cursor, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        let err = decode_wav(&cursor.into_inner()).unwrap_err().to_string();
        assert!(err.contains("float"), "{err}");

        let spec = hound::WavSpec {
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
            ..spec
        };
        let mut cursor = std::io::Cursor::new(Vec::new());
        let mut w = hound::WavWriter::new(&mut cursor, spec).unwrap();
        w.write_sample(5i32).unwrap();
        w.finalize().unwrap();
        let err = decode_wav(&cursor.into_inner()).unwrap_err().to_string();
        assert!(err.contains("24 bits"), "{err}");
    }

    #[test]
    fn rejects_truncated_file() {
        let bytes = pcm_bytes(&[1, 2, 3, 4, 5, 6, 7, 8], 16_000, 1);
        assert!(decode_wav(&bytes[..bytes.len() - 5]).is_err());
        assert!(decode_wav(&bytes[..20]).is_err());
        assert!(decode_wav(b"not a wav at all").is_err());
    }

    #[test]
    fn encode_decode_is_bit_exact() {
        let raw: Vec<i16> = (-300..300).map(|i| (i * 109) as i16).chain([i16::MIN, i16::MAX]).collect();
        let bytes = pcm_bytes(&raw, 16_000, 1);
        let w = decode_wav(&bytes).unwrap();
        assert_eq!(encode_wav(&w).unwrap(), bytes);
    }

    #[test]
    fn resamples_on_load() {
        let bytes = pcm_bytes(&vec![1000; 8000], 8_000, 1);
        let w = decode_wav(&bytes).unwrap();
        assert_eq!(w.sample_rate_hz(), SAMPLE_RATE);
        assert_eq!(w.len(), 16_000);
    }
}
