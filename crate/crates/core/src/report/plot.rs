use std::path::Path;

use crate::autodiff::Tensor;
use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};

/// Allowed deviation of an alignment row sum from 1.
const ROW_SUM_TOLERANCE: f64 = 1e-3;

/// 8-bit grayscale image, row-major from the top-left pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Binary `P5` encoding with maxval 255.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::invalid(format!("PGM: {msg}"));
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary (P5) graymap"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed header number"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
        if pixels.len() != width * height {
            return Err(bad("pixel count does not match the header"));
        }
        Ok(Self {
            width,
            height,
            pixels: pixels.to_vec(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::path(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read(path).map_err(|e| Error::path(path, e))?)
    }
}

/// Renders `cols × rows` cells (`value(col, row)` already in 0..=255), each
/// `scale` pixels square, with row 0 at the bottom of the image.
fn render(cols: usize, rows: usize, scale: usize, value: impl Fn(usize, usize) -> u8) -> Pgm {
    let (width, height) = (cols * scale, rows * scale);
    let mut pixels = vec![0u8; width * height];
    for y in 0..height {
        let row = rows - 1 - y / scale;
        for x in 0..width {
            pixels[y * width + x] = value(x / scale, row);
        }
    }
    Pgm { width, height, pixels }
}

fn level(v: f64, lo: f64, hi: f64) -> u8 {
    if hi > lo {
        ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
    } else {
        0
    }
}

/// Attention heatmap of an `[S, T]` alignment: decoder steps run left to
/// right, encoder positions bottom to top, intensity maps `[0, max]` to `[0, 255]`.
pub fn alignment_image(att: &Tensor, scale: usize) -> Result<Pgm> {
    if att.rank() != 2 || att.numel() == 0 {
        return Err(Error::invalid(format!("alignment must be a non-empty matrix, got {:?}", att.shape())));
    }
    if scale == 0 {
        return Err(Error::invalid("pixel scale must be positive"));
    }
    let (s, t) = att.dims2();
    for i in 0..s {
        let sum: f64 = att.row(i).iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || att.row(i).iter().any(|v| *v < 0.0) {
            return Err(Error::invalid(format!("alignment row {i} is not a distribution (sum {sum})")));
        }
    }
    let max = att.data().iter().copied().fold(0.0, f64::max);
    Ok(render(s, t, scale, |step, pos| level(att.at(step, pos), 0.0, max)))
}

/// Spectrogram heatmap: frames left to right, mel channel 0 at the bottom,
/// values min-max normalized over the image.
pub fn spectrogram_image(mel: &MelSpectrogram, scale: usize) -> Result<Pgm> {
    if scale == 0 {
        return Err(Error::invalid("pixel scale must be positive"));
    }
    if mel.frames() == 0 {
        return Err(Error::invalid("spectrogram has no frames"));
    }
    let lo = mel.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mel.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(render(mel.frames(), mel.channels(), scale, |frame, ch| level(mel.row(frame)[ch], lo, hi)))
}

pub fn plot_alignment(att: &Tensor, path: impl AsRef<Path>, scale: usize) -> Result<Pgm> {
    let img = alignment_image(att, scale)?;
    img.save(path)?;
    Ok(img)
}

pub fn plot_spectrogram(mel: &MelSpectrogram, path: impl AsRef<Path>, scale: usize) -> Result<Pgm> {
    let img = spectrogram_image(mel, scale)?;
    img.save(path)?;
    Ok(img)
}
