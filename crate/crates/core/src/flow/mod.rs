//! Mel-conditioned normalizing-flow vocoder: squeeze audio into groups, run
//! invertible mixing + affine coupling steps with early outputs, and map to a
//! spherical Gaussian. Inversion is exact.

mod train;

pub use train::{fit_segments, FlowSegment, FlowTrainReport};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Tensor, Var};
use crate::dsp::{MelSpectrogram, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};

/// Mixing matrices with `|det|` at or below this are treated as singular.
pub const MIN_MIXING_DET: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub n_flows: usize,
    pub n_group: usize,
    /// Early output after every this many flows; 0 disables early outputs.
    pub n_early_every: usize,
    pub n_early_size: usize,
    pub wn_layers: usize,
    pub wn_channels: usize,
    pub wn_kernel: usize,
    /// Training sigma of the base distribution.
    pub sigma: f64,
    pub mel_channels: usize,
    /// Audio samples per mel frame.
    pub hop: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_flows: 4,
            n_group: 8,
            n_early_every: 2,
            n_early_size: 2,
            wn_layers: 4,
            wn_channels: 64,
            wn_kernel: 3,
            sigma: 1.0,
            mel_channels: 80,
            hop: 192,
        }
    }
}

impl FlowConfig {
    /// Small configuration for gradient checks: 2 flows, 4-sample groups, 8 channels.
    pub fn toy() -> Self {
        Self {
            n_flows: 2,
            n_group: 4,
            n_early_every: 0,
            wn_layers: 2,
            wn_channels: 8,
            ..Self::default()
        }
    }

    fn emits_early(&self, k: usize) -> bool {
        self.n_early_every > 0 && k > 0 && k % self.n_early_every == 0
    }

    /// Channels entering each flow's mixing step.
    pub fn flow_channels(&self) -> Vec<usize> {
        let mut c = self.n_group;
        (0..self.n_flows)
            .map(|k| {
                if self.emits_early(k) {
                    c -= self.n_early_size.min(c);
                }
                c
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("flow config: {msg}")));
        if self.n_flows == 0 || self.wn_layers == 0 || self.wn_channels == 0 || self.mel_channels == 0 {
            return bad("extents must be positive".into());
        }
        if self.n_group < 2 || self.n_group % 2 != 0 {
            return bad(format!("n_group {} must be even and >= 2", self.n_group));
        }
        if self.wn_kernel % 2 == 0 {
            return bad(format!("wn_kernel {} must be odd", self.wn_kernel));
        }
        if self.hop == 0 || self.hop % self.n_group != 0 {
            return bad(format!("hop {} must be a multiple of n_group {}", self.hop, self.n_group));
        }
        if self.sigma <= 0.0 {
            return bad("sigma must be positive".into());
        }
        let mut c = self.n_group;
        for k in 0..self.n_flows {
            if self.emits_early(k) {
                if self.n_early_size == 0 || self.n_early_size >= c {
                    return bad(format!("early output of {} at flow {k} leaves no channels out of {c}", self.n_early_size));
                }
                c -= self.n_early_size;
            }
            if c < 2 {
                return bad(format!("flow {k} has {c} channel(s); coupling needs 2"));
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn half(c: usize) -> usize {
    c / 2
}

fn wn_prefix(k: usize) -> String {
    format!("flow{k}.wn")
}

pub fn mixing_name(k: usize) -> String {
    format!("flow{k}.mix")
}

/// Random orthonormal matrix (Q of a Gaussian QR), so `ln|det| = 0`.
fn orthonormal<R: Rng>(n: usize, rng: &mut R) -> Tensor {
    let a = nalgebra::DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let q = a.qr().q();
    let data = (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).map(|(r, c)| q[(r, c)]).collect();
    Tensor::from_parts(vec![n, n], data)
}

/// Fresh flow parameters: orthonormal mixing, Xavier conditioning network and
/// a zero output layer so every coupling starts as the identity.
pub fn init_params<R: Rng>(cfg: &FlowConfig, rng: &mut R) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    for (name, shape, fill) in layout(cfg)? {
        match fill {
            Fill::Orthonormal => p.insert(name, orthonormal(shape[0], rng))?,
            Fill::Xavier => p.insert_xavier(&name, &shape, rng)?,
            Fill::Zeros => p.insert(name, Tensor::zeros(&shape))?,
        }
    }
    Ok(p)
}

/// Names and shapes [`init_params`] produces, in order.
pub fn param_shapes(cfg: &FlowConfig) -> Result<Vec<(String, Vec<usize>)>> {
    Ok(layout(cfg)?.into_iter().map(|(n, s, _)| (n, s)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fill {
    Orthonormal,
    Xavier,
    Zeros,
}

fn layout(cfg: &FlowConfig) -> Result<Vec<(String, Vec<usize>, Fill)>> {
    cfg.validate()?;
    let mut l = Vec::new();
    let mut add = |name: String, shape: &[usize], fill: Fill| l.push((name, shape.to_vec(), fill));
    let ch = cfg.wn_channels;
    for (k, &c) in cfg.flow_channels().iter().enumerate() {
        add(mixing_name(k), &[c, c], Fill::Orthonormal);
        let pre = wn_prefix(k);
        add(format!("{pre}.start.weight"), &[half(c), ch], Fill::Xavier);
        add(format!("{pre}.start.bias"), &[ch], Fill::Zeros);
        for i in 0..cfg.wn_layers {
            add(format!("{pre}.layer{i}.in.weight"), &[2 * ch, ch, cfg.wn_kernel], Fill::Xavier);
            add(format!("{pre}.layer{i}.in.bias"), &[2 * ch], Fill::Zeros);
            add(format!("{pre}.layer{i}.cond.weight"), &[cfg.mel_channels, 2 * ch], Fill::Xavier);
            let rs = if i + 1 < cfg.wn_layers { 2 * ch } else { ch };
            add(format!("{pre}.layer{i}.res_skip.weight"), &[ch, rs], Fill::Xavier);
            add(format!("{pre}.layer{i}.res_skip.bias"), &[rs], Fill::Zeros);
        }
        let out = 2 * (c - half(c));
        add(format!("{pre}.end.weight"), &[ch, out], Fill::Zeros);
        add(format!("{pre}.end.bias"), &[out], Fill::Zeros);
    }
    Ok(l)
}

/// Mixing matrices with their determinants; errors on the first singular one.
pub fn check_mixing(params: &ParamSet, cfg: &FlowConfig) -> Result<Vec<f64>> {
    (0..cfg.n_flows)
        .map(|k| {
            let w = params.tensor(&mixing_name(k))?;
            let (r, c) = w.dims2();
            let det = nalgebra::DMatrix::from_row_slice(r, c, w.data()).determinant();
            if det.abs() > MIN_MIXING_DET && det.is_finite() {
                Ok(det)
            } else {
                Err(Error::SingularMixing { flow: k, det })
            }
        })
        .collect()
}

/// Per-group conditioning `[L, mel_channels]`: each group takes the frame its
/// first sample falls in (nearest-frame repetition by hop).
pub fn upsample_conditioning(cfg: &FlowConfig, mel: &Tensor, n_samples: usize) -> Result<Tensor> {
    let (frames, channels) = mel.dims2();
    if mel.rank() != 2 || channels != cfg.mel_channels {
        return Err(Error::ShapeMismatch {
            op: "flow conditioning",
            lhs: mel.shape().to_vec(),
            rhs: vec![frames, cfg.mel_channels],
        });
    }
    if n_samples == 0 || n_samples % cfg.n_group != 0 {
        return Err(Error::invalid(format!(
            "audio length {n_samples} is not a positive multiple of n_group {}",
            cfg.n_group
        )));
    }
    let needed = n_samples.div_ceil(cfg.hop);
    if frames != needed {
        return Err(Error::invalid(format!(
            "mel has {frames} frames but {n_samples} samples at hop {} need {needed}",
            cfg.hop
        )));
    }
    let groups = n_samples / cfg.n_group;
    let mut data = Vec::with_capacity(groups * channels);
    for l in 0..groups {
        data.extend_from_slice(mel.row(l * cfg.n_group / cfg.hop));
    }
    Ok(Tensor::from_parts(vec![groups, channels], data))
}

/// Conditioning network of flow `k`: `(log_s, t)` for the transformed half.
fn coupling_net<'g>(b: &Bound<'g>, cfg: &FlowConfig, k: usize, xa: &Var<'g>, cond: &Var<'g>, c: usize) -> Result<(Var<'g>, Var<'g>)> {
    let pre = wn_prefix(k);
    let ch = cfg.wn_channels;
    let w = |s: &str| b.var(&format!("{pre}.{s}"));
    let mut x = xa.matmul(&w("start.weight")?)?.add_row(&w("start.bias")?)?;
    let mut skip: Option<Var<'g>> = None;
    for i in 0..cfg.wn_layers {
        let dilation = 1 << i;
        let pad = dilation * (cfg.wn_kernel - 1) / 2;
        let acts = x
            .conv1d(&w(&format!("layer{i}.in.weight"))?, pad, dilation)?
            .add_row(&w(&format!("layer{i}.in.bias"))?)?
            .add(&cond.matmul(&w(&format!("layer{i}.cond.weight"))?)?)?;
        let gated = acts.slice(1, 0, ch)?.tanh().mul(&acts.slice(1, ch, ch)?.sigmoid())?;
        let rs = gated
            .matmul(&w(&format!("layer{i}.res_skip.weight"))?)?
            .add_row(&w(&format!("layer{i}.res_skip.bias"))?)?;
        let s = if i + 1 < cfg.wn_layers {
            x = x.add(&rs.slice(1, 0, ch)?)?;
            rs.slice(1, ch, ch)?
        } else {
            rs
        };
        skip = Some(match skip {
            Some(acc) => acc.add(&s)?,
            None => s,
        });
    }
    let skip = skip.expect("at least one layer");
    let out = skip.matmul(&w("end.weight")?)?.add_row(&w("end.bias")?)?;
    let nb = c - half(c);
    Ok((out.slice(1, 0, nb)?, out.slice(1, nb, nb)?))
}

pub struct FlowOutput<'g> {
    /// Early outputs in emission order, then the final channels, each flattened row-major.
    pub z: Var<'g>,
    pub log_det: Var<'g>,
}

/// Maps `audio` (a length-N vector) to the latent `z`, tracking `ln|det J|`.
pub fn forward<'g>(b: &Bound<'g>, cfg: &FlowConfig, audio: &Var<'g>, mel: &Tensor) -> Result<FlowOutput<'g>> {
    let g = audio.graph();
    let n = audio.value().numel();
    let cond = g.constant(upsample_conditioning(cfg, mel, n)?);
    let groups = n / cfg.n_group;
    let mut x = audio.reshape(&[groups, cfg.n_group])?;
    let mut outputs = Vec::new();
    let mut log_det: Option<Var<'g>> = None;
    let mut add_ld = |v: Var<'g>| -> Result<()> {
        log_det = Some(match log_det {
            Some(acc) => acc.add(&v)?,
            None => v,
        });
        Ok(())
    };
    for k in 0..cfg.n_flows {
        if cfg.emits_early(k) {
            let c = x.shape()[1];
            outputs.push(x.slice(1, 0, cfg.n_early_size)?.reshape(&[groups * cfg.n_early_size])?);
            x = x.slice(1, cfg.n_early_size, c - cfg.n_early_size)?;
        }
        let c = x.shape()[1];
        let w = b.var(&mixing_name(k))?;
        x = x.matmul(&w.transpose())?;
        add_ld(w.log_abs_det()?.scale(groups as f64))?;

        let h = half(c);
        let xa = x.slice(1, 0, h)?;
        let xb = x.slice(1, h, c - h)?;
        let (log_s, t) = coupling_net(b, cfg, k, &xa, &cond, c)?;
        let yb = log_s.exp().mul(&xb)?.add(&t)?;
        add_ld(log_s.sum())?;
        x = g.concat(&[xa, yb], 1)?;
    }
    let c = x.shape()[1];
    outputs.push(x.reshape(&[groups * c])?);
    let z = if outputs.len() == 1 { outputs[0] } else { g.concat(&outputs, 0)? };
    Ok(FlowOutput {
        z,
        log_det: log_det.expect("at least one flow"),
    })
}

/// `(Σ z² / 2σ² − log_det) / numel(z)`.
pub fn nll_loss<'g>(z: &Var<'g>, log_det: &Var<'g>, sigma: f64) -> Result<Var<'g>> {
    if sigma <= 0.0 {
        return Err(Error::invalid("sigma must be positive"));
    }
    let n = z.value().numel() as f64;
    Ok(z.mul(z)?.sum().scale(0.5 / (sigma * sigma)).sub(log_det)?.scale(1.0 / n))
}

fn inverse_matrix(w: &Tensor, flow: usize) -> Result<Tensor> {
    let n = w.rows();
    let m = nalgebra::DMatrix::from_row_slice(n, n, w.data());
    let det = m.determinant();
    if det.abs() <= MIN_MIXING_DET || !det.is_finite() {
        return Err(Error::SingularMixing { flow, det });
    }
    let inv = m.try_inverse().ok_or(Error::SingularMixing { flow, det })?;
    let data = (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).map(|(r, c)| inv[(r, c)]).collect();
    Ok(Tensor::from_parts(vec![n, n], data))
}

/// Exact inverse of [`forward`]: latent `z` (length N) back to audio samples.
pub fn inverse(params: &ParamSet, cfg: &FlowConfig, z: &[f64], mel: &Tensor) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = z.len();
    let cond_t = upsample_conditioning(cfg, mel, n)?;
    let groups = n / cfg.n_group;
    let channels = cfg.flow_channels();
    let early: Vec<usize> = (0..cfg.n_flows).filter(|&k| cfg.emits_early(k)).collect();
    let mut chunks = Vec::new();
    let mut offset = 0;
    for _ in &early {
        let len = groups * cfg.n_early_size;
        chunks.push(&z[offset..offset + len]);
        offset += len;
    }
    let c_final = *channels.last().expect("n_flows > 0");
    let mut x = Tensor::from_parts(vec![groups, c_final], z[offset..].to_vec());

    for k in (0..cfg.n_flows).rev() {
        let c = channels[k];
        let h = half(c);
        let g = Graph::new();
        let b = params.bind(&g);
        let cond = g.constant(cond_t.clone());
        let xa = g.constant(x.clone()).slice(1, 0, h)?;
        let (log_s, t) = coupling_net(&b, cfg, k, &xa, &cond, c)?;
        let (log_s, t) = (log_s.value(), t.value());
        let mut data = Vec::with_capacity(groups * c);
        for l in 0..groups {
            let row = x.row(l);
            data.extend_from_slice(&row[..h]);
            for j in 0..c - h {
                let idx = l * (c - h) + j;
                data.push((row[h + j] - t.data()[idx]) / log_s.data()[idx].exp());
            }
        }
        let y = Tensor::from_parts(vec![groups, c], data);

        let w_inv = inverse_matrix(params.tensor(&mixing_name(k))?, k)?;
        let mut mixed = vec![0.0; groups * c];
        crate::autodiff::gemm(groups, c, c, y.data(), w_inv.transpose().data(), &mut mixed, false);
        x = Tensor::from_parts(vec![groups, c], mixed);

        if cfg.emits_early(k) {
            let e = chunks.pop().expect("one chunk per early output");
            let width = c + cfg.n_early_size;
            let mut data = Vec::with_capacity(groups * width);
            for l in 0..groups {
                data.extend_from_slice(&e[l * cfg.n_early_size..(l + 1) * cfg.n_early_size]);
                data.extend_from_slice(x.row(l));
            }
            x = Tensor::from_parts(vec![groups, width], data);
        }
    }
    Ok(x.into_data())
}

/// Convenience forward pass without gradient bookkeeping: `(z, log_det)`.
pub fn encode(params: &ParamSet, cfg: &FlowConfig, audio: &[f64], mel: &Tensor) -> Result<(Vec<f64>, f64)> {
    let g = Graph::new();
    let b = params.bind(&g);
    let out = forward(&b, cfg, &g.constant(Tensor::vector(audio.to_vec())), mel)?;
    Ok((out.z.value().data().to_vec(), out.log_det.item()))
}

/// Draws `z ~ N(0, sigma_infer² I)` from `seed` and inverts it under `mel`.
/// The result has `frames · hop` samples.
pub fn synthesize(params: &ParamSet, cfg: &FlowConfig, mel: &MelSpectrogram, sigma_infer: f64, seed: u64) -> Result<Waveform> {
    if !(0.0..=1.0).contains(&sigma_infer) {
        return Err(Error::invalid(format!("sigma_infer {sigma_infer} outside [0, 1]")));
    }
    let n = mel.frames() * cfg.hop;
    let z: Vec<f64> = if sigma_infer == 0.0 {
        vec![0.0; n]
    } else {
        let dist = Normal::new(0.0, sigma_infer).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    };
    let mel_t = Tensor::new(vec![mel.frames(), mel.channels()], mel.data().to_vec())?;
    let audio = inverse(params, cfg, &z, &mel_t)?;
    Waveform::clamped(audio, SAMPLE_RATE)
}
