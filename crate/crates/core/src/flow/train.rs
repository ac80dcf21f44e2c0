use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_mixing, forward, nll_loss, FlowConfig};
use crate::autodiff::{Graph, Tensor};
use crate::dsp::{MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::optim::{optimizer_step, sum_gradients, AdamSettings, AdamState, StepOutcome};
use crate::params::{GradMap, ParamSet};

/// Audio aligned with the mel frames that condition it.
#[derive(Debug, Clone)]
pub struct FlowSegment {
    pub audio: Vec<f64>,
    pub mel: Tensor,
}

impl FlowSegment {
    /// Cuts `frames` mel frames starting at `start` and the `frames · hop`
    /// samples they cover.
    pub fn cut(cfg: &FlowConfig, w: &Waveform, mel: &MelSpectrogram, start: usize, frames: usize) -> Result<Self> {
        let (a, b) = (start * cfg.hop, (start + frames) * cfg.hop);
        if frames == 0 || start + frames > mel.frames() || b > w.len() {
            return Err(Error::invalid(format!(
                "segment of {frames} frames at {start} exceeds {} frames / {} samples",
                mel.frames(),
                w.len()
            )));
        }
        let rows: Vec<f64> = (start..start + frames).flat_map(|f| mel.row(f).to_vec()).collect();
        Ok(Self {
            audio: w.samples()[a..b].to_vec(),
            mel: Tensor::new(vec![frames, mel.channels()], rows)?,
        })
    }

    /// Consecutive non-overlapping segments of `frames` frames each.
    pub fn split(cfg: &FlowConfig, w: &Waveform, mel: &MelSpectrogram, frames: usize) -> Result<Vec<Self>> {
        let usable = mel.frames().min(w.len() / cfg.hop);
        (0..usable / frames.max(1))
            .map(|i| Self::cut(cfg, w, mel, i * frames, frames))
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct FlowTrainReport {
    /// Mean batch loss per applied step.
    pub losses: Vec<f64>,
    pub rejected_steps: u64,
}

fn example_gradient(params: &ParamSet, cfg: &FlowConfig, seg: &FlowSegment) -> Result<(f64, GradMap)> {
    let g = Graph::new();
    let b = params.bind(&g);
    let out = forward(&b, cfg, &g.constant(Tensor::vector(seg.audio.clone())), &seg.mel)?;
    let loss = nll_loss(&out.z, &out.log_det, cfg.sigma)?;
    let grads = g.backward(loss)?;
    Ok((loss.item(), b.gradients(&grads)))
}

/// Maximum-likelihood training on fixed segments. Each step takes `batch`
/// segments from a per-epoch shuffle seeded by `seed`; per-example gradients
/// are computed in parallel and summed in index order. Mixing matrices are
/// checked for invertibility after every update.
pub fn fit_segments(
    params: &mut ParamSet,
    cfg: &FlowConfig,
    segments: &[FlowSegment],
    steps: usize,
    batch: usize,
    settings: &AdamSettings,
    seed: u64,
) -> Result<FlowTrainReport> {
    if segments.is_empty() || batch == 0 {
        return Err(Error::Training("flow training needs segments and a positive batch".into()));
    }
    let mut state = AdamState::new();
    let mut report = FlowTrainReport::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    for _ in 0..steps {
        let mut picks = Vec::with_capacity(batch);
        while picks.len() < batch {
            if cursor == order.len() {
                order = (0..segments.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
                epoch += 1;
                cursor = 0;
            }
            picks.push(order[cursor]);
            cursor += 1;
        }
        let snapshot = &*params;
        let results = crate::parallel::map_slice(&picks, |&i| example_gradient(snapshot, cfg, &segments[i]));
        let mut losses = Vec::with_capacity(batch);
        let mut grads = Vec::with_capacity(batch);
        for r in results {
            let (l, g) = r?;
            losses.push(l);
            grads.push(g);
        }
        let total = sum_gradients(&grads, 1.0 / batch as f64);
        match optimizer_step(params, &total, settings, &mut state)? {
            StepOutcome::Applied { .. } => report.losses.push(losses.iter().sum::<f64>() / batch as f64),
            StepOutcome::RejectedNonFinite => report.rejected_steps += 1,
        }
        check_mixing(params, cfg)?;
    }
    Ok(report)
}
