use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::archive::{ParameterArchive, ProvenanceEntry};
use super::plan::{StageId, StagePlan, Surgery};
use super::surgery::{apply_freeze, surgery_reset_embedding};
use crate::acoustic::{
    forward_teacher_forced, init_params, loss, update_running_stats, AcousticConfig, LossParts, RunContext,
};
use crate::autodiff::{Graph, Tensor};
use crate::corpus::Manifest;
use crate::dsp::{load_wav, mel_spectrogram, MelFilterbank, MelSpectrogram, MEL_CHANNELS};
use crate::error::{Error, Result};
use crate::optim::{optimizer_step, sum_gradients, AdamState, StepOutcome};
use crate::params::{GradMap, ParamSet};
use crate::text::{build_vocabulary, encode, Vocabulary};

/// One training pair: symbol ids (EOS-terminated) and the `[S, 80]` target.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub ids: Vec<usize>,
    pub mel: Tensor,
}

pub fn mel_tensor(m: &MelSpectrogram) -> Tensor {
    Tensor::new(vec![m.frames(), MEL_CHANNELS], m.data().to_vec()).expect("mel geometry is consistent")
}

/// Encodes every transcript and computes its target spectrogram.
pub fn load_utterances(m: &Manifest, vocab: &Vocabulary) -> Result<Vec<Utterance>> {
    let fb = MelFilterbank::standard();
    crate::parallel::map_slice(&m.entries, |e| {
        let ids = encode(&e.text, vocab)?.ids;
        let w = load_wav(m.audio_path(e))?;
        let mel = mel_spectrogram(&w, &fb)?;
        Ok(Utterance {
            ids,
            mel: mel_tensor(&mel),
        })
    })
    .into_iter()
    .collect()
}

/// The vocabulary a stage trains with and whether it came from the init archive.
///
/// Without surgery the init archive's vocabulary is kept, which requires it
/// to share the corpus script and cover every corpus codepoint. With
/// `reset_embedding` (or no init archive) it is rebuilt from the corpus.
pub fn stage_vocabulary(plan: &StagePlan, init: Option<&ParameterArchive>, m: &Manifest) -> Result<(Vocabulary, bool)> {
    let texts = m.texts();
    let fresh = || build_vocabulary(&texts, m.script);
    let Some(init) = init else { return Ok((fresh()?, false)) };
    if plan.surgery == Surgery::ResetEmbedding {
        return Ok((fresh()?, false));
    }
    let have = init.vocabulary()?;
    let mut missing: Vec<char> = texts.iter().flat_map(|t| t.chars()).filter(|c| !have.contains(*c)).collect();
    missing.sort_unstable();
    missing.dedup();
    if have.script() != m.script || !missing.is_empty() {
        let want = fresh()?;
        return Err(Error::Plan(format!(
            "{}: vocabulary mismatch: init archive vocabulary {} ({}) vs corpus {} vocabulary {} ({}); \
             {} uncovered codepoint(s) {:?}; set \"surgery\": \"reset_embedding\"",
            plan.stage,
            have.fingerprint(),
            have.script(),
            m.corpus,
            want.fingerprint(),
            m.script,
            missing.len(),
            missing.iter().collect::<String>()
        )));
    }
    Ok((have, true))
}

/// Batches of utterance indices, bucketed by text length (ties by index).
pub fn length_buckets(utts: &[Utterance], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.sort_by_key(|&i| (utts[i].ids.len(), i));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Seed of the dropout stream of example `index` at `step`.
pub fn example_seed(seed: u64, step: usize, index: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Zero rows appended up to `rows`.
pub fn pad_rows(t: &Tensor, rows: usize) -> Tensor {
    let (s, c) = t.dims2();
    if rows <= s {
        return t.clone();
    }
    let mut data = t.data().to_vec();
    data.resize(rows * c, 0.0);
    Tensor::new(vec![rows, c], data).expect("padded geometry")
}

pub struct ExampleResult {
    pub parts: LossParts,
    pub grads: GradMap,
    pub bn: Vec<(String, crate::autodiff::BatchStats)>,
}

/// Teacher-forced loss and gradients of one example against a target padded to `pad_to` frames.
pub fn example_gradient(
    params: &ParamSet,
    cfg: &AcousticConfig,
    u: &Utterance,
    pad_to: usize,
    rng_seed: u64,
) -> Result<ExampleResult> {
    let g = Graph::new();
    let b = params.bind(&g);
    let mut ctx = RunContext::new(true, ChaCha8Rng::seed_from_u64(rng_seed));
    let out = forward_teacher_forced(&b, cfg, &u.ids, &u.mel, &mut ctx)?;
    let (l, parts) = loss(&out, &pad_rows(&u.mel, pad_to), cfg.stop_pos_weight)?;
    let grads = g.backward(l)?;
    Ok(ExampleResult {
        parts,
        grads: b.gradients(&grads),
        bn: ctx.bn_updates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    MaxSteps,
    Plateau,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

/// Parameter movement over a stage for one top-level prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixDelta {
    pub prefix: String,
    pub tensors: usize,
    pub changed: usize,
    pub max_abs_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: StageId,
    pub corpus: String,
    pub utterances: usize,
    pub steps: usize,
    pub halt: HaltReason,
    pub loss_curve: Vec<LossPoint>,
    pub rejected_steps: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `None` when the plan sets no convergence threshold.
    pub converged: Option<bool>,
    pub vocabulary_fingerprint: String,
    pub vocabulary_reused: bool,
    pub surgery: Surgery,
    pub freeze: Vec<String>,
    pub deltas: Vec<PrefixDelta>,
    /// Non-trainable tensors whose values moved; empty unless something is broken.
    pub frozen_changed: Vec<String>,
    pub checkpoints: Vec<PathBuf>,
    pub output: PathBuf,
    pub output_fingerprint: String,
}

impl StageReport {
    pub fn delta(&self, prefix: &str) -> Option<&PrefixDelta> {
        self.deltas.iter().find(|d| d.prefix == prefix)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::path(path, e))
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Averages of the last `window` losses and of the window before it.
fn plateaued(losses: &[f64], window: usize, min_delta: f64) -> bool {
    if losses.len() < 2 * window {
        return false;
    }
    let n = losses.len();
    let recent = mean(&losses[n - window..]);
    let before = mean(&losses[n - 2 * window..n - window]);
    before - recent < min_delta
}

fn param_deltas(before: &ParamSet, after: &ParamSet) -> (Vec<PrefixDelta>, Vec<String>) {
    let mut groups: IndexMap<String, PrefixDelta> = IndexMap::new();
    let mut frozen_changed = Vec::new();
    for ((name, a), (_, b)) in before.iter().zip(after.iter()) {
        let prefix = name.split('.').next().unwrap_or(name).to_string();
        let d = groups.entry(prefix.clone()).or_insert(PrefixDelta {
            prefix,
            tensors: 0,
            changed: 0,
            max_abs_delta: 0.0,
        });
        d.tensors += 1;
        let moved = a.value.data().iter().zip(b.value.data()).any(|(x, y)| x.to_bits() != y.to_bits());
        if moved {
            d.changed += 1;
            d.max_abs_delta = d.max_abs_delta.max(a.value.max_abs_diff(&b.value));
            if !b.trainable && !crate::params::is_buffer(name) {
                frozen_changed.push(name.clone());
            }
        }
    }
    (groups.into_values().collect(), frozen_changed)
}

/// The initial archive of a stage: loaded (with surgery and freezing applied)
/// or freshly initialized, together with the stage vocabulary.
pub fn prepare_stage(plan: &StagePlan, m: &Manifest) -> Result<(ParameterArchive, bool)> {
    let init = plan.init.as_ref().map(ParameterArchive::load).transpose()?;
    let (vocab, reused) = stage_vocabulary(plan, init.as_ref(), m)?;
    let archive = match init {
        Some(a) => {
            let a = match plan.surgery {
                Surgery::ResetEmbedding => surgery_reset_embedding(&a, &vocab, plan.seed)?,
                Surgery::None => a,
            };
            let mut a = apply_freeze(&a, &plan.freeze)?;
            a.meta.stage = plan.stage.to_string();
            a.meta.seed = plan.seed;
            a.meta.step_count = 0;
            a
        }
        None => {
            let cfg = plan.model.resolve()?;
            let params = init_params(&cfg, vocab.len(), &mut ChaCha8Rng::seed_from_u64(plan.seed))?;
            ParameterArchive::acoustic(params, &cfg, &vocab, plan.stage.as_str(), plan.seed)?
        }
    };
    Ok((archive, reused))
}

/// Runs one stage and writes its archive and report.
pub fn run_stage(plan: &StagePlan) -> Result<(ParameterArchive, StageReport)> {
    plan.validate()?;
    let manifest = Manifest::load(&plan.manifest)?;
    let (mut archive, vocabulary_reused) = prepare_stage(plan, &manifest)?;
    let vocab = archive.vocabulary()?;
    let cfg = archive.acoustic_config()?.clone();
    let utts = load_utterances(&manifest, &vocab)?;
    if utts.is_empty() {
        return Err(Error::Corpus(format!("{}: corpus {} is empty", plan.stage, manifest.corpus)));
    }
    let initial = archive.params.clone();
    let buckets = length_buckets(&utts, plan.batch_size);
    let settings = plan.optimizer_settings();
    let mut state = AdamState::new();
    let mut losses = Vec::new();
    let mut curve = Vec::new();
    let mut checkpoints = Vec::new();
    let mut halt = HaltReason::MaxSteps;
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    log::info!(
        "{}: {} utterances, {} batches, {} trainable tensors",
        plan.stage,
        utts.len(),
        buckets.len(),
        archive.params.trainable_names().len()
    );
    for step in 0..plan.stop.max_steps {
        if order.is_empty() {
            order = (0..buckets.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
            order.reverse();
            epoch += 1;
        }
        let batch = &buckets[order.pop().expect("non-empty order")];
        let pad_to = batch.iter().map(|&i| utts[i].mel.rows()).max().unwrap_or(0);
        let params = &archive.params;
        let results = crate::parallel::map_slice(batch, |&i| {
            example_gradient(params, &cfg, &utts[i], pad_to, example_seed(plan.seed, step, i))
        });
        let mut grads = Vec::with_capacity(batch.len());
        let mut bn = Vec::with_capacity(batch.len());
        let mut total = 0.0;
        for r in results {
            let r = r?;
            total += r.parts.total();
            grads.push(r.grads);
            bn.push(r.bn);
        }
        let batch_loss = total / batch.len() as f64;
        let summed = sum_gradients(&grads, 1.0 / batch.len() as f64);
        match optimizer_step(&mut archive.params, &summed, &settings, &mut state)? {
            StepOutcome::Applied { .. } => update_running_stats(&mut archive.params, &bn)?,
            StepOutcome::RejectedNonFinite => {}
        }
        if batch_loss.is_finite() {
            losses.push(batch_loss);
        }
        curve.push(LossPoint { step: step + 1, loss: batch_loss });
        archive.meta.step_count = step as u64 + 1;
        log::info!("{} step {}: loss {batch_loss:.5}", plan.stage, step + 1);
        if let Some(every) = plan.checkpoint_every {
            if (step + 1) % every == 0 && step + 1 < plan.stop.max_steps {
                archive.save(&plan.output)?;
                checkpoints.push(plan.output.clone());
            }
        }
        if let Some(p) = plan.stop.plateau {
            if plateaued(&losses, p.window, p.min_delta) {
                halt = HaltReason::Plateau;
                break;
            }
        }
    }
    if losses.is_empty() {
        return Err(Error::Training(format!("{}: every step produced a non-finite loss", plan.stage)));
    }
    let tail = &losses[losses.len().saturating_sub(10)..];
    let final_loss = mean(tail);
    let converged = plan.stop.converged_below.map(|t| final_loss < t);
    if converged == Some(false) {
        log::warn!("{}: did not converge (final loss {final_loss:.4})", plan.stage);
    }

    let tensor_fingerprint = archive.tensor_fingerprint()?;
    archive.meta.provenance.push(ProvenanceEntry {
        stage: plan.stage.to_string(),
        fingerprint: tensor_fingerprint,
        corpus: manifest.corpus.clone(),
        vocabulary_fingerprint: archive.meta.vocabulary_fingerprint.clone(),
        steps: archive.meta.step_count,
        seed: plan.seed,
    });
    archive.sync_meta();
    archive.save(&plan.output)?;
    let (deltas, frozen_changed) = param_deltas(&initial, &archive.params);
    let report = StageReport {
        stage: plan.stage,
        corpus: manifest.corpus.clone(),
        utterances: utts.len(),
        steps: curve.len(),
        halt,
        initial_loss: losses[0],
        final_loss,
        loss_curve: curve,
        rejected_steps: state.rejected,
        converged,
        vocabulary_fingerprint: vocab.fingerprint(),
        vocabulary_reused,
        surgery: plan.surgery,
        freeze: plan.freeze.prefixes.clone(),
        deltas,
        frozen_changed,
        checkpoints,
        output: plan.output.clone(),
        output_fingerprint: archive.fingerprint()?,
    };
    report.save(plan.report_path())?;
    Ok((archive, report))
}

/// Runs chained stages in order. Each plan after the first must start from
/// the previous plan's output.
pub fn run_recipe(plans: &[StagePlan]) -> Result<(ParameterArchive, Vec<StageReport>)> {
    if plans.is_empty() {
        return Err(Error::Plan("recipe has no stages".into()));
    }
    for (i, pair) in plans.windows(2).enumerate() {
        if pair[1].init.as_ref() != Some(&pair[0].output) {
            return Err(Error::Plan(format!(
                "broken chain: stage {} ({}) must start from {} but its init is {}",
                i + 2,
                pair[1].stage,
                pair[0].output.display(),
                pair[1].init.as_ref().map_or("nothing".to_string(), |p| p.display().to_string())
            )));
        }
    }
    for p in plans {
        p.validate()?;
    }
    let mut reports = Vec::with_capacity(plans.len());
    let mut last = None;
    for p in plans {
        let (a, r) = run_stage(p)?;
        reports.push(r);
        last = Some(a);
    }
    Ok((last.expect("at least one stage"), reports))
}
