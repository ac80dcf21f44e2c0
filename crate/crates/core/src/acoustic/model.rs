use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::AcousticConfig;
use crate::autodiff::{lstm_cell, BatchNormMode, BatchStats, Graph, LstmWeights, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};

pub const EMBEDDING: &str = "encoder.embedding";
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-pass settings: training switches dropout and batch statistics on.
pub struct RunContext {
    pub training: bool,
    pub rng: ChaCha8Rng,
    /// Batch-norm statistics gathered in training mode, by layer prefix.
    pub bn_updates: Vec<(String, BatchStats)>,
}

impl RunContext {
    pub fn new(training: bool, rng: ChaCha8Rng) -> Self {
        Self {
            training,
            rng,
            bn_updates: Vec::new(),
        }
    }
}

fn lstm_names(prefix: &str) -> [String; 3] {
    [
        format!("{prefix}.w_ih"),
        format!("{prefix}.w_hh"),
        format!("{prefix}.bias"),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fill {
    Xavier,
    Zeros,
    Ones,
}

struct Layout(Vec<(String, Vec<usize>, Fill)>);

impl Layout {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], fill: Fill) {
        self.0.push((name.into(), shape.to_vec(), fill));
    }

    fn bn(&mut self, prefix: &str, c: usize) {
        self.add(format!("{prefix}.gamma"), &[c], Fill::Ones);
        self.add(format!("{prefix}.beta"), &[c], Fill::Zeros);
        self.add(format!("{prefix}.running_mean"), &[c], Fill::Zeros);
        self.add(format!("{prefix}.running_var"), &[c], Fill::Ones);
    }

    fn lstm(&mut self, prefix: &str, input: usize, hidden: usize) {
        let [ih, hh, bias] = lstm_names(prefix);
        self.add(ih, &[input, 4 * hidden], Fill::Xavier);
        self.add(hh, &[hidden, 4 * hidden], Fill::Xavier);
        self.add(bias, &[4 * hidden], Fill::Zeros);
    }
}

fn layout(cfg: &AcousticConfig, vocab_size: usize) -> Result<Layout> {
    cfg.validate()?;
    if vocab_size < 3 {
        return Err(Error::invalid(format!("vocabulary of {vocab_size} symbols is too small")));
    }
    let mut l = Layout(Vec::new());
    let e = cfg.enc_dim();
    let d = cfg.dec_lstm_units;
    l.add(EMBEDDING, &[vocab_size, cfg.embed_dim], Fill::Xavier);
    let mut c_in = cfg.embed_dim;
    for i in 0..cfg.enc_conv_layers {
        l.add(format!("encoder.conv{i}.weight"), &[cfg.enc_filters, c_in, cfg.enc_kernel], Fill::Xavier);
        l.bn(&format!("encoder.conv{i}.bn"), cfg.enc_filters);
        c_in = cfg.enc_filters;
    }
    l.lstm("encoder.lstm_fwd", cfg.enc_filters, e / 2);
    l.lstm("encoder.lstm_bwd", cfg.enc_filters, e / 2);

    let a = cfg.attn_dim;
    l.add("decoder.attention.query", &[d, a], Fill::Xavier);
    l.add("decoder.attention.memory", &[e, a], Fill::Xavier);
    l.add(
        "decoder.attention.location_conv",
        &[cfg.attn_location_filters, 2, cfg.attn_location_kernel],
        Fill::Xavier,
    );
    l.add("decoder.attention.location_dense", &[cfg.attn_location_filters, a], Fill::Xavier);
    l.add("decoder.attention.bias", &[a], Fill::Zeros);
    l.add("decoder.attention.v", &[a, 1], Fill::Xavier);
    let mut inp = cfg.mel_channels;
    for i in 0..cfg.prenet_layers {
        l.add(format!("decoder.prenet{i}.weight"), &[inp, cfg.prenet_units], Fill::Xavier);
        l.add(format!("decoder.prenet{i}.bias"), &[cfg.prenet_units], Fill::Zeros);
        inp = cfg.prenet_units;
    }
    l.lstm("decoder.lstm0", cfg.prenet_units + e, d);
    l.lstm("decoder.lstm1", d + e, d);
    l.add("decoder.frame_proj.weight", &[d + e, cfg.mel_channels], Fill::Xavier);
    l.add("decoder.frame_proj.bias", &[cfg.mel_channels], Fill::Zeros);
    l.add("decoder.stop_proj.weight", &[d + e, 1], Fill::Xavier);
    l.add("decoder.stop_proj.bias", &[1], Fill::Zeros);

    let mut c_in = cfg.mel_channels;
    for i in 0..cfg.postnet_layers {
        let last = i + 1 == cfg.postnet_layers;
        let c_out = if last { cfg.mel_channels } else { cfg.postnet_filters };
        l.add(format!("postnet.conv{i}.weight"), &[c_out, c_in, cfg.postnet_kernel], Fill::Xavier);
        if last {
            l.add(format!("postnet.conv{i}.bias"), &[c_out], Fill::Zeros);
        } else {
            l.bn(&format!("postnet.conv{i}.bn"), c_out);
        }
        c_in = c_out;
    }
    Ok(l)
}

/// Fresh parameters: Xavier-uniform weights, zero biases, unit batch-norm scales.
pub fn init_params<R: Rng>(cfg: &AcousticConfig, vocab_size: usize, rng: &mut R) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    for (name, shape, fill) in layout(cfg, vocab_size)?.0 {
        match fill {
            Fill::Xavier => p.insert_xavier(&name, &shape, rng)?,
            Fill::Zeros => p.insert(name, Tensor::zeros(&shape))?,
            Fill::Ones => p.insert(name, Tensor::full(&shape, 1.0))?,
        }
    }
    Ok(p)
}

/// Names and shapes [`init_params`] produces, in order, without allocating values.
pub fn param_shapes(cfg: &AcousticConfig, vocab_size: usize) -> Result<Vec<(String, Vec<usize>)>> {
    Ok(layout(cfg, vocab_size)?.0.into_iter().map(|(n, s, _)| (n, s)).collect())
}

/// Number of embedding rows, i.e. the vocabulary size the parameters serve.
pub fn vocab_size(p: &ParamSet) -> Result<usize> {
    Ok(p.tensor(EMBEDDING)?.shape()[0])
}

fn batchnorm<'g>(
    b: &Bound<'g>,
    prefix: &str,
    x: Var<'g>,
    valid: Option<&[bool]>,
    ctx: &mut RunContext,
) -> Result<Var<'g>> {
    let gamma_name = format!("{prefix}.gamma");
    let gamma = b.var(&gamma_name)?;
    let beta = b.var(&format!("{prefix}.beta"))?;
    if ctx.training && b.is_trainable(&gamma_name) {
        let (y, stats) = x.batchnorm1d(&gamma, &beta, BatchNormMode::Train, valid)?;
        if let Some(s) = stats {
            ctx.bn_updates.push((prefix.to_string(), s));
        }
        Ok(y)
    } else {
        let mean = b.values(&format!("{prefix}.running_mean"))?;
        let var = b.values(&format!("{prefix}.running_var"))?;
        Ok(x.batchnorm1d(&gamma, &beta, BatchNormMode::Eval(Some((mean, var))), valid)?.0)
    }
}

/// Blends gathered batch statistics into the running averages. `batches`
/// holds one update list per example; statistics of the same layer are
/// averaged in example order before the momentum update.
pub fn update_running_stats(p: &mut ParamSet, batches: &[Vec<(String, BatchStats)>]) -> Result<()> {
    let mut sums: indexmap::IndexMap<&str, (Vec<f64>, Vec<f64>, usize)> = indexmap::IndexMap::new();
    for updates in batches {
        for (prefix, s) in updates {
            let e = sums
                .entry(prefix.as_str())
                .or_insert_with(|| (vec![0.0; s.mean.len()], vec![0.0; s.var.len()], 0));
            e.0.iter_mut().zip(&s.mean).for_each(|(a, v)| *a += v);
            e.1.iter_mut().zip(&s.var).for_each(|(a, v)| *a += v);
            e.2 += 1;
        }
    }
    for (prefix, (mean, var, n)) in sums {
        for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
            let t = &mut p.get_mut(&format!("{prefix}.{suffix}"))?.value;
            for (r, v) in t.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * (v / n as f64);
            }
        }
    }
    Ok(())
}

fn lstm<'g>(b: &Bound<'g>, prefix: &str) -> Result<LstmWeights<'g>> {
    let [ih, hh, bias] = lstm_names(prefix);
    Ok(LstmWeights {
        w_ih: b.var(&ih)?,
        w_hh: b.var(&hh)?,
        bias: b.var(&bias)?,
    })
}

fn zeros<'g>(g: &'g Graph, rows: usize, cols: usize) -> Var<'g> {
    g.constant(Tensor::zeros(&[rows, cols]))
}

/// Text encoder: embedding, convolution stack and bidirectional LSTM.
/// Returns `[T, enc_blstm_units]` with forward and backward halves side by side.
pub fn encode_text<'g>(b: &Bound<'g>, cfg: &AcousticConfig, ids: &[usize], ctx: &mut RunContext) -> Result<Var<'g>> {
    if ids.is_empty() {
        return Err(Error::invalid("cannot encode an empty id sequence"));
    }
    let table = b.var(EMBEDDING)?;
    let rows = table.shape()[0];
    if let Some(bad) = ids.iter().find(|i| **i >= rows) {
        return Err(Error::invalid(format!("token id {bad} out of range for {rows} embeddings")));
    }
    let mut x = table.gather_rows(ids)?;
    for i in 0..cfg.enc_conv_layers {
        let w = b.var(&format!("encoder.conv{i}.weight"))?;
        x = x.conv1d(&w, (cfg.enc_kernel - 1) / 2, 1)?;
        x = batchnorm(b, &format!("encoder.conv{i}.bn"), x, None, ctx)?;
        x = x.relu().dropout(cfg.encoder_dropout, ctx.training, &mut ctx.rng);
    }
    let g = x.graph();
    let t_len = ids.len();
    let half = cfg.enc_dim() / 2;
    let run = |weights: &LstmWeights<'g>, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Option<Var<'g>>>> {
        let mut h = zeros(g, 1, half);
        let mut c = zeros(g, 1, half);
        let mut out = vec![None; t_len];
        for t in order {
            let (h2, c2) = lstm_cell(&x.slice(0, t, 1)?, &h, &c, weights)?;
            h = h2;
            c = c2;
            out[t] = Some(h);
        }
        Ok(out)
    };
    let fwd = run(&lstm(b, "encoder.lstm_fwd")?, &mut (0..t_len))?;
    let bwd = run(&lstm(b, "encoder.lstm_bwd")?, &mut (0..t_len).rev())?;
    let rows = fwd
        .into_iter()
        .zip(bwd)
        .map(|(f, r)| g.concat(&[f.expect("visited"), r.expect("visited")], 1))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&rows, 0)
}

/// Encoder states plus their projection into attention space.
#[derive(Clone, Copy)]
pub struct Memory<'g> {
    pub states: Var<'g>,
    pub processed: Var<'g>,
}

impl<'g> Memory<'g> {
    pub fn new(b: &Bound<'g>, states: Var<'g>) -> Result<Self> {
        if states.shape().first() == Some(&0) {
            return Err(Error::invalid("attention over zero encoder positions"));
        }
        Ok(Self {
            processed: states.matmul(&b.var("decoder.attention.memory")?)?,
            states,
        })
    }

    pub fn len(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Previous weights `[T, 1]`, cumulative weights `[T, 1]` and context `[1, enc]`.
#[derive(Clone, Copy)]
pub struct AttentionState<'g> {
    pub prev: Var<'g>,
    pub cumulative: Var<'g>,
    pub context: Var<'g>,
}

impl<'g> AttentionState<'g> {
    pub fn initial(g: &'g Graph, t_len: usize, enc_dim: usize) -> Self {
        Self {
            prev: zeros(g, t_len, 1),
            cumulative: zeros(g, t_len, 1),
            context: zeros(g, 1, enc_dim),
        }
    }
}

/// One location-sensitive attention step. `energy_offset`, when given, is
/// added to the energies before normalization.
pub fn attention_step<'g>(
    b: &Bound<'g>,
    cfg: &AcousticConfig,
    query: &Var<'g>,
    memory: &Memory<'g>,
    state: &AttentionState<'g>,
    energy_offset: Option<Rc<Vec<f64>>>,
) -> Result<AttentionState<'g>> {
    let g = query.graph();
    if memory.is_empty() {
        return Err(Error::invalid("attention over zero encoder positions"));
    }
    let loc_in = g.concat(&[state.prev, state.cumulative], 1)?;
    let loc = loc_in
        .conv1d(&b.var("decoder.attention.location_conv")?, (cfg.attn_location_kernel - 1) / 2, 1)?
        .matmul(&b.var("decoder.attention.location_dense")?)?;
    let q = query.matmul(&b.var("decoder.attention.query")?)?;
    let mut energies = memory
        .processed
        .add(&loc)?
        .add_row(&q)?
        .add_row(&b.var("decoder.attention.bias")?)?
        .tanh()
        .matmul(&b.var("decoder.attention.v")?)?;
    if let Some(off) = energy_offset {
        energies = energies.add(&g.constant(Tensor::new(vec![memory.len(), 1], off.to_vec())?))?;
    }
    let weights = energies.softmax(0)?;
    let context = weights.transpose().matmul(&memory.states)?;
    Ok(AttentionState {
        cumulative: state.cumulative.add(&weights)?,
        prev: weights,
        context,
    })
}

/// Hidden and cell states of both decoder LSTMs, each `[1, dec_lstm_units]`.
#[derive(Clone, Copy)]
pub struct DecoderState<'g> {
    pub h: [Var<'g>; 2],
    pub c: [Var<'g>; 2],
}

impl<'g> DecoderState<'g> {
    pub fn initial(g: &'g Graph, units: usize) -> Self {
        Self {
            h: [zeros(g, 1, units), zeros(g, 1, units)],
            c: [zeros(g, 1, units), zeros(g, 1, units)],
        }
    }
}

pub struct StepOutput<'g> {
    /// `[1, mel_channels]`
    pub frame: Var<'g>,
    /// `[1, 1]`
    pub stop_logit: Var<'g>,
    pub attention: AttentionState<'g>,
    pub decoder: DecoderState<'g>,
}

fn prenet<'g>(b: &Bound<'g>, cfg: &AcousticConfig, x: &Var<'g>, ctx: &mut RunContext) -> Result<Var<'g>> {
    let active = ctx.training || cfg.prenet_dropout_at_inference;
    let mut x = *x;
    for i in 0..cfg.prenet_layers {
        x = x
            .matmul(&b.var(&format!("decoder.prenet{i}.weight"))?)?
            .add_row(&b.var(&format!("decoder.prenet{i}.bias"))?)?
            .relu()
            .dropout(cfg.prenet_dropout, active, &mut ctx.rng);
    }
    Ok(x)
}

/// One autoregressive decoder step from the previous frame `[1, mel_channels]`.
pub fn decode_step<'g>(
    b: &Bound<'g>,
    cfg: &AcousticConfig,
    prev_frame: &Var<'g>,
    memory: &Memory<'g>,
    attention: &AttentionState<'g>,
    decoder: &DecoderState<'g>,
    ctx: &mut RunContext,
) -> Result<StepOutput<'g>> {
    let g = prev_frame.graph();
    if prev_frame.shape() != [1, cfg.mel_channels] {
        return Err(Error::ShapeMismatch {
            op: "decode_step frame",
            lhs: prev_frame.shape(),
            rhs: vec![1, cfg.mel_channels],
        });
    }
    let pre = prenet(b, cfg, prev_frame, ctx)?;
    let x0 = g.concat(&[pre, attention.context], 1)?;
    let (h0, c0) = lstm_cell(&x0, &decoder.h[0], &decoder.c[0], &lstm(b, "decoder.lstm0")?)?;
    let attention = attention_step(b, cfg, &h0, memory, attention, None)?;
    let x1 = g.concat(&[h0, attention.context], 1)?;
    let (h1, c1) = lstm_cell(&x1, &decoder.h[1], &decoder.c[1], &lstm(b, "decoder.lstm1")?)?;
    let out = g.concat(&[h1, attention.context], 1)?;
    let frame = out
        .matmul(&b.var("decoder.frame_proj.weight")?)?
        .add_row(&b.var("decoder.frame_proj.bias")?)?;
    let stop_logit = out
        .matmul(&b.var("decoder.stop_proj.weight")?)?
        .add_row(&b.var("decoder.stop_proj.bias")?)?;
    Ok(StepOutput {
        frame,
        stop_logit,
        attention,
        decoder: DecoderState {
            h: [h0, h1],
            c: [c0, c1],
        },
    })
}

/// Residual predicted by the post-net for `[S, mel_channels]` frames.
pub fn postnet<'g>(b: &Bound<'g>, cfg: &AcousticConfig, mel: &Var<'g>, ctx: &mut RunContext) -> Result<Var<'g>> {
    let pad = (cfg.postnet_kernel - 1) / 2;
    let mut x = *mel;
    for i in 0..cfg.postnet_layers {
        let last = i + 1 == cfg.postnet_layers;
        x = x.conv1d(&b.var(&format!("postnet.conv{i}.weight"))?, pad, 1)?;
        if last {
            x = x.add_row(&b.var(&format!("postnet.conv{i}.bias"))?)?;
            if cfg.postnet_final_tanh {
                x = x.tanh();
            }
        } else {
            x = batchnorm(b, &format!("postnet.conv{i}.bn"), x, None, ctx)?
                .tanh()
                .dropout(cfg.postnet_dropout, ctx.training, &mut ctx.rng);
        }
    }
    Ok(x)
}

/// Differentiable outputs of one decoding pass.
pub struct AcousticOutput<'g> {
    /// `[S, mel_channels]` before the post-net.
    pub pre: Var<'g>,
    /// `pre + postnet(pre)`.
    pub post: Var<'g>,
    /// `[S, 1]`
    pub stop_logits: Var<'g>,
    /// `[S, T]`
    pub alignment: Var<'g>,
}

/// Decoding with ground-truth feedback: step `t` consumes target frame
/// `t − 1` (a zero frame at `t = 0`).
pub fn forward_teacher_forced<'g>(
    b: &Bound<'g>,
    cfg: &AcousticConfig,
    ids: &[usize],
    target: &Tensor,
    ctx: &mut RunContext,
) -> Result<AcousticOutput<'g>> {
    let (s, ch) = target.dims2();
    if target.rank() != 2 || s == 0 || ch != cfg.mel_channels {
        return Err(Error::invalid(format!(
            "teacher forcing needs a non-empty [S, {}] target, got {:?}",
            cfg.mel_channels,
            target.shape()
        )));
    }
    let enc = encode_text(b, cfg, ids, ctx)?;
    let g = enc.graph();
    let memory = Memory::new(b, enc)?;
    let mut attention = AttentionState::initial(g, memory.len(), cfg.enc_dim());
    let mut decoder = DecoderState::initial(g, cfg.dec_lstm_units);
    let mut frames = Vec::with_capacity(s);
    let mut stops = Vec::with_capacity(s);
    let mut rows = Vec::with_capacity(s);
    for t in 0..s {
        let prev = if t == 0 {
            zeros(g, 1, ch)
        } else {
            g.constant(Tensor::from_rows(&[target.row(t - 1).to_vec()])?)
        };
        let step = decode_step(b, cfg, &prev, &memory, &attention, &decoder, ctx)?;
        frames.push(step.frame);
        stops.push(step.stop_logit);
        rows.push(step.attention.prev.transpose());
        attention = step.attention;
        decoder = step.decoder;
    }
    let pre = g.concat(&frames, 0)?;
    let post = pre.add(&postnet(b, cfg, &pre, ctx)?)?;
    Ok(AcousticOutput {
        pre,
        post,
        stop_logits: g.concat(&stops, 0)?,
        alignment: g.concat(&rows, 0)?,
    })
}

/// Loss terms of one utterance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub mel_pre: f64,
    pub mel_post: f64,
    pub stop: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.mel_pre + self.mel_post + self.stop
    }
}

/// `MSE(pre) + MSE(post) + BCE(stop)` against a `[S_pad, mel_channels]`
/// target whose first `S` rows are the decoded frames; rows past `S` are
/// padding and masked out of every term.
pub fn loss<'g>(out: &AcousticOutput<'g>, target: &Tensor, pos_weight: f64) -> Result<(Var<'g>, LossParts)> {
    let (s_pad, ch) = target.dims2();
    let s = out.pre.shape()[0];
    let valid = s;
    if out.pre.shape() != [s, ch] || target.rank() != 2 || s > s_pad || s == 0 {
        return Err(Error::ShapeMismatch {
            op: "acoustic loss",
            lhs: out.pre.shape(),
            rhs: target.shape().to_vec(),
        });
    }
    let g = out.pre.graph();
    let pad_rows = |v: Var<'g>, cols: usize| -> Result<Var<'g>> {
        if s_pad == s {
            Ok(v)
        } else {
            g.concat(&[v, zeros(g, s_pad - s, cols)], 0)
        }
    };
    let mask: Vec<f64> = (0..s_pad).map(|t| if t < valid { 1.0 } else { 0.0 }).collect();
    let mask = Rc::new(mask);
    let tgt = g.constant(target.clone());
    let mel_pre = pad_rows(out.pre, ch)?.mse(&tgt, Some(Rc::clone(&mask)))?;
    let mel_post = pad_rows(out.post, ch)?.mse(&tgt, Some(Rc::clone(&mask)))?;
    let stop_targets: Vec<f64> = (0..s_pad).map(|t| if t + 1 == valid { 1.0 } else { 0.0 }).collect();
    let stop = pad_rows(out.stop_logits, 1)?.bce_with_logits(&stop_targets, Some(&mask), pos_weight)?;
    let parts = LossParts {
        mel_pre: mel_pre.item(),
        mel_post: mel_post.item(),
        stop: stop.item(),
    };
    Ok((mel_pre.add(&mel_post)?.add(&stop)?, parts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Halt {
    StopToken,
    MaxSteps,
}

/// Values produced by autoregressive inference.
#[derive(Debug, Clone)]
pub struct Inference {
    pub pre: Tensor,
    pub post: Tensor,
    pub stop_logits: Vec<f64>,
    pub alignment: Tensor,
    pub halt: Halt,
}

impl Inference {
    pub fn frames(&self) -> usize {
        self.post.rows()
    }
}

/// Free-running generation until the stop probability exceeds the
/// threshold or `max_decoder_steps` frames have been produced.
pub fn infer(params: &ParamSet, cfg: &AcousticConfig, ids: &[usize], rng: ChaCha8Rng) -> Result<Inference> {
    let g = Graph::new();
    let b = params.bind(&g);
    let mut ctx = RunContext::new(false, rng);
    let enc = encode_text(&b, cfg, ids, &mut ctx)?;
    let memory = Memory::new(&b, enc)?;
    let mut attention = AttentionState::initial(&g, memory.len(), cfg.enc_dim());
    let mut decoder = DecoderState::initial(&g, cfg.dec_lstm_units);
    let mut prev = zeros(&g, 1, cfg.mel_channels);
    let mut frames = Vec::new();
    let mut stops = Vec::new();
    let mut rows = Vec::new();
    let mut halt = Halt::MaxSteps;
    while frames.len() < cfg.max_decoder_steps {
        let step = decode_step(&b, cfg, &prev, &memory, &attention, &decoder, &mut ctx)?;
        let logit = step.stop_logit.item();
        frames.push(step.frame);
        stops.push(logit);
        rows.push(step.attention.prev.transpose());
        attention = step.attention;
        decoder = step.decoder;
        prev = if cfg.feed_postnet_frames {
            let so_far = g.concat(&frames, 0)?;
            let post = so_far.add(&postnet(&b, cfg, &so_far, &mut ctx)?)?;
            post.slice(0, frames.len() - 1, 1)?
        } else {
            step.frame
        };
        if crate::autodiff::sigmoid(logit) > cfg.stop_threshold {
            halt = Halt::StopToken;
            break;
        }
    }
    let pre = g.concat(&frames, 0)?;
    let post = pre.add(&postnet(&b, cfg, &pre, &mut ctx)?)?;
    Ok(Inference {
        pre: (*pre.value()).clone(),
        post: (*post.value()).clone(),
        stop_logits: stops,
        alignment: (*g.concat(&rows, 0)?.value()).clone(),
        halt,
    })
}
