//! Command-line surface. `main` parses arguments, runs one subcommand and
//! maps failures to exit codes: 2 usage, 3 data error, 4 training failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acoustic::infer;
use crate::corpus::{self, HttpClient, Manifest, RetryPolicy, StubClient, TtsClient};
use crate::dsp::{griffin_lim, load_wav, mel_spectrogram, save_wav, MelFilterbank, MelSpectrogram, StftConfig};
use crate::error::{Error, Result};
use crate::flow::{self, FlowConfig, FlowSegment};
use crate::optim::AdamSettings;
use crate::report::{aggregate_mos, plot_alignment, plot_spectrogram, RatingSet};
use crate::text::{build_vocabulary, encode, normalize, Vocabulary};
use crate::training::{run_recipe, run_stage, surgery_reset_embedding, ParameterArchive, StagePlan};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_TRAINING: u8 = 4;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Training(_) | Error::SingularMixing { .. } | Error::NonFinite(_) => EXIT_TRAINING,
        _ => EXIT_DATA,
    }
}

#[derive(Debug, Parser)]
#[command(name = "transfer-tts", version, about = "Low-resource TTS via staged transfer learning")]
pub struct Cli {
    /// Seed for every random draw (overrides the seeds in stage plans).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Canonicalize a raw corpus to 16 kHz 16-bit PCM and write its manifest.
    Prepare {
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Corpus label; defaults to the output directory name.
        #[arg(long)]
        corpus: Option<String>,
    },
    /// Generate a synthetic corpus from a text list (one text per line).
    SynthCorpus {
        #[arg(long)]
        texts: PathBuf,
        /// `stub` or the base URL of a TTS service.
        #[arg(long)]
        client: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "default")]
        voice: String,
        #[arg(long, default_value = "synthetic")]
        corpus: String,
    },
    /// Check a manifest's files, durations, texts and vocabulary coverage.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Build the symbol inventory of a corpus.
    Vocab {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Run chained training stages in order.
    Recipe {
        #[arg(long, num_args = 1.., required = true)]
        plans: Vec<PathBuf>,
    },
    /// Replace an archive's embedding with a fresh one sized for a vocabulary.
    Surgery {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the flow vocoder on a corpus.
    TrainVocoder(TrainVocoderArgs),
    /// Text to waveform: acoustic model, then a vocoder.
    Infer(InferArgs),
    /// Attention alignment heatmap (PGM).
    PlotAlign {
        #[command(flatten)]
        source: AlignSource,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        scale: usize,
    },
    /// Mel-spectrogram heatmap (PGM).
    PlotMel {
        /// A WAV file or a MEL1 spectrogram file.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        scale: usize,
    },
    /// Aggregate listening-test ratings (CSV) into a MOS table.
    MosReport {
        #[arg(long)]
        ratings: PathBuf,
        /// Print JSON instead of the text table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
pub struct TrainVocoderArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Mel frames per training segment.
    #[arg(long, default_value_t = 16)]
    pub segment_frames: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// `default` or `toy`.
    #[arg(long, default_value = "default")]
    pub config: String,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub text: String,
    /// `griffinlim` or `flow CKPT`.
    #[arg(long, num_args = 1..=2, value_names = ["KIND", "CKPT"], required = true)]
    pub vocoder: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub align_pgm: Option<PathBuf>,
    #[arg(long)]
    pub mel_pgm: Option<PathBuf>,
    /// Also write the predicted spectrogram as a MEL1 file.
    #[arg(long)]
    pub mel_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.6)]
    pub sigma: f64,
    #[arg(long, default_value_t = 60)]
    pub gl_iters: usize,
    #[arg(long, default_value_t = 1)]
    pub scale: usize,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = true)]
pub struct AlignSource {
    /// JSON array of rows (`[S][T]`).
    #[arg(long, conflicts_with_all = ["ckpt", "text"])]
    pub matrix: Option<PathBuf>,
    #[arg(long, requires = "text")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, requires = "ckpt")]
    pub text: Option<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Prepare { raw, transcripts, out, corpus } => {
            let label = corpus.unwrap_or_else(|| {
                out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "corpus".into())
            });
            let r = corpus::ingest(&raw, &transcripts, &out, &label)?;
            println!(
                "{}: {} utterances ({}), {} skipped, {} rejected",
                label,
                r.manifest.len(),
                r.manifest.script,
                r.skipped.len(),
                r.rejected.len()
            );
            for (p, why) in &r.skipped {
                println!("skipped {}: {why}", p.display());
            }
            for line in &r.rejected {
                println!("rejected transcript line {line}: empty text");
            }
            if r.manifest.is_empty() {
                return Err(Error::Corpus("no usable utterances".into()));
            }
            if !r.skipped.is_empty() || !r.rejected.is_empty() {
                return Err(Error::Corpus(format!(
                    "{} item(s) skipped or rejected",
                    r.skipped.len() + r.rejected.len()
                )));
            }
        }
        Command::SynthCorpus { texts, client, out, voice, corpus } => {
            let text = std::fs::read_to_string(&texts).map_err(|e| Error::path(&texts, e))?;
            let lines: Vec<String> = text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect();
            let http;
            let client: &dyn TtsClient = if client == "stub" {
                &StubClient
            } else {
                http = HttpClient::new(&client);
                &http
            };
            let r = corpus::generate_synthetic(&lines, client, &voice, &out, &corpus, &RetryPolicy::default())?;
            println!("{}: {} utterances, {} failed", corpus, r.manifest.len(), r.failures.len());
            for f in &r.failures {
                println!("failed #{} {:?} after {} attempts: {}", f.index, f.text, f.attempts, f.error);
            }
            if !r.failures.is_empty() {
                return Err(Error::Corpus(format!("{} synthesis request(s) failed", r.failures.len())));
            }
        }
        Command::Validate { manifest, vocab } => {
            let m = Manifest::load(&manifest)?;
            let v = vocab.map(Vocabulary::load).transpose()?;
            let r = corpus::validate(&m, v.as_ref());
            for c in &r.checks {
                println!("{:<9} {} passed, {} failed", c.name, c.passed, c.failed);
                for msg in &c.messages {
                    println!("  {msg}");
                }
            }
            if !r.is_clean() {
                return Err(Error::Corpus("validation found problems".into()));
            }
        }
        Command::Vocab { manifest, out } => {
            let m = Manifest::load(&manifest)?;
            let v = build_vocabulary(&m.texts(), m.script)?;
            v.save(&out)?;
            println!("{} symbols ({}), fingerprint {}", v.len(), v.script(), v.fingerprint());
        }
        Command::Train { plan } => {
            let mut p = StagePlan::load(&plan)?;
            if let Some(s) = seed {
                p.seed = s;
            }
            let (_, r) = run_stage(&p)?;
            print_stage(&r);
        }
        Command::Recipe { plans } => {
            let mut loaded = plans.iter().map(StagePlan::load).collect::<Result<Vec<_>>>()?;
            if let Some(s) = seed {
                for (i, p) in loaded.iter_mut().enumerate() {
                    p.seed = s.wrapping_add(i as u64);
                }
            }
            let (a, reports) = run_recipe(&loaded)?;
            for r in &reports {
                print_stage(r);
            }
            println!("provenance: {}", a.meta.provenance.iter().map(|e| e.fingerprint.as_str()).collect::<Vec<_>>().join(" -> "));
        }
        Command::Surgery { input, vocab, out } => {
            let a = ParameterArchive::load(&input)?;
            let v = Vocabulary::load(&vocab)?;
            let b = surgery_reset_embedding(&a, &v, seed.unwrap_or(0))?;
            b.save(&out)?;
            println!("embedding reset to {} symbols; wrote {}", v.len(), out.display());
        }
        Command::TrainVocoder(args) => train_vocoder(&args, seed.unwrap_or(0))?,
        Command::Infer(args) => run_infer(&args, seed.unwrap_or(0))?,
        Command::PlotAlign { source, out, scale } => {
            let att = match (source.matrix, source.ckpt, source.text) {
                (Some(path), _, _) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::path(&path, e))?;
                    let rows: Vec<Vec<f64>> = serde_json::from_str(&text)?;
                    crate::autodiff::Tensor::from_rows(&rows)?
                }
                (None, Some(ckpt), Some(text)) => synthesize_mel(&ckpt, &text, seed.unwrap_or(0))?.1.alignment,
                _ => return Err(Error::invalid("plot-align needs --matrix or --ckpt with --text")),
            };
            let img = plot_alignment(&att, &out, scale)?;
            println!("wrote {} ({}x{})", out.display(), img.width, img.height);
        }
        Command::PlotMel { input, out, scale } => {
            let mel = read_mel_or_wav(&input)?;
            let img = plot_spectrogram(&mel, &out, scale)?;
            println!("wrote {} ({}x{})", out.display(), img.width, img.height);
        }
        Command::MosReport { ratings, json } => {
            let r = aggregate_mos(&RatingSet::load(&ratings)?)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                print!("{}", r.render());
            }
        }
    }
    Ok(())
}

fn print_stage(r: &crate::training::StageReport) {
    let converged = match r.converged {
        Some(true) => "converged",
        Some(false) => "NOT converged",
        None => "no threshold",
    };
    println!(
        "{}: {} steps ({:?}), loss {:.4} -> {:.4}, {converged}; wrote {}",
        r.stage,
        r.steps,
        r.halt,
        r.initial_loss,
        r.final_loss,
        r.output.display()
    );
}

fn read_mel_or_wav(path: &Path) -> Result<MelSpectrogram> {
    let bytes = std::fs::read(path).map_err(|e| Error::path(path, e))?;
    if bytes.starts_with(b"RIFF") {
        mel_spectrogram(&load_wav(path)?, &MelFilterbank::standard())
    } else {
        MelSpectrogram::read_from(bytes.as_slice())
    }
}

/// Runs the acoustic model on `text`; returns the post-net spectrogram and the raw inference.
pub fn synthesize_mel(ckpt: &Path, text: &str, seed: u64) -> Result<(MelSpectrogram, crate::acoustic::Inference)> {
    let a = ParameterArchive::load(ckpt)?;
    let cfg = a.acoustic_config()?.clone();
    let vocab = a.vocabulary()?;
    let ids = encode(&normalize(text), &vocab)?.ids;
    let out = infer(&a.params, &cfg, &ids, ChaCha8Rng::seed_from_u64(seed))?;
    let mel = MelSpectrogram::new(out.post.data().to_vec(), out.frames(), &StftConfig::default())?;
    Ok((mel, out))
}

fn run_infer(args: &InferArgs, seed: u64) -> Result<()> {
    let (mel, out) = synthesize_mel(&args.ckpt, &args.text, seed)?;
    log::info!("decoded {} frames, halt {:?}", out.frames(), out.halt);
    let wav = match args.vocoder.as_slice() {
        [kind] if kind == "griffinlim" => griffin_lim(&mel, &MelFilterbank::standard(), args.gl_iters)?,
        [kind, ckpt] if kind == "flow" => {
            let v = ParameterArchive::load(ckpt)?;
            flow::synthesize(&v.params, v.flow_config()?, &mel, args.sigma, seed)?
        }
        other => {
            return Err(Error::invalid(format!(
                "--vocoder expects `griffinlim` or `flow CKPT`, got {other:?}"
            )))
        }
    };
    save_wav(&wav, &args.out)?;
    if let Some(p) = &args.align_pgm {
        plot_alignment(&out.alignment, p, args.scale)?;
    }
    if let Some(p) = &args.mel_pgm {
        plot_spectrogram(&mel, p, args.scale)?;
    }
    if let Some(p) = &args.mel_out {
        mel.save(p)?;
    }
    println!(
        "wrote {} ({} samples, {} frames, halted by {:?})",
        args.out.display(),
        wav.len(),
        out.frames(),
        out.halt
    );
    Ok(())
}

fn train_vocoder(args: &TrainVocoderArgs, seed: u64) -> Result<()> {
    let cfg = match args.config.as_str() {
        "default" => FlowConfig::default(),
        "toy" => FlowConfig::toy(),
        other => return Err(Error::invalid(format!("unknown flow config {other:?} (default|toy)"))),
    };
    let m = Manifest::load(&args.manifest)?;
    let fb = MelFilterbank::standard();
    let mut segments = Vec::new();
    for e in &m.entries {
        let w = load_wav(m.audio_path(e))?;
        let mel = mel_spectrogram(&w, &fb)?;
        segments.extend(FlowSegment::split(&cfg, &w, &mel, args.segment_frames)?);
    }
    if segments.is_empty() {
        return Err(Error::Corpus(format!(
            "no utterance is long enough for {}-frame segments",
            args.segment_frames
        )));
    }
    let mut params = flow::init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let settings = AdamSettings::with_lr(args.lr);
    let r = flow::fit_segments(&mut params, &cfg, &segments, args.steps, args.batch_size, &settings, seed)?;
    let mut a = ParameterArchive::vocoder(params, &cfg, "vocoder", seed)?;
    a.meta.step_count = args.steps as u64;
    a.save(&args.out)?;
    let first = r.losses.first().copied().unwrap_or(f64::NAN);
    let last = r.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "vocoder: {} segments, {} steps, nll {first:.4} -> {last:.4}, {} rejected; wrote {}",
        segments.len(),
        args.steps,
        r.rejected_steps,
        args.out.display()
    );
    Ok(())
}
