use std::io::Read;
use std::path::Path;
use std::time::Duration;

use serde::Serialize;

use super::ingest::{prepared_path, MANIFEST_FILE};
use super::manifest::{Manifest, ManifestEntry};
use crate::dsp::{decode_wav, save_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::text::{normalize, Script};

pub const STUB_SEGMENT_SECS: f64 = 0.1;
pub const STUB_FADE_SECS: f64 = 0.005;
pub const STUB_AMPLITUDE: f64 = 0.3;

/// Frequency the stub voice uses for codepoint `c`.
pub fn stub_frequency(c: char) -> f64 {
    200.0 + (c as u32 % 64) as f64 * 20.0
}

/// Deterministic stand-in voice: 100 ms of sine per codepoint of the
/// normalized text, with a 5 ms linear cross-fade into the next segment at
/// the end of each segment (so the length is exactly `n · 1600` samples).
pub fn stub_tts(text: &str) -> Result<Waveform> {
    let text = normalize(text);
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Err(Error::invalid("stub TTS needs non-empty text"));
    }
    let rate = SAMPLE_RATE as f64;
    let seg = (STUB_SEGMENT_SECS * rate).round() as usize;
    let fade = (STUB_FADE_SECS * rate).round() as usize;
    let sine = |c: char, n: usize| STUB_AMPLITUDE * (2.0 * std::f64::consts::PI * stub_frequency(c) * n as f64 / rate).sin();
    let mut samples = Vec::with_capacity(chars.len() * seg);
    for (i, &c) in chars.iter().enumerate() {
        for p in 0..seg {
            let n = i * seg + p;
            let mut s = sine(c, n);
            if let Some(&next) = chars.get(i + 1) {
                if p >= seg - fade {
                    let a = (p + 1 - (seg - fade)) as f64 / (fade + 1) as f64;
                    s = (1.0 - a) * s + a * sine(next, n);
                }
            }
            samples.push(s);
        }
    }
    Waveform::new(samples, SAMPLE_RATE)
}

/// Source TTS treated as a black box.
pub trait TtsClient: Sync {
    fn synthesize(&self, text: &str, voice: &str) -> Result<Waveform>;
}

pub struct StubClient;

impl TtsClient for StubClient {
    fn synthesize(&self, text: &str, _voice: &str) -> Result<Waveform> {
        stub_tts(text)
    }
}

/// `POST {base}/synthesize` with JSON `{text, voice}`; the response body is a WAV file.
pub struct HttpClient {
    base: String,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct SynthesizeRequest<'a> {
    text: &'a str,
    voice: &'a str,
}

impl HttpClient {
    pub fn new(base_url: &str) -> Self {
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(60)).build(),
        }
    }
}

impl TtsClient for HttpClient {
    fn synthesize(&self, text: &str, voice: &str) -> Result<Waveform> {
        let url = format!("{}/synthesize", self.base);
        let body = serde_json::to_vec(&SynthesizeRequest { text, voice })?;
        let resp = self
            .agent
            .post(&url)
            .set("Content-Type", "application/json")
            .send_bytes(&body)
            .map_err(|e| Error::Client(format!("{url}: {e}")))?;
        let mut bytes = Vec::new();
        resp.into_reader()
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Client(format!("{url}: {e}")))?;
        decode_wav(&bytes).map_err(|e| Error::Client(format!("{url}: bad audio: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub base_delay: Duration,
    /// Requests in flight at once.
    pub parallelism: usize,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFailure {
    pub index: usize,
    pub text: String,
    pub attempts: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthReport {
    pub manifest: Manifest,
    pub failures: Vec<SynthFailure>,
}

fn with_retries(client: &dyn TtsClient, text: &str, voice: &str, policy: &RetryPolicy) -> std::result::Result<Waveform, (u32, String)> {
    let mut delay = policy.base_delay;
    let mut last = String::new();
    for attempt in 1..=policy.attempts.max(1) {
        match client.synthesize(text, voice) {
            Ok(w) => return Ok(w),
            Err(e) => {
                last = e.to_string();
                log::warn!("synthesis attempt {attempt} failed for {text:?}: {last}");
                if attempt < policy.attempts {
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }
    Err((policy.attempts.max(1), last))
}

/// Builds a synthetic corpus from `texts`. Requests go out in bounded
/// batches; the manifest keeps request order. Items failing every retry
/// are recorded and excluded; the run fails only if more than half fail.
pub fn generate_synthetic(
    texts: &[String],
    client: &dyn TtsClient,
    voice: &str,
    out_dir: &Path,
    corpus: &str,
    policy: &RetryPolicy,
) -> Result<SynthReport> {
    let normalized: Vec<String> = texts.iter().map(|t| normalize(t)).filter(|t| !t.is_empty()).collect();
    if normalized.is_empty() {
        return Err(Error::Corpus("no non-empty texts to synthesize".into()));
    }
    let prepared = out_dir.join("prepared").join(corpus);
    std::fs::create_dir_all(&prepared).map_err(|e| Error::path(&prepared, e))?;

    let mut results = Vec::with_capacity(normalized.len());
    for chunk in normalized.chunks(policy.parallelism.max(1)) {
        results.extend(crate::parallel::map_slice(chunk, |t| with_retries(client, t, voice, policy)));
    }
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (index, (text, r)) in normalized.iter().zip(results).enumerate() {
        match r {
            Ok(w) => {
                let dest = prepared_path(corpus, entries.len());
                save_wav(&w, out_dir.join(&dest))?;
                entries.push(ManifestEntry {
                    audio: dest,
                    text: text.clone(),
                    duration: w.len() as f64 / SAMPLE_RATE as f64,
                });
            }
            Err((attempts, error)) => failures.push(SynthFailure {
                index,
                text: text.clone(),
                attempts,
                error,
            }),
        }
    }
    if failures.len() * 2 > normalized.len() {
        return Err(Error::Corpus(format!(
            "{} of {} synthesis requests failed",
            failures.len(),
            normalized.len()
        )));
    }
    let script = crate::text::detect_script(&entries.iter().map(|e| e.text.as_str()).collect::<Vec<_>>());
    let manifest = Manifest {
        corpus: corpus.to_string(),
        script: if entries.is_empty() { Script::Mixed } else { script },
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(SynthReport { manifest, failures })
}
