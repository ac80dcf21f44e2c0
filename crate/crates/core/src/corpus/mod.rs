//! Corpus preparation: transcript ingestion into canonical 16 kHz audio,
//! synthetic corpus generation through a black-box TTS client, and
//! manifest validation.

mod ingest;
mod manifest;
mod synth;
mod validate;

pub use ingest::{ingest, parse_transcripts, prepared_path, IngestReport, MANIFEST_FILE};
pub use manifest::{Manifest, ManifestEntry};
pub use synth::{
    generate_synthetic, stub_frequency, stub_tts, HttpClient, RetryPolicy, StubClient, SynthFailure, SynthReport,
    TtsClient, STUB_AMPLITUDE, STUB_FADE_SECS, STUB_SEGMENT_SECS,
};
pub use validate::{validate, CheckResult, ValidationReport, DURATION_TOLERANCE_SECS};
