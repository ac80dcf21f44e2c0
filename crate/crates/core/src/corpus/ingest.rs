use std::path::{Path, PathBuf};

use super::manifest::{Manifest, ManifestEntry};
use crate::dsp::{load_wav_any, save_wav, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::text::{detect_script, normalize};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Relative location of the `index`-th prepared utterance of `corpus`.
pub fn prepared_path(corpus: &str, index: usize) -> PathBuf {
    Path::new("prepared").join(corpus).join(format!("{index:05}.wav"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub manifest: Manifest,
    /// Unreadable audio, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
    /// Transcript lines rejected for empty text, by 1-based line number.
    pub rejected: Vec<usize>,
}

/// One `relative_path<TAB>text` line.
pub fn parse_transcripts(text: &str) -> Result<Vec<(usize, PathBuf, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (path, transcript) = line
            .split_once('\t')
            .ok_or_else(|| Error::Corpus(format!("transcript line {}: expected path<TAB>text", i + 1)))?;
        out.push((i + 1, PathBuf::from(path), transcript.to_string()));
    }
    Ok(out)
}

/// Canonicalizes a raw corpus: every readable file is downmixed, resampled to
/// 16 kHz and written as 16-bit PCM under `out/prepared/<corpus>/`; the
/// manifest goes to `out/manifest.jsonl`.
pub fn ingest(raw_dir: &Path, transcripts: &Path, out_dir: &Path, corpus: &str) -> Result<IngestReport> {
    if corpus.is_empty() || corpus.contains(['/', '\\']) {
        return Err(Error::Corpus(format!("invalid corpus label {corpus:?}")));
    }
    let text = std::fs::read_to_string(transcripts).map_err(|e| Error::path(transcripts, e))?;
    let lines = parse_transcripts(&text)?;
    let prepared = out_dir.join("prepared").join(corpus);
    std::fs::create_dir_all(&prepared).map_err(|e| Error::path(&prepared, e))?;

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    let mut rejected = Vec::new();
    for (line_no, rel, raw_text) in lines {
        let text = normalize(&raw_text);
        if text.is_empty() {
            log::warn!("transcript line {line_no}: empty text, rejected");
            rejected.push(line_no);
            continue;
        }
        let src = raw_dir.join(&rel);
        let w = match load_wav_any(&src) {
            Ok(w) => w,
            Err(e) => {
                log::warn!("skipping {}: {e}", src.display());
                skipped.push((rel, e.to_string()));
                continue;
            }
        };
        let dest = prepared_path(corpus, entries.len());
        save_wav(&w, out_dir.join(&dest))?;
        entries.push(ManifestEntry {
            audio: dest,
            text,
            duration: w.len() as f64 / SAMPLE_RATE as f64,
        });
    }
    let script = detect_script(&entries.iter().map(|e| e.text.as_str()).collect::<Vec<_>>());
    let manifest = Manifest {
        corpus: corpus.to_string(),
        script,
        entries,
        root: out_dir.to_path_buf(),
    };
    if !manifest.is_empty() {
        manifest.save(out_dir.join(MANIFEST_FILE))?;
    }
    Ok(IngestReport {
        manifest,
        skipped,
        rejected,
    })
}
