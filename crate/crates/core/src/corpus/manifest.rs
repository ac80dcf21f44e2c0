use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::Script;

/// One labelled utterance. `audio` is stored relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub audio: PathBuf,
    pub text: String,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Record<'a> {
    corpus: &'a str,
    script: Script,
    audio: &'a Path,
    text: &'a str,
    duration: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct OwnedRecord {
    corpus: String,
    script: Script,
    audio: PathBuf,
    text: String,
    duration: f64,
}

/// Corpus listing. On disk: UTF-8 JSON lines, one utterance per line, each
/// carrying the corpus and script labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub corpus: String,
    pub script: Script,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative audio paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(corpus: impl Into<String>, script: Script, root: impl Into<PathBuf>) -> Self {
        Self {
            corpus: corpus.into(),
            script,
            entries: Vec::new(),
            root: root.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.text.as_str()).collect()
    }

    pub fn audio_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.audio)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let r = Record {
                corpus: &self.corpus,
                script: self.script,
                audio: &e.audio,
                text: &e.text,
                duration: e.duration,
            };
            out.push_str(&serde_json::to_string(&r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses JSON lines; audio paths resolve against `root`. Blank lines are skipped.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut labels: Option<(String, Script)> = None;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: OwnedRecord = serde_json::from_str(line)
                .map_err(|e| Error::Corpus(format!("manifest line {}: {e}", i + 1)))?;
            match &labels {
                None => labels = Some((r.corpus.clone(), r.script)),
                Some((c, s)) if *c != r.corpus || *s != r.script => {
                    return Err(Error::Corpus(format!(
                        "manifest line {}: labels {}/{} differ from {c}/{s}",
                        i + 1,
                        r.corpus,
                        r.script
                    )))
                }
                Some(_) => {}
            }
            entries.push(ManifestEntry {
                audio: r.audio,
                text: r.text,
                duration: r.duration,
            });
        }
        let (corpus, script) = labels.ok_or_else(|| Error::Corpus("manifest is empty".into()))?;
        Ok(Self {
            corpus,
            script,
            entries,
            root: root.into(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::path(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::path(path, e))
    }

    /// Loads a manifest; relative audio paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::path(path, e))?;
        let mut text = String::new();
        for line in std::io::BufReader::new(f).lines() {
            text.push_str(&line.map_err(|e| Error::path(path, e))?);
            text.push('\n');
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }
}
