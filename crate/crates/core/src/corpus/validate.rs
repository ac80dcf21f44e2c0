use std::collections::BTreeSet;

use serde::Serialize;

use super::manifest::Manifest;
use crate::dsp::{load_wav, probe_wav, SAMPLE_RATE};
use crate::text::Vocabulary;

/// Allowed gap between a recorded duration and the audio length.
pub const DURATION_TOLERANCE_SECS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: usize,
    pub failed: usize,
    pub messages: Vec<String>,
}

impl CheckResult {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            passed: 0,
            failed: 0,
            messages: Vec::new(),
        }
    }

    fn record(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if ok {
            self.passed += 1;
        } else {
            self.failed += 1;
            self.messages.push(msg());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
    /// Codepoints outside the target vocabulary, in ascending order.
    pub uncovered: Vec<char>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.checks.iter().all(|c| c.failed == 0) && self.uncovered.is_empty()
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Checks every entry without modifying anything on disk: the audio exists
/// and is 16 kHz 16-bit PCM, durations match, texts are non-empty, and
/// (given a target vocabulary) every codepoint is covered.
pub fn validate(m: &Manifest, target: Option<&Vocabulary>) -> ValidationReport {
    let mut paths = CheckResult::new("path");
    let mut format = CheckResult::new("format");
    let mut duration = CheckResult::new("duration");
    let mut text = CheckResult::new("text");
    let mut uncovered = BTreeSet::new();
    for e in &m.entries {
        let path = m.audio_path(e);
        text.record(!e.text.trim().is_empty(), || format!("{}: empty transcript", e.audio.display()));
        if let Some(v) = target {
            uncovered.extend(e.text.chars().filter(|c| !v.contains(*c)));
        }
        let exists = path.is_file();
        paths.record(exists, || format!("missing audio file {}", path.display()));
        if !exists {
            continue;
        }
        let info = match probe_wav(&path) {
            Ok(info) => info,
            Err(err) => {
                format.record(false, || err.to_string());
                continue;
            }
        };
        if !info.is_canonical() {
            format.record(false, || {
                format!(
                    "{}: {} Hz, {} channel(s), {}-bit{}",
                    path.display(),
                    info.sample_rate_hz,
                    info.channels,
                    info.bits_per_sample,
                    if info.float { " float" } else { "" }
                )
            });
            continue;
        }
        match load_wav(&path) {
            Ok(w) => {
                format.record(true, String::new);
                let actual = w.len() as f64 / SAMPLE_RATE as f64;
                duration.record((actual - e.duration).abs() <= DURATION_TOLERANCE_SECS, || {
                    format!("{}: duration {} s recorded, {actual} s on disk", path.display(), e.duration)
                });
            }
            Err(err) => format.record(false, || err.to_string()),
        }
    }
    let mut checks = vec![paths, format, duration, text];
    let uncovered: Vec<char> = uncovered.into_iter().collect();
    if target.is_some() {
        let mut cov = CheckResult::new("coverage");
        cov.record(uncovered.is_empty(), || {
            let list: Vec<String> = uncovered.iter().map(|c| format!("{c:?} (U+{:04X})", *c as u32)).collect();
            format!("codepoints outside the target vocabulary: {}", list.join(", "))
        });
        checks.push(cov);
    }
    ValidationReport { checks, uncovered }
}
