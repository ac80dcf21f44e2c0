use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ratings an utterance needs before it counts towards a system's score.
pub const MIN_RATINGS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub utterance_id: String,
    pub listener_id: String,
    pub score: u8,
    pub system: String,
}

/// Listening-test scores on the 1–5 scale.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RatingSet {
    pub records: Vec<Rating>,
}

impl RatingSet {
    pub fn new(records: Vec<Rating>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if !(1..=5).contains(&r.score) {
                return Err(Error::Ratings(format!("record {}: score {} outside 1..=5", i + 1, r.score)));
            }
            if !seen.insert((&r.system, &r.utterance_id, &r.listener_id)) {
                return Err(Error::Ratings(format!(
                    "record {}: listener {} rated {}/{} twice",
                    i + 1,
                    r.listener_id,
                    r.system,
                    r.utterance_id
                )));
            }
        }
        Ok(Self { records })
    }

    /// CSV with header `utterance_id,listener_id,score,system`.
    pub fn from_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let headers = reader.headers()?.clone();
        let expected = ["utterance_id", "listener_id", "score", "system"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Ratings(format!(
                "header must be {}, found {}",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut records = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row?;
            let line = i + 2;
            let score_text = &row[2];
            let score: u8 = score_text
                .parse()
                .map_err(|_| Error::Ratings(format!("line {line}: score {score_text:?} is not an integer in 1..=5")))?;
            records.push(Rating {
                utterance_id: row[0].to_string(),
                listener_id: row[1].to_string(),
                score,
                system: row[3].to_string(),
            });
        }
        Self::new(records)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::path(path, e))?;
        Self::from_csv(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemScore {
    pub system: String,
    pub mean: f64,
    /// Population standard deviation over the included ratings.
    pub std: f64,
    pub ratings: usize,
    pub utterances: usize,
}

/// An utterance left out of a system's score for having too few ratings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Exclusion {
    pub system: String,
    pub utterance_id: String,
    pub ratings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MosReport {
    pub systems: Vec<SystemScore>,
    pub excluded: Vec<Exclusion>,
    pub total_records: usize,
    pub included_records: usize,
}

/// `"M.MM ± S.SS"`.
pub fn format_mos(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.2}")
}

/// Mean and population standard deviation per system over every rating of
/// its sufficiently rated utterances. Systems appear in first-seen order.
pub fn aggregate_mos(set: &RatingSet) -> Result<MosReport> {
    if set.records.is_empty() {
        return Err(Error::Ratings("no ratings".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut by_utt: BTreeMap<(&str, &str), Vec<u8>> = BTreeMap::new();
    for r in &set.records {
        if !order.contains(&r.system.as_str()) {
            order.push(&r.system);
        }
        by_utt.entry((&r.system, &r.utterance_id)).or_default().push(r.score);
    }
    let mut systems = Vec::new();
    let mut excluded = Vec::new();
    let mut included_records = 0;
    for system in order {
        let mut scores = Vec::new();
        let mut utterances = 0;
        for ((_, utt), s) in by_utt.range((system, "")..).take_while(|((sys, _), _)| *sys == system) {
            if s.len() < MIN_RATINGS {
                excluded.push(Exclusion {
                    system: system.to_string(),
                    utterance_id: utt.to_string(),
                    ratings: s.len(),
                });
            } else {
                utterances += 1;
                scores.extend(s.iter().map(|&x| x as f64));
            }
        }
        if scores.is_empty() {
            continue;
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        included_records += scores.len();
        systems.push(SystemScore {
            system: system.to_string(),
            mean,
            std: var.sqrt(),
            ratings: scores.len(),
            utterances,
        });
    }
    if systems.is_empty() {
        return Err(Error::Ratings(format!(
            "every utterance has fewer than {MIN_RATINGS} ratings; nothing to report"
        )));
    }
    Ok(MosReport {
        systems,
        excluded,
        total_records: set.records.len(),
        included_records,
    })
}

impl MosReport {
    /// Table-style text block: one `system  M.MM ± S.SS` row per system,
    /// followed by record totals and every exclusion.
    pub fn render(&self) -> String {
        let width = self.systems.iter().map(|s| s.system.chars().count()).max().unwrap_or(0).max("System".len());
        let mut out = String::new();
        let _ = writeln!(out, "# MOS on the 1-5 scale; ± is the population standard deviation over all included ratings");
        let _ = writeln!(out, "{:<width$}  MOS", "System");
        for s in &self.systems {
            let _ = writeln!(out, "{:<width$}  {}", s.system, format_mos(s.mean, s.std));
        }
        let excluded_records = self.total_records - self.included_records;
        let _ = writeln!(
            out,
            "# records: {} total, {} included, {} excluded",
            self.total_records, self.included_records, excluded_records
        );
        for e in &self.excluded {
            let _ = writeln!(
                out,
                "# excluded {}/{}: {} rating(s), fewer than {MIN_RATINGS}",
                e.system, e.utterance_id, e.ratings
            );
        }
        out
    }
}
