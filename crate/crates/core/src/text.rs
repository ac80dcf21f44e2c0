//! Grapheme vocabulary and text encoding. One symbol per Unicode codepoint.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
const RESERVED: usize = 2;
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Script {
    Roman,
    Devanagari,
    Mixed,
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Script::Roman => "roman",
            Script::Devanagari => "devanagari",
            Script::Mixed => "mixed",
        })
    }
}

impl FromStr for Script {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "roman" => Ok(Script::Roman),
            "devanagari" => Ok(Script::Devanagari),
            "mixed" => Ok(Script::Mixed),
            other => Err(Error::Vocabulary(format!("unknown script label {other:?}"))),
        }
    }
}

fn is_devanagari(c: char) -> bool {
    matches!(c as u32, 0x0900..=0x097F | 0xA8E0..=0xA8FF)
}

/// Script of the letters in `texts`: Devanagari, Roman (ASCII/Latin letters)
/// or Mixed when both or neither appear.
pub fn detect_script<S: AsRef<str>>(texts: &[S]) -> Script {
    let (mut deva, mut roman) = (false, false);
    for c in texts.iter().flat_map(|t| t.as_ref().chars()) {
        if is_devanagari(c) {
            deva = true;
        } else if c.is_alphabetic() {
            roman = true;
        }
    }
    match (deva, roman) {
        (true, false) => Script::Devanagari,
        (false, true) => Script::Roman,
        _ => Script::Mixed,
    }
}

/// NFC, whitespace runs collapsed to one space, ends trimmed.
pub fn normalize(text: &str) -> String {
    let composed: String = text.nfc().collect();
    composed.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Ordered symbol inventory. Index 0 is padding, 1 is end-of-sequence, and
/// graphemes follow in ascending codepoint order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
    script: Script,
}

/// Indices terminated by [`EOS`], plus how many codepoints were dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedText {
    pub ids: Vec<usize>,
    pub dropped: usize,
}

impl EncodedText {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Vocabulary {
    pub fn from_symbols(symbols: impl IntoIterator<Item = char>, script: Script) -> Result<Self> {
        let set: BTreeSet<char> = symbols.into_iter().collect();
        if set.is_empty() {
            return Err(Error::Vocabulary("no graphemes".into()));
        }
        let symbols: Vec<char> = set.into_iter().collect();
        let index = symbols.iter().enumerate().map(|(i, c)| (*c, i + RESERVED)).collect();
        Ok(Self { symbols, index, script })
    }

    /// Total size including the two reserved indices.
    pub fn len(&self) -> usize {
        self.symbols.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn script(&self) -> Script {
        self.script
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        id.checked_sub(RESERVED).and_then(|i| self.symbols.get(i).copied())
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    /// Serialized form: header line, then one codepoint per line.
    pub fn to_file_string(&self) -> String {
        let mut out = format!("#vocab v{FORMAT_VERSION} script={}\n", self.script);
        for c in &self.symbols {
            out.push(*c);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        let header = lines.next().unwrap_or_default();
        let rest = header
            .strip_prefix("#vocab v")
            .ok_or_else(|| Error::Vocabulary(format!("bad header {header:?}")))?;
        let (version, script) = rest
            .split_once(" script=")
            .ok_or_else(|| Error::Vocabulary(format!("bad header {header:?}")))?;
        if version.parse::<u32>().ok() != Some(FORMAT_VERSION) {
            return Err(Error::Vocabulary(format!("unsupported version {version:?}")));
        }
        let script: Script = script.parse()?;
        let mut symbols = Vec::new();
        for (n, line) in lines.enumerate() {
            let mut chars = line.chars();
            match (chars.next(), chars.next()) {
                (None, _) => continue,
                (Some(c), None) => symbols.push(c),
                _ => {
                    return Err(Error::Vocabulary(format!(
                        "line {}: expected one codepoint, got {line:?}",
                        n + 2
                    )))
                }
            }
        }
        let count = symbols.len();
        let v = Self::from_symbols(symbols, script)?;
        if v.symbols.len() != count {
            return Err(Error::Vocabulary("duplicate entries".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::path(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        Self::parse(&text)
    }

    /// First 16 hex digits of the SHA-256 of the serialized vocabulary.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Sorted unique codepoints of the corpus plus PAD/EOS.
pub fn build_vocabulary<S: AsRef<str>>(texts: &[S], script: Script) -> Result<Vocabulary> {
    if texts.is_empty() {
        return Err(Error::Vocabulary("empty corpus".into()));
    }
    Vocabulary::from_symbols(texts.iter().flat_map(|t| t.as_ref().chars()), script)
}

/// Codepoint-by-codepoint lookup with EOS appended. Unknown codepoints are
/// dropped and counted.
pub fn encode(text: &str, v: &Vocabulary) -> Result<EncodedText> {
    let mut ids = Vec::with_capacity(text.len() + 1);
    let mut dropped = 0;
    for c in text.chars() {
        match v.id(c) {
            Some(i) => ids.push(i),
            None => dropped += 1,
        }
    }
    if ids.is_empty() {
        return Err(Error::Vocabulary(format!(
            "text {text:?} has no in-vocabulary codepoints"
        )));
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} out-of-vocabulary codepoints from {text:?}");
    }
    ids.push(EOS);
    Ok(EncodedText { ids, dropped })
}

/// Inverse of [`encode`]; reserved indices are skipped.
pub fn decode(ids: &[usize], v: &Vocabulary) -> String {
    ids.iter().filter_map(|i| v.symbol(*i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn builds_sorted_inventory() {
        let v = build_vocabulary(&["abcab"], Script::Roman).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.symbols(), &['a', 'b', 'c']);
        assert_eq!(v.id('a'), Some(2));
        assert_eq!(v.symbol(PAD), None);
        assert_eq!(v.symbol(EOS), None);
    }

    #[test]
    fn devanagari_codepoints() {
        let v = build_vocabulary(&["नमस्ते"], Script::Devanagari).unwrap();
        assert_eq!(v.len() - 2, 6);
        let mut expected = vec!['न', 'म', 'स', '्', 'त', 'े'];
        expected.sort();
        assert_eq!(v.symbols(), &expected[..]);
        assert_eq!(detect_script(&["नमस्ते"]), Script::Devanagari);
        assert_eq!(detect_script(&["hello, world"]), Script::Roman);
        assert_eq!(detect_script(&["hi नम"]), Script::Mixed);
    }

    #[test]
    fn build_is_deterministic_and_rejects_empty() {
        let a = build_vocabulary(&["aa"], Script::Roman).unwrap();
        let b = build_vocabulary(&["aa"], Script::Roman).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert!(build_vocabulary::<&str>(&[], Script::Roman).is_err());
    }

    #[test]
    fn encode_examples() {
        let v = build_vocabulary(&["abcab"], Script::Roman).unwrap();
        assert_eq!(encode("aba", &v).unwrap().ids, vec![2, 3, 2, EOS]);
        assert!(encode("", &v).is_err());
        assert!(encode("xyz", &v).is_err());
        let e = encode("axb", &v).unwrap();
        assert_eq!((e.ids.clone(), e.dropped), (vec![2, 3, EOS], 1));
        assert_eq!(decode(&encode("cab", &v).unwrap().ids, &v), "cab");
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("a  b"), "a b");
        assert_eq!(normalize("  a\t\nb "), "a b");
        let nfd = "\u{0928}\u{093C}\u{0947}";
        assert_eq!(normalize(nfd), "\u{0929}\u{0947}");
        assert_eq!(normalize(&normalize(nfd)), normalize(nfd));
        let nfd_latin = "e\u{0301}";
        assert_eq!(normalize(nfd_latin), "\u{00e9}");
        assert_eq!(normalize(&normalize(nfd_latin)), normalize(nfd_latin));
    }

    #[test]
    fn file_round_trip() {
        let v = build_vocabulary(&["hello, world!", "नमस्ते"], Script::Mixed).unwrap();
        let text = v.to_file_string();
        assert!(text.starts_with("#vocab v1 script=mixed\n"));
        let back = Vocabulary::parse(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.fingerprint(), v.fingerprint());
        assert!(Vocabulary::parse("#vocab v9 script=roman\na\n").is_err());
        assert!(Vocabulary::parse("#vocab v1 script=roman\nab\n").is_err());
        assert!(Vocabulary::parse("#vocab v1 script=roman\na\na\n").is_err());
        assert!(Vocabulary::parse("a\nb\n").is_err());
    }

    #[test]
    fn fingerprints_differ_across_inventories() {
        let a = build_vocabulary(&["abc"], Script::Roman).unwrap();
        let b = build_vocabulary(&["abd"], Script::Roman).unwrap();
        let c = build_vocabulary(&["abc"], Script::Mixed).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    proptest! {
        #[test]
        fn order_insensitive(mut texts in prop::collection::vec("[a-zक-ह ]{1,12}", 1..6)) {
            let a = build_vocabulary(&texts, Script::Mixed).unwrap();
            texts.reverse();
            let b = build_vocabulary(&texts, Script::Mixed).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn encode_length_and_no_pad(texts in prop::collection::vec("[a-zA-Zअ-ह ,.!]{1,20}", 1..4), pick in 0usize..4) {
            let v = build_vocabulary(&texts, Script::Mixed).unwrap();
            let t = &texts[pick % texts.len()];
            let e = encode(t, &v).unwrap();
            prop_assert_eq!(e.len(), t.chars().count() + 1);
            prop_assert!(!e.ids.contains(&PAD));
            prop_assert_eq!(e.ids.iter().filter(|i| **i == EOS).count(), 1);
            prop_assert_eq!(*e.ids.last().unwrap(), EOS);
            prop_assert!(e.ids.iter().all(|i| *i < v.len()));
            prop_assert_eq!(&decode(&e.ids, &v), t);
        }

        #[test]
        fn normalize_idempotent(t in "\\PC{0,30}") {
            let once = normalize(&t);
            prop_assert_eq!(normalize(&once), once);
        }
    }
}
