#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transfer_tts::corpus::{generate_synthetic, RetryPolicy, StubClient, MANIFEST_FILE};

pub fn english_phrases() -> Vec<String> {
    [
        "hello", "world", "green tea", "small cat", "open door", "red apple", "blue sky", "cold rain", "warm bread",
        "fast car", "good day", "new book", "big tree", "dark night", "soft bed", "old song", "hot soup", "tall man",
        "kind word", "bright sun",
    ]
    .map(String::from)
    .to_vec()
}

/// Distinct two- or three-syllable words over the consonants U+0915..U+0938
/// (so U+0939 never occurs), sorted.
pub fn devanagari_words(n: usize, seed: u64) -> Vec<String> {
    let consonants: Vec<char> = (0x0915..0x0939).filter_map(char::from_u32).collect();
    let vowel_signs = ["\u{093e}", "\u{093f}", "\u{0940}", "\u{0941}", "\u{0947}", "\u{094b}", ""];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words = BTreeSet::new();
    while words.len() < n {
        let syllables = rng.gen_range(2..=3);
        let word: String = (0..syllables)
            .map(|_| format!("{}{}", consonants.choose(&mut rng).unwrap(), vowel_signs.choose(&mut rng).unwrap()))
            .collect();
        words.insert(word);
    }
    words.into_iter().collect()
}

/// Synthesizes `texts` with the stub client into `dir/corpus` and returns the manifest path.
pub fn stub_corpus<S: AsRef<str>>(dir: &Path, corpus: &str, texts: &[S]) -> PathBuf {
    let out = dir.join(corpus);
    let texts: Vec<String> = texts.iter().map(|t| t.as_ref().to_string()).collect();
    generate_synthetic(&texts, &StubClient, "stub", &out, corpus, &RetryPolicy::default()).unwrap();
    out.join(MANIFEST_FILE)
}
