//! Hashed bag-of-n-grams features.
//!
//! Text is lowercased and split into Unicode words (UAX #29). Each word
//! unigram is keyed as `"u\x1f" + word` and each adjacent pair as
//! `"b\x1f" + w1 + "\x1f" + w2`. Keys are hashed with 64-bit FNV-1a over
//! their UTF-8 bytes and the low `bits` bits select the feature index.
//! Counts accumulate without sign hashing.

use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

pub const DEFAULT_BITS: u32 = 18;
pub const MAX_BITS: u32 = 30;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

/// Sparse feature counts, sorted by index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureVector {
    bits: u32,
    entries: Vec<(u32, u32)>,
}

impl FeatureVector {
    pub fn empty(bits: u32) -> Self {
        FeatureVector {
            bits,
            entries: Vec::new(),
        }
    }

    /// Builds a vector from raw (index, count) pairs, merging repeats.
    pub fn from_pairs(bits: u32, pairs: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let mask = index_mask(bits);
        let mut entries: Vec<(u32, u32)> = pairs
            .into_iter()
            .filter(|&(_, c)| c > 0)
            .map(|(i, c)| (i & mask, c))
            .collect();
        entries.sort_unstable_by_key(|e| e.0);
        let mut merged: Vec<(u32, u32)> = Vec::with_capacity(entries.len());
        for (i, c) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += c,
                _ => merged.push((i, c)),
            }
        }
        FeatureVector {
            bits,
            entries: merged,
        }
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn entries(&self) -> &[(u32, u32)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: u32) -> u32 {
        self.entries
            .binary_search_by_key(&index, |e| e.0)
            .map(|i| self.entries[i].1)
            .unwrap_or(0)
    }
}

fn index_mask(bits: u32) -> u32 {
    if bits >= 32 {
        u32::MAX
    } else {
        (1u32 << bits) - 1
    }
}

pub fn unigram_index(word: &str, bits: u32) -> u32 {
    (fnv1a64(&[b"u\x1f", word.as_bytes()]) as u32) & index_mask(bits)
}

pub fn bigram_index(first: &str, second: &str, bits: u32) -> u32 {
    (fnv1a64(&[b"b\x1f", first.as_bytes(), b"\x1f", second.as_bytes()]) as u32) & index_mask(bits)
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .unicode_words()
        .map(str::to_string)
        .collect()
}

pub fn featurize(text: &str, bits: u32) -> FeatureVector {
    assert!(
        (1..=MAX_BITS).contains(&bits),
        "hash bits must be in 1..={MAX_BITS}"
    );
    let words = tokenize(text);
    let unigrams = words.iter().map(|w| (unigram_index(w, bits), 1));
    let bigrams = words
        .windows(2)
        .map(|p| (bigram_index(&p[0], &p[1], bits), 1));
    FeatureVector::from_pairs(bits, unigrams.chain(bigrams))
}
