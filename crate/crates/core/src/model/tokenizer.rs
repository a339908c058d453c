//! Hash tokenizer for instruction text.
//!
//! Text is lowercased and split on anything that is not alphanumeric; each
//! word is hashed (FNV-1a, 64-bit) into `vocab_size` buckets.

use alloc::string::String;
use alloc::vec::Vec;

pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Token ids of all sentences, concatenated in order.
pub fn token_ids<S: AsRef<str>>(sentences: &[S], vocab_size: usize) -> Vec<usize> {
    sentences
        .iter()
        .flat_map(|s| words(s.as_ref()))
        .map(|w| (fnv1a(w.as_bytes()) % vocab_size as u64) as usize)
        .collect()
}
