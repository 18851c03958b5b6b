//! The fixed symbolic vocabulary shared by the synthetic corpora and the
//! toy model (64 tokens). Ids 0..=10 are reserved control tokens; the rest
//! are plain symbols `s0..s52`.

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const YES: u32 = 2;
pub const NO: u32 = 3;
pub const PATCH_OPEN: u32 = 4;
pub const PATCH_CLOSE: u32 = 5;
pub const ASK_REVIEW: u32 = 6;
pub const GEN_COMMENT: u32 = 7;
pub const COMMENT_OPEN: u32 = 8;
pub const COMMENT_CLOSE: u32 = 9;
pub const GEN_REFINED: u32 = 10;

pub const SYMBOL_BASE: u32 = 11;
pub const N_SYMBOLS: usize = 53;
pub const VOCAB_SIZE: usize = SYMBOL_BASE as usize + N_SYMBOLS; // 64

const RESERVED_NAMES: [&str; SYMBOL_BASE as usize] = [
    "PAD",
    "EOS",
    "YES",
    "NO",
    "<PATCH>",
    "</PATCH>",
    "<Q:REVIEW?>",
    "<GEN:COMMENT>",
    "<COMMENT>",
    "</COMMENT>",
    "<GEN:REFINED>",
];

/// Id of plain symbol `s{index}`.
pub fn symbol(index: usize) -> u32 {
    assert!(index < N_SYMBOLS, "symbol index {index} out of range");
    SYMBOL_BASE + index as u32
}

pub fn token_name(id: u32) -> String {
    if (id as usize) < RESERVED_NAMES.len() {
        RESERVED_NAMES[id as usize].to_string()
    } else {
        format!("s{}", id - SYMBOL_BASE)
    }
}

pub fn token_id(word: &str) -> Option<u32> {
    if let Some(pos) = RESERVED_NAMES.iter().position(|&n| n == word) {
        return Some(pos as u32);
    }
    let idx: usize = word.strip_prefix('s')?.parse().ok()?;
    (idx < N_SYMBOLS).then(|| symbol(idx))
}

/// Encode a whitespace-separated symbol string; unknown words are an error.
pub fn encode_words(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|w| token_id(w).ok_or_else(|| Error::Data(format!("word '{w}' is not in the symbolic vocabulary"))))
        .collect()
}

/// Decode ids to token names (for the text metrics).
pub fn decode_tokens(ids: &[u32]) -> Vec<String> {
    ids.iter().map(|&id| token_name(id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_size_matches_toy_geometry() {
        assert_eq!(VOCAB_SIZE, 64);
        assert_eq!(token_name(symbol(N_SYMBOLS - 1)), "s52");
    }

    #[test]
    fn round_trip_names() {
        for id in 0..VOCAB_SIZE as u32 {
            assert_eq!(token_id(&token_name(id)), Some(id));
        }
        assert_eq!(token_id("s53"), None);
        assert_eq!(token_id("nonsense"), None);
    }

    #[test]
    fn encode_words_round_trip() {
        let ids = encode_words("s0 s12 s52").unwrap();
        assert_eq!(ids, vec![symbol(0), symbol(12), symbol(52)]);
        assert!(encode_words("s0 mystery").is_err());
    }
}
