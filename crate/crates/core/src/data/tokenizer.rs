//! Byte-level tokenizer: ids 0–255 are raw UTF-8 bytes, 256–259 are specials.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const SEP: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tokenizer;

/// Decoded text plus whether special ids were encountered (they decode to nothing).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub text: String,
    pub had_specials: bool,
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text)
    }

    pub fn decode(&self, ids: &[u32]) -> Decoded {
        detokenize(ids)
    }
}

pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

pub fn detokenize_bytes(ids: &[u32]) -> (Vec<u8>, bool) {
    let mut flagged = false;
    let bytes = ids
        .iter()
        .filter_map(|&id| {
            if id < 256 {
                Some(id as u8)
            } else {
                flagged = true;
                None
            }
        })
        .collect();
    (bytes, flagged)
}

pub fn detokenize(ids: &[u32]) -> Decoded {
    let (bytes, had_specials) = detokenize_bytes(ids);
    Decoded {
        text: String::from_utf8_lossy(&bytes).into_owned(),
        had_specials,
    }
}
