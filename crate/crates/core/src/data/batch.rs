//! Padded batches of `BOS · input · SEP · target · EOS` rows and their packed view.

use crate::error::{Error, Result};

use super::sample::Sample;
use super::tokenizer::{Tokenizer, BOS, EOS, PAD, SEP};

/// Right-padded token rows with a loss mask over target bytes and EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// `rows × width` ids, padded with `PAD`.
    pub ids: Vec<Vec<u32>>,
    /// True exactly on target bytes and the closing EOS.
    pub loss_mask: Vec<Vec<bool>>,
    /// Unpadded length of each row.
    pub lengths: Vec<usize>,
    pub width: usize,
}

/// Next-token view of a batch: padding removed, rows concatenated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packed<'a> {
    pub seqs: Vec<&'a [u32]>,
    /// Next token for every packed position.
    pub targets: Vec<usize>,
    /// Whether that position contributes to the loss.
    pub mask: Vec<bool>,
}

/// Token ids of one training row and its loss mask.
pub fn encode_sample(sample: &Sample, tok: &Tokenizer) -> (Vec<u32>, Vec<bool>) {
    let input = tok.encode(&sample.input);
    let target = tok.encode(&sample.target);
    let mut ids = Vec::with_capacity(input.len() + target.len() + 3);
    ids.push(BOS);
    ids.extend(&input);
    ids.push(SEP);
    let mut mask = vec![false; ids.len()];
    ids.extend(&target);
    ids.push(EOS);
    mask.resize(ids.len(), true);
    (ids, mask)
}

/// Prompt prefix `BOS · input · SEP` used for generation and scoring.
pub fn encode_prompt(input: &str, tok: &Tokenizer) -> Vec<u32> {
    let mut ids = vec![BOS];
    ids.extend(tok.encode(input));
    ids.push(SEP);
    ids
}

pub fn build_batch(samples: &[Sample], tok: &Tokenizer, max_len: usize) -> Result<Batch> {
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let (ids, mask) = encode_sample(s, tok);
        if ids.len() > max_len {
            return Err(Error::Truncation {
                len: ids.len(),
                max_len,
            });
        }
        rows.push((ids, mask));
    }
    let width = rows.iter().map(|(ids, _)| ids.len()).max().unwrap_or(0);
    let mut batch = Batch {
        ids: Vec::with_capacity(rows.len()),
        loss_mask: Vec::with_capacity(rows.len()),
        lengths: Vec::with_capacity(rows.len()),
        width,
    };
    for (mut ids, mut mask) in rows {
        batch.lengths.push(ids.len());
        ids.resize(width, PAD);
        mask.resize(width, false);
        batch.ids.push(ids);
        batch.loss_mask.push(mask);
    }
    Ok(batch)
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    /// Number of loss-bearing tokens.
    pub fn target_tokens(&self) -> usize {
        self.loss_mask.iter().flatten().filter(|m| **m).count()
    }

    /// Drops padding and aligns every position with the token it must predict.
    /// The final position of each row predicts nothing.
    pub fn packed(&self) -> Packed<'_> {
        let mut seqs = Vec::with_capacity(self.rows());
        let mut targets = Vec::new();
        let mut mask = Vec::new();
        for ((ids, m), &len) in self.ids.iter().zip(&self.loss_mask).zip(&self.lengths) {
            seqs.push(&ids[..len]);
            for t in 0..len {
                if t + 1 < len {
                    targets.push(ids[t + 1] as usize);
                    mask.push(m[t + 1]);
                } else {
                    targets.push(0);
                    mask.push(false);
                }
            }
        }
        Packed {
            seqs,
            targets,
            mask,
        }
    }
}
