//! Synthetic format-constrained extraction task. Entities are recognisable by
//! morphology; targets use a strict bracketed grammar.

use std::collections::HashSet;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tensor::Rng;

use super::knowledge::invented_word;
use super::sample::{Sample, TaskTag};

pub const NONE_TARGET: &str = "[NONE]";

/// Probability that a sentence carries no entity at all.
pub const EMPTY_SENTENCE_PROB: f64 = 0.1;
pub const MAX_ENTITIES: usize = 3;
/// Surface forms per entity type.
pub const LEXICON_SIZE: usize = 24;

const FILLER: [&str; 24] = [
    "the", "patient", "was", "given", "for", "with", "and", "after", "noted", "mild",
    "severe", "today", "then", "due", "to", "treated", "reports", "history", "of", "new",
    "week", "dose", "seen", "a",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EntityType {
    Drug,
    Disease,
    Gene,
}

impl EntityType {
    pub const ALL: [EntityType; 3] = [EntityType::Drug, EntityType::Disease, EntityType::Gene];

    pub fn tag(self) -> &'static str {
        match self {
            EntityType::Drug => "DRUG",
            EntityType::Disease => "DIS",
            EntityType::Gene => "GENE",
        }
    }

    fn generate(self, rng: &mut Rng) -> String {
        match self {
            EntityType::Drug => {
                let stem = invented_word(rng, 1);
                format!("{stem}{}", rng.choose(&["ine", "ol", "cin"]))
            }
            EntityType::Disease => {
                let stem = invented_word(rng, 1);
                format!("{stem}{}", rng.choose(&["itis", "osis", "emia"]))
            }
            EntityType::Gene => {
                let mut s: String = (0..3)
                    .map(|_| (b'A' + rng.below(26) as u8) as char)
                    .collect();
                s.push((b'1' + rng.below(9) as u8) as char);
                s
            }
        }
    }

    /// The fixed set of surface forms of this type, shared by every seed.
    pub fn lexicon(self) -> &'static [String] {
        static LEXICON: OnceLock<Vec<Vec<String>>> = OnceLock::new();
        let all = LEXICON.get_or_init(|| {
            let mut seen = HashSet::new();
            EntityType::ALL
                .iter()
                .map(|ty| {
                    let mut rng = Rng::new(0).substream(&format!("lexicon/{}", ty.tag()));
                    let mut names = Vec::with_capacity(LEXICON_SIZE);
                    while names.len() < LEXICON_SIZE {
                        let w = ty.generate(&mut rng);
                        if seen.insert(w.clone()) {
                            names.push(w);
                        }
                    }
                    names
                })
                .collect()
        });
        let i = EntityType::ALL.iter().position(|t| *t == self).expect("listed");
        &all[i]
    }
}

/// One `[TYPE:span]` item of an extraction target.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Span {
    pub label: String,
    pub text: String,
}

/// Renders spans in the bracketed grammar; an empty list renders as `[NONE]`.
pub fn format_spans(spans: &[Span]) -> String {
    if spans.is_empty() {
        return NONE_TARGET.to_string();
    }
    spans
        .iter()
        .map(|s| format!("[{}:{}]", s.label, s.text))
        .collect()
}

/// Strict parser for the bracketed grammar. Returns `None` on any deviation,
/// including trailing text or an empty span.
pub fn parse_spans(text: &str) -> Option<Vec<Span>> {
    if text == NONE_TARGET {
        return Some(Vec::new());
    }
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        rest = rest.strip_prefix('[')?;
        let close = rest.find(']')?;
        let item = &rest[..close];
        let (label, span) = item.split_once(':')?;
        if label.is_empty()
            || !label.bytes().all(|b| b.is_ascii_uppercase())
            || span.is_empty()
            || span.contains('[')
        {
            return None;
        }
        out.push(Span {
            label: label.to_string(),
            text: span.to_string(),
        });
        rest = &rest[close + 1..];
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}

fn sentence(rng: &mut Rng) -> Sample {
    let n_entities = if rng.uniform() < EMPTY_SENTENCE_PROB {
        0
    } else {
        1 + rng.below(MAX_ENTITIES)
    };
    let n_filler = 2 + rng.below(4);
    let mut words: Vec<String> = (0..n_filler).map(|_| rng.choose(&FILLER).to_string()).collect();
    let mut spans = Vec::with_capacity(n_entities);
    let mut used = HashSet::new();
    while spans.len() < n_entities {
        let ty = *rng.choose(&EntityType::ALL);
        let text = rng.choose(ty.lexicon()).clone();
        if used.insert(text.clone()) {
            spans.push(Span {
                label: ty.tag().to_string(),
                text,
            });
        }
    }
    // Insert entities at sorted positions so the target order is the reading order.
    let mut slots: Vec<usize> = (0..n_entities).map(|_| rng.below(words.len() + 1)).collect();
    slots.sort_unstable();
    for (k, (pos, span)) in slots.iter().zip(&spans).enumerate() {
        words.insert(pos + k, span.text.clone());
    }
    Sample::new(words.join(" "), format_spans(&spans), TaskTag::Alignment)
}

/// `n` extraction samples with pairwise-distinct sentences.
pub fn gen_alignment_task(n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Argument("n must be at least 1".into()));
    }
    gen_alignment_excluding(n, seed, &HashSet::new())
}

/// Like [`gen_alignment_task`] but never emits a sentence contained in `exclude`.
pub fn gen_alignment_excluding(
    n: usize,
    seed: u64,
    exclude: &HashSet<String>,
) -> Result<Vec<Sample>> {
    let mut rng = Rng::new(seed).substream("alignment");
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s = sentence(&mut rng);
        if !exclude.contains(&s.input) && seen.insert(s.input.clone()) {
            out.push(s);
        }
    }
    Ok(out)
}

/// Same sentence labelled in a plain format (`TYPE span; TYPE span` or `none`), used only
/// to pretrain the base model on the entity concept. The bracketed grammar is left for the
/// alignment data to teach.
pub fn plain_extraction(sample: &Sample) -> Sample {
    let spans = parse_spans(&sample.target).unwrap_or_default();
    let target = if spans.is_empty() {
        "none".to_string()
    } else {
        spans
            .iter()
            .map(|s| format!("{} {}", s.label, s.text))
            .collect::<Vec<_>>()
            .join("; ")
    };
    Sample::new(sample.input.clone(), target, TaskTag::Alignment)
}
