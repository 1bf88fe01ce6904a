//! The desk-scale datasets of one experiment: a pretraining corpus, the mixed aggregation
//! set, the alignment set and held-out evaluation sets, all sharing one fact world.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Rng;

use super::alignment::{gen_alignment_excluding, plain_extraction};
use super::knowledge::{invented_word, FactTable, DEFAULT_FACTS};
use super::sample::{Sample, TaskTag};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSizes {
    pub mka_knowledge: usize,
    pub mka_alignment: usize,
    pub da_alignment: usize,
    pub eval_per_task: usize,
    /// Plain-format extraction sentences in the pretraining corpus.
    pub pretrain_extraction: usize,
    /// Copies of each fact statement in the pretraining corpus.
    pub statement_repeats: usize,
    /// Unlettered questions per fact in the pretraining corpus.
    pub open_questions_per_fact: usize,
    pub pretrain_heldout: usize,
    /// Span-copying drills in the pretraining corpus.
    pub copy_drills: usize,
    /// Lettered questions in the pretraining corpus, disjoint from every other question.
    pub pretrain_questions: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        Self {
            mka_knowledge: 2000,
            mka_alignment: 2000,
            da_alignment: 2000,
            eval_per_task: 200,
            pretrain_extraction: 20000,
            statement_repeats: 3,
            open_questions_per_fact: 5,
            pretrain_heldout: 200,
            copy_drills: 1000,
            pretrain_questions: 4000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub facts: FactTable,
    pub pretrain: Vec<Sample>,
    pub pretrain_heldout: Vec<Sample>,
    /// Knowledge questions followed by alignment samples.
    pub mka: Vec<Sample>,
    pub da: Vec<Sample>,
    pub eval_knowledge: Vec<Sample>,
    pub eval_alignment: Vec<Sample>,
}

/// Builds every split from one seed. Knowledge questions are split by question identity
/// and extraction sentences by sentence identity, so no evaluation item is trained on.
pub fn build_corpus(sizes: &CorpusSizes, seed: u64) -> Result<Corpus> {
    let facts = FactTable::generate(DEFAULT_FACTS, seed);
    let all: Vec<usize> = (0..facts.len()).collect();
    let root = Rng::new(seed).substream("corpus");

    let mut questions = facts.questions(
        &all,
        sizes.mka_knowledge + sizes.eval_per_task + sizes.pretrain_questions,
        &mut root.substream("questions"),
    )?;
    let lettered = questions.split_off(sizes.mka_knowledge + sizes.eval_per_task);
    let eval_knowledge = questions.split_off(sizes.mka_knowledge);

    let eval_alignment = gen_alignment_excluding(sizes.eval_per_task, seed ^ 0xe7a1, &HashSet::new())?;
    let mut seen: HashSet<String> = eval_alignment.iter().map(|s| s.input.clone()).collect();
    let train_alignment = gen_alignment_excluding(sizes.mka_alignment.max(sizes.da_alignment), seed, &seen)?;
    seen.extend(train_alignment.iter().map(|s| s.input.clone()));
    let plain = gen_alignment_excluding(
        sizes.pretrain_extraction + sizes.pretrain_heldout,
        seed ^ 0x9e37,
        &seen,
    )?;

    let mut pretrain: Vec<Sample> = Vec::new();
    for _ in 0..sizes.statement_repeats {
        pretrain.extend((0..facts.len()).map(|i| facts.statement(i)));
    }
    let mut open_rng = root.substream("open");
    for _ in 0..sizes.open_questions_per_fact {
        pretrain.extend((0..facts.len()).map(|i| facts.open_question(i, &mut open_rng)));
    }
    pretrain.extend(lettered);
    pretrain.extend(plain[..sizes.pretrain_extraction].iter().map(plain_extraction));
    let mut copy_rng = root.substream("copy");
    pretrain.extend((0..sizes.copy_drills).map(|_| copy_drill(&mut copy_rng)));
    let pretrain_heldout = plain[sizes.pretrain_extraction..]
        .iter()
        .map(plain_extraction)
        .collect();

    let mut mka = questions;
    mka.extend_from_slice(&train_alignment[..sizes.mka_alignment]);
    let da = train_alignment[..sizes.da_alignment].to_vec();

    Ok(Corpus {
        facts,
        pretrain,
        pretrain_heldout,
        mka,
        da,
        eval_knowledge,
        eval_alignment,
    })
}

/// `repeat: w1 w2 ..` → `w1 w2 ..` over invented words, some wrapped in brackets and
/// joined by assorted punctuation, so every printable delimiter has a trained embedding.
fn copy_drill(rng: &mut Rng) -> Sample {
    const WRAP: [(&str, &str); 3] = [("[", "]"), ("(", ")"), ("<", ">")];
    const JOIN: [&str; 4] = [" ", ", ", "; ", ":"];
    let n = 1 + rng.below(4);
    let mut text = String::new();
    for i in 0..n {
        if i > 0 {
            text.push_str(JOIN[rng.below(JOIN.len())]);
        }
        let syllables = 1 + rng.below(2);
        let word = invented_word(rng, syllables);
        if rng.below(2) == 0 {
            let (open, close) = WRAP[rng.below(WRAP.len())];
            text.push_str(&format!("{open}{word}{close}"));
        } else {
            text.push_str(&word);
        }
    }
    Sample::new(format!("repeat: {text}"), text, TaskTag::Alignment)
}
