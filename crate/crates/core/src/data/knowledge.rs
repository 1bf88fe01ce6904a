//! Synthetic knowledge-intensive task: a seeded table of `(subject, relation, object)`
//! facts and four-option multiple-choice questions about it.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::tensor::Rng;

use super::sample::{option_letter, Sample, TaskTag};

pub const DEFAULT_FACTS: usize = 200;
pub const NUM_OPTIONS: usize = 4;

pub const RELATIONS: [&str; 5] = ["color", "food", "home", "tool", "pet"];

const OBJECTS: [[&str; 10]; 5] = [
    ["red", "blue", "green", "pink", "gray", "gold", "teal", "tan", "plum", "jade"],
    ["rice", "corn", "figs", "beans", "kelp", "nuts", "oats", "yams", "eggs", "pears"],
    ["cave", "hill", "lake", "reef", "marsh", "dune", "fjord", "glen", "cove", "moor"],
    ["axe", "saw", "awl", "adze", "hoe", "rake", "file", "vise", "drill", "pick"],
    ["cat", "dog", "owl", "newt", "frog", "crab", "moth", "eel", "yak", "wren"],
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Pronounceable invented word of `syllables` consonant-vowel pairs plus a final consonant.
pub(crate) fn invented_word(rng: &mut Rng, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*rng.choose(CONSONANTS) as char);
        w.push(*rng.choose(VOWELS) as char);
    }
    w.push(*rng.choose(CONSONANTS) as char);
    w
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fact {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

/// Seeded set of facts with unique `(subject, relation)` keys.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactTable {
    pub facts: Vec<Fact>,
}

impl FactTable {
    pub fn generate(n_facts: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed).substream("facts");
        let n_subjects = n_facts.div_ceil(RELATIONS.len());
        let mut seen = HashSet::new();
        let mut subjects = Vec::with_capacity(n_subjects);
        while subjects.len() < n_subjects {
            let w = invented_word(&mut rng, 2);
            if seen.insert(w.clone()) {
                subjects.push(w);
            }
        }
        let mut facts = Vec::with_capacity(n_facts);
        'outer: for s in &subjects {
            for (r, rel) in RELATIONS.iter().enumerate() {
                if facts.len() == n_facts {
                    break 'outer;
                }
                facts.push(Fact {
                    subject: s.clone(),
                    relation: rel.to_string(),
                    object: rng.choose(&OBJECTS[r]).to_string(),
                });
            }
        }
        Self { facts }
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    fn pool(&self, fact: &Fact) -> &'static [&'static str; 10] {
        let r = RELATIONS
            .iter()
            .position(|x| *x == fact.relation)
            .expect("relation from the fixed list");
        &OBJECTS[r]
    }

    /// Distinct ordered option lists per fact: `C(pool−1, 3)·4!`.
    pub fn questions_per_fact(&self) -> usize {
        let p = OBJECTS[0].len() - 1;
        p * (p - 1) * (p - 2) / 6 * 24
    }

    /// Plain statement of a fact, used as pretraining text.
    pub fn statement(&self, i: usize) -> Sample {
        let f = &self.facts[i];
        Sample::new(
            format!("{} {}", f.subject, f.relation),
            f.object.clone(),
            TaskTag::Knowledge,
        )
    }

    /// Unlettered question answered with the object itself, used as pretraining text.
    pub fn open_question(&self, i: usize, rng: &mut Rng) -> Sample {
        let q = self.question(i, rng);
        let options = q.options.expect("questions carry options");
        let fact = &self.facts[i];
        Sample::new(
            format!("{} {}? {}", fact.subject, fact.relation, options.join("/")),
            fact.object.clone(),
            TaskTag::Knowledge,
        )
    }

    /// `n` distinct multiple-choice questions about the facts listed in `fact_ids`.
    pub fn questions(&self, fact_ids: &[usize], n: usize, rng: &mut Rng) -> Result<Vec<Sample>> {
        let capacity = fact_ids.len() * self.questions_per_fact();
        if n > capacity || (n > 0 && fact_ids.is_empty()) {
            return Err(Error::Capacity {
                requested: n,
                capacity,
            });
        }
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let fi = *rng.choose(fact_ids);
            let q = self.question(fi, rng);
            if seen.insert(q.input.clone()) {
                out.push(q);
            }
        }
        Ok(out)
    }

    fn question(&self, fi: usize, rng: &mut Rng) -> Sample {
        let fact = &self.facts[fi];
        let mut distractors: Vec<&str> = self
            .pool(fact)
            .iter()
            .copied()
            .filter(|o| *o != fact.object)
            .collect();
        rng.shuffle(&mut distractors);
        let mut options: Vec<String> = distractors[..NUM_OPTIONS - 1]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let answer = rng.below(NUM_OPTIONS);
        options.insert(answer, fact.object.clone());
        let listed: Vec<String> = options
            .iter()
            .enumerate()
            .map(|(i, o)| format!("{}:{o}", option_letter(i)))
            .collect();
        Sample {
            input: format!("{} {}? {}", fact.subject, fact.relation, listed.join(" ")),
            target: option_letter(answer),
            task: TaskTag::Knowledge,
            options: Some(options),
        }
    }
}

/// Output of [`gen_knowledge_task`]: the questions and the world they were drawn from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeTask {
    pub facts: FactTable,
    pub samples: Vec<Sample>,
}

/// `n` multiple-choice questions over a default-size fact table.
pub fn gen_knowledge_task(n: usize, seed: u64) -> Result<KnowledgeTask> {
    if n == 0 {
        return Err(Error::Argument("n must be at least 1".into()));
    }
    let facts = FactTable::generate(DEFAULT_FACTS, seed);
    let all: Vec<usize> = (0..facts.len()).collect();
    let samples = facts.questions(&all, n, &mut Rng::new(seed).substream("questions"))?;
    Ok(KnowledgeTask { facts, samples })
}
