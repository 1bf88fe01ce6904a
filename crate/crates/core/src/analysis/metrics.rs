//! Task metrics: option-likelihood accuracy for multiple choice and micro-F1 over
//! greedy-decoded extraction output.

use std::collections::HashMap;

use crate::data::{encode_prompt, option_letter, parse_spans, Sample, Tokenizer, EOS};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, ToyModel};
use crate::tensor::{kernels, Real};

/// Sequences per packed forward during evaluation.
const EVAL_CHUNK: usize = 32;

/// Sum of `log p(target_t | prefix)` over the target tokens and the closing EOS of every
/// `(prompt, target)` pair.
pub fn target_log_likelihoods<T: Real>(
    model: &ToyModel<T>,
    pairs: &[(Vec<u32>, Vec<u32>)],
    opts: &ForwardOptions,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    let vocab = model.config.vocab_size;
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let seqs: Vec<Vec<u32>> = chunk
            .iter()
            .map(|(p, t)| {
                let mut s = p.clone();
                s.extend(t);
                s.push(EOS);
                s
            })
            .collect();
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
        let (logits, _) = model.forward_packed(&refs, opts)?;
        let data = logits.data();
        let mut offset = 0;
        for ((prompt, _), seq) in chunk.iter().zip(&seqs) {
            let mut ll = 0.0;
            for pos in prompt.len() - 1..seq.len() - 1 {
                let row = &data[(offset + pos) * vocab..(offset + pos + 1) * vocab];
                let lse = kernels::log_sum_exp(row);
                ll += (row[seq[pos + 1] as usize] - lse).as_f64();
            }
            out.push(ll);
            offset += seq.len();
        }
    }
    Ok(out)
}

/// Fraction of samples whose correct letter has the highest option likelihood.
pub fn eval_mc_accuracy<T: Real>(model: &ToyModel<T>, samples: &[Sample]) -> Result<f64> {
    eval_mc_accuracy_with(model, samples, &ForwardOptions::default())
}

pub fn eval_mc_accuracy_with<T: Real>(
    model: &ToyModel<T>,
    samples: &[Sample],
    opts: &ForwardOptions,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Metric("no samples to score".into()));
    }
    let mut pairs = Vec::new();
    let mut counts = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let opts = s
            .options
            .as_ref()
            .filter(|o| !o.is_empty())
            .ok_or_else(|| Error::Metric(format!("sample {i} has no options")))?;
        let prompt = encode_prompt(&s.input, &Tokenizer);
        for k in 0..opts.len() {
            pairs.push((prompt.clone(), Tokenizer.encode(&option_letter(k))));
        }
        counts.push(opts.len());
    }
    let scores = target_log_likelihoods(model, &pairs, opts)?;
    let mut correct = 0usize;
    let mut at = 0;
    for (s, &n) in samples.iter().zip(&counts) {
        let best = (0..n)
            .fold(0, |b, k| if scores[at + k] > scores[at + b] { k } else { b });
        if option_letter(best) == s.target {
            correct += 1;
        }
        at += n;
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Greedy continuation of each prompt until EOS, `max_new` tokens, or the context limit.
/// Special tokens other than EOS are decoded as empty markers.
pub fn greedy_decode<T: Real>(
    model: &ToyModel<T>,
    prompts: &[String],
    max_new: usize,
    opts: &ForwardOptions,
) -> Result<Vec<String>> {
    let vocab = model.config.vocab_size;
    let max_len = model.config.max_seq_len;
    let mut outputs = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(EVAL_CHUNK) {
        let mut seqs: Vec<Vec<u32>> = chunk.iter().map(|p| encode_prompt(p, &Tokenizer)).collect();
        let starts: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let mut live: Vec<bool> = seqs.iter().map(|s| s.len() < max_len).collect();
        for _ in 0..max_new {
            let active: Vec<usize> = (0..seqs.len()).filter(|&i| live[i]).collect();
            if active.is_empty() {
                break;
            }
            let refs: Vec<&[u32]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
            let (logits, _) = model.forward_packed(&refs, opts)?;
            let data = logits.data();
            let mut offset = 0;
            let mut next = Vec::with_capacity(active.len());
            for &i in &active {
                offset += seqs[i].len();
                let row = &data[(offset - 1) * vocab..offset * vocab];
                let arg = (0..vocab).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                next.push((i, arg as u32));
            }
            for (i, tok) in next {
                if tok == EOS {
                    live[i] = false;
                    continue;
                }
                seqs[i].push(tok);
                if seqs[i].len() >= max_len {
                    live[i] = false;
                }
            }
        }
        for (s, &st) in seqs.iter().zip(&starts) {
            outputs.push(Tokenizer.decode(&s[st..]).text);
        }
    }
    Ok(outputs)
}

/// Matched, predicted and gold `(type, span)` pair counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct F1Counts {
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl F1Counts {
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            return if self.gold == 0 { 1.0 } else { 0.0 };
        }
        self.matched as f64 / self.predicted as f64
    }

    pub fn recall(&self) -> f64 {
        if self.gold == 0 {
            return if self.predicted == 0 { 1.0 } else { 0.0 };
        }
        self.matched as f64 / self.gold as f64
    }

    /// Micro-F1; defined as 1 when neither side has any pair.
    pub fn f1(&self) -> f64 {
        if self.predicted == 0 && self.gold == 0 {
            return 1.0;
        }
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, o: F1Counts) {
        self.matched += o.matched;
        self.predicted += o.predicted;
        self.gold += o.gold;
    }
}

/// Multiset overlap of the parsed pairs. An unparseable prediction contributes no pairs.
pub fn f1_counts(prediction: &str, gold: &str) -> F1Counts {
    let gold = parse_spans(gold).unwrap_or_default();
    let pred = parse_spans(prediction).unwrap_or_default();
    let mut pool: HashMap<(&str, &str), usize> = HashMap::new();
    for g in &gold {
        *pool.entry((g.label.as_str(), g.text.as_str())).or_default() += 1;
    }
    let mut matched = 0;
    for p in &pred {
        if let Some(n) = pool.get_mut(&(p.label.as_str(), p.text.as_str())) {
            if *n > 0 {
                *n -= 1;
                matched += 1;
            }
        }
    }
    F1Counts {
        matched,
        predicted: pred.len(),
        gold: gold.len(),
    }
}

/// Micro-F1 over a list of `(prediction, gold)` strings.
pub fn micro_f1<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> F1Counts {
    let mut total = F1Counts::default();
    for (p, g) in pairs {
        total.add(f1_counts(p, g));
    }
    total
}

/// Greedy-decodes every sample and scores the output against the gold target.
pub fn eval_format_score<T: Real>(model: &ToyModel<T>, samples: &[Sample]) -> Result<f64> {
    Ok(eval_format_counts(model, samples)?.f1())
}

pub fn eval_format_counts<T: Real>(model: &ToyModel<T>, samples: &[Sample]) -> Result<F1Counts> {
    let prompts: Vec<String> = samples.iter().map(|s| s.input.clone()).collect();
    let max_new = samples
        .iter()
        .map(|s| s.target.len() * 2 + 8)
        .max()
        .unwrap_or(0);
    let preds = greedy_decode(model, &prompts, max_new, &ForwardOptions::default())?;
    Ok(micro_f1(
        preds.iter().map(String::as_str).zip(samples.iter().map(|s| s.target.as_str())),
    ))
}
