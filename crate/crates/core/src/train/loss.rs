//! Training objectives: masked next-token NLL over target spans and the orthogonality
//! penalty between knowledge and alignment subspaces.

use crate::adapters::{CompositeAdapter, Routing};
use crate::data::{build_batch, Packed, Sample, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{Anonymous, Binder, ForwardOptions, ForwardTrace, SlotAdapters, ToyModel};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Eager mean over masked rows of `−log softmax(logits)[target]`.
pub fn masked_nll_loss<T: Real>(logits: &Tensor<T>, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits);
    let loss = tape.masked_nll(l, targets, mask)?;
    Ok(tape.scalar(loss)?.as_f64())
}

fn composites<T: Real>(model: &ToyModel<T>) -> Result<Vec<(&str, &CompositeAdapter<T>)>> {
    let mut out = Vec::new();
    for slot in model.slots().filter(|s| s.kind.is_ffn()) {
        match &slot.adapters {
            SlotAdapters::Composite(c) if c.align.is_some() => out.push((slot.name.as_str(), c)),
            _ => {
                return Err(Error::state(format!(
                    "orthogonality loss needs knowledge and alignment adapters on {}",
                    slot.name
                )))
            }
        }
    }
    Ok(out)
}

/// Records `Σ_slots Σ |(A_k)ᵀ·A_d|`. Factors already bound as trainable by `binder` are
/// reused so their gradients combine with the NLL path.
pub fn record_orth_loss<T: Real>(
    tape: &mut Tape<T>,
    binder: &Binder,
    model: &ToyModel<T>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (name, c) in composites(model)? {
        let align = c.align.as_ref().expect("checked by composites");
        let ak = binder
            .lookup(&format!("{name}.ka.A"))
            .unwrap_or_else(|| tape.leaf(&c.ka.a));
        let ad = binder
            .lookup(&format!("{name}.align.A"))
            .unwrap_or_else(|| tape.leaf(&align.a));
        let overlap = tape.matmul_tn(ak, ad)?;
        let term = tape.abs_sum(overlap)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::state("model has no FFN slots"))
}

/// Eager value of the orthogonality loss.
pub fn orth_loss<T: Real>(model: &ToyModel<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = record_orth_loss(&mut tape, &Binder::default(), model)?;
    Ok(tape.scalar(v)?.as_f64())
}

/// Loss nodes of one recorded training step.
pub struct Objective {
    pub nll: Var,
    pub orth: Option<Var>,
    pub total: Var,
    pub trace: ForwardTrace,
}

/// Records `nll` and, when `lambda` is given, `nll + λ·orth`.
pub fn record_objective<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder,
    model: &ToyModel<T>,
    packed: &Packed<'_>,
    lambda: Option<f64>,
    opts: &ForwardOptions,
) -> Result<Objective> {
    let (logits, trace) = model.record_forward(tape, binder, &packed.seqs, opts)?;
    let nll = tape.masked_nll(logits, &packed.targets, &packed.mask)?;
    let (orth, total) = match lambda {
        None => (None, nll),
        Some(l) => {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::Config(format!("lambda must be >= 0, got {l}")));
            }
            let o = record_orth_loss(tape, binder, model)?;
            let weighted = tape.scale(o, l)?;
            (Some(o), tape.add(nll, weighted)?)
        }
    };
    Ok(Objective {
        nll,
        orth,
        total,
        trace,
    })
}

/// Scalar values of one evaluated objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub nll: f64,
    pub orth: f64,
    pub total: f64,
}

/// Loss values and the gradient of every trainable parameter, by name.
pub fn loss_and_grads<T: Real>(
    model: &ToyModel<T>,
    packed: &Packed<'_>,
    lambda: Option<f64>,
    opts: &ForwardOptions,
    checked: bool,
) -> Result<(LossValues, Vec<(String, Tensor<T>)>)> {
    let mut tape = if checked { Tape::new() } else { Tape::unchecked() };
    let mut binder = Binder::default();
    let obj = record_objective(&mut tape, &mut binder, model, packed, lambda, opts)?;
    let values = LossValues {
        nll: tape.scalar(obj.nll)?.as_f64(),
        orth: match obj.orth {
            Some(o) => tape.scalar(o)?.as_f64(),
            None => 0.0,
        },
        total: tape.scalar(obj.total)?.as_f64(),
    };
    let mut grads = tape.backward(obj.total)?;
    let named = binder
        .trainable
        .into_iter()
        .map(|(name, v)| {
            let g = grads
                .take(v)
                .ok_or_else(|| Error::state(format!("no gradient recorded for {name}")))?;
            Ok((name, g))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((values, named))
}

/// Loss value only; no gradients are kept.
pub fn loss_value<T: Real>(
    model: &ToyModel<T>,
    packed: &Packed<'_>,
    lambda: Option<f64>,
    opts: &ForwardOptions,
) -> Result<LossValues> {
    let mut tape = Tape::new();
    let mut binder = Binder::default();
    let obj = record_objective(&mut tape, &mut binder, model, packed, lambda, opts)?;
    Ok(LossValues {
        nll: tape.scalar(obj.nll)?.as_f64(),
        orth: match obj.orth {
            Some(o) => tape.scalar(o)?.as_f64(),
            None => 0.0,
        },
        total: tape.scalar(obj.total)?.as_f64(),
    })
}

/// Token-weighted mean target NLL of `model` over `samples`.
pub fn dataset_nll<T: Real>(model: &ToyModel<T>, samples: &[Sample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Metric("no samples to score".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = build_batch(chunk, &Tokenizer, model.config.max_seq_len)?;
        let packed = batch.packed();
        let mut tape = Tape::unchecked();
        let (logits, _) =
            model.record_forward(&mut tape, &mut Anonymous, &packed.seqs, &ForwardOptions::default())?;
        let nll = tape.masked_nll(logits, &packed.targets, &packed.mask)?;
        let n = packed.mask.iter().filter(|m| **m).count();
        sum += tape.scalar(nll)?.as_f64() * n as f64;
        count += n;
    }
    Ok(sum / count as f64)
}

/// Routing used by ordinary training and evaluation.
pub fn default_options() -> ForwardOptions {
    ForwardOptions {
        routing: Routing::TopK,
        drop_parallel: None,
    }
}
