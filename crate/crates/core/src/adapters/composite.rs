//! Knowledge aggregator (always-on LoRA of rank `s·r`) combined with either the routed
//! noise aggregator during aggregation, or the alignment LoRA during alignment.

use crate::error::{Error, Result};
use crate::model::ParamSource;
use crate::tensor::{Real, Tape, Tensor, Var};

use super::lora::LoraAdapter;
use super::molora::{MoLoraAdapter, Routing};

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeAdapter<T> {
    pub ka: LoraAdapter<T>,
    pub na: Option<MoLoraAdapter<T>>,
    pub align: Option<LoraAdapter<T>>,
    pub shared_experts: usize,
}

impl<T: Real> CompositeAdapter<T> {
    pub fn validate(&self) -> Result<()> {
        if self.na.is_some() && self.align.is_some() {
            return Err(Error::state(
                "noise aggregator and alignment adapter cannot be attached together",
            ));
        }
        if let Some(na) = &self.na {
            let r = na.experts[0].rank();
            if self.ka.rank() != self.shared_experts * r {
                return Err(Error::Config(format!(
                    "knowledge aggregator rank {} != shared_experts {} x expert rank {r}",
                    self.ka.rank(),
                    self.shared_experts
                )));
            }
        }
        Ok(())
    }

    /// Records `x·W + KA(x) [+ NA(x)] [+ Align(x)]`, summed left to right.
    pub fn record_forward<S: ParamSource<T>>(
        &self,
        tape: &mut Tape<T>,
        src: &mut S,
        prefix: &str,
        x: Var,
        base: Var,
        routing: Routing,
    ) -> Result<(Var, Option<Vec<Vec<usize>>>)> {
        self.validate()?;
        let ka = self
            .ka
            .record_delta(tape, src, &format!("{prefix}.ka"), x)?;
        let mut out = tape.add(base, ka)?;
        let mut selections = None;
        if let Some(na) = &self.na {
            let (delta, sel) = na.record_delta(tape, src, &format!("{prefix}.na"), x, routing)?;
            out = tape.add(out, delta)?;
            selections = Some(sel);
        }
        if let Some(align) = &self.align {
            let delta = align.record_delta(tape, src, &format!("{prefix}.align"), x)?;
            out = tape.add(out, delta)?;
        }
        Ok((out, selections))
    }

    pub fn cast<U: Real>(&self) -> CompositeAdapter<U> {
        CompositeAdapter {
            ka: self.ka.cast(),
            na: self.na.as_ref().map(|n| n.cast()),
            align: self.align.as_ref().map(|a| a.cast()),
            shared_experts: self.shared_experts,
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.ka.visit(&format!("{prefix}.ka"), f);
        if let Some(na) = &self.na {
            na.visit(&format!("{prefix}.na"), f);
        }
        if let Some(al) = &self.align {
            al.visit(&format!("{prefix}.align"), f);
        }
    }

    pub(crate) fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut Tensor<T>),
    ) {
        self.ka.visit_mut(&format!("{prefix}.ka"), f);
        if let Some(na) = &mut self.na {
            na.visit_mut(&format!("{prefix}.na"), f);
        }
        if let Some(al) = &mut self.align {
            al.visit_mut(&format!("{prefix}.align"), f);
        }
    }
}

fn eager<T: Real>(x: &Tensor<T>, w: &Tensor<T>, c: &CompositeAdapter<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut src = crate::model::Anonymous;
    let xv = tape.leaf(x);
    let wv = tape.leaf(w);
    let base = tape.matmul(xv, wv)?;
    let (out, _) = c.record_forward(&mut tape, &mut src, "slot", xv, base, Routing::TopK)?;
    Ok(tape.value(out).clone())
}

/// Aggregation-stage forward `x·W + KA(x) + NA(x)`.
pub fn composite_forward_mka<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    composite: &CompositeAdapter<T>,
) -> Result<Tensor<T>> {
    if composite.align.is_some() {
        return Err(Error::state("alignment adapter present in aggregation forward"));
    }
    if composite.na.is_none() {
        return Err(Error::state("aggregation forward needs the noise aggregator"));
    }
    eager(x, w, composite)
}

/// Alignment-stage forward `x·W + KA(x) + Align(x)`.
pub fn composite_forward_da<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    composite: &CompositeAdapter<T>,
) -> Result<Tensor<T>> {
    if composite.na.is_some() {
        return Err(Error::state("noise aggregator present in alignment forward"));
    }
    if composite.align.is_none() {
        return Err(Error::state("alignment forward needs the alignment adapter"));
    }
    eager(x, w, composite)
}
