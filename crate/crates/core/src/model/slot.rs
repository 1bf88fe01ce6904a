use serde::{Deserialize, Serialize};

use crate::adapters::{CompositeAdapter, LoraAdapter, ParallelLora, Routing};
use crate::error::Result;
use crate::tensor::{Real, Tape, Tensor, Var};

use super::ParamSource;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    FfnGate,
    FfnUp,
    FfnDown,
}

impl SlotKind {
    /// Per-layer order of slots.
    pub const ALL: [SlotKind; 7] = [
        SlotKind::AttnQ,
        SlotKind::AttnK,
        SlotKind::AttnV,
        SlotKind::AttnO,
        SlotKind::FfnGate,
        SlotKind::FfnUp,
        SlotKind::FfnDown,
    ];

    pub fn is_ffn(self) -> bool {
        matches!(self, SlotKind::FfnGate | SlotKind::FfnUp | SlotKind::FfnDown)
    }

    pub fn is_attention(self) -> bool {
        !self.is_ffn()
    }

    /// Name relative to its layer, e.g. `attn.q` or `ffn.gate`.
    pub fn path(self) -> &'static str {
        match self {
            SlotKind::AttnQ => "attn.q",
            SlotKind::AttnK => "attn.k",
            SlotKind::AttnV => "attn.v",
            SlotKind::AttnO => "attn.o",
            SlotKind::FfnGate => "ffn.gate",
            SlotKind::FfnUp => "ffn.up",
            SlotKind::FfnDown => "ffn.down",
        }
    }

    /// `(d_in, d_out)` of the base weight.
    pub fn dims(self, d_model: usize, d_ff: usize) -> (usize, usize) {
        match self {
            SlotKind::FfnGate | SlotKind::FfnUp => (d_model, d_ff),
            SlotKind::FfnDown => (d_ff, d_model),
            _ => (d_model, d_model),
        }
    }
}

/// Adapters attached to one base weight. Attention slots only ever carry `Lora`; FFN slots
/// carry `Composite` or `Parallel`.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum SlotAdapters<T> {
    #[default]
    None,
    Lora(LoraAdapter<T>),
    Composite(CompositeAdapter<T>),
    Parallel(ParallelLora<T>),
}

/// Per-forward switches used by the analysis tooling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub routing: Routing,
    /// Leave one branch of a parallel-LoRA slot out (`1` or `2`).
    pub drop_parallel: Option<u8>,
}

/// A frozen base linear weight with whatever adapters are attached to it.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSlot<T> {
    pub name: String,
    pub kind: SlotKind,
    /// `d_in × d_out`
    pub weight: Tensor<T>,
    pub adapters: SlotAdapters<T>,
}

impl<T: Real> AdapterSlot<T> {
    pub fn has_adapters(&self) -> bool {
        !matches!(self.adapters, SlotAdapters::None)
    }

    /// Records `x·W` plus every attached delta. Returns the router selections when the
    /// slot carries a noise aggregator.
    pub fn record_forward<S: ParamSource<T>>(
        &self,
        tape: &mut Tape<T>,
        src: &mut S,
        x: Var,
        opts: &ForwardOptions,
    ) -> Result<(Var, Option<Vec<Vec<usize>>>)> {
        let w = src.bind(tape, &format!("{}.weight", self.name), &self.weight);
        let base = tape.matmul(x, w)?;
        match &self.adapters {
            SlotAdapters::None => Ok((base, None)),
            SlotAdapters::Lora(l) => {
                let d = l.record_delta(tape, src, &format!("{}.attn_lora", self.name), x)?;
                Ok((tape.add(base, d)?, None))
            }
            SlotAdapters::Composite(c) => {
                c.record_forward(tape, src, &self.name, x, base, opts.routing)
            }
            SlotAdapters::Parallel(p) => Ok((
                p.record_forward(tape, src, &self.name, x, base, opts.drop_parallel)?,
                None,
            )),
        }
    }

    pub(crate) fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{}.weight", self.name), &self.weight);
        match &self.adapters {
            SlotAdapters::None => {}
            SlotAdapters::Lora(l) => l.visit(&format!("{}.attn_lora", self.name), f),
            SlotAdapters::Composite(c) => c.visit(&self.name, f),
            SlotAdapters::Parallel(p) => p.visit(&self.name, f),
        }
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f(format!("{}.weight", self.name), &mut self.weight);
        let name = self.name.clone();
        match &mut self.adapters {
            SlotAdapters::None => {}
            SlotAdapters::Lora(l) => l.visit_mut(&format!("{name}.attn_lora"), f),
            SlotAdapters::Composite(c) => c.visit_mut(&name, f),
            SlotAdapters::Parallel(p) => p.visit_mut(&name, f),
        }
    }

    pub fn cast<U: Real>(&self) -> AdapterSlot<U> {
        AdapterSlot {
            name: self.name.clone(),
            kind: self.kind,
            weight: self.weight.cast(),
            adapters: match &self.adapters {
                SlotAdapters::None => SlotAdapters::None,
                SlotAdapters::Lora(l) => SlotAdapters::Lora(l.cast()),
                SlotAdapters::Composite(c) => SlotAdapters::Composite(c.cast()),
                SlotAdapters::Parallel(p) => SlotAdapters::Parallel(p.cast()),
            },
        }
    }
}
