use crate::error::Result;
use crate::model::ParamSource;
use crate::tensor::{Real, Tape, Tensor, Var};

use super::lora::LoraAdapter;

/// Two independent LoRAs on one weight: `x·W + L1(x) + L2(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelLora<T> {
    pub lora1: LoraAdapter<T>,
    pub lora2: LoraAdapter<T>,
}

impl<T: Real> ParallelLora<T> {
    /// `drop` = `Some(1)` or `Some(2)` leaves that branch out of the sum.
    pub fn record_forward<S: ParamSource<T>>(
        &self,
        tape: &mut Tape<T>,
        src: &mut S,
        prefix: &str,
        x: Var,
        base: Var,
        drop: Option<u8>,
    ) -> Result<Var> {
        let mut out = base;
        if drop != Some(1) {
            let d = self.lora1.record_delta(tape, src, &format!("{prefix}.lora1"), x)?;
            out = tape.add(out, d)?;
        }
        if drop != Some(2) {
            let d = self.lora2.record_delta(tape, src, &format!("{prefix}.lora2"), x)?;
            out = tape.add(out, d)?;
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> ParallelLora<U> {
        ParallelLora {
            lora1: self.lora1.cast(),
            lora2: self.lora2.cast(),
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.lora1.visit(&format!("{prefix}.lora1"), f);
        self.lora2.visit(&format!("{prefix}.lora2"), f);
    }

    pub(crate) fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut Tensor<T>),
    ) {
        self.lora1.visit_mut(&format!("{prefix}.lora1"), f);
        self.lora2.visit_mut(&format!("{prefix}.lora2"), f);
    }
}
