//! Stage transitions of a model's adapters:
//! `attach_mka → strip_na → merge_attention_lora → attach_align → merge_final`.

use crate::error::{Error, Result};
use crate::model::{SlotAdapters, Stage, ToyModel};
use crate::tensor::{Real, Rng, Tensor};

use super::composite::CompositeAdapter;
use super::config::AdapterConfig;
use super::lora::lora_init;
use super::molora::molora_init;

fn expect_stage<T>(model: &ToyModel<T>, want: Stage, what: &str) -> Result<()> {
    if model.stage != want {
        return Err(Error::state(format!(
            "{what} requires a `{want}` model, found `{}`",
            model.stage
        )));
    }
    Ok(())
}

/// Attaches a knowledge aggregator (rank `s·r`) plus a routed noise aggregator to every
/// FFN slot and a plain LoRA (rank `r`) to every attention slot. Base weights are frozen;
/// every adapter parameter is trainable.
pub fn attach_mka<T: Real>(model: &mut ToyModel<T>, cfg: &AdapterConfig, rng: &Rng) -> Result<()> {
    expect_stage(model, Stage::Base, "attaching aggregation adapters")?;
    cfg.validate()?;
    model.set_all_trainable(false);
    let (d, dff) = (model.config.d_model, model.config.d_ff);
    let mut attached = Vec::new();
    for slot in model.slots() {
        let (din, dout) = slot.kind.dims(d, dff);
        let base = rng.substream(&slot.name);
        let adapters = if slot.kind.is_attention() {
            SlotAdapters::Lora(lora_init(
                din,
                dout,
                cfg.rank,
                cfg.alpha,
                &mut base.substream("attn_lora"),
            )?)
        } else {
            SlotAdapters::Composite(CompositeAdapter {
                ka: lora_init(
                    din,
                    dout,
                    cfg.shared_rank(),
                    cfg.alpha,
                    &mut base.substream("ka"),
                )?,
                na: Some(molora_init(
                    din,
                    dout,
                    cfg.experts,
                    cfg.top_k,
                    cfg.rank,
                    cfg.alpha,
                    cfg.renormalize_topk,
                    &base.substream("na"),
                )?),
                align: None,
                shared_experts: cfg.shared_experts,
            })
        };
        attached.push(adapters);
    }
    for (slot, adapters) in model.slots_mut().zip(attached) {
        slot.adapters = adapters;
    }
    model.adapter_config = Some(cfg.clone());
    model.stage = Stage::Mka;
    Ok(())
}

/// Removes the noise aggregator (experts and router) from every FFN slot, keeping the
/// knowledge aggregator.
pub fn strip_na<T: Real>(model: &mut ToyModel<T>) -> Result<()> {
    let all_have_na = model.slots().filter(|s| s.kind.is_ffn()).all(|s| {
        matches!(&s.adapters, SlotAdapters::Composite(c) if c.na.is_some())
    });
    if model.stage != Stage::Mka || !all_have_na {
        return Err(Error::state(format!(
            "strip_na needs a model carrying noise aggregators (stage `{}`)",
            model.stage
        )));
    }
    for slot in model.slots_mut() {
        if let SlotAdapters::Composite(c) = &mut slot.adapters {
            c.na = None;
        }
    }
    model.stage = Stage::Stripped;
    Ok(())
}

fn add_into<T: Real>(w: &mut Tensor<T>, delta: &Tensor<T>) -> Result<()> {
    if w.shape() != delta.shape() {
        return Err(Error::Shape {
            op: "merge",
            lhs: w.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        });
    }
    for (a, &b) in w.data_mut().iter_mut().zip(delta.data()) {
        *a += b;
    }
    Ok(())
}

/// Folds each attention LoRA into its weight (`W ← W + (α/r)·A·B`) and freezes it.
pub fn merge_attention_lora<T: Real>(model: &mut ToyModel<T>) -> Result<()> {
    expect_stage(model, Stage::Stripped, "merging attention adapters")?;
    let has = model
        .slots()
        .filter(|s| s.kind.is_attention())
        .any(|s| matches!(s.adapters, SlotAdapters::Lora(_)));
    if model.attention_merged || !has {
        return Err(Error::state("no attention adapters to merge"));
    }
    for slot in model.slots_mut().filter(|s| s.kind.is_attention()) {
        if let SlotAdapters::Lora(l) = std::mem::take(&mut slot.adapters) {
            add_into(&mut slot.weight, &l.delta_weight()?)?;
        }
        slot.weight.set_requires_grad(false);
    }
    model.attention_merged = true;
    Ok(())
}

/// Attaches a zero-initialized alignment LoRA of rank `s·r` next to every knowledge
/// aggregator. The knowledge aggregator stays trainable.
pub fn attach_align<T: Real>(model: &mut ToyModel<T>, rng: &Rng) -> Result<()> {
    if model.stage == Stage::Mka {
        return Err(Error::state(
            "model still carries noise aggregators; strip them before alignment",
        ));
    }
    expect_stage(model, Stage::Stripped, "attaching alignment adapters")?;
    if !model.attention_merged {
        return Err(Error::state(
            "attention adapters must be merged before alignment",
        ));
    }
    let cfg = model
        .adapter_config
        .clone()
        .ok_or_else(|| Error::state("model has no adapter configuration"))?;
    let (d, dff) = (model.config.d_model, model.config.d_ff);
    for slot in model.slots_mut().filter(|s| s.kind.is_ffn()) {
        let (din, dout) = slot.kind.dims(d, dff);
        let SlotAdapters::Composite(c) = &mut slot.adapters else {
            return Err(Error::state(format!("{} has no knowledge aggregator", slot.name)));
        };
        c.ka.set_trainable(true);
        c.align = Some(lora_init(
            din,
            dout,
            cfg.shared_rank(),
            cfg.alpha,
            &mut rng.substream(&slot.name).substream("align"),
        )?);
    }
    model.stage = Stage::Da;
    Ok(())
}

/// `W′ = W + (α/r′)·A_k·B_k + (α/r′)·A_d·B_d` on every FFN slot; all adapters removed.
pub fn merge_final<T: Real>(model: &mut ToyModel<T>) -> Result<()> {
    if model.stage == Stage::Merged {
        return Err(Error::state("model is already merged"));
    }
    let na_left = model
        .slots()
        .any(|s| matches!(&s.adapters, SlotAdapters::Composite(c) if c.na.is_some()));
    if na_left {
        return Err(Error::state("noise aggregator still attached; cannot merge"));
    }
    expect_stage(model, Stage::Da, "final merge")?;
    for slot in model.slots_mut() {
        match std::mem::take(&mut slot.adapters) {
            SlotAdapters::None => {}
            SlotAdapters::Composite(c) => {
                add_into(&mut slot.weight, &c.ka.delta_weight()?)?;
                if let Some(al) = &c.align {
                    add_into(&mut slot.weight, &al.delta_weight()?)?;
                }
            }
            SlotAdapters::Lora(l) => add_into(&mut slot.weight, &l.delta_weight()?)?,
            SlotAdapters::Parallel(_) => {
                return Err(Error::state("parallel-LoRA slots are not part of this pipeline"))
            }
        }
    }
    model.set_all_trainable(false);
    model.stage = Stage::Merged;
    Ok(())
}

