//! Parallel-LoRA baseline: two independent rank-`s·r` LoRAs on every FFN weight instead
//! of the knowledge/noise split, with leave-one-out evaluation.

use std::time::Instant;

use crate::adapters::{lora_init, AdapterConfig, ParallelLora};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, SlotAdapters, Stage, ToyModel};
use crate::tensor::{Real, Rng, Tensor};
use crate::train::{train_loop, StageKind, StageReport, TrainConfig};

/// Attaches the baseline adapters to a frozen base: a rank-`r` LoRA on each attention
/// weight and two rank-`s·r` LoRAs on each FFN weight. Base weights are frozen.
pub fn build_parallel_lora_baseline<T: Real>(
    base: &ToyModel<T>,
    cfg: &AdapterConfig,
    rng: &Rng,
) -> Result<ToyModel<T>> {
    if base.stage != Stage::Base {
        return Err(Error::state(format!(
            "baseline needs a base model, found `{}`",
            base.stage
        )));
    }
    cfg.validate()?;
    let mut model = base.clone();
    model.set_all_trainable(false);
    let (d, dff) = (model.config.d_model, model.config.d_ff);
    for slot in model.slots_mut() {
        let (din, dout) = slot.kind.dims(d, dff);
        let r = rng.substream(&slot.name);
        slot.adapters = if slot.kind.is_attention() {
            SlotAdapters::Lora(lora_init(din, dout, cfg.rank, cfg.alpha, &mut r.substream("attn_lora"))?)
        } else {
            SlotAdapters::Parallel(ParallelLora {
                lora1: lora_init(din, dout, cfg.shared_rank(), cfg.alpha, &mut r.substream("lora1"))?,
                lora2: lora_init(din, dout, cfg.shared_rank(), cfg.alpha, &mut r.substream("lora2"))?,
            })
        };
    }
    model.adapter_config = Some(cfg.clone());
    model.stage = Stage::Mka;
    Ok(model)
}

/// Forward options that leave branch `which` (1 or 2) out of every parallel slot.
pub fn drop_one(which: u8) -> Result<ForwardOptions> {
    if !matches!(which, 1 | 2) {
        return Err(Error::Argument(format!("drop_one expects 1 or 2, got {which}")));
    }
    Ok(ForwardOptions {
        drop_parallel: Some(which),
        ..ForwardOptions::default()
    })
}

/// Copy of `model` with branch `which` of every parallel slot set to exactly zero.
pub fn zero_branch<T: Real>(model: &ToyModel<T>, which: u8) -> Result<ToyModel<T>> {
    drop_one(which)?;
    let mut m = model.clone();
    for slot in m.slots_mut() {
        if let SlotAdapters::Parallel(p) = &mut slot.adapters {
            let l = if which == 1 { &mut p.lora1 } else { &mut p.lora2 };
            l.b = Tensor::zeros(l.b.shape()).with_requires_grad(l.b.requires_grad());
        }
    }
    Ok(m)
}

/// Builds the baseline and trains it with the aggregation loop (NLL only).
pub fn run_parallel_baseline<T: Real>(
    base: &ToyModel<T>,
    data: &[Sample],
    cfg: &TrainConfig,
) -> Result<(ToyModel<T>, StageReport)> {
    let start = Instant::now();
    let mut model = build_parallel_lora_baseline(
        base,
        &cfg.adapter,
        &Rng::new(cfg.seed).substream("adapters/parallel"),
    )?;
    let mut report = StageReport::new(StageKind::Mka, cfg.hash(), cfg.seed);
    train_loop(&mut model, data, cfg, None, &mut report, &mut |_, _| Ok(false))?;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, report))
}
