//! Stage drivers: base pretraining, aggregation (MKA) and alignment (DA).

use std::time::Instant;

use crate::adapters::{attach_align, attach_mka};
use crate::data::{build_batch, Sample, TaskTag, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{Stage, ToyModel};
use crate::tensor::{Real, Rng};

use super::config::{MixOrder, StageKind, TrainConfig};
use super::loss::{dataset_nll, default_options, loss_and_grads};
use super::optim::{adamw_step, clip_grad_norm, AdamW, OptimizerState};
use super::report::{StageReport, StepRecord};
use super::schedule::cosine_warmup_lr;

fn epoch_order(samples: &[Sample], cfg: &TrainConfig, epoch: usize) -> Vec<usize> {
    let tag = match cfg.stage {
        StageKind::Pretrain => "pretrain",
        StageKind::Mka => "mka",
        StageKind::Da => "da",
    };
    let mut rng = Rng::new(cfg.seed).substream(&format!("{tag}/epoch{epoch}"));
    match cfg.mix {
        MixOrder::Interleaved => {
            let mut idx: Vec<usize> = (0..samples.len()).collect();
            rng.shuffle(&mut idx);
            idx
        }
        MixOrder::Blocked => {
            let mut out = Vec::with_capacity(samples.len());
            for task in [TaskTag::Knowledge, TaskTag::Alignment] {
                let mut block: Vec<usize> =
                    (0..samples.len()).filter(|&i| samples[i].task == task).collect();
                rng.shuffle(&mut block);
                out.extend(block);
            }
            out
        }
    }
}

/// Called after every optimizer step with the step index; returning `true` stops training.
pub type StopHook<'a, T> = dyn FnMut(usize, &ToyModel<T>) -> Result<bool> + 'a;

/// Mini-batch AdamW over `samples` on whatever parameters of `model` are trainable.
/// `lambda` adds the orthogonality penalty. Steps are appended to `report`.
pub fn train_loop<T: Real>(
    model: &mut ToyModel<T>,
    samples: &[Sample],
    cfg: &TrainConfig,
    lambda: Option<f64>,
    report: &mut StageReport,
    stop: &mut StopHook<'_, T>,
) -> Result<()> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let total = cfg.total_steps(samples.len());
    let mut opt = OptimizerState::new(AdamW::default());
    let opts = default_options();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let order = epoch_order(samples, cfg, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let batch_samples: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let batch = build_batch(&batch_samples, &Tokenizer, model.config.max_seq_len)?;
            let packed = batch.packed();
            let (values, mut grads) = loss_and_grads(model, &packed, lambda, &opts, cfg.checked)?;
            if !values.total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    what: format!("loss is {}", values.total),
                });
            }
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            let lr = cosine_warmup_lr(step, total, cfg.peak_lr, cfg.warmup_ratio);
            adamw_step(model, &grads, lr, &mut opt).map_err(|e| match e {
                Error::NonFinite { op } => Error::Divergence { step, what: op },
                other => other,
            })?;
            report.steps.push(StepRecord {
                step,
                lr,
                nll: values.nll,
                orth: values.orth,
                total: values.total,
            });
            step += 1;
            if stop(step, model)? {
                break 'epochs;
            }
        }
    }
    Ok(())
}

/// Full-parameter training of a fresh base model until held-out NLL falls below
/// `cfg.nll_threshold` (checked every `cfg.eval_every` steps) or the step budget runs out.
/// Every parameter is frozen afterwards.
pub fn run_pretrain<T: Real>(
    mut model: ToyModel<T>,
    corpus: &[Sample],
    heldout: &[Sample],
    cfg: &TrainConfig,
) -> Result<(ToyModel<T>, StageReport)> {
    if model.stage != Stage::Base || model.registry().iter().any(|(n, _)| n.contains(".ka.")) {
        return Err(Error::state("pretraining needs a bare base model"));
    }
    let start = Instant::now();
    let mut report = StageReport::new(StageKind::Pretrain, cfg.hash(), cfg.seed);
    model.set_all_trainable(true);
    let mut last_eval = None;
    let mut hook = |step: usize, m: &ToyModel<T>| -> Result<bool> {
        if heldout.is_empty() || step % cfg.eval_every != 0 {
            return Ok(false);
        }
        let nll = dataset_nll(m, heldout, 64)?;
        if !nll.is_finite() {
            return Err(Error::Divergence {
                step,
                what: "held-out NLL is not finite".into(),
            });
        }
        last_eval = Some((step, nll));
        Ok(cfg.nll_threshold.is_some_and(|t| nll < t))
    };
    train_loop(&mut model, corpus, cfg, None, &mut report, &mut hook)?;
    model.set_all_trainable(false);
    let heldout_nll = match last_eval {
        Some((s, v)) if s == report.steps.len() => Some(v),
        _ if !heldout.is_empty() => Some(dataset_nll(&model, heldout, 64)?),
        _ => None,
    };
    if let Some(v) = heldout_nll {
        report.metrics.insert("heldout_nll".into(), v);
        if let Some(t) = cfg.nll_threshold {
            report.metrics.insert("reached_threshold".into(), f64::from(u8::from(v < t)));
        }
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Attaches aggregation adapters to a frozen base and trains them with NLL only.
pub fn run_mka<T: Real>(
    base: &ToyModel<T>,
    data: &[Sample],
    cfg: &TrainConfig,
) -> Result<(ToyModel<T>, StageReport)> {
    let start = Instant::now();
    let mut model = base.clone();
    attach_mka(&mut model, &cfg.adapter, &Rng::new(cfg.seed).substream("adapters/mka"))?;
    let mut report = StageReport::new(StageKind::Mka, cfg.hash(), cfg.seed);
    train_loop(&mut model, data, cfg, None, &mut report, &mut |_, _| Ok(false))?;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Attaches the alignment adapter to a stripped, attention-merged model and trains the
/// knowledge aggregator plus alignment adapter on `nll + λ·orth`.
pub fn run_da<T: Real>(
    stripped: &ToyModel<T>,
    data: &[Sample],
    cfg: &TrainConfig,
) -> Result<(ToyModel<T>, StageReport)> {
    let start = Instant::now();
    let mut model = stripped.clone();
    attach_align(&mut model, &Rng::new(cfg.seed).substream("adapters/da"))?;
    let mut report = StageReport::new(StageKind::Da, cfg.hash(), cfg.seed);
    train_loop(
        &mut model,
        data,
        cfg,
        Some(cfg.lambda_orth),
        &mut report,
        &mut |_, _| Ok(false),
    )?;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, report))
}
