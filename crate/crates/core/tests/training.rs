use proptest::prelude::*;
use twostage::adapters::{attach_align, attach_mka, merge_attention_lora, strip_na, AdapterConfig};
use twostage::data::{build_batch, build_corpus, CorpusSizes, Sample, Tokenizer, VOCAB_SIZE};
use twostage::model::{init_base, ModelConfig, SlotAdapters, ToyModel};
use twostage::tensor::{finite_diff_grad, max_relative_error, Rng, Tensor};
use twostage::train::{
    adamw_update, cosine_warmup_lr, loss_and_grads, masked_nll_loss, orth_loss, run_da, run_mka,
    run_pretrain, AdamW, OptimizerState, StageKind, TrainConfig,
};
use twostage::train::loss::default_options;
use twostage::Error;

fn tiny_sizes() -> CorpusSizes {
    CorpusSizes {
        mka_knowledge: 96,
        mka_alignment: 96,
        da_alignment: 96,
        eval_per_task: 16,
        pretrain_extraction: 64,
        pretrain_heldout: 16,
        copy_drills: 16,
        statement_repeats: 1,
        open_questions_per_fact: 1,
        pretrain_questions: 32,
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig::new(16, 1, 2, VOCAB_SIZE, 128)
}

fn tiny_adapter() -> AdapterConfig {
    AdapterConfig { rank: 2, alpha: 4.0, shared_experts: 2, experts: 4, top_k: 2, renormalize_topk: false }
}

fn stage_cfg(stage: StageKind) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        peak_lr: 5e-3,
        adapter: tiny_adapter(),
        ..TrainConfig::for_stage(stage)
    }
}

fn frozen_fingerprint(m: &ToyModel<f32>) -> String {
    m.registry().fingerprint(|_, t| !t.requires_grad())
}

/// Runs the aggregation stage then strips and merges attention, ready for alignment.
fn ready_for_da() -> (ToyModel<f32>, Vec<Sample>) {
    let corpus = build_corpus(&tiny_sizes(), 0).unwrap();
    let base: ToyModel<f32> = init_base(&tiny_config(), 0).unwrap();
    let (mut m, _) = run_mka(&base, &corpus.mka, &stage_cfg(StageKind::Mka)).unwrap();
    strip_na(&mut m).unwrap();
    merge_attention_lora(&mut m).unwrap();
    (m, corpus.da)
}

fn da_model_f64(cfg: &AdapterConfig, seed: u64) -> ToyModel<f64> {
    let mut m: ToyModel<f64> = init_base(&ModelConfig::new(8, 1, 2, VOCAB_SIZE, 16), seed).unwrap();
    attach_mka(&mut m, cfg, &Rng::new(seed)).unwrap();
    strip_na(&mut m).unwrap();
    merge_attention_lora(&mut m).unwrap();
    attach_align(&mut m, &Rng::new(seed + 1)).unwrap();
    m
}

#[test]
fn nll_uniform_and_saturated() {
    let l = masked_nll_loss(&Tensor::<f64>::zeros(&[1, 4]), &[2], &[true]).unwrap();
    assert!((l - 4f64.ln()).abs() < 1e-12);
    let mut sat = Tensor::<f64>::zeros(&[1, 4]);
    sat.data_mut()[1] = 20.0;
    assert!(masked_nll_loss(&sat, &[1], &[true]).unwrap() < 1e-8);
    assert!(matches!(
        masked_nll_loss(&Tensor::<f64>::zeros(&[2, 4]), &[0, 1], &[false, false]),
        Err(Error::EmptyTarget)
    ));
}

#[test]
fn nll_two_positions_hand_oracle() {
    let rows = [[1.0, 2.0, 0.5], [0.0, -1.0, 3.0], [9.0, 9.0, 9.0]];
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let logits = Tensor::<f64>::from_f64(&[3, 3], &flat).unwrap();
    let nll = |r: &[f64; 3], t: usize| {
        let lse = r.iter().map(|v| v.exp()).sum::<f64>().ln();
        lse - r[t]
    };
    let expect = (nll(&rows[0], 1) + nll(&rows[1], 0)) / 2.0;
    let got = masked_nll_loss(&logits, &[1, 0, 2], &[true, true, false]).unwrap();
    assert!((got - expect).abs() < 1e-12);
}

#[test]
fn orth_loss_vanishes_on_orthogonal_complement() {
    let cfg = AdapterConfig::default();
    let mut m = da_model_f64(&cfg, 3);
    let mut rng = Rng::new(4);
    for slot in m.slots_mut() {
        let SlotAdapters::Composite(c) = &mut slot.adapters else { continue };
        let (din, r) = (c.ka.a.rows(), c.ka.a.cols());
        // orthonormal basis of span(A_k) by Gram-Schmidt, then project it out of A_d
        let ak = Tensor::randn(&[din, r], 1.0, &mut rng);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for j in 0..r {
            let mut v: Vec<f64> = (0..din).map(|i| ak.get2(i, j)).collect();
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
        let mut ad = Tensor::randn(&[din, r], 1.0, &mut rng);
        for j in 0..r {
            let mut col: Vec<f64> = (0..din).map(|i| ad.get2(i, j)).collect();
            for b in &basis {
                let d: f64 = col.iter().zip(b).map(|(x, y)| x * y).sum();
                col.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            for (i, v) in col.into_iter().enumerate() {
                ad.data_mut()[i * r + j] = v;
            }
        }
        c.ka.a = ak;
        c.align.as_mut().unwrap().a = ad;
    }
    assert!(orth_loss(&m).unwrap() < 1e-5);
}

#[test]
fn orth_loss_unit_overlap() {
    let cfg = AdapterConfig { rank: 1, alpha: 2.0, shared_experts: 1, experts: 2, top_k: 1, renormalize_topk: false };
    let mut m = da_model_f64(&cfg, 0);
    for (k, slot) in m.slots_mut().filter(|s| s.kind.is_ffn()).enumerate() {
        let SlotAdapters::Composite(c) = &mut slot.adapters else { unreachable!() };
        let din = c.ka.a.rows();
        let unit = |i: usize| {
            let mut t = Tensor::zeros(&[din, 1]);
            t.data_mut()[i] = 1.0;
            t
        };
        c.ka.a = unit(0);
        // only the first slot overlaps
        c.align.as_mut().unwrap().a = unit(usize::from(k > 0));
    }
    assert_eq!(orth_loss(&m).unwrap(), 1.0);
}

#[test]
fn orth_loss_needs_alignment_everywhere() {
    let mut m: ToyModel<f64> = init_base(&ModelConfig::new(8, 1, 2, VOCAB_SIZE, 16), 0).unwrap();
    attach_mka(&mut m, &AdapterConfig::default(), &Rng::new(0)).unwrap();
    assert!(matches!(orth_loss(&m), Err(Error::State(_))));
}

#[test]
fn orth_gradient_matches_finite_differences() {
    let mut m = da_model_f64(&AdapterConfig::default(), 5);
    let mut rng = Rng::new(6);
    for (name, t) in m.params_mut() {
        if name.ends_with(".ka.A") || name.ends_with(".align.A") {
            *t = Tensor::randn(t.shape(), 0.5, &mut rng).with_requires_grad(true);
        }
    }
    let batch = build_batch(&[Sample::new("ab", "c", twostage::data::TaskTag::Alignment)], &Tokenizer, 16).unwrap();
    let packed = batch.packed();
    let opts = default_options();
    // the orth part of the gradient is the difference between λ=1 and λ=0
    let (_, g1) = loss_and_grads(&m, &packed, Some(1.0), &opts, true).unwrap();
    let (_, g0) = loss_and_grads(&m, &packed, Some(0.0), &opts, true).unwrap();
    let names: Vec<String> = g1
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| n.ends_with(".A"))
        .collect();
    let analytic: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| {
            let a = &g1.iter().find(|(x, _)| x == n).unwrap().1;
            let b = &g0.iter().find(|(x, _)| x == n).unwrap().1;
            let d: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
            Tensor::from_f64(a.shape(), &d).unwrap()
        })
        .collect();
    let start: Vec<Tensor<f64>> = names.iter().map(|n| m.registry().get(n).unwrap().clone()).collect();
    let numeric = finite_diff_grad(
        |ps: &[Tensor<f64>]| {
            let mut probe = m.clone();
            for (name, t) in probe.params_mut() {
                if let Some(i) = names.iter().position(|n| *n == name) {
                    *t = ps[i].clone();
                }
            }
            orth_loss(&probe).unwrap()
        },
        &start,
        1e-6,
    );
    assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-4);
}

#[test]
fn schedule_landmarks() {
    let (total, peak) = (1000, 2e-4);
    assert_eq!(cosine_warmup_lr(0, total, peak, 0.03), 0.0);
    assert!((cosine_warmup_lr(30, total, peak, 0.03) - peak).abs() < 1e-15);
    assert!((cosine_warmup_lr(515, total, peak, 0.03) - 0.5 * peak).abs() < 1e-9);
    assert!(cosine_warmup_lr(total, total, peak, 0.03).abs() < 1e-15);
}

#[test]
fn adamw_single_scalar_hand_oracle() {
    let mut p = Tensor::<f64>::from_f64(&[1], &[0.5]).unwrap().with_requires_grad(true);
    let g = vec![("p".to_string(), Tensor::from_f64(&[1], &[0.2]).unwrap())];
    let mut st = OptimizerState::new(AdamW::default());
    adamw_update([("p".to_string(), &mut p)], &g, 0.01, &mut st).unwrap();
    // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
    let expect = 0.5 - 0.01 * 0.2 / (0.2 + 1e-8);
    assert!((p.data()[0] - expect).abs() < 1e-10);
    let g2 = vec![("p".to_string(), Tensor::from_f64(&[1], &[-0.1]).unwrap())];
    adamw_update([("p".to_string(), &mut p)], &g2, 0.01, &mut st).unwrap();
    let m = (0.9 * 0.1 * 0.2 + 0.1 * -0.1) / (1.0 - 0.81);
    let v = (0.999 * 0.001 * 0.04 + 0.001 * 0.01) / (1.0 - 0.999f64.powi(2));
    assert!((p.data()[0] - (expect - 0.01 * m / (v.sqrt() + 1e-8))).abs() < 1e-10);
    assert_eq!(st.step(), 2);
}

#[test]
fn adamw_fixed_point_and_freeze() {
    let mut rng = Rng::new(1);
    let mut live = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng).with_requires_grad(true);
    let mut frozen = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
    let (l0, f0) = (live.clone(), frozen.clone());
    let grads = vec![
        ("live".to_string(), Tensor::zeros(&[3, 3])),
        ("frozen".to_string(), Tensor::randn(&[3, 3], 5.0, &mut rng)),
    ];
    let mut st = OptimizerState::new(AdamW::default());
    adamw_update([("live".to_string(), &mut live), ("frozen".to_string(), &mut frozen)], &grads, 0.1, &mut st)
        .unwrap();
    assert!(live.max_abs_diff(&l0) < 1e-12);
    assert!(frozen.bitwise_eq(&f0));
    assert_eq!(st.buffer_names(), vec!["live"]);
}

#[test]
fn adamw_rejects_non_finite_gradients() {
    let mut p = Tensor::<f64>::zeros(&[2]).with_requires_grad(true);
    let g = vec![("w".to_string(), Tensor::from_f64(&[2], &[0.0, f64::NAN]).unwrap())];
    let err = adamw_update([("w".to_string(), &mut p)], &g, 0.1, &mut OptimizerState::new(AdamW::default()))
        .unwrap_err();
    assert!(err.to_string().contains("w"));
}

#[test]
fn pretrain_loss_falls_over_first_fifty_steps() {
    let corpus = build_corpus(&CorpusSizes::default(), 0).unwrap();
    let base: ToyModel<f32> = init_base(&ModelConfig::default(), 0).unwrap();
    let cfg = TrainConfig {
        stage: StageKind::Pretrain,
        peak_lr: 5e-3,
        max_steps: Some(50),
        warmup_ratio: 0.0,
        ..TrainConfig::default()
    };
    let (m, report) = run_pretrain(base, &corpus.pretrain, &corpus.pretrain_heldout, &cfg).unwrap();
    assert_eq!(report.steps.len(), 50);
    // minibatches differ, so compare 10-step window means
    let means: Vec<f64> = report.steps.chunks(10).map(|w| w.iter().map(|s| s.nll).sum::<f64>() / 10.0).collect();
    assert!(means.windows(2).all(|w| w[1] < w[0] * 1.02), "{means:?}");
    assert!(means[4] < 0.75 * means[0], "{means:?}");
    assert!(m.registry().trainable_names().is_empty());
    assert!(report.metrics["heldout_nll"].is_finite());
}

#[test]
fn pretrain_needs_a_bare_base() {
    let mut m: ToyModel<f32> = init_base(&tiny_config(), 0).unwrap();
    attach_mka(&mut m, &tiny_adapter(), &Rng::new(0)).unwrap();
    let s = vec![Sample::new("a", "b", twostage::data::TaskTag::Knowledge)];
    assert!(run_pretrain(m, &s, &[], &TrainConfig::default()).is_err());
}

#[test]
fn mka_trains_only_adapters_and_lowers_nll() {
    let corpus = build_corpus(&tiny_sizes(), 0).unwrap();
    let base: ToyModel<f32> = init_base(&tiny_config(), 0).unwrap();
    let before = frozen_fingerprint(&base);
    let cfg = TrainConfig { epochs: 2, ..stage_cfg(StageKind::Mka) };
    let (m, report) = run_mka(&base, &corpus.mka, &cfg).unwrap();
    for name in m.registry().trainable_names() {
        assert!(name.contains(".ka.") || name.contains(".na.") || name.contains(".attn_lora."), "{name}");
    }
    for name in m.registry().frozen_names() {
        assert!(base.registry().get(name).is_some(), "{name}");
    }
    assert_eq!(frozen_fingerprint(&m), before);
    let first = report.steps.first().unwrap().nll;
    let last = report.steps.iter().rev().take(3).map(|s| s.nll).sum::<f64>() / 3.0;
    assert!(last < first, "{first} -> {last}");
    assert!(report.steps.iter().all(|s| s.orth == 0.0 && s.total == s.nll));
}

#[test]
fn da_objective_decomposes_and_freezes() {
    let (stripped, da) = ready_for_da();
    let cfg = TrainConfig { epochs: 1, ..stage_cfg(StageKind::Da) };
    let (m, report) = run_da(&stripped, &da, &cfg).unwrap();
    let reg = m.registry();
    assert!(reg.trainable_names().iter().all(|n| n.contains(".ka.") || n.contains(".align.")));
    let frozen = reg.frozen_names();
    assert!(!frozen.is_empty());
    let keep = |n: &str, _: &Tensor<f32>| frozen.contains(&n);
    assert_eq!(reg.fingerprint(keep), stripped.registry().fingerprint(keep));
    // f32 sums round at the scale of the larger term
    for s in &report.steps {
        let bound = 4.0 * f64::from(f32::EPSILON) * (s.nll + s.orth).abs();
        assert!((s.total - (s.nll + cfg.lambda_orth * s.orth)).abs() <= bound);
    }
    let wide: ToyModel<f64> = stripped.cast();
    let cfg = TrainConfig { max_steps: Some(6), lambda_orth: 0.7, ..cfg };
    let (_, report) = run_da(&wide, &da, &cfg).unwrap();
    for s in &report.steps {
        assert!((s.total - (s.nll + 0.7 * s.orth)).abs() < 1e-7);
    }
}

#[test]
fn da_lambda_zero_is_plain_nll() {
    let (stripped, da) = ready_for_da();
    let cfg = TrainConfig { epochs: 1, lambda_orth: 0.0, max_steps: Some(4), ..stage_cfg(StageKind::Da) };
    let (_, report) = run_da(&stripped, &da, &cfg).unwrap();
    assert!(report.steps.iter().all(|s| s.total == s.nll));
}

#[test]
fn orth_penalty_lowers_final_overlap() {
    let (stripped, da) = ready_for_da();
    let run = |lambda: f64| {
        let cfg = TrainConfig { epochs: 2, lambda_orth: lambda, ..stage_cfg(StageKind::Da) };
        let (m, _) = run_da(&stripped, &da, &cfg).unwrap();
        orth_loss(&m).unwrap()
    };
    let (with, without) = (run(1.0), run(0.0));
    assert!(with < without, "{with} vs {without}");
}

#[test]
fn da_refuses_noise_aggregators() {
    let corpus = build_corpus(&tiny_sizes(), 0).unwrap();
    let base: ToyModel<f32> = init_base(&tiny_config(), 0).unwrap();
    let (m, _) = run_mka(&base, &corpus.mka, &TrainConfig { max_steps: Some(1), ..stage_cfg(StageKind::Mka) }).unwrap();
    assert!(matches!(run_da(&m, &corpus.da, &stage_cfg(StageKind::Da)), Err(Error::State(_))));
    assert!(matches!(run_mka(&m, &corpus.mka, &stage_cfg(StageKind::Mka)), Err(Error::State(_))));
}

#[test]
fn identical_configs_give_identical_models() {
    let corpus = build_corpus(&tiny_sizes(), 1).unwrap();
    let base: ToyModel<f32> = init_base(&tiny_config(), 1).unwrap();
    let cfg = TrainConfig { max_steps: Some(5), seed: 1, ..stage_cfg(StageKind::Mka) };
    let (a, ra) = run_mka(&base, &corpus.mka, &cfg).unwrap();
    let (b, rb) = run_mka(&base, &corpus.mka, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.steps, rb.steps);
    let (c, _) = run_mka(&base, &corpus.mka, &TrainConfig { seed: 2, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn config_invariants_are_checked() {
    let bad = [
        TrainConfig { lambda_orth: -1.0, ..TrainConfig::default() },
        TrainConfig { warmup_ratio: 1.0, ..TrainConfig::default() },
        TrainConfig { epochs: 0, ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
    assert_eq!(TrainConfig::for_stage(StageKind::Da).epochs, 3);
    assert_eq!(TrainConfig::for_stage(StageKind::Mka).epochs, 1);
    let d = TrainConfig::default();
    assert_eq!((d.peak_lr, d.warmup_ratio, d.batch_size, d.lambda_orth), (2e-4, 0.03, 32, 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn schedule_shape(total in 1usize..5000, ratio in 0.0f64..0.5, peak in 1e-5f64..1.0) {
        let lrs: Vec<f64> = (0..=total).map(|s| cosine_warmup_lr(s, total, peak, ratio)).collect();
        prop_assert!(lrs.iter().all(|&l| (0.0..=peak * (1.0 + 1e-12)).contains(&l)));
        let warm = (ratio * total as f64).ceil() as usize;
        let warm = warm.min(total);
        prop_assert!(lrs[..=warm].windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(lrs[warm..].windows(2).all(|w| w[1] <= w[0]));
        if warm < total {
            prop_assert!(lrs[total].abs() < 1e-12);
        }
    }
}
