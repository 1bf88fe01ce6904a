use twostage::adapters::{attach_mka, strip_na, AdapterConfig};
use twostage::analysis::{
    build_parallel_lora_baseline, drop_one, eval_format_counts, eval_mc_accuracy, f1_counts,
    forced_pair_eval, micro_f1, mismatch_summary, pair_performance, ranks, route_stats, spearman,
    zero_branch,
};
use twostage::data::{build_batch, build_corpus, gen_knowledge_task, CorpusSizes, Sample, TaskTag, Tokenizer, VOCAB_SIZE};
use twostage::model::{init_base, ForwardOptions, ModelConfig, SlotAdapters, SlotKind, ToyModel};
use twostage::tensor::{Rng, Tensor};
use twostage::train::{train_loop, StageKind, StageReport, TrainConfig};
use twostage::Error;

fn cfg16() -> ModelConfig {
    ModelConfig::new(16, 1, 2, VOCAB_SIZE, 128)
}

fn adapter(experts: usize) -> AdapterConfig {
    AdapterConfig { rank: 2, alpha: 4.0, shared_experts: 2, experts, top_k: 2, renormalize_topk: false }
}

fn randomize(model: &mut ToyModel<f64>, tags: &[&str], std: f64, seed: u64) {
    let mut rng = Rng::new(seed);
    for (name, t) in model.params_mut() {
        if tags.iter().any(|tag| name.contains(tag)) {
            let flag = t.requires_grad();
            *t = Tensor::randn(t.shape(), std, &mut rng).with_requires_grad(flag);
        }
    }
}

fn mka_model(experts: usize, seed: u64) -> ToyModel<f64> {
    let mut m = init_base(&cfg16(), seed).unwrap();
    attach_mka(&mut m, &adapter(experts), &Rng::new(seed)).unwrap();
    randomize(&mut m, &[".na.", ".ka.", ".attn_lora."], 0.3, seed + 1);
    m
}

fn questions(n: usize) -> Vec<Sample> {
    gen_knowledge_task(n, 0).unwrap().samples
}

#[test]
fn f1_hand_checks() {
    let gold = "[DRUG:abine][DIS:xosis]";
    assert_eq!(f1_counts(gold, gold).f1(), 1.0);
    assert_eq!(f1_counts("[NONE]", gold).f1(), 0.0);
    let half = f1_counts("[DRUG:abine][GENE:QQQ1]", gold);
    assert_eq!((half.precision(), half.recall(), half.f1()), (0.5, 0.5, 0.5));
    let junk = f1_counts("[DRUG:abine", gold);
    assert_eq!((junk.matched, junk.predicted), (0, 0));
    assert_eq!(f1_counts("[NONE]", "[NONE]").f1(), 1.0);
    let total = micro_f1([(gold, gold), ("[NONE]", "[DIS:x]")]);
    assert_eq!((total.matched, total.predicted, total.gold), (2, 2, 3));
}

#[test]
fn untrained_decoder_never_errors_on_format() {
    let m: ToyModel<f32> = init_base(&cfg16(), 0).unwrap();
    let samples = twostage::data::gen_alignment_task(8, 0).unwrap();
    let c = eval_format_counts(&m, &samples).unwrap();
    assert!(c.f1() >= 0.0 && c.f1() <= 1.0);
}

/// A model whose prediction after `SEP` is read off the position embedding: with every
/// block output zeroed, the last prompt row is `pos_embed[p]`, aligned with letter `p mod 4`.
fn letter_oracle() -> ToyModel<f64> {
    let mut m: ToyModel<f64> = init_base(&cfg16(), 0).unwrap();
    for slot in m.slots_mut() {
        if matches!(slot.kind, SlotKind::AttnO | SlotKind::FfnDown) {
            slot.weight = Tensor::zeros(slot.weight.shape());
        }
    }
    let d = 16;
    m.tok_embed = Tensor::zeros(&[VOCAB_SIZE, d]);
    m.pos_embed = Tensor::zeros(m.pos_embed.shape());
    for k in 0..4 {
        m.tok_embed.data_mut()[(b'A' as usize + k) * d + k] = 10.0;
    }
    for p in 0..128 {
        m.pos_embed.data_mut()[p * d + p % 4] = 10.0;
    }
    m
}

#[test]
fn perfect_oracle_scores_one() {
    let m = letter_oracle();
    let samples: Vec<Sample> = (1..40)
        .map(|len| {
            let input = "x".repeat(len);
            // SEP sits at position len + 1
            let answer = (len + 1) % 4;
            Sample {
                input,
                target: twostage::data::option_letter(answer),
                task: TaskTag::Knowledge,
                options: Some(vec!["w".into(), "x".into(), "y".into(), "z".into()]),
            }
        })
        .collect();
    assert_eq!(eval_mc_accuracy(&m, &samples).unwrap(), 1.0);
}

#[test]
fn random_init_accuracy_is_near_chance() {
    let m: ToyModel<f32> = init_base(&ModelConfig::default(), 0).unwrap();
    let acc = eval_mc_accuracy(&m, &questions(200)).unwrap();
    assert!((0.15..=0.35).contains(&acc), "{acc}");
}

#[test]
fn accuracy_error_contracts() {
    let m: ToyModel<f32> = init_base(&cfg16(), 0).unwrap();
    assert!(matches!(eval_mc_accuracy(&m, &[]), Err(Error::Metric(_))));
    let bare = vec![Sample::new("q", "A", TaskTag::Knowledge)];
    assert!(matches!(eval_mc_accuracy(&m, &bare), Err(Error::Metric(_))));
}

#[test]
fn activation_accounting_identity() {
    let m = mka_model(8, 2);
    let samples = questions(20);
    let act = route_stats(&m, &samples).unwrap();
    assert!(act.counts.is_symmetric());
    assert_eq!(act.slots, 3);
    let batch = build_batch(&samples, &Tokenizer, 128).unwrap();
    assert_eq!(act.tokens, batch.lengths.iter().sum::<usize>());
    assert_eq!(act.total(), (act.tokens * act.slots) as f64);
    let empty = route_stats(&m, &[]).unwrap();
    assert_eq!((empty.total(), empty.tokens), (0.0, 0));
}

#[test]
fn constructed_router_prefers_its_pair() {
    let mut m: ToyModel<f64> = init_base(&cfg16(), 3).unwrap();
    attach_mka(&mut m, &adapter(8), &Rng::new(3)).unwrap();
    // one embedding coordinate dominates every token, so h[0] > 0 after normalization
    for r in 0..VOCAB_SIZE {
        m.tok_embed.data_mut()[r * 16] = 10.0;
    }
    for slot in m.slots_mut() {
        match slot.kind {
            SlotKind::FfnGate | SlotKind::FfnUp => slot.weight.data_mut()[0] = 1.0,
            _ => {}
        }
    }
    for slot in m.slots_mut() {
        let SlotAdapters::Composite(c) = &mut slot.adapters else { continue };
        let na = c.na.as_mut().unwrap();
        na.router = Tensor::zeros(na.router.shape());
        // columns 0 and 1 of the first input row get a large offset
        na.router.data_mut()[0] = 3.0;
        na.router.data_mut()[1] = 3.0;
    }
    let act = route_stats(&m, &questions(20)).unwrap();
    assert_eq!(act.argmax(), Some((0, 1)));
    assert_eq!(act.counts.get(0, 1), act.total());
}

#[test]
fn routing_analysis_needs_noise_aggregators() {
    let mut m = mka_model(4, 0);
    strip_na(&mut m).unwrap();
    assert!(matches!(route_stats(&m, &questions(2)), Err(Error::State(_))));
    assert!(matches!(forced_pair_eval(&m, &questions(2), 0, 1, true), Err(Error::State(_))));
}

#[test]
fn forcing_the_only_pair_is_vanilla_inference() {
    let m = mka_model(2, 4);
    let toks: Vec<u32> = Tokenizer.encode("some prompt text");
    let plain = m.forward(&toks).unwrap();
    for renormalize in [true, false] {
        let opts = ForwardOptions {
            routing: twostage::adapters::Routing::ForcedPair { i: 0, j: 1, renormalize },
            drop_parallel: None,
        };
        let (forced, _) = m.forward_packed(&[&toks], &opts).unwrap();
        // K = E = 2 selects both experts; their softmax weights already sum to one
        assert!(plain.max_abs_diff(&forced) < 1e-6);
    }
    let qs = questions(30);
    let a = eval_mc_accuracy(&m, &qs).unwrap();
    assert!((forced_pair_eval(&m, &qs, 0, 1, true).unwrap() - a).abs() < 1e-12);
}

#[test]
fn forced_pairs_leave_the_model_untouched() {
    let m = mka_model(4, 5);
    let copy = m.clone();
    let qs = questions(12);
    assert!(matches!(forced_pair_eval(&m, &qs, 2, 2, true), Err(Error::Argument(_))));
    assert!(matches!(forced_pair_eval(&m, &qs, 0, 4, true), Err(Error::Argument(_))));
    let perf = pair_performance(&m, &qs, true).unwrap();
    route_stats(&m, &qs).unwrap();
    assert_eq!(m, copy);
    assert_eq!(perf.size(), 4);
    assert!(perf.is_symmetric());
    assert!(perf.upper().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(perf.upper().len(), 6);
    let csv = perf.to_csv();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().all(|l| l.split(',').count() == 4));
    let summary = mismatch_summary(&route_stats(&m, &qs).unwrap(), &perf);
    assert_eq!(summary.pairs, 6);
}

#[test]
fn rank_correlation() {
    assert_eq!(ranks(&[3.0, 1.0, 2.0]), vec![3.0, 1.0, 2.0]);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
    assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
    // ties use average ranks; oracle value from the Pearson formula on ranks by hand
    let rho = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    assert!((rho - 0.9486832980505138).abs() < 1e-12);
}

#[test]
fn fresh_baseline_is_the_base() {
    let base: ToyModel<f32> = init_base(&cfg16(), 0).unwrap();
    let m = build_parallel_lora_baseline(&base, &adapter(8), &Rng::new(0)).unwrap();
    let toks = Tokenizer.encode("zero delta");
    assert!(base.forward(&toks).unwrap().bitwise_eq(&m.forward(&toks).unwrap()));
    assert!(build_parallel_lora_baseline(&m, &adapter(8), &Rng::new(0)).is_err());
}

#[test]
fn drop_one_matches_zeroing_oracle() {
    let base: ToyModel<f64> = init_base(&cfg16(), 1).unwrap();
    let mut m = build_parallel_lora_baseline(&base, &adapter(8), &Rng::new(1)).unwrap();
    randomize(&mut m, &[".lora", ".attn_lora."], 0.3, 9);
    let toks = Tokenizer.encode("leave one out");
    for which in [1, 2] {
        let (dropped, _) = m.forward_packed(&[&toks], &drop_one(which).unwrap()).unwrap();
        let zeroed = zero_branch(&m, which).unwrap().forward(&toks).unwrap();
        assert!(dropped.bitwise_eq(&zeroed));
    }
    assert!(drop_one(3).is_err());
}

#[test]
fn swapped_branches_train_alike() {
    let corpus = build_corpus(
        &CorpusSizes { mka_knowledge: 48, mka_alignment: 48, eval_per_task: 8, ..CorpusSizes::default() },
        0,
    )
    .unwrap();
    let cfg = TrainConfig { batch_size: 16, peak_lr: 5e-3, adapter: adapter(8), ..TrainConfig::default() };
    for seed in 0..5 {
        let base: ToyModel<f64> = init_base(&cfg16(), seed).unwrap();
        let a = build_parallel_lora_baseline(&base, &cfg.adapter, &Rng::new(seed)).unwrap();
        let mut b = a.clone();
        for slot in b.slots_mut() {
            if let SlotAdapters::Parallel(p) = &mut slot.adapters {
                std::mem::swap(&mut p.lora1, &mut p.lora2);
            }
        }
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let mut traces = Vec::new();
        for mut m in [a, b] {
            let mut report = StageReport::new(StageKind::Mka, cfg.hash(), seed);
            train_loop(&mut m, &corpus.mka, &cfg, None, &mut report, &mut |_, _| Ok(false)).unwrap();
            traces.push(report.steps.iter().map(|s| s.nll).collect::<Vec<_>>());
        }
        // only the order of two additions differs between the runs
        for (x, y) in traces[0].iter().zip(&traces[1]) {
            assert!((x - y).abs() < 1e-8 * x.abs().max(1.0), "seed {seed}: {x} vs {y}");
        }
    }
}
