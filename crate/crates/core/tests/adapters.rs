use proptest::prelude::*;
use twostage::adapters::{
    attach_align, attach_mka, composite_forward_da, composite_forward_mka, lora_forward, lora_init,
    merge_attention_lora, merge_final, molora_forward, molora_forward_routed, molora_init,
    strip_na, top_k_indices, AdapterConfig, CompositeAdapter, MoLoraAdapter, Routing,
};
use twostage::data::VOCAB_SIZE;
use twostage::model::{init_base, ModelConfig, SlotAdapters, Stage, ToyModel};
use twostage::tensor::{Rng, Tensor};
use twostage::Error;

const ADAPTER_TAGS: [&str; 5] = [".ka.", ".na.", ".align.", ".attn_lora.", ".lora"];

fn is_adapter(name: &str) -> bool {
    ADAPTER_TAGS.iter().any(|t| name.contains(t))
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a.get2(i, p) * b.get2(p, j)).sum();
        }
    }
    out
}

fn lora_delta_row(x: &[f64], a: &Tensor<f64>, b: &Tensor<f64>, scale: f64) -> Vec<f64> {
    let xa: Vec<f64> = (0..a.cols()).map(|c| (0..x.len()).map(|p| x[p] * a.get2(p, c)).sum()).collect();
    (0..b.cols())
        .map(|j| scale * (0..xa.len()).map(|c| xa[c] * b.get2(c, j)).sum::<f64>())
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn random_molora(din: usize, dout: usize, e: usize, k: usize, renorm: bool, seed: u64) -> MoLoraAdapter<f64> {
    let rng = Rng::new(seed);
    let mut m = molora_init::<f64>(din, dout, e, k, 2, 4.0, renorm, &rng).unwrap();
    let mut r = rng.substream("fill");
    for x in &mut m.experts {
        x.b = Tensor::randn(&[2, dout], 0.5, &mut r);
    }
    m.router = Tensor::randn(&[din, e], 1.0, &mut r);
    m
}

/// Routed delta of one row recomputed from scratch.
fn molora_oracle_row(x: &[f64], m: &MoLoraAdapter<f64>, sel: &[usize], renorm: bool) -> Vec<f64> {
    let logits: Vec<f64> = (0..m.num_experts())
        .map(|e| (0..x.len()).map(|p| x[p] * m.router.get2(p, e)).sum())
        .collect();
    let p = softmax(&logits);
    let z: f64 = if renorm { sel.iter().map(|&i| p[i]).sum() } else { 1.0 };
    let mut out = vec![0.0; m.experts[0].d_out()];
    for &i in sel {
        let d = lora_delta_row(x, &m.experts[i].a, &m.experts[i].b, m.scale());
        for (o, v) in out.iter_mut().zip(d) {
            *o += p[i] / z * v;
        }
    }
    out
}

fn small_model() -> ToyModel<f64> {
    init_base(&ModelConfig::new(16, 2, 2, VOCAB_SIZE, 24), 3).unwrap()
}

fn randomize_adapters(model: &mut ToyModel<f64>, seed: u64) {
    let mut rng = Rng::new(seed);
    for (name, t) in model.params_mut() {
        if is_adapter(&name) {
            let flag = t.requires_grad();
            *t = Tensor::randn(t.shape(), 0.2, &mut rng).with_requires_grad(flag);
        }
    }
}

fn tokens(seed: u64, n: usize) -> Vec<u32> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.below(VOCAB_SIZE) as u32).collect()
}

#[test]
fn lora_matches_hand_computation() {
    let mut rng = Rng::new(5);
    let mut l = lora_init::<f64>(6, 5, 3, 6.0, &mut rng).unwrap();
    l.b = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let w = Tensor::randn(&[6, 5], 1.0, &mut rng);
    let out = lora_forward(&x, &w, &l).unwrap();
    let base = naive_matmul(&x, &w);
    for t in 0..4 {
        let d = lora_delta_row(x.row(t), &l.a, &l.b, 2.0);
        for j in 0..5 {
            assert!((out.get2(t, j) - base[t * 5 + j] - d[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn lora_init_contract() {
    let l = lora_init::<f32>(16, 8, 4, 8.0, &mut Rng::new(0)).unwrap();
    assert!(l.b.is_all_zero());
    assert!(l.a.requires_grad() && l.b.requires_grad());
    assert_eq!(l.scale(), 2.0);
    assert!(matches!(
        lora_init::<f32>(4, 8, 5, 8.0, &mut Rng::new(0)),
        Err(Error::AdapterRank { rank: 5, .. })
    ));
    assert!(lora_init::<f32>(4, 8, 0, 8.0, &mut Rng::new(0)).is_err());
}

#[test]
fn fresh_lora_is_exactly_the_base_product() {
    let mut rng = Rng::new(6);
    let l = lora_init::<f32>(8, 8, 2, 4.0, &mut rng).unwrap();
    let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let w = Tensor::randn(&[8, 8], 1.0, &mut rng);
    let out = lora_forward(&x, &w, &l).unwrap();
    assert!(out.bitwise_eq(&twostage::tensor::matmul(&x, &w).unwrap()));
}

#[test]
fn top_k_ties_break_low() {
    assert_eq!(top_k_indices(&[0.25f64, 0.25, 0.25, 0.25], 2), vec![0, 1]);
    assert_eq!(top_k_indices(&[0.1f64, 0.3, 0.6], 3), vec![2, 1, 0]);
}

#[test]
fn molora_rejects_bad_routing() {
    assert!(molora_init::<f64>(4, 4, 4, 5, 2, 4.0, false, &Rng::new(0)).is_err());
    assert!(molora_init::<f64>(4, 4, 4, 0, 2, 4.0, false, &Rng::new(0)).is_err());
    let m = random_molora(4, 3, 4, 2, false, 0);
    let x = Tensor::zeros(&[2, 4]);
    let w = Tensor::zeros(&[4, 3]);
    for (i, j) in [(1, 1), (0, 4)] {
        let r = Routing::ForcedPair { i, j, renormalize: true };
        assert!(matches!(molora_forward_routed(&x, &w, &m, r), Err(Error::Argument(_))));
    }
}

#[test]
fn forced_pair_single_pair_with_two_experts_matches_top_two() {
    let m = random_molora(5, 4, 2, 2, true, 8);
    let x = Tensor::randn(&[6, 5], 1.0, &mut Rng::new(1));
    let w = Tensor::zeros(&[5, 4]);
    let a = molora_forward(&x, &w, &m).unwrap();
    let b = molora_forward_routed(&x, &w, &m, Routing::ForcedPair { i: 0, j: 1, renormalize: true })
        .unwrap();
    assert!(a.output.max_abs_diff(&b.output) < 1e-12);
}

#[test]
fn composite_forwards_check_their_stage() {
    let rng = Rng::new(2);
    let ka = lora_init::<f64>(6, 5, 4, 8.0, &mut rng.substream("ka")).unwrap();
    let align = lora_init::<f64>(6, 5, 4, 8.0, &mut rng.substream("al")).unwrap();
    let na = random_molora(6, 5, 4, 2, false, 3);
    let x = Tensor::randn(&[3, 6], 1.0, &mut Rng::new(4));
    let w = Tensor::randn(&[6, 5], 1.0, &mut Rng::new(5));
    let mka = CompositeAdapter { ka: ka.clone(), na: Some(na.clone()), align: None, shared_experts: 2 };
    let da = CompositeAdapter { ka: ka.clone(), na: None, align: Some(align.clone()), shared_experts: 2 };
    assert!(composite_forward_mka(&x, &w, &mka).is_ok());
    assert!(composite_forward_da(&x, &w, &da).is_ok());
    assert!(composite_forward_da(&x, &w, &mka).is_err());
    assert!(composite_forward_mka(&x, &w, &da).is_err());
    let both = CompositeAdapter { ka, na: Some(na), align: Some(align), shared_experts: 2 };
    assert!(both.validate().is_err());
}

#[test]
fn composite_mka_is_base_plus_both_aggregators() {
    let mut rng = Rng::new(9);
    let mut ka = lora_init::<f64>(6, 5, 4, 8.0, &mut rng).unwrap();
    ka.b = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let na = random_molora(6, 5, 4, 2, false, 10);
    let c = CompositeAdapter { ka: ka.clone(), na: Some(na.clone()), align: None, shared_experts: 2 };
    let x = Tensor::randn(&[7, 6], 1.0, &mut rng);
    let w = Tensor::randn(&[6, 5], 1.0, &mut rng);
    let out = composite_forward_mka(&x, &w, &c).unwrap();
    let routed = molora_forward(&x, &w, &na).unwrap();
    let base = naive_matmul(&x, &w);
    for t in 0..7 {
        let k = lora_delta_row(x.row(t), &ka.a, &ka.b, ka.scale());
        let n = molora_oracle_row(x.row(t), &na, &routed.selections[t], false);
        for j in 0..5 {
            assert!((out.get2(t, j) - (base[t * 5 + j] + k[j] + n[j])).abs() < 1e-10);
        }
    }
}

#[test]
fn attach_mka_freezes_base_and_trains_adapters() {
    let mut m = small_model();
    attach_mka(&mut m, &AdapterConfig::default(), &Rng::new(0)).unwrap();
    assert_eq!(m.stage, Stage::Mka);
    let reg = m.registry();
    for (name, t) in reg.iter() {
        assert_eq!(t.requires_grad(), is_adapter(name), "{name}");
    }
    let per_layer_ffn = 3 * (2 + 1 + 2 * 8);
    let per_layer_attn = 4 * 2;
    assert_eq!(reg.trainable_names().len(), 2 * (per_layer_ffn + per_layer_attn));
}

#[test]
fn zero_delta_after_attach() {
    let base = small_model();
    let mut m = base.clone();
    attach_mka(&mut m, &AdapterConfig::default(), &Rng::new(1)).unwrap();
    for s in 0..10 {
        let t = tokens(s, 20);
        assert!(base.forward(&t).unwrap().bitwise_eq(&m.forward(&t).unwrap()));
    }
}

#[test]
fn lifecycle_order_is_enforced() {
    let mut m = small_model();
    assert!(strip_na(&mut m).is_err());
    assert!(merge_final(&mut m).is_err());
    attach_mka(&mut m, &AdapterConfig::default(), &Rng::new(0)).unwrap();
    assert!(attach_mka(&mut m, &AdapterConfig::default(), &Rng::new(0)).is_err());
    assert!(attach_align(&mut m, &Rng::new(0)).is_err());
    assert!(merge_attention_lora(&mut m).is_err());
    assert!(merge_final(&mut m).is_err());
    strip_na(&mut m).unwrap();
    assert!(strip_na(&mut m).is_err());
    assert!(attach_align(&mut m, &Rng::new(0)).is_err());
    merge_attention_lora(&mut m).unwrap();
    assert!(merge_attention_lora(&mut m).is_err());
    attach_align(&mut m, &Rng::new(0)).unwrap();
    assert_eq!(m.stage, Stage::Da);
    merge_final(&mut m).unwrap();
    assert!(merge_final(&mut m).is_err());
    assert!(m.registry().names().iter().all(|n| !is_adapter(n)));
}

#[test]
fn strip_matches_zeroed_noise_aggregator() {
    let mut m = small_model();
    attach_mka(&mut m, &AdapterConfig::default(), &Rng::new(2)).unwrap();
    randomize_adapters(&mut m, 4);
    let mut zeroed = m.clone();
    for slot in zeroed.slots_mut() {
        if let SlotAdapters::Composite(c) = &mut slot.adapters {
            for e in &mut c.na.as_mut().unwrap().experts {
                e.b = Tensor::zeros(e.b.shape());
            }
        }
    }
    let mut stripped = m.clone();
    strip_na(&mut stripped).unwrap();
    assert!(stripped.registry().names().iter().all(|n| !n.contains(".na.")));
    for s in 0..10 {
        let t = tokens(100 + s, 18);
        assert!(stripped.forward(&t).unwrap().bitwise_eq(&zeroed.forward(&t).unwrap()));
    }
}

#[test]
fn merges_preserve_the_function() {
    let mut m = small_model();
    attach_mka(&mut m, &AdapterConfig::default(), &Rng::new(5)).unwrap();
    randomize_adapters(&mut m, 6);
    strip_na(&mut m).unwrap();
    let before = m.clone();
    merge_attention_lora(&mut m).unwrap();
    for s in 0..5 {
        let t = tokens(200 + s, 16);
        assert!(before.forward(&t).unwrap().max_abs_diff(&m.forward(&t).unwrap()) < 1e-10);
    }
    attach_align(&mut m, &Rng::new(7)).unwrap();
    randomize_adapters(&mut m, 8);
    let before = m.clone();
    merge_final(&mut m).unwrap();
    for s in 0..5 {
        let t = tokens(300 + s, 16);
        assert!(before.forward(&t).unwrap().max_abs_diff(&m.forward(&t).unwrap()) < 1e-10);
    }
}

#[test]
fn align_starts_at_zero_and_keeps_ka_trainable() {
    let mut m = small_model();
    attach_mka(&mut m, &AdapterConfig::default(), &Rng::new(5)).unwrap();
    strip_na(&mut m).unwrap();
    merge_attention_lora(&mut m).unwrap();
    let before = m.clone();
    attach_align(&mut m, &Rng::new(1)).unwrap();
    let t = tokens(9, 12);
    assert!(before.forward(&t).unwrap().bitwise_eq(&m.forward(&t).unwrap()));
    let reg = m.registry();
    let trainable = reg.trainable_names();
    assert_eq!(trainable.len(), 2 * 3 * 4);
    assert!(trainable.iter().all(|n| n.contains(".ka.") || n.contains(".align.")));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    // 100 cases of 100..140 rows each: well over ten thousand routed tokens
    #[test]
    fn routing_contract(seed in any::<u64>(), e in 2usize..9, k_raw in 1usize..9, rows in 100usize..140, renorm in any::<bool>()) {
        let k = 1 + (k_raw - 1) % e;
        let m = random_molora(6, 4, e, k, renorm, seed);
        let x = Tensor::randn(&[rows, 6], 1.5, &mut Rng::new(seed ^ 0x5eed));
        let w = Tensor::zeros(&[6, 4]);
        let out = molora_forward(&x, &w, &m).unwrap();
        for t in 0..rows {
            let sel = &out.selections[t];
            prop_assert_eq!(sel.len(), k);
            let mut uniq = sel.clone();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), k);
            let p = out.router_probs.row(t);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let min_sel = sel.iter().map(|&i| p[i]).fold(f64::INFINITY, f64::min);
            for i in (0..e).filter(|i| !sel.contains(i)) {
                prop_assert!(p[i] <= min_sel);
            }
            let expect = molora_oracle_row(x.row(t), &m, sel, renorm);
            for j in 0..4 {
                prop_assert!((out.output.get2(t, j) - expect[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forced_pair_weights(seed in any::<u64>(), i in 0usize..8, j in 0usize..8, renorm in any::<bool>()) {
        prop_assume!(i != j);
        let m = random_molora(5, 3, 8, 2, false, seed);
        let x = Tensor::randn(&[20, 5], 1.0, &mut Rng::new(seed.wrapping_add(1)));
        let w = Tensor::zeros(&[5, 3]);
        let out = molora_forward_routed(&x, &w, &m, Routing::ForcedPair { i, j, renormalize: renorm }).unwrap();
        for t in 0..20 {
            prop_assert_eq!(&out.selections[t], &vec![i, j]);
            let expect = molora_oracle_row(x.row(t), &m, &[i, j], renorm);
            for c in 0..3 {
                prop_assert!((out.output.get2(t, c) - expect[c]).abs() < 1e-9);
            }
        }
    }
}
