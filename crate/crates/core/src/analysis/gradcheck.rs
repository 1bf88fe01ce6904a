//! End-to-end gradient check of the staged objectives against central differences.

use serde::Serialize;

use crate::adapters::{attach_align, attach_mka, merge_attention_lora, strip_na, AdapterConfig};
use crate::data::{build_batch, Packed, Sample, TaskTag, Tokenizer, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::model::{init_base, Binder, ModelConfig, ToyModel};
use crate::tensor::{finite_diff_grad_five_point, relative_error, Real, Rng, Tape, Tensor};
use crate::train::loss::default_options;
use crate::train::{loss_and_grads, record_objective};

/// Denominator floor for relative errors; coordinates with true gradient near zero are
/// compared on an absolute scale instead.
pub const GRADCHECK_FLOOR: f64 = 1e-6;
pub const GRADCHECK_EPS: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckResult {
    pub objective: String,
    pub parameters: usize,
    pub coordinates: usize,
    pub max_relative_error: f64,
    pub worst_parameter: String,
}

/// The small model the check runs on: one layer, width 8, E=4, K=2, r=2.
pub fn gradcheck_setup() -> (ModelConfig, AdapterConfig) {
    let model = ModelConfig::new(8, 1, 2, VOCAB_SIZE, 32);
    let adapter = AdapterConfig {
        rank: 2,
        alpha: 4.0,
        shared_experts: 2,
        experts: 4,
        top_k: 2,
        renormalize_topk: false,
    };
    (model, adapter)
}

fn samples() -> Vec<Sample> {
    vec![
        Sample::new("ab c", "xy", TaskTag::Knowledge),
        Sample::new("k", "[DRUG q]", TaskTag::Alignment),
    ]
}

/// Replaces every tensor with fresh noise so zero-initialized factors do not hide terms of
/// the gradient and activations are large enough to keep gradients well above round-off.
fn perturb(model: &mut ToyModel<f64>, rng: &mut Rng) {
    for (_, t) in model.params_mut() {
        let flag = t.requires_grad();
        *t = Tensor::randn(t.shape(), 0.3, rng).with_requires_grad(flag);
    }
}

/// Evaluates `model`'s objective and its router choices.
fn evaluate(
    model: &ToyModel<f64>,
    packed: &Packed<'_>,
    lambda: Option<f64>,
) -> Result<(f64, Vec<(String, Vec<Vec<usize>>)>)> {
    let mut tape = Tape::new();
    let mut binder = Binder::default();
    let obj = record_objective(&mut tape, &mut binder, model, packed, lambda, &default_options())?;
    Ok((tape.scalar(obj.total)?.as_f64(), obj.trace.routes))
}

/// `None` when some finite-difference probe changed the top-K selection: the objective is
/// not differentiable across a routing switch, so the comparison would be meaningless.
fn check(model: &ToyModel<f64>, lambda: Option<f64>, objective: &str) -> Result<Option<GradcheckResult>> {
    let batch = build_batch(&samples(), &Tokenizer, model.config.max_seq_len)?;
    let packed = batch.packed();
    let (_, grads) = loss_and_grads(model, &packed, lambda, &default_options(), true)?;
    let (_, routes) = evaluate(model, &packed, lambda)?;
    let names: Vec<String> = grads.iter().map(|(n, _)| n.clone()).collect();
    let params: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| model.registry().get(n).cloned().expect("bound parameter exists"))
        .collect();
    let mut work = model.clone();
    let mut switched = false;
    let numeric = finite_diff_grad_five_point(
        |ps| {
            for (name, t) in work.params_mut() {
                if let Some(i) = names.iter().position(|n| *n == name) {
                    t.data_mut().copy_from_slice(ps[i].data());
                }
            }
            let (v, r) = evaluate(&work, &packed, lambda).expect("loss evaluates");
            switched |= r != routes;
            v
        },
        &params,
        GRADCHECK_EPS,
    );
    if switched {
        return Ok(None);
    }
    let mut worst = (0.0, String::new());
    let mut coordinates = 0;
    for ((name, g), n) in grads.iter().zip(&numeric) {
        coordinates += g.numel();
        for (a, b) in g.data().iter().zip(n.data()) {
            let e = relative_error(*a, *b, GRADCHECK_FLOOR);
            if e > worst.0 || worst.1.is_empty() {
                worst = (e.max(worst.0), name.clone());
            }
        }
    }
    Ok(Some(GradcheckResult {
        objective: objective.to_string(),
        parameters: names.len(),
        coordinates,
        max_relative_error: worst.0,
        worst_parameter: worst.1,
    }))
}

/// Perturbs and checks, redrawing the noise until no probe crosses a routing boundary.
fn check_smooth(
    model: &mut ToyModel<f64>,
    root: &Rng,
    lambda: Option<f64>,
    objective: &str,
) -> Result<GradcheckResult> {
    const ATTEMPTS: usize = 16;
    for attempt in 0..ATTEMPTS {
        perturb(model, &mut root.substream(&format!("gradcheck/{objective}/{attempt}")));
        if let Some(r) = check(model, lambda, objective)? {
            return Ok(r);
        }
    }
    Err(Error::Metric(format!(
        "{objective}: every one of {ATTEMPTS} draws put a token on a routing boundary"
    )))
}

/// Checks the aggregation objective and the alignment objective (NLL plus `1·orth`) in
/// 64-bit arithmetic over every trainable parameter.
pub fn gradcheck_pipeline(seed: u64) -> Result<Vec<GradcheckResult>> {
    let (mcfg, acfg) = gradcheck_setup();
    let root = Rng::new(seed);
    let mut model: ToyModel<f64> = init_base(&mcfg.with_seed(seed), seed)?;
    attach_mka(&mut model, &acfg, &root.substream("adapters/mka"))?;
    let mka = check_smooth(&mut model, &root, None, "mka")?;

    strip_na(&mut model)?;
    merge_attention_lora(&mut model)?;
    attach_align(&mut model, &root.substream("adapters/da"))?;
    let da = check_smooth(&mut model, &root, Some(1.0), "da")?;
    Ok(vec![mka, da])
}
