//! AdamW with bias correction; moment buffers keyed by parameter name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ToyModel;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamW,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(hyper: AdamW) -> Self {
        Self {
            hyper,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Names of the parameters that own moment buffers.
    pub fn buffer_names(&self) -> Vec<&str> {
        self.moments.keys().map(String::as_str).collect()
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [(String, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64_lossy(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// One AdamW update over named parameters. Parameters without `requires_grad` are never
/// touched; every trainable parameter must have a gradient.
pub fn adamw_update<'a, T: Real>(
    params: impl IntoIterator<Item = (String, &'a mut Tensor<T>)>,
    grads: &[(String, Tensor<T>)],
    lr: f64,
    state: &mut OptimizerState,
) -> Result<()> {
    let lookup: BTreeMap<&str, &Tensor<T>> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
    let mut targets = Vec::new();
    for (name, p) in params {
        if !p.requires_grad() {
            continue;
        }
        let g = *lookup
            .get(name.as_str())
            .ok_or_else(|| Error::state(format!("missing gradient for trainable {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::Shape {
                op: "adamw",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                op: format!("gradient of {name}"),
            });
        }
        targets.push((name, p, g));
    }

    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for (name, p, g) in targets {
        let mo = state.moments.entry(name).or_insert_with(|| Moments {
            m: vec![0.0; p.numel()],
            v: vec![0.0; p.numel()],
        });
        for (i, (w, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gv = gv.as_f64();
            mo.m[i] = h.beta1 * mo.m[i] + (1.0 - h.beta1) * gv;
            mo.v[i] = h.beta2 * mo.v[i] + (1.0 - h.beta2) * gv * gv;
            let mhat = mo.m[i] / c1;
            let vhat = mo.v[i] / c2;
            let wf = w.as_f64();
            let next = wf - lr * (mhat / (vhat.sqrt() + h.eps) + h.weight_decay * wf);
            *w = T::from_f64_lossy(next);
        }
    }
    Ok(())
}

/// [`adamw_update`] over every parameter of `model`.
pub fn adamw_step<T: Real>(
    model: &mut ToyModel<T>,
    grads: &[(String, Tensor<T>)],
    lr: f64,
    state: &mut OptimizerState,
) -> Result<()> {
    adamw_update(model.params_mut(), grads, lr, state)
}
