//! Mixture of LoRA experts with a per-token softmax router and top-K selection.

use crate::error::{Error, Result};
use crate::model::ParamSource;
use crate::tensor::{Real, Rng, Tape, Tensor, Var};

use super::lora::{lora_init, LoraAdapter, LORA_INIT_STD};

#[derive(Clone, Debug, PartialEq)]
pub struct MoLoraAdapter<T> {
    pub experts: Vec<LoraAdapter<T>>,
    /// `d_in × E`
    pub router: Tensor<T>,
    pub top_k: usize,
    pub renormalize: bool,
}

/// How the router's choice is made for one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Routing {
    /// The K largest softmax entries per token.
    #[default]
    TopK,
    /// Every token uses experts `{i, j}`, weighted by the router's softmax restricted to
    /// the pair (renormalized over the pair when `renormalize`).
    ForcedPair { i: usize, j: usize, renormalize: bool },
}

/// Indices of the `k` largest entries of `row`, largest first; ties go to the lower index.
pub fn top_k_indices<T: Real>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn molora_init<T: Real>(
    d_in: usize,
    d_out: usize,
    experts: usize,
    top_k: usize,
    rank: usize,
    alpha: f64,
    renormalize: bool,
    rng: &Rng,
) -> Result<MoLoraAdapter<T>> {
    if top_k == 0 || top_k > experts {
        return Err(Error::Config(format!(
            "top_k {top_k} must be within 1..={experts}"
        )));
    }
    let experts = (0..experts)
        .map(|e| {
            lora_init(
                d_in,
                d_out,
                rank,
                alpha,
                &mut rng.substream(&format!("expert{e}")),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let router = Tensor::randn(
        &[d_in, experts.len()],
        LORA_INIT_STD,
        &mut rng.substream("router"),
    )
    .with_requires_grad(true);
    Ok(MoLoraAdapter {
        experts,
        router,
        top_k,
        renormalize,
    })
}

impl<T: Real> MoLoraAdapter<T> {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn scale(&self) -> f64 {
        self.experts[0].scale()
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.experts.len();
        if self.top_k == 0 || self.top_k > e {
            return Err(Error::Config(format!(
                "top_k {} exceeds {e} experts",
                self.top_k
            )));
        }
        if self.router.cols() != e {
            return Err(Error::Shape {
                op: "molora",
                lhs: self.router.shape().to_vec(),
                rhs: vec![e],
            });
        }
        let (r, alpha) = (self.experts[0].rank(), self.experts[0].alpha);
        if self.experts.iter().any(|x| x.rank() != r || x.alpha != alpha) {
            return Err(Error::Config("all experts must share rank and alpha".into()));
        }
        Ok(())
    }

    /// Records the routed delta `Σ_{i∈sel} w_i·(α/r)·x·A_i·B_i`. Returns it together with
    /// the selected expert indices of every row.
    pub fn record_delta<S: ParamSource<T>>(
        &self,
        tape: &mut Tape<T>,
        src: &mut S,
        prefix: &str,
        x: Var,
        routing: Routing,
    ) -> Result<(Var, Vec<Vec<usize>>)> {
        self.validate()?;
        let e = self.num_experts();
        let router = src.bind(tape, &format!("{prefix}.router"), &self.router);
        let logits = tape.matmul(x, router)?;
        let probs = tape.softmax_lastdim(logits)?;
        let (selections, renormalize) = {
            let g = tape.value(probs);
            match routing {
                Routing::TopK => (
                    (0..g.rows())
                        .map(|t| top_k_indices(g.row(t), self.top_k))
                        .collect::<Vec<_>>(),
                    self.renormalize,
                ),
                Routing::ForcedPair { i, j, renormalize } => {
                    if i == j || i >= e || j >= e {
                        return Err(Error::Argument(format!(
                            "forced pair ({i}, {j}) must be two distinct experts below {e}"
                        )));
                    }
                    (vec![vec![i, j]; g.rows()], renormalize)
                }
            }
        };
        let gates = tape.gate_select(probs, &selections, renormalize)?;
        let mut acc: Option<Var> = None;
        for (i, expert) in self.experts.iter().enumerate() {
            let a = src.bind(tape, &format!("{prefix}.expert{i}.A"), &expert.a);
            let b = src.bind(tape, &format!("{prefix}.expert{i}.B"), &expert.b);
            let xa = tape.matmul(x, a)?;
            let xab = tape.matmul(xa, b)?;
            let weighted = tape.scale_rows(xab, gates, i)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, weighted)?,
                None => weighted,
            });
        }
        let sum = acc.expect("at least one expert");
        Ok((tape.scale(sum, self.scale())?, selections))
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.router.set_requires_grad(flag);
        self.experts.iter_mut().for_each(|x| x.set_trainable(flag));
    }

    pub fn cast<U: Real>(&self) -> MoLoraAdapter<U> {
        MoLoraAdapter {
            experts: self.experts.iter().map(|x| x.cast()).collect(),
            router: self.router.cast(),
            top_k: self.top_k,
            renormalize: self.renormalize,
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}.router"), &self.router);
        for (i, x) in self.experts.iter().enumerate() {
            x.visit(&format!("{prefix}.expert{i}"), f);
        }
    }

    pub(crate) fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut Tensor<T>),
    ) {
        f(format!("{prefix}.router"), &mut self.router);
        for (i, x) in self.experts.iter_mut().enumerate() {
            x.visit_mut(&format!("{prefix}.expert{i}"), f);
        }
    }
}

/// Result of an eager MoLoRA forward.
#[derive(Clone, Debug)]
pub struct MoLoraOutput<T> {
    pub output: Tensor<T>,
    pub selections: Vec<Vec<usize>>,
    /// Router softmax per row, `m × E`.
    pub router_probs: Tensor<T>,
}

/// Eager `x·W + routed delta`.
pub fn molora_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    molora: &MoLoraAdapter<T>,
) -> Result<MoLoraOutput<T>> {
    molora_forward_routed(x, w, molora, Routing::TopK)
}

pub fn molora_forward_routed<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    molora: &MoLoraAdapter<T>,
    routing: Routing,
) -> Result<MoLoraOutput<T>> {
    let mut tape = Tape::new();
    let mut src = crate::model::Anonymous;
    let xv = tape.leaf(x);
    let wv = tape.leaf(w);
    let base = tape.matmul(xv, wv)?;
    let (delta, selections) = molora.record_delta(&mut tape, &mut src, "na", xv, routing)?;
    let out = tape.add(base, delta)?;
    let router_probs = crate::tensor::softmax_lastdim(&crate::tensor::matmul(x, &molora.router)?)?;
    Ok(MoLoraOutput {
        output: tape.value(out).clone(),
        selections,
        router_probs,
    })
}
