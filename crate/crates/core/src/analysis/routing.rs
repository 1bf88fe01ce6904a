//! Routing-mismatch tooling: how often each expert pair is co-selected versus how well
//! each pair performs when forced.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::adapters::Routing;
use crate::data::{build_batch, Sample, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, SlotAdapters, ToyModel};
use crate::tensor::Real;

use super::metrics::eval_mc_accuracy_with;

/// Symmetric `E×E` table of real values.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMatrix {
    n: usize,
    cells: Vec<f64>,
}

impl PairMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            cells: vec![0.0; n * n],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.cells[i * self.n + j]
    }

    /// Writes both `(i, j)` and `(j, i)`.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.cells[i * self.n + j] = v;
        self.cells[j * self.n + i] = v;
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Values of the strict upper triangle, row by row.
    pub fn upper(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                v.push(self.get(i, j));
            }
        }
        v
    }

    /// Headerless CSV, six decimals per cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| format!("{:.6}", self.get(i, j))).collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Fixed-width text table with row/column indices.
    pub fn render(&self, decimals: usize) -> String {
        let mut s = String::from("     ");
        for j in 0..self.n {
            let _ = write!(s, "{j:>10}");
        }
        s.push('\n');
        for i in 0..self.n {
            let _ = write!(s, "{i:>5}");
            for j in 0..self.n {
                let _ = write!(s, "{:>10.*}", decimals, self.get(i, j));
            }
            s.push('\n');
        }
        s
    }
}

/// Co-selection counts of expert pairs, plus the accounting totals.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    pub counts: PairMatrix,
    pub tokens: usize,
    pub slots: usize,
}

impl ActivationMatrix {
    /// Sum over unordered pairs (the upper triangle, plus the diagonal for `K = 1`).
    pub fn total(&self) -> f64 {
        let n = self.counts.size();
        (0..n)
            .flat_map(|i| (i..n).map(move |j| (i, j)))
            .map(|(i, j)| self.counts.get(i, j))
            .sum()
    }

    /// Most frequently co-selected pair.
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let n = self.counts.size();
        let mut best: Option<((usize, usize), f64)> = None;
        for i in 0..n {
            for j in i + 1..n {
                let v = self.counts.get(i, j);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some(((i, j), v));
                }
            }
        }
        best.map(|(p, _)| p)
    }
}

fn routed_experts<T: Real>(model: &ToyModel<T>) -> Result<(usize, usize)> {
    let mut experts = None;
    let mut slots = 0;
    for slot in model.slots() {
        if let SlotAdapters::Composite(c) = &slot.adapters {
            if let Some(na) = &c.na {
                experts = Some(na.num_experts());
                slots += 1;
            }
        }
    }
    match experts {
        Some(e) => Ok((e, slots)),
        None => Err(Error::state(format!(
            "routing analysis needs noise aggregators; model is at stage `{}`",
            model.stage
        ))),
    }
}

/// Runs every sample through `model` and counts, per token and routed slot, the unordered
/// pairs among the selected experts.
pub fn route_stats<T: Real>(model: &ToyModel<T>, samples: &[Sample]) -> Result<ActivationMatrix> {
    let (e, slots) = routed_experts(model)?;
    let mut counts = PairMatrix::zeros(e);
    let mut tokens = 0;
    for chunk in samples.chunks(32) {
        let batch = build_batch(chunk, &Tokenizer, model.config.max_seq_len)?;
        let packed = batch.packed();
        tokens += packed.targets.len();
        let (_, trace) = model.forward_packed(&packed.seqs, &ForwardOptions::default())?;
        for (_, sel) in &trace.routes {
            for s in sel {
                if s.len() == 1 {
                    let v = counts.get(s[0], s[0]);
                    counts.set(s[0], s[0], v + 1.0);
                }
                for a in 0..s.len() {
                    for b in a + 1..s.len() {
                        let v = counts.get(s[a], s[b]);
                        counts.set(s[a], s[b], v + 1.0);
                    }
                }
            }
        }
    }
    Ok(ActivationMatrix {
        counts,
        tokens,
        slots,
    })
}

/// Multiple-choice accuracy with every routed slot forced onto experts `{i, j}`.
/// The model itself is not modified.
pub fn forced_pair_eval<T: Real>(
    model: &ToyModel<T>,
    samples: &[Sample],
    i: usize,
    j: usize,
    renormalize: bool,
) -> Result<f64> {
    let (e, _) = routed_experts(model)?;
    if i == j || i >= e || j >= e {
        return Err(Error::Argument(format!(
            "forced pair needs two distinct experts below {e}, got ({i}, {j})"
        )));
    }
    let opts = ForwardOptions {
        routing: Routing::ForcedPair { i, j, renormalize },
        drop_parallel: None,
    };
    eval_mc_accuracy_with(model, samples, &opts)
}

/// Forced-pair accuracy for every unordered pair; the diagonal stays zero.
pub fn pair_performance<T: Real>(
    model: &ToyModel<T>,
    samples: &[Sample],
    renormalize: bool,
) -> Result<PairMatrix> {
    let (e, _) = routed_experts(model)?;
    let mut m = PairMatrix::zeros(e);
    for i in 0..e {
        for j in i + 1..e {
            m.set(i, j, forced_pair_eval(model, samples, i, j, renormalize)?);
        }
    }
    Ok(m)
}

/// Average ranks (1-based); ties share the mean of their positions.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut s = 0;
    while s < idx.len() {
        let mut e = s;
        while e + 1 < idx.len() && values[idx[e + 1]] == values[idx[s]] {
            e += 1;
        }
        let r = (s + e) as f64 / 2.0 + 1.0;
        for &k in &idx[s..=e] {
            out[k] = r;
        }
        s = e + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// JSON summary of one routing-mismatch measurement.
#[derive(Clone, Debug, Serialize)]
pub struct MismatchSummary {
    pub experts: usize,
    pub pairs: usize,
    pub tokens: usize,
    pub slots: usize,
    pub most_activated: Option<(usize, usize)>,
    pub best_performing: Option<(usize, usize)>,
    pub spearman: Option<f64>,
}

pub fn mismatch_summary(act: &ActivationMatrix, perf: &PairMatrix) -> MismatchSummary {
    let n = perf.size();
    let mut best: Option<((usize, usize), f64)> = None;
    for i in 0..n {
        for j in i + 1..n {
            let v = perf.get(i, j);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some(((i, j), v));
            }
        }
    }
    MismatchSummary {
        experts: n,
        pairs: n * n.saturating_sub(1) / 2,
        tokens: act.tokens,
        slots: act.slots,
        most_activated: act.argmax(),
        best_performing: best.map(|(p, _)| p),
        spearman: spearman(&act.counts.upper(), &perf.upper()),
    }
}
