//! Decoder-only transformer: learned token and position embeddings, pre-norm blocks of
//! causal multi-head attention and a SiLU-gated feed-forward, RMS norms, tied output
//! embedding.

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterConfig;
use crate::error::{Error, Result};
use crate::tensor::{Real, Rng, Segment, Tape, Tensor, Var};

use super::registry::{Anonymous, ParamSource, ParameterRegistry};
use super::slot::{AdapterSlot, ForwardOptions, SlotAdapters, SlotKind};
use super::ModelConfig;

/// Standard deviation of every base weight at initialization.
pub const BASE_INIT_STD: f64 = 0.02;
pub const RMS_EPS: f64 = 1e-8;

/// Where a model is in the fine-tuning pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Mka,
    Stripped,
    Da,
    Merged,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Mka => "mka",
            Stage::Stripped => "stripped",
            Stage::Da => "da",
            Stage::Merged => "merged",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub attn_norm: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    /// In [`SlotKind::ALL`] order.
    pub slots: Vec<AdapterSlot<T>>,
}

impl<T: Real> Block<T> {
    pub fn slot(&self, kind: SlotKind) -> &AdapterSlot<T> {
        &self.slots[SlotKind::ALL.iter().position(|k| *k == kind).expect("known kind")]
    }
}

/// Router choices recorded during a forward pass, one entry per slot with a noise
/// aggregator, each holding the selected expert indices of every token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardTrace {
    pub routes: Vec<(String, Vec<Vec<usize>>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel<T> {
    pub config: ModelConfig,
    pub tok_embed: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Tensor<T>,
    pub stage: Stage,
    /// Attention adapters have been folded into the attention weights.
    pub attention_merged: bool,
    pub adapter_config: Option<AdapterConfig>,
}

/// Fresh base model with every weight drawn from N(0, 0.02²) out of a substream named
/// after the parameter, norm gains at one, and everything frozen.
pub fn init_base<T: Real>(config: &ModelConfig, seed: u64) -> Result<ToyModel<T>> {
    config.validate()?;
    let root = Rng::new(seed).substream("init");
    let draw = |name: &str, shape: &[usize]| {
        Tensor::<T>::randn(shape, BASE_INIT_STD, &mut root.substream(name))
    };
    let d = config.d_model;
    let blocks = (0..config.n_layers)
        .map(|l| Block {
            attn_norm: Tensor::filled(&[d], T::one()),
            ffn_norm: Tensor::filled(&[d], T::one()),
            slots: SlotKind::ALL
                .iter()
                .map(|&kind| {
                    let name = format!("layer{l}.{}", kind.path());
                    let (din, dout) = kind.dims(d, config.d_ff);
                    AdapterSlot {
                        weight: draw(&format!("{name}.weight"), &[din, dout]),
                        name,
                        kind,
                        adapters: SlotAdapters::None,
                    }
                })
                .collect(),
        })
        .collect();
    let mut config = config.clone();
    config.seed = seed;
    Ok(ToyModel {
        tok_embed: draw("embed.tokens", &[config.vocab_size, d]),
        pos_embed: draw("embed.positions", &[config.max_seq_len, d]),
        blocks,
        final_norm: Tensor::filled(&[d], T::one()),
        stage: Stage::Base,
        attention_merged: false,
        adapter_config: None,
        config,
    })
}

impl<T: Real> ToyModel<T> {
    pub fn registry(&self) -> ParameterRegistry<'_, T> {
        let mut entries = Vec::new();
        self.visit(&mut |name, t| entries.push((name, t)));
        ParameterRegistry::new(entries)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f("embed.tokens".into(), &self.tok_embed);
        f("embed.positions".into(), &self.pos_embed);
        for (l, b) in self.blocks.iter().enumerate() {
            f(format!("layer{l}.attn_norm.gain"), &b.attn_norm);
            for s in &b.slots[..4] {
                s.visit(f);
            }
            f(format!("layer{l}.ffn_norm.gain"), &b.ffn_norm);
            for s in &b.slots[4..] {
                s.visit(f);
            }
        }
        f("final_norm.gain".into(), &self.final_norm);
    }

    /// Every parameter, mutably, in registry order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        out.push(("embed.tokens".into(), &mut self.tok_embed));
        out.push(("embed.positions".into(), &mut self.pos_embed));
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("layer{l}.attn_norm.gain"), &mut b.attn_norm));
            let (attn, ffn) = b.slots.split_at_mut(4);
            for s in attn {
                s.visit_mut(&mut |n, t| out.push((n, t)));
            }
            out.push((format!("layer{l}.ffn_norm.gain"), &mut b.ffn_norm));
            for s in ffn {
                s.visit_mut(&mut |n, t| out.push((n, t)));
            }
        }
        out.push(("final_norm.gain".into(), &mut self.final_norm));
        out
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        for (_, t) in self.params_mut() {
            t.set_requires_grad(flag);
        }
    }

    pub fn slots(&self) -> impl Iterator<Item = &AdapterSlot<T>> {
        self.blocks.iter().flat_map(|b| b.slots.iter())
    }

    pub fn slots_mut(&mut self) -> impl Iterator<Item = &mut AdapterSlot<T>> {
        self.blocks.iter_mut().flat_map(|b| b.slots.iter_mut())
    }

    pub fn slot(&self, layer: usize, kind: SlotKind) -> &AdapterSlot<T> {
        self.blocks[layer].slot(kind)
    }

    pub fn cast<U: Real>(&self) -> ToyModel<U> {
        ToyModel {
            config: self.config.clone(),
            tok_embed: self.tok_embed.cast(),
            pos_embed: self.pos_embed.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    attn_norm: b.attn_norm.cast(),
                    ffn_norm: b.ffn_norm.cast(),
                    slots: b.slots.iter().map(|s| s.cast()).collect(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            stage: self.stage,
            attention_merged: self.attention_merged,
            adapter_config: self.adapter_config.clone(),
        }
    }

    fn check_tokens(&self, seq: &[u32]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::Argument("empty token sequence".into()));
        }
        if seq.len() > self.config.max_seq_len {
            return Err(Error::Length {
                len: seq.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = seq.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the full forward over packed sequences and returns the `M×vocab` logits.
    pub fn record_forward<S: ParamSource<T>>(
        &self,
        tape: &mut Tape<T>,
        src: &mut S,
        seqs: &[&[u32]],
        opts: &ForwardOptions,
    ) -> Result<(Var, ForwardTrace)> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for seq in seqs {
            self.check_tokens(seq)?;
            segments.push(Segment {
                start: ids.len(),
                len: seq.len(),
            });
            ids.extend(seq.iter().map(|&t| t as usize));
            positions.extend(0..seq.len());
        }
        let mut trace = ForwardTrace::default();

        let tok = src.bind(tape, "embed.tokens", &self.tok_embed);
        let pos = src.bind(tape, "embed.positions", &self.pos_embed);
        let te = tape.gather_rows(tok, &ids)?;
        let pe = tape.gather_rows(pos, &positions)?;
        let mut x = tape.add(te, pe)?;

        for (l, block) in self.blocks.iter().enumerate() {
            let g = src.bind(tape, &format!("layer{l}.attn_norm.gain"), &block.attn_norm);
            let h = tape.rms_norm(x, g, RMS_EPS)?;
            let a = self.record_attention(tape, src, block, h, &segments, opts, &mut trace)?;
            x = tape.add(x, a)?;

            let g = src.bind(tape, &format!("layer{l}.ffn_norm.gain"), &block.ffn_norm);
            let h = tape.rms_norm(x, g, RMS_EPS)?;
            let f = record_ffn(tape, src, &block.slots[4..], h, opts, &mut trace)?;
            x = tape.add(x, f)?;
        }
        let g = src.bind(tape, "final_norm.gain", &self.final_norm);
        let h = tape.rms_norm(x, g, RMS_EPS)?;
        let logits = tape.matmul_nt(h, tok)?;
        Ok((logits, trace))
    }

    #[allow(clippy::too_many_arguments)]
    fn record_attention<S: ParamSource<T>>(
        &self,
        tape: &mut Tape<T>,
        src: &mut S,
        block: &Block<T>,
        h: Var,
        segments: &[Segment],
        opts: &ForwardOptions,
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        let mut proj = |tape: &mut Tape<T>, slot: &AdapterSlot<T>, x: Var| -> Result<Var> {
            let (y, routes) = slot.record_forward(tape, src, x, opts)?;
            if let Some(r) = routes {
                trace.routes.push((slot.name.clone(), r));
            }
            Ok(y)
        };
        let q = proj(tape, &block.slots[0], h)?;
        let k = proj(tape, &block.slots[1], h)?;
        let v = proj(tape, &block.slots[2], h)?;
        let a = tape.causal_attention(q, k, v, segments, self.config.n_heads)?;
        proj(tape, &block.slots[3], a)
    }

    /// Logits of one sequence, `m × vocab_size`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        Ok(self.forward_packed(&[tokens], &ForwardOptions::default())?.0)
    }

    /// Logits for several sequences packed row-wise, plus the routing trace.
    pub fn forward_packed(
        &self,
        seqs: &[&[u32]],
        opts: &ForwardOptions,
    ) -> Result<(Tensor<T>, ForwardTrace)> {
        let mut tape = Tape::new();
        let (logits, trace) = self.record_forward(&mut tape, &mut Anonymous, seqs, opts)?;
        Ok((tape.value(logits).clone(), trace))
    }

    /// Causal self-attention of layer `layer` applied to `x` (`m × d`) as one sequence.
    pub fn attention_forward(&self, layer: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, _) = x.dims2("attention_forward")?;
        if m > self.config.max_seq_len {
            return Err(Error::Length {
                len: m,
                max: self.config.max_seq_len,
            });
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let seg = [Segment { start: 0, len: m }];
        let out = self.record_attention(
            &mut tape,
            &mut Anonymous,
            &self.blocks[layer],
            xv,
            &seg,
            &ForwardOptions::default(),
            &mut ForwardTrace::default(),
        )?;
        Ok(tape.value(out).clone())
    }
}

fn record_ffn<T: Real, S: ParamSource<T>>(
    tape: &mut Tape<T>,
    src: &mut S,
    slots: &[AdapterSlot<T>],
    h: Var,
    opts: &ForwardOptions,
    trace: &mut ForwardTrace,
) -> Result<Var> {
    let mut proj = |tape: &mut Tape<T>, slot: &AdapterSlot<T>, x: Var| -> Result<Var> {
        let (y, routes) = slot.record_forward(tape, src, x, opts)?;
        if let Some(r) = routes {
            trace.routes.push((slot.name.clone(), r));
        }
        Ok(y)
    };
    let g = proj(tape, &slots[0], h)?;
    let u = proj(tape, &slots[1], h)?;
    let sg = tape.silu(g)?;
    let f = tape.mul(u, sg)?;
    proj(tape, &slots[2], f)
}

/// `(x·W_u ⊙ silu(x·W_g))·W_d`, each linear going through its slot's adapters.
pub fn ffn_forward<T: Real>(
    x: &Tensor<T>,
    gate: &AdapterSlot<T>,
    up: &AdapterSlot<T>,
    down: &AdapterSlot<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let out = record_ffn(
        &mut tape,
        &mut Anonymous,
        &[gate.clone(), up.clone(), down.clone()],
        xv,
        &ForwardOptions::default(),
        &mut ForwardTrace::default(),
    )?;
    Ok(tape.value(out).clone())
}
