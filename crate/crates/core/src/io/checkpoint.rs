//! Directory checkpoints: `manifest.json` plus a raw little-endian `tensors.bin`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterConfig, CompositeAdapter, LoraAdapter, MoLoraAdapter, ParallelLora};
use crate::error::{Error, Result};
use crate::model::{init_base, ModelConfig, SlotAdapters, Stage, ToyModel};
use crate::tensor::{DType, Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub byte_offset: usize,
    pub byte_length: usize,
    pub trainable: bool,
}

/// The hashed part of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub adapter: Option<AdapterConfig>,
    pub stage: Stage,
    /// Attention adapters have been folded into the base weights.
    pub attention_merged: bool,
}

impl CheckpointConfig {
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: CheckpointConfig,
    pub tensors: Vec<TensorEntry>,
    pub config_hash: String,
    pub tensors_hash: String,
    pub seed: u64,
    /// Producer name and version; no timestamps, so identical models give identical files.
    pub created_by: String,
}

fn hash_bytes(b: &[u8]) -> String {
    hex::encode(Sha256::digest(b))
}

/// Manifest and blob of `model`, without touching the filesystem.
pub fn encode_checkpoint<T: Real>(model: &ToyModel<T>) -> Result<(CheckpointManifest, Vec<u8>)> {
    check_stage_layout(model.stage, model.attention_merged, &model.registry().names())?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in model.registry().iter() {
        let offset = blob.len();
        T::extend_le_bytes(t.data(), &mut blob);
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            byte_offset: offset,
            byte_length: blob.len() - offset,
            trainable: t.requires_grad(),
        });
    }
    let config = CheckpointConfig {
        model: model.config.clone(),
        adapter: model.adapter_config.clone(),
        stage: model.stage,
        attention_merged: model.attention_merged,
    };
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config_hash: config.hash(),
        config,
        tensors,
        tensors_hash: hash_bytes(&blob),
        seed: model.config.seed,
        created_by: format!("twostage {}", env!("CARGO_PKG_VERSION")),
    };
    Ok((manifest, blob))
}

pub fn save_checkpoint<T: Real>(model: &ToyModel<T>, dir: &Path) -> Result<CheckpointManifest> {
    let (manifest, blob) = encode_checkpoint(model)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(TENSORS_FILE);
    std::fs::write(&bpath, &blob).map_err(|e| Error::io(&bpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        });
    }
    Ok(serde_json::from_value(raw)?)
}

pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<ToyModel<T>> {
    let manifest = read_manifest(dir)?;
    let bpath = dir.join(TENSORS_FILE);
    let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    decode_checkpoint(&manifest, &blob)
}

/// Rebuilds a model from a manifest and its blob, checking every integrity rule.
pub fn decode_checkpoint<T: Real>(manifest: &CheckpointManifest, blob: &[u8]) -> Result<ToyModel<T>> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let actual = manifest.config.hash();
    if actual != manifest.config_hash {
        return Err(Error::HashMismatch {
            what: "config",
            expected: manifest.config_hash.clone(),
            actual,
        });
    }
    let mut end = 0;
    for e in &manifest.tensors {
        let needed = e.byte_offset + e.byte_length;
        if needed > blob.len() {
            return Err(Error::Truncated {
                name: e.name.clone(),
                needed,
                available: blob.len(),
            });
        }
        if e.byte_offset < end {
            return Err(Error::Config(format!("tensor {} overlaps its predecessor", e.name)));
        }
        if e.dtype != T::DTYPE {
            return Err(Error::Config(format!(
                "tensor {} is {:?}, loading as {:?}",
                e.name,
                e.dtype,
                T::DTYPE
            )));
        }
        if e.byte_length != e.shape.iter().product::<usize>() * e.dtype.size_of() {
            return Err(Error::Config(format!("tensor {} byte length disagrees with shape", e.name)));
        }
        end = needed;
    }
    let actual = hash_bytes(blob);
    if actual != manifest.tensors_hash {
        return Err(Error::HashMismatch {
            what: "tensors",
            expected: manifest.tensors_hash.clone(),
            actual,
        });
    }
    let cfg = &manifest.config;
    let names: Vec<&str> = manifest.tensors.iter().map(|e| e.name.as_str()).collect();
    check_stage_layout(cfg.stage, cfg.attention_merged, &names)?;

    let mut values: BTreeMap<&str, Tensor<T>> = BTreeMap::new();
    for e in &manifest.tensors {
        let data = T::from_le_bytes_slice(&blob[e.byte_offset..e.byte_offset + e.byte_length]);
        let t = Tensor::new(e.shape.clone(), data)?.with_requires_grad(e.trainable);
        if values.insert(e.name.as_str(), t).is_some() {
            return Err(Error::Config(format!("duplicate tensor {}", e.name)));
        }
    }

    let mut model: ToyModel<T> = init_base(&cfg.model, cfg.model.seed)?;
    model.stage = cfg.stage;
    model.attention_merged = cfg.attention_merged;
    model.adapter_config = cfg.adapter.clone();
    attach_skeleton(&mut model, &values)?;

    let mut used = 0;
    for (name, slot) in model.params_mut() {
        let v = values.get(name.as_str()).ok_or_else(|| Error::StageInconsistent {
            stage: cfg.stage.to_string(),
            detail: format!("missing tensor {name}"),
        })?;
        if v.shape() != slot.shape() {
            return Err(Error::Shape {
                op: "load_checkpoint",
                lhs: slot.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        *slot = v.clone();
        used += 1;
    }
    if used != values.len() {
        return Err(Error::StageInconsistent {
            stage: cfg.stage.to_string(),
            detail: format!("{} tensors do not belong to the model", values.len() - used),
        });
    }
    Ok(model)
}

fn lora_placeholder<T: Real>(values: &BTreeMap<&str, Tensor<T>>, prefix: &str, alpha: f64) -> Result<LoraAdapter<T>> {
    let get = |n: &str| {
        values
            .get(format!("{prefix}.{n}").as_str())
            .cloned()
            .ok_or_else(|| Error::Config(format!("missing tensor {prefix}.{n}")))
    };
    Ok(LoraAdapter {
        a: get("A")?,
        b: get("B")?,
        alpha,
    })
}

/// Recreates the adapter structure implied by the tensor names.
fn attach_skeleton<T: Real>(model: &mut ToyModel<T>, values: &BTreeMap<&str, Tensor<T>>) -> Result<()> {
    let cfg = model.adapter_config.clone();
    let has = |n: &str| values.contains_key(n);
    for slot in model.slots_mut() {
        let p = slot.name.clone();
        let needs_cfg = || {
            cfg.clone()
                .ok_or_else(|| Error::Config("adapter tensors present without adapter config".into()))
        };
        slot.adapters = if has(&format!("{p}.attn_lora.A")) {
            SlotAdapters::Lora(lora_placeholder(values, &format!("{p}.attn_lora"), needs_cfg()?.alpha)?)
        } else if has(&format!("{p}.ka.A")) {
            let c = needs_cfg()?;
            let na = if has(&format!("{p}.na.router")) {
                let mut experts = Vec::new();
                while has(&format!("{p}.na.expert{}.A", experts.len())) {
                    experts.push(lora_placeholder(values, &format!("{p}.na.expert{}", experts.len()), c.alpha)?);
                }
                Some(MoLoraAdapter {
                    experts,
                    router: values[format!("{p}.na.router").as_str()].clone(),
                    top_k: c.top_k,
                    renormalize: c.renormalize_topk,
                })
            } else {
                None
            };
            let align = if has(&format!("{p}.align.A")) {
                Some(lora_placeholder(values, &format!("{p}.align"), c.alpha)?)
            } else {
                None
            };
            SlotAdapters::Composite(CompositeAdapter {
                ka: lora_placeholder(values, &format!("{p}.ka"), c.alpha)?,
                na,
                align,
                shared_experts: c.shared_experts,
            })
        } else if has(&format!("{p}.lora1.A")) {
            let c = needs_cfg()?;
            SlotAdapters::Parallel(ParallelLora {
                lora1: lora_placeholder(values, &format!("{p}.lora1"), c.alpha)?,
                lora2: lora_placeholder(values, &format!("{p}.lora2"), c.alpha)?,
            })
        } else {
            SlotAdapters::None
        };
    }
    Ok(())
}

/// Which adapter names a stage tag allows.
fn check_stage_layout(stage: Stage, attention_merged: bool, names: &[&str]) -> Result<()> {
    let any = |pat: &str| names.iter().any(|n| n.contains(pat));
    let fail = |detail: String| {
        Err(Error::StageInconsistent {
            stage: stage.to_string(),
            detail,
        })
    };
    let (na, ka, align, attn, par) = (
        any(".na."),
        any(".ka."),
        any(".align."),
        any(".attn_lora."),
        any(".lora1."),
    );
    if attention_merged && attn {
        return fail("attention adapters present although marked merged".into());
    }
    match stage {
        Stage::Base | Stage::Merged => {
            if na || ka || align || attn || par {
                return fail("adapter tensors present".into());
            }
        }
        Stage::Mka => {
            if align {
                return fail("alignment adapter present".into());
            }
            if !(na && ka) && !par {
                return fail("neither aggregation nor parallel adapters present".into());
            }
        }
        Stage::Stripped => {
            if na || align || par {
                return fail("only knowledge aggregators may remain after stripping".into());
            }
            if !ka {
                return fail("knowledge aggregators missing".into());
            }
        }
        Stage::Da => {
            if na || par {
                return fail("noise aggregator present".into());
            }
            if !(ka && align) {
                return fail("knowledge or alignment adapters missing".into());
            }
            if !attention_merged {
                return fail("alignment requires merged attention".into());
            }
        }
    }
    Ok(())
}
