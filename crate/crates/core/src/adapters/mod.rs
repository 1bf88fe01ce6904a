//! The adapter algebra: LoRA, routed mixtures of LoRA experts, the knowledge/noise
//! aggregator composite, alignment adapters, and merge-back.

mod composite;
mod config;
mod lifecycle;
mod lora;
mod molora;
mod parallel;

pub use composite::{composite_forward_da, composite_forward_mka, CompositeAdapter};
pub use config::AdapterConfig;
pub use lifecycle::{attach_align, attach_mka, merge_attention_lora, merge_final, strip_na};
pub use lora::{lora_forward, lora_init, LoraAdapter, LORA_INIT_STD};
pub use molora::{
    molora_forward, molora_forward_routed, molora_init, top_k_indices, MoLoraAdapter,
    MoLoraOutput, Routing,
};
pub use parallel::ParallelLora;
