//! The frozen base model adapters attach to.

mod config;
mod registry;
mod slot;
mod transformer;

pub use config::{default_d_ff, ModelConfig};
pub use registry::{Anonymous, Binder, ParamSource, ParameterRegistry};
pub use slot::{AdapterSlot, ForwardOptions, SlotAdapters, SlotKind};
pub use transformer::{
    ffn_forward, init_base, Block, ForwardTrace, Stage, ToyModel, BASE_INIT_STD, RMS_EPS,
};
