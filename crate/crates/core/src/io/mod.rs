//! Checkpoint serialization, configuration files and the command-line surface.

pub mod checkpoint;
pub mod cli;
pub mod config;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_manifest, save_checkpoint,
    CheckpointConfig, CheckpointManifest, TensorEntry, FORMAT_VERSION, MANIFEST_FILE, TENSORS_FILE,
};
pub use cli::{cli_dispatch, Cli, CliError};
pub use config::{load_config, parse_config, parse_key_values};
