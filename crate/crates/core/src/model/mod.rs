//! Toy transformer encoder and the registry of adaptable modules.

pub mod checkpoint;
mod config;
mod path;
mod transformer;

pub use checkpoint::{is_checkpoint, load_checkpoint, save_checkpoint};
pub use config::ModelConfig;
pub use path::{list_modules, ModuleKind, ModulePath};
pub use transformer::{AdapterVars, ForwardHooks, InputBatch, LayerWeights, TransformerModel};
