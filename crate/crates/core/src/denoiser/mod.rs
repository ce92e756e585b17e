//! Toy conditional ε-prediction network: text cross-attention, decoupled
//! image-prompt attention, control-residual injection and LoRA adapters on
//! every cross-attention projection.

mod attention;
mod config;
mod lora;
mod model;
mod pretrained;
mod prior;
mod store;
mod text;

pub use attention::{cross_attention_tensors, decoupled_cross_attention, lora_key, CrossAttentionVars};
pub use config::DenoiserConfig;
pub use lora::{linear_rows, lora_forward, LoraLayer, LoraParams, LoraVars};
pub use model::{timestep_embedding, AdaptedDenoiser, ConditioningBundle, Denoiser, Trunk, GLOBAL};
pub use pretrained::{training_faces, PriorConfig};
pub use prior::GaussianPrior;
pub use store::{ParamStore, BASE_TAG, LORA_TAG, MAGIC, VERSION};
pub use text::{ImageEncoder, TokenTable, PAD};
