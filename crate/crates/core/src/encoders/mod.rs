//! ViT and Swin encoders built on the tape.

mod config;
mod embed;
pub mod layers;
mod swin;
mod vit;
pub mod window;

pub use config::{PatchEmbedConfig, SwinConfig, ViTConfig};
pub use embed::PatchEmbed;
pub use layers::{Attention, Block, LayerNorm, Linear, Mlp};
pub use swin::{PatchMerging, SwinEncoder};
pub use vit::VitEncoder;
pub use window::{
    cyclic_shift, reverse_cyclic_shift, shifted_window_attention, shifted_window_mask, window_partition,
    window_reverse,
};
