//! Sparse ViT encoder, mask-token decoder and the two-branch projection head.

mod config;
mod decoder;
mod encoder;
mod head;
pub mod layers;
mod patch;

pub use config::{ProjectionHeadConfig, ViTConfig};
pub use decoder::Decoder;
pub use encoder::{EncodedTokens, Encoder, NoDrop, TokenBatch};
pub use head::{HeadOutput, ProjectionHead};
pub use patch::{patchify, unpatchify, Patches};
