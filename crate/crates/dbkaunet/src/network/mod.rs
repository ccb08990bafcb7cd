//! Network assembly: building blocks, the five-level dual-branch encoder,
//! interleaved decoders, the composite loss, the optimizer, and checkpoints.

pub mod blocks;
pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod optim;

pub use blocks::{
    add_row_bias, kat_block_forward, linear, mhsa, mhsa_head_attention, residual_block_forward,
    vit_block_forward, AttnParams, KatBlockParams, LinearParams, ResidualBlockParams,
    VitBlockParams,
};
pub use loss::{composite_loss, CE_CLAMP, DICE_EPS};
pub use model::{
    dbkaunet_forward, decoder_forward, hdbe_forward, train_step, AblationFlags, DbKaUnet,
    EncoderState, NetworkConfig,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use optim::{clip_global_norm, cosine_lr, global_grad_norm, AdamW};
