//! Small conditional denoiser d(x_t, y, t; θ) with per-class LoRA adapters.

mod infer;
pub mod io;
mod lora;
mod network;
mod train;

pub use infer::{
    eps_mse_on, eps_to_x0, predict_eps, predict_x0, recon_errors_with_noise, recon_loss,
    sample_image, sample_images, X0_CLAMP,
};
pub use lora::{inject_lora, AdapterBank, LayerSubset, LoraAdapter, LoraLayer};
pub use network::{
    backward, eps_mse, forward, loss_and_grads, time_embedding, ArchSpec, DenoiserParams, Dense,
    GradTarget, Grads, LayerId, Scalar,
};
pub use train::{pretrain_base, train_adapter, OptimConfig, TrainLog};
