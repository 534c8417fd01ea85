//! Trainable denoisers: MLP with reverse-mode gradients, DSM training and
//! low-rank adapters.

mod adam;
mod dsm;
mod lora;
mod mlp;
mod train;

pub use adam::{Adam, AdamConfig};
pub use dsm::{dsm_loss, DsmConfig, DsmModel, Weighting};
pub use lora::{lora_finetune_step, Anchored, LoraAdapter, LoraConfig, LoraMlp};
pub use mlp::{c_in, c_out, c_skip, condition_features, LayerShape, MlpConfig, MlpDenoiser, SIGMA_DATA};
pub use train::{denoiser_relative_errors, median, train_prior_net, TrainConfig, TrainLog};
