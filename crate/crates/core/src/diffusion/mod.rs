//! Noise schedule, DDIM algebra, the backbone contract, and a toy backbone.

mod backbone;
mod ddim;
mod schedule;
mod toy;

pub use backbone::{
    combine_guidance, guided_noise, AttentionHooks, Backbone, Branch, ControlInput, CrossAttentionSite, Latent,
    PlainAttention, PromptEmbedding, SelfAttentionSite,
};
pub use ddim::{ddim_invert_step, ddim_sample_step, ddim_transition};
pub use schedule::{NoiseSchedule, SamplerSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TRAIN_STEPS};
pub use toy::{ToyBackend, ToyCrossAttention, BOS_TOKEN, DEFAULT_NOISE_GAIN, TOY_LATENT_CHANNELS};
