use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Zip};

use super::schedule::NoiseSchedule;
use crate::attention::{attention_with_context, AttentionProjections};
use crate::config::Resolution;
use crate::error::{Error, Result};

/// Latent `[C, h, w]`.
pub type Latent = Array3<f64>;

/// Text conditioning produced by a backbone's text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub text: String,
    /// Tokens including any special tokens, aligned with the rows of `hidden`.
    pub tokens: Vec<String>,
    /// `[tokens, D_text]`.
    pub hidden: Array2<f64>,
}

/// Structural conditioning for one frame.
#[derive(Debug, Clone, Copy)]
pub struct ControlInput<'a> {
    /// `[H, W, C_ctl]` at pixel resolution.
    pub map: ArrayView3<'a, f64>,
    pub scale: f64,
}

/// A self-attention layer, with its token count `L` and feature width `D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfAttentionSite {
    pub layer: usize,
    pub tokens: usize,
    pub dim: usize,
}

/// A cross-attention layer and the spatial grid its `L` queries are laid out on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossAttentionSite {
    pub layer: usize,
    /// `(rows, cols)`; `rows * cols == L`.
    pub grid: (usize, usize),
    /// Whether the layer sits in the decoder (upsampling) half of the network.
    pub decoder: bool,
}

/// Classifier-free guidance branch being evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Conditional,
    Unconditional,
}

/// Interception points inside a noise-prediction pass.
pub trait AttentionHooks {
    /// Called before each forward pass with the guidance branch it belongs to.
    fn begin_pass(&mut self, _branch: Branch) {}

    /// Computes a self-attention layer's output `[L, D]` from its input features.
    fn self_attention(
        &mut self,
        site: &SelfAttentionSite,
        hidden: ArrayView2<'_, f64>,
        projections: &AttentionProjections,
    ) -> Result<Array2<f64>>;

    /// Observes cross-attention probabilities `[heads, L, text_tokens]`.
    fn cross_attention(&mut self, _site: &CrossAttentionSite, _probs: ArrayView3<'_, f64>) {}
}

/// Unmodified per-frame self-attention.
#[derive(Debug, Default, Clone, Copy)]
pub struct PlainAttention;

impl AttentionHooks for PlainAttention {
    fn self_attention(
        &mut self,
        _site: &SelfAttentionSite,
        hidden: ArrayView2<'_, f64>,
        projections: &AttentionProjections,
    ) -> Result<Array2<f64>> {
        attention_with_context(hidden, hidden, projections)
    }
}

/// A pretrained latent noise-prediction model with its autoencoder and text encoder.
pub trait Backbone: Send + Sync {
    /// Identifier recorded in provenance.
    fn id(&self) -> String;

    fn schedule(&self) -> &NoiseSchedule;

    /// Latent `(C, h, w)` for frames of the given resolution.
    fn latent_shape(&self, resolution: Resolution) -> Result<(usize, usize, usize)>;

    /// Max-abs error bound of `decode(encode(x))` against `x`.
    fn reconstruction_tolerance(&self) -> f64;

    /// Pixels `[H, W, 3]` in `[0, 1]` to a latent.
    fn encode(&self, frame: ArrayView3<'_, f64>) -> Result<Latent>;

    /// Latent to pixels `[H, W, 3]`.
    fn decode(&self, latent: &Latent) -> Result<Array3<f64>>;

    /// Tokenizes text without special tokens.
    fn tokenize(&self, text: &str) -> Vec<String>;

    fn embed_prompt(&self, text: &str) -> Result<PromptEmbedding>;

    fn self_attention_sites(&self, resolution: Resolution) -> Result<Vec<SelfAttentionSite>>;

    fn cross_attention_sites(&self, resolution: Resolution) -> Result<Vec<CrossAttentionSite>>;

    /// Noise estimate for `latent` at training timestep `timestep`.
    fn predict_noise(
        &self,
        latent: &Latent,
        timestep: usize,
        prompt: &PromptEmbedding,
        control: Option<ControlInput<'_>>,
        hooks: &mut dyn AttentionHooks,
    ) -> Result<Latent>;
}

/// `eps_u + scale * (eps_c - eps_u)`.
pub fn combine_guidance(uncond: &Latent, cond: &Latent, scale: f64) -> Result<Latent> {
    if uncond.shape() != cond.shape() {
        return Err(Error::shape(uncond.shape(), cond.shape()));
    }
    Ok(Zip::from(uncond)
        .and(cond)
        .map_collect(|&u, &c| u + scale * (c - u)))
}

/// Classifier-free guided noise estimate. The conditional branch runs first.
#[allow(clippy::too_many_arguments)]
pub fn guided_noise(
    backbone: &dyn Backbone,
    latent: &Latent,
    timestep: usize,
    prompt: &PromptEmbedding,
    null_prompt: &PromptEmbedding,
    control: Option<ControlInput<'_>>,
    guidance_scale: f64,
    hooks: &mut dyn AttentionHooks,
) -> Result<Latent> {
    let wrap = |e: Error| Error::Backbone {
        timestep,
        source: Box::new(e),
    };
    hooks.begin_pass(Branch::Conditional);
    let cond = backbone
        .predict_noise(latent, timestep, prompt, control, hooks)
        .map_err(wrap)?;
    hooks.begin_pass(Branch::Unconditional);
    let uncond = backbone
        .predict_noise(latent, timestep, null_prompt, control, hooks)
        .map_err(wrap)?;
    combine_guidance(&uncond, &cond, guidance_scale)
}
