//! A deterministic analytic backbone for exercising the pipeline without
//! model weights.
//!
//! - The codec is a space-to-depth rearrangement of 2x2 pixel blocks into 12
//!   latent channels, followed by a channel permutation and power-of-two
//!   scaling, so `decode(encode(x)) == x` bit for bit.
//! - The noise estimate is `c_p * z` with a per-prompt constant `c_p` derived
//!   from a hash of the prompt text, `|c_p| <= noise_gain`.
//! - Self- and cross-attention layers run on synthetic features computed from
//!   pooled latents, so hooks see real `[L, D]` inputs. Their outputs only
//!   feed back into the noise estimate when `attention_coupling` is nonzero.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::backbone::{
    AttentionHooks, Backbone, ControlInput, CrossAttentionSite, Latent, PromptEmbedding, SelfAttentionSite,
};
use super::schedule::NoiseSchedule;
use crate::attention::AttentionProjections;
use crate::config::Resolution;
use crate::error::{Error, Result};

pub const TOY_LATENT_CHANNELS: usize = 12;
const FEATURE_DIM: usize = 16;
const HEADS: usize = 2;
const SUBWORD_LEN: usize = 5;
pub const BOS_TOKEN: &str = "<bos>";

/// Default bound on `|c_p|`. Small enough that 50-step inversion followed by
/// 50-step sampling reproduces unit-scale latents to better than 1e-4.
pub const DEFAULT_NOISE_GAIN: f64 = 5e-5;

/// How the toy produces cross-attention probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyCrossAttention {
    /// Every position attends equally to every prompt token.
    Uniform,
    /// Softmax of feature/token similarities.
    ContentDependent,
}

#[derive(Debug, Clone)]
struct ToyLayer {
    pool: usize,
    decoder: bool,
    input: Array2<f64>,
    readout: Array2<f64>,
    self_attn: AttentionProjections,
    cross_query: Array2<f64>,
    cross_key: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyBackend {
    schedule: NoiseSchedule,
    noise_gain: f64,
    attention_coupling: f64,
    cross_attention: ToyCrossAttention,
    layers: Vec<ToyLayer>,
    seed: u64,
}

/// FNV-1a; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0) * scale)
}

/// Latent channel holding pixel channel `rgb` of block offset `(dy, dx)`.
fn latent_channel(dy: usize, dx: usize, rgb: usize) -> usize {
    ((dy * 2 + dx) * 3 + rgb) * 5 % TOY_LATENT_CHANNELS
}

fn channel_scale(channel: usize) -> f64 {
    if channel % 2 == 0 {
        2.0
    } else {
        0.5
    }
}

impl Default for ToyBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl ToyBackend {
    pub fn new() -> Self {
        Self::with_seed(0x5eed)
    }

    /// Same structure, different synthetic weights.
    pub fn with_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = FEATURE_DIM;
        let w = 1.0 / (d as f64).sqrt();
        let layers = [(2, false), (4, true), (2, true)]
            .into_iter()
            .map(|(pool, decoder)| ToyLayer {
                pool,
                decoder,
                input: random_matrix(&mut rng, TOY_LATENT_CHANNELS, d, 1.0),
                readout: random_matrix(&mut rng, d, TOY_LATENT_CHANNELS, w),
                self_attn: AttentionProjections {
                    query: random_matrix(&mut rng, d, d, w),
                    key: random_matrix(&mut rng, d, d, w),
                    value: random_matrix(&mut rng, d, d, w),
                    output: random_matrix(&mut rng, d, d, w),
                    heads: HEADS,
                },
                cross_query: random_matrix(&mut rng, d, d, w),
                cross_key: random_matrix(&mut rng, d, d, 1.0),
            })
            .collect();
        Self {
            schedule: NoiseSchedule::default(),
            noise_gain: DEFAULT_NOISE_GAIN,
            attention_coupling: 0.0,
            cross_attention: ToyCrossAttention::ContentDependent,
            layers,
            seed,
        }
    }

    pub fn with_noise_gain(mut self, gain: f64) -> Self {
        self.noise_gain = gain;
        self
    }

    /// Adds `coupling * readout(attention output)` to the noise estimate.
    pub fn with_attention_coupling(mut self, coupling: f64) -> Self {
        self.attention_coupling = coupling;
        self
    }

    pub fn with_cross_attention(mut self, mode: ToyCrossAttention) -> Self {
        self.cross_attention = mode;
        self
    }

    pub fn with_schedule(mut self, schedule: NoiseSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    /// The per-prompt constant `c_p`.
    pub fn noise_coefficient(&self, prompt: &str) -> f64 {
        let u = fnv1a(prompt.as_bytes()) as f64 / u64::MAX as f64;
        self.noise_gain * (2.0 * u - 1.0)
    }

    fn latent_grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Unsupported(format!(
                "toy backbone needs frame sides that are positive multiples of 8, got {h}x{w}"
            )));
        }
        Ok((h / 2, w / 2))
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ self.seed);
        (0..FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Pooled-latent features `[L, D]` of a layer, plus a fixed positional term.
    fn features(&self, layer: &ToyLayer, z: &Latent) -> Array2<f64> {
        let (c, h, w) = z.dim();
        let (gr, gc) = (h / layer.pool, w / layer.pool);
        let area = (layer.pool * layer.pool) as f64;
        let mut pooled = Array2::<f64>::zeros((gr * gc, c));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    pooled[[(y / layer.pool) * gc + x / layer.pool, ch]] += z[[ch, y, x]] / area;
                }
            }
        }
        let mut feats = pooled.dot(&layer.input);
        for ((l, d), v) in feats.indexed_iter_mut() {
            let (r, col) = ((l / gc) as f64, (l % gc) as f64);
            *v += 0.1 * ((r + 1.0) * (d as f64 + 1.0) * 0.7 + col * (d as f64 + 2.0) * 0.3).sin();
        }
        feats
    }

    fn cross_probs(&self, layer: &ToyLayer, hidden: ArrayView2<'_, f64>, prompt: &PromptEmbedding) -> Array3<f64> {
        let l = hidden.nrows();
        let t = prompt.tokens.len();
        match self.cross_attention {
            ToyCrossAttention::Uniform => Array3::from_elem((HEADS, l, t), 1.0 / t as f64),
            ToyCrossAttention::ContentDependent => {
                let q = hidden.dot(&layer.cross_query);
                let k = prompt.hidden.dot(&layer.cross_key);
                let dh = FEATURE_DIM / HEADS;
                let mut probs = Array3::<f64>::zeros((HEADS, l, t));
                for head in 0..HEADS {
                    let cols = ndarray::s![.., head * dh..(head + 1) * dh];
                    let scores = q.slice(cols).dot(&k.slice(cols).t()) / (dh as f64).sqrt();
                    for (qi, row) in scores.rows().into_iter().enumerate() {
                        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                        let e: Vec<f64> = row.iter().map(|s| (s - m).exp()).collect();
                        let z: f64 = e.iter().sum();
                        for (ti, v) in e.iter().enumerate() {
                            probs[[head, qi, ti]] = v / z;
                        }
                    }
                }
                probs
            }
        }
    }
}

impl Backbone for ToyBackend {
    fn id(&self) -> String {
        format!(
            "toy(seed={:#x}, gain={:e}, coupling={}, xattn={:?})",
            self.seed, self.noise_gain, self.attention_coupling, self.cross_attention
        )
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn latent_shape(&self, resolution: Resolution) -> Result<(usize, usize, usize)> {
        let (h, w) = self.latent_grid(resolution.height, resolution.width)?;
        Ok((TOY_LATENT_CHANNELS, h, w))
    }

    fn reconstruction_tolerance(&self) -> f64 {
        0.0
    }

    fn encode(&self, frame: ArrayView3<'_, f64>) -> Result<Latent> {
        let (h, w, c) = frame.dim();
        if c != 3 {
            return Err(Error::shape("[H, W, 3]", frame.shape()));
        }
        let (lh, lw) = self.latent_grid(h, w)?;
        let mut z = Latent::zeros((TOY_LATENT_CHANNELS, lh, lw));
        for y in 0..h {
            for x in 0..w {
                for rgb in 0..3 {
                    let ch = latent_channel(y % 2, x % 2, rgb);
                    z[[ch, y / 2, x / 2]] = frame[[y, x, rgb]] * channel_scale(ch);
                }
            }
        }
        Ok(z)
    }

    fn decode(&self, latent: &Latent) -> Result<Array3<f64>> {
        let (c, lh, lw) = latent.dim();
        if c != TOY_LATENT_CHANNELS {
            return Err(Error::shape([TOY_LATENT_CHANNELS, lh, lw], latent.shape()));
        }
        Ok(Array3::from_shape_fn((lh * 2, lw * 2, 3), |(y, x, rgb)| {
            let ch = latent_channel(y % 2, x % 2, rgb);
            latent[[ch, y / 2, x / 2]] / channel_scale(ch)
        }))
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .flat_map(|w| {
                let chars: Vec<char> = w.chars().collect();
                chars
                    .chunks(SUBWORD_LEN)
                    .map(|c| c.iter().collect::<String>())
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    fn embed_prompt(&self, text: &str) -> Result<PromptEmbedding> {
        let tokens: Vec<String> = std::iter::once(BOS_TOKEN.to_string())
            .chain(self.tokenize(text))
            .collect();
        let mut hidden = Array2::<f64>::zeros((tokens.len(), FEATURE_DIM));
        for (row, tok) in hidden.axis_iter_mut(Axis(0)).zip(&tokens) {
            for (dst, v) in row.into_iter().zip(self.token_vector(tok)) {
                *dst = v;
            }
        }
        Ok(PromptEmbedding {
            text: text.to_string(),
            tokens,
            hidden,
        })
    }

    fn self_attention_sites(&self, resolution: Resolution) -> Result<Vec<SelfAttentionSite>> {
        let (_, h, w) = self.latent_shape(resolution)?;
        Ok(self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| SelfAttentionSite {
                layer: i,
                tokens: (h / l.pool) * (w / l.pool),
                dim: FEATURE_DIM,
            })
            .collect())
    }

    fn cross_attention_sites(&self, resolution: Resolution) -> Result<Vec<CrossAttentionSite>> {
        let (_, h, w) = self.latent_shape(resolution)?;
        Ok(self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| CrossAttentionSite {
                layer: i,
                grid: (h / l.pool, w / l.pool),
                decoder: l.decoder,
            })
            .collect())
    }

    fn predict_noise(
        &self,
        latent: &Latent,
        _timestep: usize,
        prompt: &PromptEmbedding,
        control: Option<ControlInput<'_>>,
        hooks: &mut dyn AttentionHooks,
    ) -> Result<Latent> {
        let (c, h, w) = latent.dim();
        if c != TOY_LATENT_CHANNELS || h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                format!("[{TOY_LATENT_CHANNELS}, 4k, 4k]"),
                latent.shape(),
            ));
        }
        if let Some(ctl) = control {
            let (ch, cw, _) = ctl.map.dim();
            if (ch, cw) != (2 * h, 2 * w) {
                return Err(Error::shape((2 * h, 2 * w), (ch, cw)));
            }
        }
        if !latent.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("latent"));
        }
        let c_p = self.noise_coefficient(&prompt.text);
        let mut eps = latent.mapv(|v| c_p * v);

        for (i, layer) in self.layers.iter().enumerate() {
            let (gr, gc) = (h / layer.pool, w / layer.pool);
            let site = SelfAttentionSite {
                layer: i,
                tokens: gr * gc,
                dim: FEATURE_DIM,
            };
            let feats = self.features(layer, latent);
            let out = hooks.self_attention(&site, feats.view(), &layer.self_attn)?;
            if out.dim() != feats.dim() {
                return Err(Error::shape(feats.shape(), out.shape()));
            }
            let xsite = CrossAttentionSite {
                layer: i,
                grid: (gr, gc),
                decoder: layer.decoder,
            };
            let probs = self.cross_probs(layer, out.view(), prompt);
            hooks.cross_attention(&xsite, probs.view());

            if self.attention_coupling != 0.0 {
                let delta = out.dot(&layer.readout);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let l = (y / layer.pool) * gc + x / layer.pool;
                            eps[[ch, y, x]] += self.attention_coupling * delta[[l, ch]];
                        }
                    }
                }
            }
        }
        Ok(eps)
    }
}
