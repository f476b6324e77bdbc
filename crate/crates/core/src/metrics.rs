//! Objective quality metrics for an edited clip.
//!
//! * `clip_text`: mean cosine between each edited frame and the target prompt.
//! * `clip_temp`: mean cosine between consecutive edited frames.
//! * `clip_se`: mean cosine between aligned source and edited frames.
//! * `con_l2`: mean over consecutive pairs of the per-pixel-per-channel MSE.

use ndarray::{ArrayView3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::VideoClip;

/// Joint image/text embedder. Outputs must be unit vectors of a common width.
pub trait EmbeddingAdapter: Send + Sync {
    fn id(&self) -> String;

    fn embed_image(&self, frame: ArrayView3<'_, f64>) -> Result<Vec<f64>>;

    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

/// Deterministic embedder without learned weights: images are average-pooled
/// onto a coarse grid, text is a sum of hashed word vectors.
#[derive(Debug, Clone, Copy)]
pub struct PooledEmbedder {
    grid: usize,
}

impl Default for PooledEmbedder {
    fn default() -> Self {
        Self { grid: 4 }
    }
}

impl PooledEmbedder {
    pub fn new(grid: usize) -> Self {
        Self { grid: grid.max(1) }
    }

    pub fn dim(&self) -> usize {
        self.grid * self.grid * 3 + 1
    }
}

fn normalized(mut v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} embedding has zero or non-finite norm")));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

impl EmbeddingAdapter for PooledEmbedder {
    fn id(&self) -> String {
        format!("pooled-{}x{}", self.grid, self.grid)
    }

    fn embed_image(&self, frame: ArrayView3<'_, f64>) -> Result<Vec<f64>> {
        let (h, w, c) = frame.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::shape("[H, W, 3]", frame.shape()));
        }
        let g = self.grid;
        let mut v = vec![0.0; self.dim()];
        let mut counts = vec![0usize; g * g];
        for ((y, x, ch), p) in frame.indexed_iter() {
            let cell = (y * g / h) * g + x * g / w;
            v[cell * 3 + ch] += p;
            if ch == 0 {
                counts[cell] += 1;
            }
        }
        for (cell, n) in counts.iter().enumerate() {
            for ch in 0..3 {
                v[cell * 3 + ch] /= (*n).max(1) as f64;
            }
        }
        // keeps black frames embeddable
        v[g * g * 3] = 0.05;
        normalized(v, "image")
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim()];
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        for word in &words {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word));
            v.iter_mut().for_each(|x| *x += rng.random::<f64>());
        }
        if words.is_empty() {
            v[self.dim() - 1] = 1.0;
        }
        normalized(v, "text")
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn embed_frames(clip: &VideoClip, adapter: &dyn EmbeddingAdapter) -> Result<Vec<Vec<f64>>> {
    (0..clip.len())
        .into_par_iter()
        .map(|k| {
            adapter.embed_image(clip.frame(k)).map_err(|e| Error::Adapter {
                frame: k,
                message: e.to_string(),
            })
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn need_pairs(clip: &VideoClip, metric: &str) -> Result<()> {
    if clip.len() < 2 {
        return Err(Error::InvalidArgument(format!("{metric} needs at least 2 frames, got {}", clip.len())));
    }
    Ok(())
}

fn text_scores(frames: &[Vec<f64>], text: &[f64]) -> Result<Vec<f64>> {
    frames.iter().map(|f| cosine(f, text)).collect()
}

fn temporal_scores(frames: &[Vec<f64>]) -> Result<Vec<f64>> {
    frames.windows(2).map(|p| cosine(&p[0], &p[1])).collect()
}

fn aligned_scores(source: &[Vec<f64>], edited: &[Vec<f64>]) -> Result<Vec<f64>> {
    source.iter().zip(edited).map(|(s, e)| cosine(s, e)).collect()
}

pub fn clip_text(edited: &VideoClip, prompt: &str, adapter: &dyn EmbeddingAdapter) -> Result<f64> {
    let text = adapter.embed_text(prompt)?;
    Ok(mean(&text_scores(&embed_frames(edited, adapter)?, &text)?))
}

pub fn clip_temp(edited: &VideoClip, adapter: &dyn EmbeddingAdapter) -> Result<f64> {
    need_pairs(edited, "clip_temp")?;
    Ok(mean(&temporal_scores(&embed_frames(edited, adapter)?)?))
}

pub fn clip_se(source: &VideoClip, edited: &VideoClip, adapter: &dyn EmbeddingAdapter) -> Result<f64> {
    check_lengths(source, edited)?;
    Ok(mean(&aligned_scores(
        &embed_frames(source, adapter)?,
        &embed_frames(edited, adapter)?,
    )?))
}

fn check_lengths(source: &VideoClip, edited: &VideoClip) -> Result<()> {
    if source.len() != edited.len() {
        return Err(Error::InvalidArgument(format!(
            "source has {} frames, edited has {}",
            source.len(),
            edited.len()
        )));
    }
    Ok(())
}

/// Mean squared difference, with compensated summation.
fn pair_mse(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    Zip::from(&a).and(&b).for_each(|x, y| {
        let v = (x - y) * (x - y);
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    });
    (sum + carry) / a.len() as f64
}

fn con_l2_pairs(clip: &VideoClip) -> Vec<f64> {
    (1..clip.len())
        .map(|k| pair_mse(clip.frame(k - 1), clip.frame(k)))
        .collect()
}

pub fn con_l2(edited: &VideoClip) -> Result<f64> {
    need_pairs(edited, "con_l2")?;
    Ok(mean(&con_l2_pairs(edited)))
}

/// All four metrics with their per-frame or per-pair terms.
///
/// Temporal metrics are `None` for single-frame clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub clip_text: f64,
    pub clip_temp: Option<f64>,
    pub clip_se: f64,
    pub con_l2: Option<f64>,
    pub embedder: String,
    pub clip_text_per_frame: Vec<f64>,
    pub clip_temp_per_pair: Vec<f64>,
    pub clip_se_per_frame: Vec<f64>,
    pub con_l2_per_pair: Vec<f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Computes every metric, embedding each frame once.
pub fn evaluate(
    source: &VideoClip,
    edited: &VideoClip,
    target_prompt: &str,
    adapter: &dyn EmbeddingAdapter,
) -> Result<MetricsReport> {
    check_lengths(source, edited)?;
    let src = embed_frames(source, adapter)?;
    let out = embed_frames(edited, adapter)?;
    let text = adapter.embed_text(target_prompt)?;
    let text_terms = text_scores(&out, &text)?;
    let se_terms = aligned_scores(&src, &out)?;
    let temp_terms = temporal_scores(&out)?;
    let l2_terms = con_l2_pairs(edited);
    let opt_mean = |v: &[f64]| (!v.is_empty()).then(|| mean(v));
    Ok(MetricsReport {
        clip_text: mean(&text_terms),
        clip_temp: opt_mean(&temp_terms),
        clip_se: mean(&se_terms),
        con_l2: opt_mean(&l2_terms),
        embedder: adapter.id(),
        clip_text_per_frame: text_terms,
        clip_temp_per_pair: temp_terms,
        clip_se_per_frame: se_terms,
        con_l2_per_pair: l2_terms,
    })
}
