//! Edit masks from cross-attention maps captured during inversion.
//!
//! For each captured (step, layer) map of the object tokens: max-normalize,
//! resize to a common grid, binarize at `tau`, then take the elementwise max
//! over all maps. The result is one time-independent mask per frame.

use ndarray::{Array2, ArrayView2, ArrayView3};

use super::{attention_with_context, AttentionProjections};
use crate::diffusion::{AttentionHooks, Backbone, Branch, CrossAttentionSite, PromptEmbedding, SelfAttentionSite};
use crate::error::{Error, Result};

/// Binary `[h, w]` mask; 1 marks the region to edit.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EditMask(Array2<f64>);

impl EditMask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::OutOfRange {
                what: "mask value",
                detail: format!("{v} is not 0 or 1"),
            });
        }
        Ok(Self(values))
    }

    pub fn zeros(shape: (usize, usize)) -> Self {
        Self(Array2::zeros(shape))
    }

    pub fn ones(shape: (usize, usize)) -> Self {
        Self(Array2::ones(shape))
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    /// Number of positions set to 1.
    pub fn count(&self) -> usize {
        self.0.iter().filter(|v| **v == 1.0).count()
    }

    pub fn inverted(&self) -> Self {
        Self(self.0.mapv(|v| 1.0 - v))
    }

    pub fn is_subset_of(&self, other: &EditMask) -> bool {
        self.shape() == other.shape() && self.0.iter().zip(other.0.iter()).all(|(a, b)| a <= b)
    }
}

/// One object-token attention map over a layer's spatial grid.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CapturedMap {
    pub step: usize,
    pub layer: usize,
    pub weights: Array2<f64>,
}

/// All maps captured for one frame.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CrossAttnMapStack {
    pub maps: Vec<CapturedMap>,
}

impl CrossAttnMapStack {
    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    /// Multiplies every map by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            maps: self
                .maps
                .iter()
                .map(|m| CapturedMap {
                    weights: &m.weights * factor,
                    ..m.clone()
                })
                .collect(),
        }
    }
}

/// Prompt-token positions of the object tokens (all subword positions of each).
pub fn object_token_positions(
    backbone: &dyn Backbone,
    prompt: &PromptEmbedding,
    object_tokens: &[String],
) -> Result<Vec<usize>> {
    if object_tokens.is_empty() {
        return Err(Error::NoObjectTokens);
    }
    let mut positions = Vec::new();
    for token in object_tokens {
        let pieces = backbone.tokenize(token);
        let start = (!pieces.is_empty())
            .then(|| {
                prompt
                    .tokens
                    .windows(pieces.len())
                    .position(|w| w == pieces.as_slice())
            })
            .flatten()
            .ok_or_else(|| Error::TokenNotFound(token.clone()))?;
        positions.extend(start..start + pieces.len());
    }
    positions.sort_unstable();
    positions.dedup();
    Ok(positions)
}

fn max_normalized(mut map: Array2<f64>) -> Array2<f64> {
    let max = map.fold(0.0f64, |m, &v| m.max(v));
    if max > 0.0 {
        map.mapv_inplace(|v| v / max);
    }
    map
}

/// Reduces probabilities `[heads, L, tokens]` to one `grid`-shaped map:
/// mean over heads, sum over `positions`, then max-normalized.
pub fn aggregate_object_attention(
    probs: ArrayView3<'_, f64>,
    positions: &[usize],
    grid: (usize, usize),
) -> Result<Array2<f64>> {
    let (heads, l, tokens) = probs.dim();
    if heads == 0 || l != grid.0 * grid.1 {
        return Err(Error::shape(
            format!("[heads>0, {}, tokens]", grid.0 * grid.1),
            probs.shape(),
        ));
    }
    if positions.is_empty() {
        return Err(Error::NoObjectTokens);
    }
    if let Some(p) = positions.iter().find(|p| **p >= tokens) {
        return Err(Error::OutOfRange {
            what: "token position",
            detail: format!("{p} >= {tokens} prompt tokens"),
        });
    }
    let map = Array2::from_shape_fn(grid, |(r, c)| {
        let q = r * grid.1 + c;
        positions
            .iter()
            .map(|&t| (0..heads).map(|h| probs[[h, q, t]]).sum::<f64>() / heads as f64)
            .sum()
    });
    Ok(max_normalized(map))
}

/// Attention hooks that run plain self-attention and record object-token
/// cross-attention maps from eligible layers.
pub struct AttentionCapture {
    positions: Vec<usize>,
    max_resolution: usize,
    step: usize,
    branch: Branch,
    maps: Vec<CapturedMap>,
    error: Option<Error>,
}

impl AttentionCapture {
    /// Captures decoder-side layers whose grid is at most `max_resolution` per side.
    pub fn new(positions: Vec<usize>, max_resolution: usize) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::NoObjectTokens);
        }
        Ok(Self {
            positions,
            max_resolution,
            step: 0,
            branch: Branch::Conditional,
            maps: Vec::new(),
            error: None,
        })
    }

    /// Tags subsequently captured maps with `step`.
    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    pub fn accepts(&self, site: &CrossAttentionSite) -> bool {
        site.decoder && site.grid.0 <= self.max_resolution && site.grid.1 <= self.max_resolution
    }

    pub fn finish(self) -> Result<CrossAttnMapStack> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(CrossAttnMapStack { maps: self.maps }),
        }
    }
}

impl AttentionHooks for AttentionCapture {
    fn begin_pass(&mut self, branch: Branch) {
        self.branch = branch;
    }

    fn self_attention(
        &mut self,
        _site: &SelfAttentionSite,
        hidden: ArrayView2<'_, f64>,
        projections: &AttentionProjections,
    ) -> Result<Array2<f64>> {
        attention_with_context(hidden, hidden, projections)
    }

    fn cross_attention(&mut self, site: &CrossAttentionSite, probs: ArrayView3<'_, f64>) {
        if self.branch != Branch::Conditional || self.error.is_some() || !self.accepts(site) {
            return;
        }
        match aggregate_object_attention(probs, &self.positions, site.grid) {
            Ok(weights) => self.maps.push(CapturedMap {
                step: self.step,
                layer: site.layer,
                weights,
            }),
            Err(e) => self.error = Some(e),
        }
    }
}

fn resize_nearest(map: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let (ir, ic) = map.dim();
    if (ir, ic) == shape {
        return map.clone();
    }
    Array2::from_shape_fn(shape, |(r, c)| map[[r * ir / shape.0, c * ic / shape.1]])
}

/// Binary edit mask of one frame at `target` resolution.
pub fn estimate_mask(stack: &CrossAttnMapStack, tau: f64, target: (usize, usize)) -> Result<EditMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::OutOfRange {
            what: "mask threshold",
            detail: format!("{tau} is outside (0, 1)"),
        });
    }
    if stack.is_empty() {
        return Err(Error::EmptyMapStack);
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::shape("non-empty target", target));
    }
    let common = stack.maps.iter().fold((0, 0), |(r, c), m| {
        let (mr, mc) = m.weights.dim();
        (r.max(mr), c.max(mc))
    });
    if common.0 == 0 || common.1 == 0 {
        return Err(Error::EmptyMapStack);
    }
    let mut pooled = Array2::<f64>::zeros(common);
    for m in &stack.maps {
        if m.weights.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::OutOfRange {
                what: "attention weight",
                detail: format!("step {} layer {} has negative or non-finite weights", m.step, m.layer),
            });
        }
        let binary = resize_nearest(&max_normalized(m.weights.clone()), common)
            .mapv(|v| if v >= tau { 1.0 } else { 0.0 });
        pooled.zip_mut_with(&binary, |p, &b| *p = p.max(b));
    }
    EditMask::new(resize_nearest(&pooled, target))
}
