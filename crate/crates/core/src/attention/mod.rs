//! Cross-window attention and attention-map edit masks.
//!
//! Each frame's self-attention keys and values are extended to four frames'
//! features, `[first, previous_last, self, current_last]`: the first frame of
//! the first window, the last frame of the previous window, the frame itself,
//! and the last frame of its own window.

mod cache;
mod masks;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

pub use cache::{AnchorSlot, CacheAccess, CrossWindowAttention, FeatureCache, FramePos};
pub use masks::{
    aggregate_object_attention, estimate_mask, object_token_positions, AttentionCapture, CapturedMap,
    CrossAttnMapStack, EditMask,
};

use crate::diffusion::Branch;
use crate::error::{Error, Result};

/// Per-layer attention weights. `query`, `key` and `value` are `[D, D_inner]`,
/// `output` is `[D_inner, D]`; `D_inner` splits evenly over `heads`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProjections {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub output: Array2<f64>,
    pub heads: usize,
}

impl AttentionProjections {
    pub fn model_dim(&self) -> usize {
        self.query.nrows()
    }

    pub fn inner_dim(&self) -> usize {
        self.query.ncols()
    }

    pub fn head_dim(&self) -> usize {
        self.inner_dim() / self.heads
    }

    fn check(&self) -> Result<()> {
        let (d, di) = self.query.dim();
        let ok = self.heads > 0
            && di % self.heads == 0
            && self.key.dim() == (d, di)
            && self.value.dim() == (d, di)
            && self.output.dim() == (di, d);
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                format!("q/k/v [{d}, {di}], out [{di}, {d}], {} heads", self.heads),
                format!(
                    "k {:?}, v {:?}, out {:?}",
                    self.key.shape(),
                    self.value.shape(),
                    self.output.shape()
                ),
            ))
        }
    }
}

fn softmax_rows_in_place(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Multi-head scaled dot-product attention with queries from `hidden` `[L, D]`
/// and keys/values from `context` `[N, D]`. Returns `[L, D]`.
pub fn attention_with_context(
    hidden: ArrayView2<'_, f64>,
    context: ArrayView2<'_, f64>,
    proj: &AttentionProjections,
) -> Result<Array2<f64>> {
    proj.check()?;
    let d = proj.model_dim();
    if hidden.ncols() != d || context.ncols() != d {
        return Err(Error::shape(
            format!("[_, {d}]"),
            format!("hidden {:?}, context {:?}", hidden.shape(), context.shape()),
        ));
    }
    if !hidden.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("attention queries"));
    }
    if !context.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("attention context"));
    }
    let q = hidden.dot(&proj.query);
    let k = context.dot(&proj.key);
    let v = context.dot(&proj.value);
    let dh = proj.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut merged = Array2::<f64>::zeros((hidden.nrows(), proj.inner_dim()));
    for head in 0..proj.heads {
        let cols = s![.., head * dh..(head + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        softmax_rows_in_place(&mut scores);
        merged.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
    }
    Ok(merged.dot(&proj.output))
}

/// Key/value features `[4L, D]` for frame `pos`, in the order
/// `[first, previous_last, self, current_last]`.
///
/// Missing anchors are substituted only where they cannot exist yet: the very
/// first frame stands in for every anchor, the first window uses the first
/// frame as its previous-window anchor, and a window's last frame is its own
/// current-window anchor.
pub fn cross_window_kv(
    hidden: ArrayView2<'_, f64>,
    cache: &mut FeatureCache,
    pos: FramePos,
    step: usize,
    layer: usize,
    branch: Branch,
) -> Result<Array2<f64>> {
    let missing = |anchor| Error::MissingAnchor { anchor, layer, step };
    let is_origin = pos.window == 0 && pos.frame == 0;

    let first = if is_origin {
        hidden.to_owned()
    } else {
        cache
            .get(AnchorSlot::First, branch, step, layer, pos)
            .ok_or_else(|| missing("first-frame"))?
            .to_owned()
    };
    let previous = if pos.window == 0 {
        first.clone()
    } else {
        cache
            .get(AnchorSlot::PreviousLast, branch, step, layer, pos)
            .ok_or_else(|| missing("previous-window"))?
            .to_owned()
    };
    let current = if is_origin || pos.is_window_last() {
        hidden.to_owned()
    } else {
        cache
            .get(AnchorSlot::CurrentLast, branch, step, layer, pos)
            .ok_or_else(|| missing("current-window"))?
            .to_owned()
    };
    for a in [&first, &previous, &current] {
        if a.dim() != hidden.dim() {
            return Err(Error::shape(hidden.shape(), a.shape()));
        }
    }
    Ok(concatenate(
        Axis(0),
        &[first.view(), previous.view(), hidden, current.view()],
    )
    .expect("anchor shapes checked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    pub(crate) fn random_projections(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> AttentionProjections {
        let di = heads * 4;
        AttentionProjections {
            query: random_matrix(rng, d, di),
            key: random_matrix(rng, d, di),
            value: random_matrix(rng, d, di),
            output: random_matrix(rng, di, d),
            heads,
        }
    }

    /// Loop-by-loop attention, independent of the matrix-product path.
    fn naive_attention(h: &Array2<f64>, kv: &Array2<f64>, p: &AttentionProjections) -> Array2<f64> {
        let (l, d) = h.dim();
        let n = kv.nrows();
        let di = p.inner_dim();
        let dh = di / p.heads;
        let lin = |x: &Array2<f64>, w: &Array2<f64>, r: usize, j: usize| (0..d).map(|k| x[[r, k]] * w[[k, j]]).sum::<f64>();
        let mut merged = Array2::<f64>::zeros((l, di));
        for head in 0..p.heads {
            for qi in 0..l {
                let mut scores = vec![0.0; n];
                for (ki, s) in scores.iter_mut().enumerate() {
                    for c in head * dh..(head + 1) * dh {
                        *s += lin(h, &p.query, qi, c) * lin(kv, &p.key, ki, c);
                    }
                    *s /= (dh as f64).sqrt();
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = w.iter().sum();
                for c in head * dh..(head + 1) * dh {
                    merged[[qi, c]] = (0..n).map(|ki| w[ki] / z * lin(kv, &p.value, ki, c)).sum();
                }
            }
        }
        Array2::from_shape_fn((l, d), |(r, j)| (0..di).map(|k| merged[[r, k]] * p.output[[k, j]]).sum())
    }

    #[test]
    fn matches_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let p = random_projections(&mut rng, 6, 2);
            let h = random_matrix(&mut rng, 5, 6);
            let kv = random_matrix(&mut rng, 20, 6);
            let fast = attention_with_context(h.view(), kv.view(), &p).unwrap();
            let slow = naive_attention(&h, &kv, &p);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_query_is_softmax_weighted_values() {
        // one head, identity projections: out = sum_k softmax(q.k / sqrt(d)) v_k
        let eye = Array2::<f64>::eye(2);
        let p = AttentionProjections {
            query: eye.clone(),
            key: eye.clone(),
            value: eye.clone(),
            output: eye,
            heads: 1,
        };
        let h = ndarray::arr2(&[[1.0, 0.0]]);
        let kv = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let out = attention_with_context(h.view(), kv.view(), &p).unwrap();
        let w1 = (1.0f64 / 2f64.sqrt()).exp();
        let (a, b) = (w1 / (w1 + 1.0), 1.0 / (w1 + 1.0));
        assert!((out[[0, 0]] - a).abs() < 1e-15);
        assert!((out[[0, 1]] - b).abs() < 1e-15);
    }

    #[test]
    fn tiled_context_equals_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_projections(&mut rng, 8, 2);
        let h = random_matrix(&mut rng, 16, 8);
        let tiled = concatenate(Axis(0), &[h.view(), h.view(), h.view(), h.view()]).unwrap();
        let a = attention_with_context(h.view(), tiled.view(), &p).unwrap();
        let b = attention_with_context(h.view(), h.view(), &p).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_projections(&mut rng, 4, 1);
        let mut h = random_matrix(&mut rng, 2, 4);
        h[[0, 0]] = f64::NAN;
        assert!(matches!(
            attention_with_context(h.view(), h.view(), &p),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn bad_projection_shapes_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = random_projections(&mut rng, 4, 2);
        p.output = random_matrix(&mut rng, 3, 4);
        let h = random_matrix(&mut rng, 2, 4);
        assert!(attention_with_context(h.view(), h.view(), &p).is_err());
    }

    #[test]
    fn kv_shape_is_four_l() {
        let mut cache = FeatureCache::new();
        let h = Array2::<f64>::zeros((64, 320));
        let origin = FramePos::new(0, 0, 8);
        let kv = cross_window_kv(h.view(), &mut cache, origin, 1, 0, Branch::Conditional).unwrap();
        assert_eq!(kv.dim(), (256, 320));
    }

    #[test]
    fn origin_frame_tiles_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_matrix(&mut rng, 3, 2);
        let mut cache = FeatureCache::new();
        let kv = cross_window_kv(h.view(), &mut cache, FramePos::new(0, 0, 4), 1, 0, Branch::Conditional).unwrap();
        for q in 0..4 {
            assert_eq!(kv.slice(s![q * 3..(q + 1) * 3, ..]), h);
        }
    }

    #[test]
    fn anchors_come_from_cache_in_fixed_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (first, prev, cur, me) = (
            random_matrix(&mut rng, 2, 3),
            random_matrix(&mut rng, 2, 3),
            random_matrix(&mut rng, 2, 3),
            random_matrix(&mut rng, 2, 3),
        );
        let b = Branch::Conditional;
        let mut cache = FeatureCache::new();
        cache.store(AnchorSlot::First, b, 4, 1, 0, first.clone());
        cache.store(AnchorSlot::CurrentLast, b, 4, 1, 1, prev.clone());
        cache.advance_window();
        cache.store(AnchorSlot::CurrentLast, b, 4, 1, 2, cur.clone());
        let kv = cross_window_kv(me.view(), &mut cache, FramePos::new(2, 3, 8), 4, 1, b).unwrap();
        assert_eq!(kv.slice(s![0..2, ..]), first);
        assert_eq!(kv.slice(s![2..4, ..]), prev);
        assert_eq!(kv.slice(s![4..6, ..]), me);
        assert_eq!(kv.slice(s![6..8, ..]), cur);

        // other branch or step has no anchors
        let err = cross_window_kv(me.view(), &mut cache, FramePos::new(2, 3, 8), 5, 1, b).unwrap_err();
        assert!(matches!(err, Error::MissingAnchor { .. }));
    }

    #[test]
    fn first_window_uses_first_frame_as_previous() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (first, me) = (random_matrix(&mut rng, 2, 3), random_matrix(&mut rng, 2, 3));
        let b = Branch::Unconditional;
        let mut cache = FeatureCache::new();
        cache.store(AnchorSlot::First, b, 1, 0, 0, first.clone());
        // last frame of window 0: previous anchor is the first frame, current anchor is itself
        let kv = cross_window_kv(me.view(), &mut cache, FramePos::new(0, 7, 8), 1, 0, b).unwrap();
        assert_eq!(kv.slice(s![0..2, ..]), first);
        assert_eq!(kv.slice(s![2..4, ..]), first);
        assert_eq!(kv.slice(s![6..8, ..]), me);
    }
}
