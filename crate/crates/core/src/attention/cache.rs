use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};

use super::{attention_with_context, cross_window_kv, AttentionProjections};
use crate::diffusion::{AttentionHooks, Branch, SelfAttentionSite};
use crate::error::Result;

/// Position of a frame: zero-based window and in-window frame indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub struct FramePos {
    pub window: usize,
    pub frame: usize,
    pub window_size: usize,
}

impl FramePos {
    pub fn new(window: usize, frame: usize, window_size: usize) -> Self {
        Self {
            window,
            frame,
            window_size,
        }
    }

    pub fn is_window_last(&self) -> bool {
        self.frame + 1 == self.window_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub enum AnchorSlot {
    /// First frame of the first window.
    First,
    /// Last frame of the previous window.
    PreviousLast,
    /// Last frame of the window being edited.
    CurrentLast,
}

/// One anchor read, for checking which windows a pass depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct CacheAccess {
    pub reader: FramePos,
    pub slot: AnchorSlot,
    pub source_window: usize,
    pub step: usize,
    pub layer: usize,
}

type Key = (AnchorSlot, Branch, usize, usize);

/// Anchor-frame features keyed by `(slot, branch, step, layer)`.
#[derive(Debug, Default)]
pub struct FeatureCache {
    entries: HashMap<Key, (usize, Array2<f64>)>,
    log: Option<Vec<CacheAccess>>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// A cache that records every anchor read.
    pub fn with_access_log() -> Self {
        Self {
            entries: HashMap::new(),
            log: Some(Vec::new()),
        }
    }

    pub fn store(
        &mut self,
        slot: AnchorSlot,
        branch: Branch,
        step: usize,
        layer: usize,
        source_window: usize,
        features: Array2<f64>,
    ) {
        self.entries
            .insert((slot, branch, step, layer), (source_window, features));
    }

    pub fn get(
        &mut self,
        slot: AnchorSlot,
        branch: Branch,
        step: usize,
        layer: usize,
        reader: FramePos,
    ) -> Option<ArrayView2<'_, f64>> {
        let (source_window, features) = self.entries.get(&(slot, branch, step, layer))?;
        if let Some(log) = self.log.as_mut() {
            log.push(CacheAccess {
                reader,
                slot,
                source_window: *source_window,
                step,
                layer,
            });
        }
        Some(features.view())
    }

    /// Promotes the current window's last-frame anchors to previous-window anchors.
    pub fn advance_window(&mut self) {
        self.entries.retain(|k, _| k.0 != AnchorSlot::PreviousLast);
        let current: Vec<Key> = self
            .entries
            .keys()
            .filter(|k| k.0 == AnchorSlot::CurrentLast)
            .copied()
            .collect();
        for k in current {
            let v = self.entries.remove(&k).expect("key listed");
            self.entries.insert((AnchorSlot::PreviousLast, k.1, k.2, k.3), v);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Bytes held by cached features.
    pub fn resident_bytes(&self) -> usize {
        self.entries
            .values()
            .map(|(_, a)| a.len() * std::mem::size_of::<f64>())
            .sum()
    }

    pub fn access_log(&self) -> &[CacheAccess] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn take_access_log(&mut self) -> Vec<CacheAccess> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

/// Attention hooks applying cross-window attention for one frame at one step,
/// recording that frame's features when it is an anchor.
pub struct CrossWindowAttention<'a> {
    cache: &'a mut FeatureCache,
    pos: FramePos,
    step: usize,
    branch: Branch,
}

impl<'a> CrossWindowAttention<'a> {
    pub fn new(cache: &'a mut FeatureCache, pos: FramePos, step: usize) -> Self {
        Self {
            cache,
            pos,
            step,
            branch: Branch::Conditional,
        }
    }
}

impl AttentionHooks for CrossWindowAttention<'_> {
    fn begin_pass(&mut self, branch: Branch) {
        self.branch = branch;
    }

    fn self_attention(
        &mut self,
        site: &SelfAttentionSite,
        hidden: ArrayView2<'_, f64>,
        projections: &AttentionProjections,
    ) -> Result<Array2<f64>> {
        let kv = cross_window_kv(hidden, self.cache, self.pos, self.step, site.layer, self.branch)?;
        if self.pos.window == 0 && self.pos.frame == 0 {
            self.cache.store(
                AnchorSlot::First,
                self.branch,
                self.step,
                site.layer,
                0,
                hidden.to_owned(),
            );
        }
        if self.pos.is_window_last() {
            self.cache.store(
                AnchorSlot::CurrentLast,
                self.branch,
                self.step,
                site.layer,
                self.pos.window,
                hidden.to_owned(),
            );
        }
        attention_with_context(hidden, kv.view(), projections)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advance_moves_current_to_previous() {
        let mut c = FeatureCache::with_access_log();
        let b = Branch::Conditional;
        c.store(AnchorSlot::CurrentLast, b, 1, 0, 0, Array2::ones((1, 1)));
        c.advance_window();
        let reader = FramePos::new(1, 0, 2);
        assert!(c.get(AnchorSlot::CurrentLast, b, 1, 0, reader).is_none());
        assert_eq!(c.get(AnchorSlot::PreviousLast, b, 1, 0, reader).unwrap()[[0, 0]], 1.0);
        assert_eq!(c.access_log().len(), 1);
        assert_eq!(c.access_log()[0].source_window, 0);

        // a second advance drops the stale previous anchors
        c.advance_window();
        assert!(c.is_empty());
    }

    #[test]
    fn resident_bytes_counts_features() {
        let mut c = FeatureCache::new();
        c.store(AnchorSlot::First, Branch::Conditional, 1, 0, 0, Array2::zeros((4, 8)));
        assert_eq!(c.resident_bytes(), 4 * 8 * 8);
    }
}
