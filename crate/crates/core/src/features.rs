//! Hierarchical state-action features for the Q-network.
//!
//! Each visited or candidate hole contributes an 8-wide block:
//! `[pred_low, patch, square, grid, same_patch, same_square, same_grid, different_grid]`
//! where the three counts are the predicted-low unvisited holes left in the
//! hole's patch, square, and grid, divided by the dataset-wide maximum at that
//! level, and the last four are a one-hot of the move that reached the hole.

use serde::{Deserialize, Serialize};

use crate::atlas::{Dataset, HoleIdx, MoveClass};
use crate::classifier::{PredictionTable, QualityCounts};
use crate::episode::EpisodeState;
use crate::error::{Error, Result};

pub const STEP_FEATURES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Number of blocks: k-1 history holes plus the candidate.
    pub k: usize,
    pub patch_norm: f64,
    pub square_norm: f64,
    pub grid_norm: f64,
}

impl FeatureConfig {
    /// Normalizers taken from the static predicted-low tallies of `ds`.
    pub fn for_dataset(ds: &Dataset, pt: &PredictionTable, k: usize) -> Self {
        let c = QualityCounts::new(ds, pt);
        Self {
            k,
            patch_norm: f64::from(c.max_patch().max(1)),
            square_norm: f64::from(c.max_square().max(1)),
            grid_norm: f64::from(c.max_grid().max(1)),
        }
    }

    pub fn dim(&self) -> usize {
        self.k * STEP_FEATURES
    }

    pub fn history_dim(&self) -> usize {
        (self.k - 1) * STEP_FEATURES
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("feature history k must be >= 1".into()));
        }
        for (name, v) in [
            ("patch_norm", self.patch_norm),
            ("square_norm", self.square_norm),
            ("grid_norm", self.grid_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Features of `hole` reached from `prev` (`None` for the first hole of an
/// episode, which leaves the move one-hot empty).
pub fn encode_step(
    ds: &Dataset,
    hole: HoleIdx,
    prev: Option<HoleIdx>,
    pt: &PredictionTable,
    counts: &QualityCounts,
    cfg: &FeatureConfig,
) -> [f32; STEP_FEATURES] {
    let l = ds.lineage(hole);
    let mut f = [0.0f32; STEP_FEATURES];
    f[0] = if pt.is_low(hole) { 1.0 } else { 0.0 };
    f[1] = (f64::from(counts.patch(l.patch)) / cfg.patch_norm).min(1.0) as f32;
    f[2] = (f64::from(counts.square(l.square)) / cfg.square_norm).min(1.0) as f32;
    f[3] = (f64::from(counts.grid(l.grid)) / cfg.grid_norm).min(1.0) as f32;
    if let Some(p) = prev {
        f[4 + ds.move_class(p, hole).ordinal()] = 1.0;
    }
    f
}

/// History part of the input: the last k-1 visited holes, oldest first,
/// zero-padded at the front.
pub fn encode_history(
    st: &EpisodeState<'_>,
    pt: &PredictionTable,
    counts: &QualityCounts,
    cfg: &FeatureConfig,
) -> Vec<f32> {
    let ds = st.dataset();
    let seq: Vec<HoleIdx> = st.visit_sequence().collect();
    let keep = cfg.k - 1;
    let mut out = vec![0.0f32; cfg.history_dim()];
    let first = seq.len().saturating_sub(keep);
    let pad = keep - (seq.len() - first);
    for (slot, i) in (first..seq.len()).enumerate() {
        let prev = i.checked_sub(1).map(|j| seq[j]);
        let block = encode_step(ds, seq[i], prev, pt, counts, cfg);
        let at = (pad + slot) * STEP_FEATURES;
        out[at..at + STEP_FEATURES].copy_from_slice(&block);
    }
    out
}

/// Candidate block, relative to the current microscope position.
pub fn encode_candidate(
    st: &EpisodeState<'_>,
    candidate: HoleIdx,
    pt: &PredictionTable,
    counts: &QualityCounts,
    cfg: &FeatureConfig,
) -> [f32; STEP_FEATURES] {
    encode_step(st.dataset(), candidate, Some(st.current()), pt, counts, cfg)
}

/// Full `k * 8` input for one state-action pair.
pub fn encode_state_action(
    st: &EpisodeState<'_>,
    candidate: HoleIdx,
    pt: &PredictionTable,
    counts: &QualityCounts,
    cfg: &FeatureConfig,
) -> Vec<f32> {
    let mut v = encode_history(st, pt, counts, cfg);
    v.extend_from_slice(&encode_candidate(st, candidate, pt, counts, cfg));
    v
}

/// Holes whose candidate blocks coincide: same patch and same predicted label.
/// Returns one representative (the smallest index) per class, ascending.
pub fn candidate_classes(ds: &Dataset, pt: &PredictionTable, candidates: &[HoleIdx]) -> Vec<HoleIdx> {
    let mut best = std::collections::HashMap::with_capacity(candidates.len() / 4 + 1);
    for &h in candidates {
        let e = best.entry((ds.hole(h).patch, pt.is_low(h))).or_insert(h);
        if h < *e {
            *e = h;
        }
    }
    let mut out: Vec<HoleIdx> = best.into_values().collect();
    out.sort_unstable();
    out
}

pub fn move_one_hot(mc: MoveClass) -> [f32; 4] {
    let mut v = [0.0; 4];
    v[mc.ordinal()] = 1.0;
    v
}
