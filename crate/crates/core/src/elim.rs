//! Ranked-patch action elimination.
//!
//! Patches are ranked by their grid's predicted-low total and then by their
//! own predicted-low count. `max_lctf` is the number of holes a walk over that
//! ranking could image within the budget if every hole were good; the valid
//! action set is every hole of the shortest ranked prefix whose predicted-low
//! total reaches `beta` times that bound.

use serde::{Deserialize, Serialize};

use crate::atlas::{move_cost, Dataset, GridIdx, HoleIdx, MoveClass, PatchIdx};
use crate::classifier::PredictionTable;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElimConfig {
    pub enabled: bool,
    pub beta_train: f64,
    pub beta_test: f64,
}

impl Default for ElimConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            beta_train: 2.5,
            beta_test: 1.5,
        }
    }
}

impl ElimConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta_train", self.beta_train), ("beta_test", self.beta_test)] {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {b}")));
            }
        }
        Ok(())
    }
}

/// Patch order: grid predicted-low total (desc), grid index (asc), patch
/// predicted-low count (desc), patch index (asc). Keying on the grid index
/// before the patch count keeps each grid's patches contiguous.
pub fn rank_patches(ds: &Dataset, pt: &PredictionTable) -> Vec<PatchIdx> {
    let patch_low: Vec<usize> = (0..ds.patches().len() as u32)
        .map(|p| pt.patch_low_count(ds, PatchIdx(p)))
        .collect();
    let grid_of = |p: PatchIdx| -> GridIdx { ds.squares()[ds.patch(p).square.index()].grid };
    let mut grid_low = vec![0usize; ds.grids().len()];
    for (p, &c) in patch_low.iter().enumerate() {
        grid_low[grid_of(PatchIdx(p as u32)).index()] += c;
    }
    let mut order: Vec<PatchIdx> = (0..ds.patches().len() as u32).map(PatchIdx).collect();
    order.sort_by(|&a, &b| {
        let (ga, gb) = (grid_of(a), grid_of(b));
        grid_low[gb.index()]
            .cmp(&grid_low[ga.index()])
            .then(ga.cmp(&gb))
            .then(patch_low[b.index()].cmp(&patch_low[a.index()]))
            .then(a.cmp(&b))
    });
    order
}

/// Holes imageable within `budget` walking every hole of `ranked` in order,
/// the first visit charged as a same-patch move.
pub fn max_lctf(ds: &Dataset, ranked: &[PatchIdx], budget: f64) -> usize {
    let mut prev: Option<HoleIdx> = None;
    let mut elapsed = 0.0;
    let mut count = 0;
    for &p in ranked {
        for &h in &ds.patch(p).holes {
            let mc = prev.map_or(MoveClass::SamePatch, |q| ds.move_class(q, h));
            let cost = move_cost(mc);
            if elapsed + cost > budget {
                return count;
            }
            elapsed += cost;
            count += 1;
            prev = Some(h);
        }
    }
    count
}

/// Result of elimination for one (dataset, predictions, budget, beta).
#[derive(Clone, Debug, PartialEq)]
pub struct ValidSet {
    /// Selected ranked prefix.
    pub patches: Vec<PatchIdx>,
    pub n_max: usize,
    /// Predicted-low total the prefix had to reach.
    pub required: f64,
    /// Set when no hole is predicted low and every hole is kept.
    pub fallback: bool,
    mask: Vec<bool>,
}

impl ValidSet {
    pub fn everything(ds: &Dataset) -> Self {
        Self {
            patches: (0..ds.patches().len() as u32).map(PatchIdx).collect(),
            n_max: 0,
            required: 0.0,
            fallback: true,
            mask: vec![true; ds.n_holes()],
        }
    }

    #[inline]
    pub fn contains(&self, h: HoleIdx) -> bool {
        self.mask[h.index()]
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    pub fn holes(&self) -> impl Iterator<Item = HoleIdx> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| HoleIdx(i as u32))
    }
}

pub fn eliminate(ds: &Dataset, pt: &PredictionTable, budget: f64, beta: f64) -> ValidSet {
    let total = pt.predicted_low_total();
    if total == 0 {
        return ValidSet::everything(ds);
    }
    let ranked = rank_patches(ds, pt);
    let n_max = max_lctf(ds, &ranked, budget);
    let required = (beta * n_max as f64).min(total as f64);
    let mut mask = vec![false; ds.n_holes()];
    let mut patches = Vec::new();
    let mut covered = 0usize;
    for p in ranked {
        if covered as f64 >= required {
            break;
        }
        covered += pt.patch_low_count(ds, p);
        for &h in &ds.patch(p).holes {
            mask[h.index()] = true;
        }
        patches.push(p);
    }
    ValidSet {
        patches,
        n_max,
        required,
        fallback: false,
        mask,
    }
}
