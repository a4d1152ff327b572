//! Confusion-statistics stand-in for the offline hole classifier.
//!
//! Every hole's prediction is drawn once from a stream keyed by
//! `(model seed, hole id)`, so the same hole always gets the same label no
//! matter when, how often, or in what order it is queried.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::atlas::{Dataset, GridIdx, HoleIdx, PatchIdx, SquareIdx};
use crate::error::{Error, Result};
use crate::rng::KeyedStream;

const CONFIDENCE_JITTER: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Low,
    High,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub confidence: f64,
}

impl Prediction {
    #[inline]
    pub fn is_low(&self) -> bool {
        self.label == Label::Low
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Ground truth: a perfect classifier.
    Gt,
    /// ResNet50-like: 83.9% low / 91.2% high recall.
    R50,
    /// ResNet18-like: 91.0% low / 87.5% high recall.
    R18,
    /// Transfer model: about 70% on both classes.
    M,
    Custom,
}

/// Per-class recalls of a simulated classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub preset: Preset,
    /// P(predicted low | truly low).
    pub low_recall: f64,
    /// P(predicted high | truly high).
    pub high_recall: f64,
    pub seed: u64,
    pub ctf_threshold: f64,
}

impl ClassifierModel {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let (low_recall, high_recall) = match preset {
            Preset::Gt => (1.0, 1.0),
            Preset::R50 => (0.839, 0.912),
            Preset::R18 => (0.910, 0.875),
            Preset::M => (0.70, 0.70),
            Preset::Custom => (1.0, 1.0),
        };
        Self {
            preset,
            low_recall,
            high_recall,
            seed,
            ctf_threshold: 6.0,
        }
    }

    pub fn custom(low_recall: f64, high_recall: f64, seed: u64) -> Result<Self> {
        let m = Self {
            preset: Preset::Custom,
            low_recall,
            high_recall,
            seed,
            ctf_threshold: 6.0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("low_recall", self.low_recall), ("high_recall", self.high_recall)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }

    /// Deterministic prediction for one hole.
    pub fn predict(&self, hole_id: &str, truly_low: bool) -> Prediction {
        let mut s = KeyedStream::new(self.seed, hole_id);
        let u = s.next_f64();
        let label = match (truly_low, u < self.low_recall, u < self.high_recall) {
            (true, true, _) | (false, _, false) => Label::Low,
            _ => Label::High,
        };
        let recall = match label {
            Label::Low => self.low_recall,
            Label::High => self.high_recall,
        };
        let jitter = (2.0 * s.next_f64() - 1.0) * CONFIDENCE_JITTER;
        Prediction {
            label,
            confidence: (recall + jitter).clamp(0.5, 1.0),
        }
    }
}

impl fmt::Display for ClassifierModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.preset {
            Preset::Gt => f.write_str("gt"),
            Preset::R50 => f.write_str("r50"),
            Preset::R18 => f.write_str("r18"),
            Preset::M => f.write_str("m"),
            Preset::Custom => write!(f, "custom({},{})", self.low_recall, self.high_recall),
        }
    }
}

/// Parses `gt|r50|r18|m|custom(low_recall,high_recall)` with seed 0.
impl FromStr for ClassifierModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let preset = match t.as_str() {
            "gt" => Preset::Gt,
            "r50" => Preset::R50,
            "r18" => Preset::R18,
            "m" => Preset::M,
            _ => {
                let inner = t
                    .strip_prefix("custom(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| Error::Config(format!("unknown classifier `{s}`")))?;
                let mut parts = inner.split(',').map(|p| p.trim().parse::<f64>());
                return match (parts.next(), parts.next(), parts.next()) {
                    (Some(Ok(lo)), Some(Ok(hi)), None) => Self::custom(lo, hi, 0),
                    _ => Err(Error::Config(format!("malformed classifier `{s}`"))),
                };
            }
        };
        Ok(Self::preset(preset, 0))
    }
}

/// Frozen per-hole classifier output for one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTable {
    preds: Vec<Prediction>,
}

impl PredictionTable {
    pub fn predict_all(ds: &Dataset, model: &ClassifierModel) -> Self {
        let preds = ds
            .holes()
            .iter()
            .map(|h| model.predict(&h.id, h.ctf.get() <= model.ctf_threshold))
            .collect();
        Self { preds }
    }

    /// Table built from explicit per-hole labels, mostly for tests.
    pub fn from_labels(labels: impl IntoIterator<Item = Label>) -> Self {
        Self {
            preds: labels
                .into_iter()
                .map(|label| Prediction {
                    label,
                    confidence: 1.0,
                })
                .collect(),
        }
    }

    #[inline]
    pub fn get(&self, h: HoleIdx) -> Prediction {
        self.preds[h.index()]
    }

    #[inline]
    pub fn is_low(&self, h: HoleIdx) -> bool {
        self.preds[h.index()].is_low()
    }

    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    pub fn predicted_low_total(&self) -> usize {
        self.preds.iter().filter(|p| p.is_low()).count()
    }

    pub fn patch_low_count(&self, ds: &Dataset, p: PatchIdx) -> usize {
        ds.patch(p).holes.iter().filter(|&&h| self.is_low(h)).count()
    }
}

/// 2x2 matrix, rows = truth (low, high), columns = prediction (low, high).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion(pub [[u64; 2]; 2]);

impl Confusion {
    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn low_recall(&self) -> f64 {
        let [tl, fh] = self.0[0];
        tl as f64 / (tl + fh).max(1) as f64
    }

    pub fn high_recall(&self) -> f64 {
        let [fl, th] = self.0[1];
        th as f64 / (fl + th).max(1) as f64
    }
}

pub fn empirical_confusion(pt: &PredictionTable, ds: &Dataset, ctf_threshold: f64) -> Confusion {
    let mut m = [[0u64; 2]; 2];
    for h in ds.hole_indices() {
        let truth = usize::from(ds.hole(h).ctf.get() > ctf_threshold);
        let pred = usize::from(!pt.is_low(h));
        m[truth][pred] += 1;
    }
    Confusion(m)
}

/// Predicted-low, not-yet-visited hole counts per patch, square, and grid.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityCounts {
    patch: Vec<u32>,
    square: Vec<u32>,
    grid: Vec<u32>,
    removed: Vec<bool>,
}

impl QualityCounts {
    /// Static tallies with nothing visited.
    pub fn new(ds: &Dataset, pt: &PredictionTable) -> Self {
        let mut c = Self {
            patch: vec![0; ds.patches().len()],
            square: vec![0; ds.squares().len()],
            grid: vec![0; ds.grids().len()],
            removed: vec![false; ds.n_holes()],
        };
        for h in ds.hole_indices().filter(|&h| pt.is_low(h)) {
            let l = ds.lineage(h);
            c.patch[l.patch.index()] += 1;
            c.square[l.square.index()] += 1;
            c.grid[l.grid.index()] += 1;
        }
        c
    }

    /// Counts after the given visitation, computed from scratch.
    pub fn from_visited(ds: &Dataset, pt: &PredictionTable, visited: &[bool]) -> Self {
        let mut c = Self::new(ds, pt);
        for h in ds.hole_indices().filter(|h| visited[h.index()]) {
            c.visit(ds, pt, h);
        }
        c
    }

    /// Records a visit; only predicted-low holes change the counts, and each
    /// hole is removed at most once.
    pub fn visit(&mut self, ds: &Dataset, pt: &PredictionTable, h: HoleIdx) {
        if self.removed[h.index()] {
            return;
        }
        self.removed[h.index()] = true;
        if pt.is_low(h) {
            let l = ds.lineage(h);
            self.patch[l.patch.index()] -= 1;
            self.square[l.square.index()] -= 1;
            self.grid[l.grid.index()] -= 1;
        }
    }

    #[inline]
    pub fn patch(&self, p: PatchIdx) -> u32 {
        self.patch[p.index()]
    }

    #[inline]
    pub fn square(&self, s: SquareIdx) -> u32 {
        self.square[s.index()]
    }

    #[inline]
    pub fn grid(&self, g: GridIdx) -> u32 {
        self.grid[g.index()]
    }

    pub fn max_patch(&self) -> u32 {
        self.patch.iter().copied().max().unwrap_or(0)
    }

    pub fn max_square(&self) -> u32 {
        self.square.iter().copied().max().unwrap_or(0)
    }

    pub fn max_grid(&self) -> u32 {
        self.grid.iter().copied().max().unwrap_or(0)
    }
}
