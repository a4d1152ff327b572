//! The acquisition hierarchy (grid → square → patch → hole) and the fixed
//! movement-cost, reward, and penalty tables defined over it.
//!
//! A [`Dataset`] can only be built through [`Dataset::from_records`], which
//! validates the hierarchy and assigns dense indices in ascending id order at
//! every level. Every "ascending id" tie-break elsewhere in the crate therefore
//! reduces to comparing indices.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! index_type {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "#{}", self.0)
            }
        }
    };
}

index_type!(
    /// Dense index of a hole; ordering matches ascending hole id.
    HoleIdx
);
index_type!(PatchIdx);
index_type!(SquareIdx);
index_type!(GridIdx);

/// CTFMaxRes of a micrograph in Ångström. Lower is better.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct CtfValue(f64);

impl CtfValue {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Self(value))
        } else {
            Err(Error::InvalidCtf(value))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for CtfValue {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<CtfValue> for f64 {
    fn from(v: CtfValue) -> f64 {
        v.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hole {
    pub id: String,
    pub patch: PatchIdx,
    pub x: f64,
    pub y: f64,
    pub ctf: CtfValue,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub id: String,
    pub square: SquareIdx,
    pub holes: Vec<HoleIdx>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Square {
    pub id: String,
    pub grid: GridIdx,
    pub patches: Vec<PatchIdx>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub id: String,
    pub squares: Vec<SquareIdx>,
}

/// Resolved ancestry of one hole.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Lineage {
    pub patch: PatchIdx,
    pub square: SquareIdx,
    pub grid: GridIdx,
}

/// One flat row of a dataset: a hole together with its full lineage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoleRecord {
    pub hole_id: String,
    pub grid_id: String,
    pub square_id: String,
    pub patch_id: String,
    pub x: f64,
    pub y: f64,
    pub ctf: f64,
}

/// Immutable acquisition hierarchy with ground-truth CTF per hole.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    grids: Vec<Grid>,
    squares: Vec<Square>,
    patches: Vec<Patch>,
    holes: Vec<Hole>,
    lineage: Vec<Lineage>,
    hole_ids: HashMap<String, HoleIdx>,
}

impl Dataset {
    /// Builds and validates a dataset from flat hole rows.
    ///
    /// Rejects duplicate hole ids, empty ids, invalid CTF values, and any
    /// patch or square that is claimed by two different parents.
    pub fn from_records(records: impl IntoIterator<Item = HoleRecord>) -> Result<Self> {
        let mut rows: Vec<HoleRecord> = records.into_iter().collect();
        let mut patch_parent: BTreeMap<String, String> = BTreeMap::new();
        let mut square_parent: BTreeMap<String, String> = BTreeMap::new();
        let mut grid_ids: BTreeMap<String, ()> = BTreeMap::new();
        let mut seen: HashMap<&str, ()> = HashMap::with_capacity(rows.len());

        for r in &rows {
            for (what, id) in [
                ("hole", &r.hole_id),
                ("grid", &r.grid_id),
                ("square", &r.square_id),
                ("patch", &r.patch_id),
            ] {
                if id.trim().is_empty() {
                    return Err(Error::InvalidDataset(format!(
                        "hole `{}` has an empty {what} id",
                        r.hole_id
                    )));
                }
            }
            if seen.insert(r.hole_id.as_str(), ()).is_some() {
                return Err(Error::InvalidDataset(format!(
                    "duplicate hole id `{}`",
                    r.hole_id
                )));
            }
            if !(r.x.is_finite() && r.y.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "hole `{}` has a non-finite position",
                    r.hole_id
                )));
            }
            CtfValue::new(r.ctf)?;
            check_parent(&mut patch_parent, "patch", &r.patch_id, &r.square_id)?;
            check_parent(&mut square_parent, "square", &r.square_id, &r.grid_id)?;
            grid_ids.insert(r.grid_id.clone(), ());
        }
        drop(seen);

        // BTreeMap iteration gives ascending ids, hence index order == id order.
        let grid_idx: HashMap<&str, GridIdx> = grid_ids
            .keys()
            .enumerate()
            .map(|(i, id)| (id.as_str(), GridIdx(i as u32)))
            .collect();
        let square_idx: HashMap<&str, SquareIdx> = square_parent
            .keys()
            .enumerate()
            .map(|(i, id)| (id.as_str(), SquareIdx(i as u32)))
            .collect();
        let patch_idx: HashMap<&str, PatchIdx> = patch_parent
            .keys()
            .enumerate()
            .map(|(i, id)| (id.as_str(), PatchIdx(i as u32)))
            .collect();

        let mut grids: Vec<Grid> = grid_ids
            .keys()
            .map(|id| Grid {
                id: id.clone(),
                squares: Vec::new(),
            })
            .collect();
        let mut squares: Vec<Square> = square_parent
            .iter()
            .map(|(id, g)| Square {
                id: id.clone(),
                grid: grid_idx[g.as_str()],
                patches: Vec::new(),
            })
            .collect();
        let mut patches: Vec<Patch> = patch_parent
            .iter()
            .map(|(id, s)| Patch {
                id: id.clone(),
                square: square_idx[s.as_str()],
                holes: Vec::new(),
            })
            .collect();
        for (i, s) in squares.iter().enumerate() {
            grids[s.grid.index()].squares.push(SquareIdx(i as u32));
        }
        for (i, p) in patches.iter().enumerate() {
            squares[p.square.index()].patches.push(PatchIdx(i as u32));
        }

        rows.sort_by(|a, b| a.hole_id.cmp(&b.hole_id));
        let mut holes = Vec::with_capacity(rows.len());
        let mut lineage = Vec::with_capacity(rows.len());
        let mut hole_ids = HashMap::with_capacity(rows.len());
        for (i, r) in rows.into_iter().enumerate() {
            let patch = patch_idx[r.patch_id.as_str()];
            let square = patches[patch.index()].square;
            let grid = squares[square.index()].grid;
            patches[patch.index()].holes.push(HoleIdx(i as u32));
            lineage.push(Lineage {
                patch,
                square,
                grid,
            });
            hole_ids.insert(r.hole_id.clone(), HoleIdx(i as u32));
            holes.push(Hole {
                id: r.hole_id,
                patch,
                x: r.x,
                y: r.y,
                ctf: CtfValue(r.ctf),
            });
        }

        Ok(Self {
            grids,
            squares,
            patches,
            holes,
            lineage,
            hole_ids,
        })
    }

    /// Flat rows in ascending hole-id order.
    pub fn to_records(&self) -> Vec<HoleRecord> {
        self.holes
            .iter()
            .zip(&self.lineage)
            .map(|(h, l)| HoleRecord {
                hole_id: h.id.clone(),
                grid_id: self.grids[l.grid.index()].id.clone(),
                square_id: self.squares[l.square.index()].id.clone(),
                patch_id: self.patches[l.patch.index()].id.clone(),
                x: h.x,
                y: h.y,
                ctf: h.ctf.get(),
            })
            .collect()
    }

    pub fn holes(&self) -> &[Hole] {
        &self.holes
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn squares(&self) -> &[Square] {
        &self.squares
    }

    pub fn grids(&self) -> &[Grid] {
        &self.grids
    }

    pub fn n_holes(&self) -> usize {
        self.holes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.holes.is_empty()
    }

    #[inline]
    pub fn hole(&self, h: HoleIdx) -> &Hole {
        &self.holes[h.index()]
    }

    #[inline]
    pub fn patch(&self, p: PatchIdx) -> &Patch {
        &self.patches[p.index()]
    }

    #[inline]
    pub fn lineage(&self, h: HoleIdx) -> Lineage {
        self.lineage[h.index()]
    }

    pub fn hole_idx(&self, id: &str) -> Result<HoleIdx> {
        self.hole_ids
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownHole(id.to_string()))
    }

    pub fn patch_idx(&self, id: &str) -> Result<PatchIdx> {
        self.patches
            .binary_search_by(|p| p.id.as_str().cmp(id))
            .map(|i| PatchIdx(i as u32))
            .map_err(|_| Error::UnknownPatch(id.to_string()))
    }

    pub fn contains(&self, h: HoleIdx) -> bool {
        h.index() < self.holes.len()
    }

    pub fn hole_indices(&self) -> impl Iterator<Item = HoleIdx> + '_ {
        (0..self.holes.len() as u32).map(HoleIdx)
    }

    /// Number of holes with ground-truth CTF at or below `threshold`.
    pub fn low_count(&self, threshold: f64) -> usize {
        self.holes
            .iter()
            .filter(|h| h.ctf.get() <= threshold)
            .count()
    }

    /// Fraction of holes with ground-truth CTF at or below `threshold`.
    pub fn base_rate(&self, threshold: f64) -> f64 {
        if self.holes.is_empty() {
            0.0
        } else {
            self.low_count(threshold) as f64 / self.holes.len() as f64
        }
    }

    /// Relation between two holes in the hierarchy.
    #[inline]
    pub fn move_class(&self, prev: HoleIdx, next: HoleIdx) -> MoveClass {
        let a = self.lineage[prev.index()];
        let b = self.lineage[next.index()];
        if a.patch == b.patch {
            MoveClass::SamePatch
        } else if a.square == b.square {
            MoveClass::SameSquare
        } else if a.grid == b.grid {
            MoveClass::SameGrid
        } else {
            MoveClass::DifferentGrid
        }
    }

    /// Checked variant of [`Dataset::move_class`] for externally supplied ids.
    pub fn move_class_by_id(&self, prev: &str, next: &str) -> Result<MoveClass> {
        Ok(self.move_class(self.hole_idx(prev)?, self.hole_idx(next)?))
    }
}

fn check_parent(
    map: &mut BTreeMap<String, String>,
    what: &str,
    child: &str,
    parent: &str,
) -> Result<()> {
    match map.get(child) {
        Some(existing) if existing != parent => Err(Error::InvalidDataset(format!(
            "{what} `{child}` is claimed by both `{existing}` and `{parent}`"
        ))),
        Some(_) => Ok(()),
        None => {
            map.insert(child.to_string(), parent.to_string());
            Ok(())
        }
    }
}

/// How far the microscope travels between consecutive holes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MoveClass {
    SamePatch,
    SameSquare,
    SameGrid,
    DifferentGrid,
}

impl MoveClass {
    pub const ALL: [MoveClass; 4] = [
        MoveClass::SamePatch,
        MoveClass::SameSquare,
        MoveClass::SameGrid,
        MoveClass::DifferentGrid,
    ];

    #[inline]
    pub fn ordinal(self) -> usize {
        self as usize
    }
}

/// Minutes spent moving to and imaging the next hole.
#[inline]
pub fn move_cost(mc: MoveClass) -> f64 {
    match mc {
        MoveClass::SamePatch => 2.0,
        MoveClass::SameSquare => 3.0,
        MoveClass::SameGrid => 5.0,
        MoveClass::DifferentGrid => 10.0,
    }
}

/// Operational-cost penalty `1 - exp(-beta (t - t0))` used by the planning
/// objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyCurve {
    pub beta: f64,
    pub t0: f64,
}

impl Default for PenaltyCurve {
    fn default() -> Self {
        Self {
            beta: 0.185,
            t0: 2.0,
        }
    }
}

impl PenaltyCurve {
    pub fn cost_penalty(&self, t: f64) -> Result<f64> {
        if !(t >= self.t0) {
            return Err(Error::PenaltyDomain { t, t0: self.t0 });
        }
        Ok(1.0 - (-self.beta * (t - self.t0)).exp())
    }
}

/// Per-step rewards used for Q-learning.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    pub same_patch: f64,
    pub same_square: f64,
    pub same_grid: f64,
    pub different_grid: f64,
    /// Reward for a hole above the threshold, regardless of movement.
    pub high: f64,
    /// Holes with CTF at or below this value (Å) are "low-CTF".
    pub ctf_threshold: f64,
}

impl Default for RewardTable {
    fn default() -> Self {
        Self {
            same_patch: 1.0,
            same_square: 0.57,
            same_grid: 0.23,
            different_grid: 0.09,
            high: 0.0,
            ctf_threshold: 6.0,
        }
    }
}

/// Which movement rewards an ablation table doubles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardAblation {
    Square,
    Grid,
    Both,
}

impl RewardTable {
    /// The default table with the square-switch and/or grid-switch rewards
    /// doubled.
    pub fn doubled(ablation: RewardAblation) -> Self {
        let mut t = Self::default();
        if matches!(ablation, RewardAblation::Square | RewardAblation::Both) {
            t.same_square *= 2.0;
        }
        if matches!(ablation, RewardAblation::Grid | RewardAblation::Both) {
            t.different_grid *= 2.0;
        }
        t
    }

    pub fn low_reward(&self, mc: MoveClass) -> f64 {
        match mc {
            MoveClass::SamePatch => self.same_patch,
            MoveClass::SameSquare => self.same_square,
            MoveClass::SameGrid => self.same_grid,
            MoveClass::DifferentGrid => self.different_grid,
        }
    }

    #[inline]
    pub fn is_low(&self, ctf: CtfValue) -> bool {
        ctf.get() <= self.ctf_threshold
    }

    pub fn step_reward(&self, ctf: CtfValue, mc: MoveClass) -> f64 {
        if self.is_low(ctf) {
            self.low_reward(mc)
        } else {
            self.high
        }
    }

    /// True when low-CTF rewards never increase with movement distance.
    pub fn is_monotone(&self) -> bool {
        MoveClass::ALL
            .windows(2)
            .all(|w| self.low_reward(w[0]) >= self.low_reward(w[1]))
    }

    /// Checks the invariants every table (including ablations) must satisfy:
    /// finite values, a positive threshold, and a high-CTF reward no larger
    /// than any low-CTF reward.
    pub fn validate(&self) -> Result<()> {
        let lows = MoveClass::ALL.map(|mc| self.low_reward(mc));
        if lows.iter().chain([&self.high]).any(|v| !v.is_finite()) {
            return Err(Error::Config("reward table has non-finite entries".into()));
        }
        if !(self.ctf_threshold.is_finite() && self.ctf_threshold > 0.0) {
            return Err(Error::Config("CTF threshold must be positive".into()));
        }
        if lows.iter().any(|&r| r < self.high) {
            return Err(Error::Config(
                "high-CTF reward exceeds a low-CTF reward".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn rec(h: &str, g: &str, s: &str, p: &str, ctf: f64) -> HoleRecord {
        HoleRecord {
            hole_id: h.into(),
            grid_id: g.into(),
            square_id: s.into(),
            patch_id: p.into(),
            x: 0.0,
            y: 0.0,
            ctf,
        }
    }

    fn small() -> Dataset {
        Dataset::from_records(vec![
            rec("h0", "g0", "s0", "p0", 4.0),
            rec("h1", "g0", "s0", "p0", 8.0),
            rec("h2", "g0", "s0", "p1", 5.0),
            rec("h3", "g0", "s1", "p2", 5.0),
            rec("h4", "g1", "s2", "p3", 5.0),
        ])
        .unwrap()
    }

    #[test]
    fn move_classes_follow_lineage() {
        let ds = small();
        assert_eq!(ds.move_class_by_id("h0", "h1").unwrap(), MoveClass::SamePatch);
        assert_eq!(ds.move_class_by_id("h0", "h2").unwrap(), MoveClass::SameSquare);
        assert_eq!(ds.move_class_by_id("h0", "h3").unwrap(), MoveClass::SameGrid);
        assert_eq!(ds.move_class_by_id("h0", "h4").unwrap(), MoveClass::DifferentGrid);
        assert!(matches!(
            ds.move_class_by_id("h0", "nope"),
            Err(Error::UnknownHole(_))
        ));
    }

    #[test]
    fn cost_table() {
        assert_eq!(move_cost(MoveClass::SamePatch), 2.0);
        assert_eq!(move_cost(MoveClass::SameSquare), 3.0);
        assert_eq!(move_cost(MoveClass::SameGrid), 5.0);
        assert_eq!(move_cost(MoveClass::DifferentGrid), 10.0);
    }

    #[test]
    fn penalty_curve() {
        let c = PenaltyCurve::default();
        assert_eq!(c.cost_penalty(2.0).unwrap(), 0.0);
        assert!((c.cost_penalty(5.0).unwrap() - 0.425_927_738_8).abs() < 1e-9);
        assert!((c.cost_penalty(10.0).unwrap() - 0.772_362_311_6).abs() < 1e-9);
        assert!(matches!(
            c.cost_penalty(1.5),
            Err(Error::PenaltyDomain { .. })
        ));
    }

    #[test]
    fn step_rewards() {
        let t = RewardTable::default();
        let c = |v| CtfValue::new(v).unwrap();
        assert_eq!(t.step_reward(c(4.1), MoveClass::SamePatch), 1.0);
        assert_eq!(t.step_reward(c(5.9), MoveClass::SameSquare), 0.57);
        assert_eq!(t.step_reward(c(5.9), MoveClass::SameGrid), 0.23);
        assert_eq!(t.step_reward(c(5.9), MoveClass::DifferentGrid), 0.09);
        assert_eq!(t.step_reward(c(6.0), MoveClass::SamePatch), 1.0);
        for mc in MoveClass::ALL {
            assert_eq!(t.step_reward(c(8.0), mc), 0.0);
        }
        assert!(t.is_monotone());
        t.validate().unwrap();
    }

    #[test]
    fn ablation_tables() {
        let sq = RewardTable::doubled(RewardAblation::Square);
        assert_eq!(sq.same_square, 1.14);
        assert_eq!(sq.different_grid, 0.09);
        let both = RewardTable::doubled(RewardAblation::Both);
        assert_eq!(both.different_grid, 0.18);
        both.validate().unwrap();
        assert!(!sq.is_monotone());
    }

    #[test]
    fn rejects_bad_hierarchies() {
        let dup = Dataset::from_records(vec![
            rec("h0", "g0", "s0", "p0", 4.0),
            rec("h0", "g0", "s0", "p0", 5.0),
        ]);
        assert!(matches!(dup, Err(Error::InvalidDataset(m)) if m.contains("duplicate")));

        let two_parents = Dataset::from_records(vec![
            rec("h0", "g0", "s0", "p0", 4.0),
            rec("h1", "g0", "s1", "p0", 5.0),
        ]);
        assert!(matches!(two_parents, Err(Error::InvalidDataset(m)) if m.contains("claimed")));

        let bad_ctf = Dataset::from_records(vec![rec("h0", "g0", "s0", "p0", -1.0)]);
        assert!(matches!(bad_ctf, Err(Error::InvalidCtf(_))));
    }

    #[test]
    fn indices_follow_id_order() {
        let ds = Dataset::from_records(vec![
            rec("b", "g1", "s1", "p1", 4.0),
            rec("a", "g0", "s0", "p0", 4.0),
        ])
        .unwrap();
        assert_eq!(ds.hole(HoleIdx(0)).id, "a");
        assert_eq!(ds.patch(PatchIdx(1)).id, "p1");
        assert_eq!(ds.hole_idx("b").unwrap(), HoleIdx(1));
        let l = ds.lineage(HoleIdx(1));
        assert_eq!((l.patch.0, l.square.0, l.grid.0), (1, 1, 1));
        assert_eq!(ds.to_records()[0].hole_id, "a");
    }
}
