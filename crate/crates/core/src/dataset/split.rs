//! Train/validation partitioning at square granularity.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::atlas::{Dataset, SquareIdx};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitUnit {
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratio: (u32, u32),
    pub unit: SplitUnit,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratio: (2, 1),
            unit: SplitUnit::Square,
        }
    }
}

impl SplitSpec {
    /// Number of squares assigned to each side. Each side gets the floor of
    /// its proportional share; the leftover goes to the larger side (the
    /// first side on a tie).
    pub fn sizes(&self, n: usize) -> (usize, usize) {
        let (a, b) = (self.ratio.0 as usize, self.ratio.1 as usize);
        let sum = a + b;
        let na = n * a / sum;
        let nb = n * b / sum;
        let rest = n - na - nb;
        if a >= b {
            (na + rest, nb)
        } else {
            (na, nb + rest)
        }
    }
}

/// Shuffles the squares with `seed` and partitions them at the given ratio.
pub fn split(ds: &Dataset, spec: &SplitSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.ratio.0 == 0 && spec.ratio.1 == 0 {
        return Err(Error::Config("split ratio parts must not both be zero".into()));
    }
    let n = ds.squares().len();
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 squares to split, have {n}")));
    }
    let mut order: Vec<SquareIdx> = (0..n as u32).map(SquareIdx).collect();
    order.shuffle(&mut rng::seeded(seed, &[0x5B117]));
    let (na, _) = spec.sizes(n);
    let first: HashSet<SquareIdx> = order[..na].iter().copied().collect();

    let (mut left, mut right) = (Vec::new(), Vec::new());
    for (h, rec) in ds.hole_indices().zip(ds.to_records()) {
        if first.contains(&ds.lineage(h).square) {
            left.push(rec);
        } else {
            right.push(rec);
        }
    }
    Ok((Dataset::from_records(left)?, Dataset::from_records(right)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, GenConfig};

    #[test]
    fn sizes_for_31_squares() {
        assert_eq!(SplitSpec::default().sizes(31), (21, 10));
        let rev = SplitSpec {
            ratio: (1, 2),
            unit: SplitUnit::Square,
        };
        assert_eq!(rev.sizes(31), (10, 21));
        let all = SplitSpec {
            ratio: (1, 0),
            unit: SplitUnit::Square,
        };
        assert_eq!(all.sizes(31), (31, 0));
    }

    #[test]
    fn y1_split_is_a_partition() {
        let ds = generate(&GenConfig::y1(5)).unwrap();
        let (train, val) = split(&ds, &SplitSpec::default(), 9).unwrap();
        assert_eq!(train.squares().len(), 21);
        assert_eq!(val.squares().len(), 10);
        assert_eq!(train.n_holes() + val.n_holes(), ds.n_holes());
        let a: HashSet<_> = train.holes().iter().map(|h| h.id.clone()).collect();
        assert!(val.holes().iter().all(|h| !a.contains(&h.id)));
        let sq: HashSet<_> = train
            .squares()
            .iter()
            .chain(val.squares())
            .map(|s| s.id.clone())
            .collect();
        assert_eq!(sq.len(), 31);
    }

    #[test]
    fn degenerate_ratio_and_errors() {
        let ds = generate(&GenConfig::y1(5)).unwrap();
        let all = SplitSpec {
            ratio: (1, 0),
            unit: SplitUnit::Square,
        };
        let (a, b) = split(&ds, &all, 1).unwrap();
        assert_eq!(a, ds);
        assert!(b.is_empty());
        let zero = SplitSpec {
            ratio: (0, 0),
            unit: SplitUnit::Square,
        };
        assert!(split(&ds, &zero, 1).is_err());
        let (one, _) = split(
            &ds,
            &SplitSpec {
                ratio: (1, 30),
                unit: SplitUnit::Square,
            },
            1,
        )
        .unwrap();
        assert_eq!(one.squares().len(), 1);
        assert!(split(&one, &SplitSpec::default(), 1).is_err());
    }
}
