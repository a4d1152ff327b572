//! Synthetic hierarchies with spatially correlated hole quality.
//!
//! Each square draws a standard-normal latent quality and each patch a latent
//! scattered around its square. A hole is low-CTF with probability
//! `logistic(strength * patch_latent + bias)`, where the bias is solved for so
//! that the realized low fraction equals the target to within one hole.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::atlas::{Dataset, HoleRecord};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub n_grids: usize,
    /// Inclusive range of squares drawn per grid.
    pub squares_per_grid: (usize, usize),
    pub patches_per_square: (usize, usize),
    pub holes_per_patch: (usize, usize),
    /// When set, the drawn square counts are rescaled to hit this total.
    pub total_squares: Option<usize>,
    /// When set, the drawn hole counts are rescaled to hit this total.
    pub total_holes: Option<usize>,
    pub target_low_fraction: f64,
    pub clustering_strength: f64,
    /// Standard deviation of a patch latent around its square latent.
    pub patch_spread: f64,
    pub low_ctf: (f64, f64),
    pub high_ctf: (f64, f64),
    pub ctf_threshold: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self::y1(0)
    }
}

impl GenConfig {
    /// 31 squares, 4017 holes, 33.4% low-CTF.
    pub fn y1(seed: u64) -> Self {
        Self {
            seed,
            n_grids: 6,
            squares_per_grid: (4, 7),
            patches_per_square: (4, 8),
            holes_per_patch: (12, 32),
            total_squares: Some(31),
            total_holes: Some(4017),
            target_low_fraction: 0.334,
            clustering_strength: 2.0,
            patch_spread: 0.5,
            low_ctf: (3.0, 6.0),
            high_ctf: (6.0, 25.0),
            ctf_threshold: 6.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_grids == 0 {
            return bad("n_grids must be positive");
        }
        for (name, (lo, hi)) in [
            ("squares_per_grid", self.squares_per_grid),
            ("patches_per_square", self.patches_per_square),
            ("holes_per_patch", self.holes_per_patch),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("{name} must be a range with 1 <= min <= max")));
            }
        }
        if !(self.target_low_fraction > 0.0 && self.target_low_fraction < 1.0) {
            return bad("target_low_fraction must lie in (0, 1)");
        }
        if !(self.clustering_strength >= 0.0 && self.clustering_strength.is_finite()) {
            return bad("clustering_strength must be finite and >= 0");
        }
        if !(self.patch_spread >= 0.0 && self.patch_spread.is_finite()) {
            return bad("patch_spread must be finite and >= 0");
        }
        let (llo, lhi) = self.low_ctf;
        let (hlo, hhi) = self.high_ctf;
        if !(llo > 0.0 && llo <= lhi && lhi <= self.ctf_threshold) {
            return bad("low_ctf must be a positive range at or below the threshold");
        }
        if !(hlo >= self.ctf_threshold && hlo < hhi && hhi.is_finite()) {
            return bad("high_ctf must be a finite range above the threshold");
        }
        Ok(())
    }
}

/// Generates a dataset; identical configs give identical datasets.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed, &[0x5EED]);

    let mut squares_per_grid: Vec<usize> = (0..cfg.n_grids)
        .map(|_| draw(&mut rng, cfg.squares_per_grid))
        .collect();
    if let Some(total) = cfg.total_squares {
        squares_per_grid = apportion(total, &squares_per_grid)?;
    }
    let n_squares: usize = squares_per_grid.iter().sum();
    let patches_per_square: Vec<usize> = (0..n_squares)
        .map(|_| draw(&mut rng, cfg.patches_per_square))
        .collect();
    let n_patches: usize = patches_per_square.iter().sum();
    let mut holes_per_patch: Vec<usize> = (0..n_patches)
        .map(|_| draw(&mut rng, cfg.holes_per_patch))
        .collect();
    if let Some(total) = cfg.total_holes {
        holes_per_patch = apportion(total, &holes_per_patch)?;
    }
    let n_holes: usize = holes_per_patch.iter().sum();

    let square_latent: Vec<f64> = (0..n_squares)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut patch_square = Vec::with_capacity(n_patches);
    for (s, &np) in patches_per_square.iter().enumerate() {
        patch_square.extend(std::iter::repeat_n(s, np));
    }
    let patch_latent: Vec<f64> = patch_square
        .iter()
        .map(|&s| square_latent[s] + cfg.patch_spread * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let mut hole_patch = Vec::with_capacity(n_holes);
    for (p, &nh) in holes_per_patch.iter().enumerate() {
        hole_patch.extend(std::iter::repeat_n(p, nh));
    }
    let logit: Vec<f64> = hole_patch
        .iter()
        .map(|&p| cfg.clustering_strength * patch_latent[p])
        .collect();
    let uniforms: Vec<f64> = (0..n_holes).map(|_| rng.random::<f64>()).collect();
    let want_low = (cfg.target_low_fraction * n_holes as f64).round() as usize;
    let bias = calibrate_bias(&logit, &uniforms, want_low)?;

    let mut square_grid = Vec::with_capacity(n_squares);
    for (g, &ns) in squares_per_grid.iter().enumerate() {
        square_grid.extend(std::iter::repeat_n(g, ns));
    }
    let (gw, sw, pw, hw) = (
        width(cfg.n_grids),
        width(n_squares),
        width(n_patches),
        width(n_holes),
    );

    let mut records = Vec::with_capacity(n_holes);
    let mut h = 0usize;
    for (p, &nh) in holes_per_patch.iter().enumerate() {
        let s = patch_square[p];
        let g = square_grid[s];
        let cols = (nh as f64).sqrt().ceil() as usize;
        for k in 0..nh {
            let low = uniforms[h] < logistic(logit[h] + bias);
            let (lo, hi) = if low { cfg.low_ctf } else { cfg.high_ctf };
            let u: f64 = rng.random();
            // Low range is [lo, hi); high range is (lo, hi].
            let ctf = if low { lo + u * (hi - lo) } else { hi - u * (hi - lo) };
            let jitter_x: f64 = rng.random_range(-10.0..10.0);
            let jitter_y: f64 = rng.random_range(-10.0..10.0);
            records.push(HoleRecord {
                hole_id: format!("h{h:0hw$}"),
                grid_id: format!("g{g:0gw$}"),
                square_id: format!("s{s:0sw$}"),
                patch_id: format!("p{p:0pw$}"),
                x: 100.0 * (k % cols) as f64 + 50.0 + jitter_x,
                y: 100.0 * (k / cols) as f64 + 50.0 + jitter_y,
                ctf,
            });
            h += 1;
        }
    }
    Dataset::from_records(records)
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

fn width(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len().max(2)
}

#[inline]
fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Smallest bias (found by bisection) at which exactly `want` holes fall
/// below their success probability.
fn calibrate_bias(logit: &[f64], uniforms: &[f64], want: usize) -> Result<f64> {
    let count = |b: f64| {
        logit
            .iter()
            .zip(uniforms)
            .filter(|(&l, &u)| u < logistic(l + b))
            .count()
    };
    let (mut lo, mut hi) = (-80.0f64, 80.0f64);
    if count(lo) > want || count(hi) < want {
        return Err(Error::Generation(format!(
            "cannot reach {want} low-CTF holes out of {}",
            logit.len()
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if count(mid) >= want {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    if count(hi) != want {
        return Err(Error::Generation(format!(
            "bias calibration overshot: {} low-CTF holes instead of {want}",
            count(hi)
        )));
    }
    Ok(hi)
}

/// Splits `total` into one positive share per weight, proportionally to the
/// weights (largest-remainder rounding on top of one guaranteed unit each).
pub(crate) fn apportion(total: usize, weights: &[usize]) -> Result<Vec<usize>> {
    let n = weights.len();
    if total < n {
        return Err(Error::Generation(format!(
            "cannot split {total} items into {n} non-empty groups"
        )));
    }
    let extra = (total - n) as f64;
    let wsum: f64 = weights.iter().map(|&w| w.max(1) as f64).sum();
    let quotas: Vec<f64> = weights
        .iter()
        .map(|&w| extra * w.max(1) as f64 / wsum)
        .collect();
    let mut shares: Vec<usize> = quotas.iter().map(|q| 1 + q.floor() as usize).collect();
    let mut left = total - shares.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        shares[i] += 1;
        left -= 1;
    }
    Ok(shares)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn y1_preset_shape() {
        let ds = generate(&GenConfig::y1(7)).unwrap();
        assert_eq!(ds.squares().len(), 31);
        assert_eq!(ds.n_holes(), 4017);
        let rate = ds.base_rate(6.0);
        assert!((0.314..=0.354).contains(&rate), "rate {rate}");
    }

    #[test]
    fn deterministic() {
        let a = generate(&GenConfig::y1(3)).unwrap();
        let b = generate(&GenConfig::y1(3)).unwrap();
        let c = generate(&GenConfig::y1(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn unclustered_fraction_hits_target() {
        for seed in 0..5 {
            let cfg = GenConfig {
                seed,
                clustering_strength: 0.0,
                total_holes: Some(4000),
                ..GenConfig::y1(seed)
            };
            let ds = generate(&cfg).unwrap();
            assert!((ds.base_rate(6.0) - 0.334).abs() <= 0.02);
        }
    }

    #[test]
    fn ctf_ranges_respected() {
        let ds = generate(&GenConfig::y1(1)).unwrap();
        for h in ds.holes() {
            let v = h.ctf.get();
            assert!((3.0..=25.0).contains(&v));
        }
    }

    #[test]
    fn apportion_exact() {
        assert_eq!(apportion(10, &[1, 1]).unwrap(), vec![5, 5]);
        let s = apportion(4017, &[20, 13, 31, 7]).unwrap();
        assert_eq!(s.iter().sum::<usize>(), 4017);
        assert!(s.iter().all(|&v| v >= 1));
        assert!(apportion(2, &[1, 1, 1]).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = GenConfig {
            target_low_fraction: 1.0,
            ..GenConfig::y1(0)
        };
        assert!(generate(&cfg).is_err());
        let cfg = GenConfig {
            holes_per_patch: (5, 2),
            ..GenConfig::y1(0)
        };
        assert!(generate(&cfg).is_err());
    }
}
