//! Patch-order planners (greedy, genetic, annealing) and a uniform random
//! walker, all scored by the same execution model as the learned planner.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::{move_cost, Dataset, HoleIdx, MoveClass, PatchIdx, PenaltyCurve, RewardTable};
use crate::classifier::PredictionTable;
use crate::elim::rank_patches;
use crate::episode::{objective_value, EpisodeState, StepRecord};
use crate::error::{Error, Result};
use crate::rng;

/// Everything plan execution depends on besides the plan itself.
#[derive(Clone, Debug)]
pub struct PlanContext<'a> {
    pub ds: &'a Dataset,
    pub pt: &'a PredictionTable,
    pub rewards: RewardTable,
    pub penalty: PenaltyCurve,
    pub budget: f64,
    /// Microscope start. `None` parks it over the first predicted-low hole
    /// of the plan's first patch that has one, without imaging it.
    pub start: Option<HoleIdx>,
}

impl<'a> PlanContext<'a> {
    pub fn new(ds: &'a Dataset, pt: &'a PredictionTable, budget: f64) -> Self {
        Self {
            ds,
            pt,
            rewards: RewardTable::default(),
            penalty: PenaltyCurve::default(),
            budget,
            start: None,
        }
    }

    pub fn with_start(mut self, start: Option<HoleIdx>) -> Self {
        self.start = start;
        self
    }

    pub fn execute(&self, plan: &[PatchIdx]) -> Result<Vec<StepRecord>> {
        execute_plan(plan, self)
    }

    /// Planning objective of the executed plan.
    pub fn fitness(&self, plan: &[PatchIdx]) -> Result<f64> {
        objective_value(&self.execute(plan)?, &self.penalty)
    }
}

fn predicted_low_holes(ctx: &PlanContext<'_>, p: PatchIdx) -> Vec<HoleIdx> {
    let mut v: Vec<HoleIdx> = ctx
        .ds
        .patch(p)
        .holes
        .iter()
        .copied()
        .filter(|&h| ctx.pt.is_low(h))
        .collect();
    v.sort_unstable();
    v
}

/// Scans `plan` in order and visits each patch's predicted-low holes in
/// ascending order. Visits that no longer fit the budget are skipped; the
/// walk ends once nothing can fit.
pub fn execute_plan(plan: &[PatchIdx], ctx: &PlanContext<'_>) -> Result<Vec<StepRecord>> {
    let mut seen = vec![false; ctx.ds.patches().len()];
    for &p in plan {
        if p.index() >= seen.len() {
            return Err(Error::UnknownPatch(p.to_string()));
        }
        if std::mem::replace(&mut seen[p.index()], true) {
            return Err(Error::Config(format!("patch {p} appears twice in the plan")));
        }
    }
    let lows: Vec<Vec<HoleIdx>> = plan.iter().map(|&p| predicted_low_holes(ctx, p)).collect();
    let mut st = match ctx.start {
        Some(s) => EpisodeState::new(ctx.ds, s, ctx.budget, ctx.rewards)?,
        None => match lows.iter().find_map(|v| v.first()) {
            Some(&s) => EpisodeState::parked(ctx.ds, s, ctx.budget, ctx.rewards)?,
            None => return Ok(Vec::new()),
        },
    };
    let min_cost = move_cost(MoveClass::SamePatch);
    'plan: for holes in &lows {
        for &h in holes {
            if st.remaining() < min_cost {
                break 'plan;
            }
            if st.is_legal(h) {
                st.step(h)?;
            }
        }
    }
    Ok(st.into_trajectory())
}

/// The greedy scan order; identical to the elimination ranking.
pub fn greedy_plan(ds: &Dataset, pt: &PredictionTable) -> Vec<PatchIdx> {
    rank_patches(ds, pt)
}

/// Uniformly random legal moves from `start` until the budget runs out.
pub fn random_policy(
    ds: &Dataset,
    start: HoleIdx,
    budget: f64,
    rewards: &RewardTable,
    seed: u64,
) -> Result<Vec<StepRecord>> {
    let mut rng = rng::seeded(seed, &[0xA11D]);
    let mut st = EpisodeState::new(ds, start, budget, *rewards)?;
    loop {
        let legal = st.legal_actions();
        if legal.is_empty() {
            break;
        }
        st.step(legal[rng.random_range(0..legal.len())])?;
    }
    Ok(st.into_trajectory())
}

/// Best plan found by a search, plus the best-so-far fitness after each
/// generation (GA, starting with the initial population) or iteration (SA).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub plan: Vec<PatchIdx>,
    pub fitness: f64,
    pub history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub generations: usize,
    pub population: usize,
    /// Per-gene probability of a swap with a random position.
    pub mutation_rate: f64,
    pub elitism: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            generations: 40,
            population: 10,
            mutation_rate: 0.05,
            elitism: 1,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::Config("GA population must be at least 2".into()));
        }
        if self.elitism >= self.population {
            return Err(Error::Config("GA elitism must be below the population size".into()));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::Config("GA mutation rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Child keeps `a[..cut]`, then the genes of `b` not yet taken, in `b`'s
/// order, so it is always a permutation.
pub fn single_point_crossover(a: &[PatchIdx], b: &[PatchIdx], cut: usize) -> Vec<PatchIdx> {
    let mut taken = std::collections::HashSet::with_capacity(cut);
    let mut child: Vec<PatchIdx> = a[..cut].to_vec();
    taken.extend(child.iter().copied());
    child.extend(b.iter().copied().filter(|g| !taken.contains(g)));
    child
}

fn swap_mutation(genes: &mut [PatchIdx], rate: f64, rng: &mut ChaCha8Rng) {
    let n = genes.len();
    for i in 0..n {
        if rng.random::<f64>() < rate {
            let j = rng.random_range(0..n);
            genes.swap(i, j);
        }
    }
}

fn all_patches(ds: &Dataset) -> Vec<PatchIdx> {
    (0..ds.patches().len() as u32).map(PatchIdx).collect()
}

fn best_of(scored: &[(f64, Vec<PatchIdx>)]) -> usize {
    let mut best = 0;
    for (i, s) in scored.iter().enumerate() {
        if s.0 > scored[best].0 {
            best = i;
        }
    }
    best
}

/// Genetic search over patch orders. Parents are the fitter half of the
/// population; each child is a single-point crossover of consecutive parents
/// followed by swap mutation, and the best `elitism` plans survive unchanged.
pub fn ga_optimize(ctx: &PlanContext<'_>, cfg: &GaConfig) -> Result<SearchResult> {
    cfg.validate()?;
    let base = all_patches(ctx.ds);
    if base.len() < 2 {
        let fitness = ctx.fitness(&base)?;
        return Ok(SearchResult {
            plan: base,
            fitness,
            history: vec![fitness],
        });
    }
    let mut rng = rng::seeded(cfg.seed, &[0x6A]);
    let mut pop: Vec<(f64, Vec<PatchIdx>)> = Vec::with_capacity(cfg.population);
    for _ in 0..cfg.population {
        let mut g = base.clone();
        g.shuffle(&mut rng);
        pop.push((ctx.fitness(&g)?, g));
    }
    let mut best = pop[best_of(&pop)].clone();
    let mut history = vec![best.0];
    for _ in 0..cfg.generations {
        // Stable sort keeps ties in population order.
        pop.sort_by(|a, b| b.0.total_cmp(&a.0));
        let n_parents = (cfg.population / 2).max(2);
        let mut next: Vec<(f64, Vec<PatchIdx>)> = pop[..cfg.elitism].to_vec();
        let mut k = 0;
        while next.len() < cfg.population {
            let a = &pop[k % n_parents].1;
            let b = &pop[(k + 1) % n_parents].1;
            let cut = rng.random_range(1..base.len());
            let mut child = single_point_crossover(a, b, cut);
            swap_mutation(&mut child, cfg.mutation_rate, &mut rng);
            next.push((ctx.fitness(&child)?, child));
            k += 1;
        }
        pop = next;
        let i = best_of(&pop);
        if pop[i].0 > best.0 {
            best = pop[i].clone();
        }
        history.push(best.0);
    }
    Ok(SearchResult {
        plan: best.1,
        fitness: best.0,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaConfig {
    /// Initial temperature; `None` means the square root of the patch count.
    pub t_max: Option<f64>,
    pub t_min: f64,
    /// Multiplicative cooling per iteration.
    pub rate: f64,
    pub seed: u64,
}

impl Default for SaConfig {
    fn default() -> Self {
        Self {
            t_max: None,
            t_min: 1e-8,
            rate: 0.995,
            seed: 0,
        }
    }
}

impl SaConfig {
    pub fn initial_temperature(&self, n_patches: usize) -> f64 {
        self.t_max.unwrap_or((n_patches as f64).sqrt())
    }

    pub fn validate(&self, n_patches: usize) -> Result<()> {
        let t0 = self.initial_temperature(n_patches);
        if !(self.t_min > 0.0 && self.t_min < t0) {
            return Err(Error::Config(format!(
                "SA temperatures must satisfy 0 < t_min < t_max (got {} and {t0})",
                self.t_min
            )));
        }
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::Config("SA cooling rate must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One annealing iteration, for inspecting the acceptance rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaStep {
    pub temperature: f64,
    pub delta: f64,
    pub accepted: bool,
}

pub fn sa_optimize(ctx: &PlanContext<'_>, cfg: &SaConfig) -> Result<SearchResult> {
    sa_optimize_traced(ctx, cfg).map(|(r, _)| r)
}

/// Simulated annealing over patch orders with random-swap neighbours.
pub fn sa_optimize_traced(ctx: &PlanContext<'_>, cfg: &SaConfig) -> Result<(SearchResult, Vec<SaStep>)> {
    let mut cur = all_patches(ctx.ds);
    let n = cur.len();
    if n < 2 {
        let fitness = ctx.fitness(&cur)?;
        let r = SearchResult {
            plan: cur,
            fitness,
            history: vec![fitness],
        };
        return Ok((r, Vec::new()));
    }
    cfg.validate(n)?;
    let mut rng = rng::seeded(cfg.seed, &[0x5A]);
    cur.shuffle(&mut rng);
    let mut e_cur = ctx.fitness(&cur)?;
    let (mut best, mut e_best) = (cur.clone(), e_cur);
    let mut t = cfg.initial_temperature(n);
    let mut history = vec![e_best];
    let mut trace = Vec::new();
    while t > cfg.t_min {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        cur.swap(i, j);
        let e_new = ctx.fitness(&cur)?;
        let delta = e_new - e_cur;
        let accepted = delta >= 0.0 || rng.random::<f64>() < (delta / t).exp();
        if accepted {
            e_cur = e_new;
            if e_cur > e_best {
                e_best = e_cur;
                best.clone_from(&cur);
            }
        } else {
            cur.swap(i, j);
        }
        trace.push(SaStep {
            temperature: t,
            delta,
            accepted,
        });
        history.push(e_best);
        t *= cfg.rate;
    }
    Ok((
        SearchResult {
            plan: best,
            fitness: e_best,
            history,
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::HoleRecord;
    use crate::classifier::{ClassifierModel, Label, Preset};
    use crate::dataset::{generate, GenConfig};

    fn rec(h: &str, g: &str, s: &str, p: &str, ctf: f64) -> HoleRecord {
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

    fn gt(ds: &Dataset) -> PredictionTable {
        PredictionTable::predict_all(ds, &ClassifierModel::preset(Preset::Gt, 0))
    }

    #[test]
    fn all_high_plan_is_empty() {
        let ds = Dataset::from_records(vec![rec("h0", "g", "s", "p0", 9.0), rec("h1", "g", "s", "p1", 8.0)]).unwrap();
        let pt = gt(&ds);
        let ctx = PlanContext::new(&ds, &pt, 100.0);
        assert!(ctx.execute(&[PatchIdx(0), PatchIdx(1)]).unwrap().is_empty());
        let ctx = ctx.with_start(Some(HoleIdx(0)));
        assert!(ctx.execute(&[PatchIdx(1), PatchIdx(0)]).unwrap().is_empty());
    }

    #[test]
    fn three_low_holes_in_six_minutes() {
        let ds = Dataset::from_records((0..3).map(|i| rec(&format!("h{i}"), "g", "s", "p", 4.0))).unwrap();
        let pt = gt(&ds);
        let traj = PlanContext::new(&ds, &pt, 6.0).execute(&[PatchIdx(0)]).unwrap();
        assert_eq!(traj.len(), 3);
        assert_eq!(traj.iter().map(|s| s.cost).sum::<f64>(), 6.0);
        let cut = PlanContext::new(&ds, &pt, 5.0).execute(&[PatchIdx(0)]).unwrap();
        assert_eq!(cut.iter().map(|s| s.hole).collect::<Vec<_>>(), vec![HoleIdx(0), HoleIdx(1)]);
    }

    #[test]
    fn never_visits_predicted_high_or_twice() {
        let ds = generate(&GenConfig {
            total_holes: Some(500),
            total_squares: Some(8),
            n_grids: 3,
            ..GenConfig::y1(2)
        })
        .unwrap();
        let pt = PredictionTable::predict_all(&ds, &ClassifierModel::preset(Preset::R18, 2));
        for start in [None, Some(HoleIdx(0)), Some(HoleIdx(250))] {
            let ctx = PlanContext::new(&ds, &pt, 300.0).with_start(start);
            let traj = ctx.execute(&greedy_plan(&ds, &pt)).unwrap();
            let mut seen = std::collections::HashSet::new();
            for s in &traj {
                assert!(pt.is_low(s.hole));
                assert!(seen.insert(s.hole));
                assert_ne!(Some(s.hole), start);
            }
            assert!(traj.iter().map(|s| s.cost).sum::<f64>() <= 300.0);
        }
    }

    #[test]
    fn rejects_duplicate_plan() {
        let ds = Dataset::from_records(vec![rec("h0", "g", "s", "p0", 4.0)]).unwrap();
        let pt = gt(&ds);
        assert!(PlanContext::new(&ds, &pt, 10.0).execute(&[PatchIdx(0), PatchIdx(0)]).is_err());
    }

    #[test]
    fn crossover_repairs_to_permutation() {
        let a: Vec<PatchIdx> = [3, 1, 4, 0, 2].map(PatchIdx).to_vec();
        let b: Vec<PatchIdx> = [0, 1, 2, 3, 4].map(PatchIdx).to_vec();
        let c = single_point_crossover(&a, &b, 2);
        assert_eq!(c, [3, 1, 0, 2, 4].map(PatchIdx).to_vec());
        for cut in 0..=5 {
            let mut c = single_point_crossover(&a, &b, cut);
            c.sort();
            assert_eq!(c, b);
        }
    }

    #[test]
    fn single_patch_is_identity() {
        let ds = Dataset::from_records(vec![rec("h0", "g", "s", "p0", 4.0)]).unwrap();
        let pt = gt(&ds);
        let ctx = PlanContext::new(&ds, &pt, 10.0);
        assert_eq!(ga_optimize(&ctx, &GaConfig::default()).unwrap().plan, vec![PatchIdx(0)]);
        assert_eq!(sa_optimize(&ctx, &SaConfig::default()).unwrap().plan, vec![PatchIdx(0)]);
        assert!(ga_optimize(&ctx, &GaConfig { population: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn random_policy_deterministic_and_within_budget() {
        let ds = generate(&GenConfig {
            total_holes: Some(400),
            total_squares: Some(6),
            n_grids: 2,
            ..GenConfig::y1(5)
        })
        .unwrap();
        let r = RewardTable::default();
        let a = random_policy(&ds, HoleIdx(5), 120.0, &r, 9).unwrap();
        let b = random_policy(&ds, HoleIdx(5), 120.0, &r, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().map(|s| s.cost).sum::<f64>() <= 120.0);
    }

    #[test]
    fn searches_are_monotone_and_reproducible() {
        let ds = generate(&GenConfig {
            total_holes: Some(300),
            total_squares: Some(6),
            n_grids: 2,
            ..GenConfig::y1(8)
        })
        .unwrap();
        let pt = PredictionTable::from_labels(ds.hole_indices().map(|h| {
            if ds.hole(h).ctf.get() <= 6.0 {
                Label::Low
            } else {
                Label::High
            }
        }));
        let ctx = PlanContext::new(&ds, &pt, 120.0);
        let ga = ga_optimize(&ctx, &GaConfig { seed: 4, ..Default::default() }).unwrap();
        assert_eq!(ga.history.len(), 41);
        assert!(ga.history.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(ga.fitness, ctx.fitness(&ga.plan).unwrap());
        let sa_cfg = SaConfig { seed: 4, ..Default::default() };
        let sa = sa_optimize(&ctx, &sa_cfg).unwrap();
        assert!(sa.history.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(sa.fitness, ctx.fitness(&sa.plan).unwrap());
        assert_eq!(sa, sa_optimize(&ctx, &sa_cfg).unwrap());
    }
}
