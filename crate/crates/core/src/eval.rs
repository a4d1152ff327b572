//! Paired multi-trial evaluation, comparison tables, and report files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::{Dataset, HoleIdx, PatchIdx, PenaltyCurve, RewardTable};
use crate::baselines::{
    execute_plan, ga_optimize, greedy_plan, random_policy, sa_optimize, GaConfig, PlanContext, SaConfig,
};
use crate::classifier::PredictionTable;
use crate::dqn::{run_policy, Policy};
use crate::episode::{lctf_count, objective_value, StepRecord};
use crate::error::{Error, Result};
use crate::rng;

const START_STREAM: u64 = 0x57A27;
const PLANNER_STREAM: u64 = 0x91A4;

/// Shared inputs of every rollout in an evaluation.
#[derive(Clone, Debug)]
pub struct EvalContext<'a> {
    pub ds: &'a Dataset,
    pub pt: &'a PredictionTable,
    pub rewards: RewardTable,
    pub penalty: PenaltyCurve,
    /// Classifier label for reports.
    pub classifier: String,
}

impl<'a> EvalContext<'a> {
    pub fn new(ds: &'a Dataset, pt: &'a PredictionTable, classifier: impl Into<String>) -> Self {
        Self {
            ds,
            pt,
            rewards: RewardTable::default(),
            penalty: PenaltyCurve::default(),
            classifier: classifier.into(),
        }
    }

    fn plan_context(&self, budget: f64, start: HoleIdx) -> PlanContext<'a> {
        PlanContext {
            ds: self.ds,
            pt: self.pt,
            rewards: self.rewards,
            penalty: self.penalty,
            budget,
            start: Some(start),
        }
    }
}

/// Anything that can produce a trajectory from a start hole and a budget.
pub trait Planner: Sync {
    fn name(&self) -> String;

    /// `seed` is unique per (trial, budget) and identical across planners.
    fn rollout(&self, ctx: &EvalContext<'_>, start: HoleIdx, budget: f64, seed: u64) -> Result<Vec<StepRecord>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerKind {
    Dqn,
    Greedy,
    Ga,
    Sa,
    Random,
}

impl PlannerKind {
    pub const ALL: [PlannerKind; 5] = [Self::Dqn, Self::Greedy, Self::Ga, Self::Sa, Self::Random];
}

impl fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dqn => "dqn",
            Self::Greedy => "greedy",
            Self::Ga => "ga",
            Self::Sa => "sa",
            Self::Random => "random",
        })
    }
}

impl FromStr for PlannerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown policy `{s}` (expected dqn|greedy|ga|sa|random)")))
    }
}

pub struct GreedyPlanner;

impl Planner for GreedyPlanner {
    fn name(&self) -> String {
        "greedy".into()
    }

    fn rollout(&self, ctx: &EvalContext<'_>, start: HoleIdx, budget: f64, _seed: u64) -> Result<Vec<StepRecord>> {
        execute_plan(&greedy_plan(ctx.ds, ctx.pt), &ctx.plan_context(budget, start))
    }
}

pub struct RandomPlanner;

impl Planner for RandomPlanner {
    fn name(&self) -> String {
        "random".into()
    }

    fn rollout(&self, ctx: &EvalContext<'_>, start: HoleIdx, budget: f64, seed: u64) -> Result<Vec<StepRecord>> {
        random_policy(ctx.ds, start, budget, &ctx.rewards, seed)
    }
}

/// Optimizes a plan for each trial's start and budget, then executes it.
pub struct GaPlanner(pub GaConfig);

impl Planner for GaPlanner {
    fn name(&self) -> String {
        "ga".into()
    }

    fn rollout(&self, ctx: &EvalContext<'_>, start: HoleIdx, budget: f64, seed: u64) -> Result<Vec<StepRecord>> {
        let pc = ctx.plan_context(budget, start);
        let best = ga_optimize(&pc, &GaConfig { seed, ..self.0.clone() })?;
        execute_plan(&best.plan, &pc)
    }
}

pub struct SaPlanner(pub SaConfig);

impl Planner for SaPlanner {
    fn name(&self) -> String {
        "sa".into()
    }

    fn rollout(&self, ctx: &EvalContext<'_>, start: HoleIdx, budget: f64, seed: u64) -> Result<Vec<StepRecord>> {
        let pc = ctx.plan_context(budget, start);
        let best = sa_optimize(&pc, &SaConfig { seed, ..self.0.clone() })?;
        execute_plan(&best.plan, &pc)
    }
}

pub struct DqnPlanner {
    pub label: String,
    pub policy: Policy,
}

impl DqnPlanner {
    pub fn new(policy: Policy) -> Self {
        Self {
            label: "dqn".into(),
            policy,
        }
    }
}

impl Planner for DqnPlanner {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn rollout(&self, ctx: &EvalContext<'_>, start: HoleIdx, budget: f64, _seed: u64) -> Result<Vec<StepRecord>> {
        Ok(run_policy(&self.policy, ctx.ds, ctx.pt, start, budget)?.into_trajectory())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialConfig {
    pub budgets: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    /// Rollout threads; results do not depend on it.
    pub workers: usize,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            budgets: vec![120.0, 240.0, 360.0, 480.0],
            trials: 50,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("at least one trial is required".into()));
        }
        if self.budgets.is_empty() || self.budgets.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::Config("budgets must be a non-empty list of minutes >= 0".into()));
        }
        Ok(())
    }
}

/// Start hole of every trial; shared by all planners and budgets.
pub fn trial_starts(ds: &Dataset, trials: usize, seed: u64) -> Vec<HoleIdx> {
    let mut r = rng::seeded(seed, &[START_STREAM]);
    (0..trials)
        .map(|_| HoleIdx(r.random_range(0..ds.n_holes() as u32)))
        .collect()
}

/// Planner seed for one (trial, budget) cell.
pub fn trial_seed(seed: u64, trial: usize, budget_index: usize) -> u64 {
    rng::derive_seed(seed, &[PLANNER_STREAM, trial as u64, budget_index as u64])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub elapsed: f64,
    /// Low-CTF share of all visits made up to `elapsed`, pooled over trials.
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub budget: f64,
    /// #lCTF of each trial, in trial order.
    pub lctf: Vec<usize>,
    pub mean_lctf: f64,
    pub std_lctf: f64,
    pub visited: Vec<usize>,
    pub mean_visited: f64,
    /// Pooled low-CTF share of all visits.
    pub precision: f64,
    pub mean_return: f64,
    pub mean_objective: f64,
    pub curve: Vec<CurvePoint>,
    #[serde(skip)]
    pub trajectories: Vec<Vec<StepRecord>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub policy: String,
    pub classifier: String,
    pub trials: usize,
    pub seed: u64,
    pub starts: Vec<String>,
    pub budgets: Vec<BudgetReport>,
    /// Planning and learning time spent in rollouts.
    pub wall_clock_secs: f64,
}

impl TrialReport {
    pub fn at_budget(&self, budget: f64) -> Option<&BudgetReport> {
        self.budgets.iter().find(|b| b.budget == budget)
    }

    fn largest(&self) -> Option<&BudgetReport> {
        self.budgets.iter().max_by(|a, b| a.budget.total_cmp(&b.budget))
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Pooled cumulative low-CTF fraction at every distinct elapsed time.
pub fn precision_curve(trajectories: &[Vec<StepRecord>]) -> Vec<CurvePoint> {
    let mut events: Vec<(f64, bool)> = Vec::new();
    for t in trajectories {
        let mut elapsed = 0.0;
        for s in t {
            elapsed += s.cost;
            events.push((elapsed, s.is_low));
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<CurvePoint> = Vec::new();
    let (mut low, mut all) = (0usize, 0usize);
    for (i, &(e, is_low)) in events.iter().enumerate() {
        low += usize::from(is_low);
        all += 1;
        if events.get(i + 1).is_none_or(|n| n.0 != e) {
            out.push(CurvePoint {
                elapsed: e,
                fraction: low as f64 / all as f64,
            });
        }
    }
    out
}

fn summarize(
    budget: f64,
    trajectories: Vec<Vec<StepRecord>>,
    penalty: &PenaltyCurve,
) -> Result<BudgetReport> {
    let lctf: Vec<usize> = trajectories.iter().map(|t| lctf_count(t)).collect();
    let visited: Vec<usize> = trajectories.iter().map(Vec::len).collect();
    let as_f = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let returns: Vec<f64> = trajectories.iter().map(|t| t.iter().map(|s| s.reward).sum()).collect();
    let objectives = trajectories
        .iter()
        .map(|t| objective_value(t, penalty))
        .collect::<Result<Vec<_>>>()?;
    let total_visits: usize = visited.iter().sum();
    Ok(BudgetReport {
        budget,
        mean_lctf: mean(&as_f(&lctf)),
        std_lctf: sample_std(&as_f(&lctf)),
        mean_visited: mean(&as_f(&visited)),
        precision: if total_visits == 0 {
            0.0
        } else {
            lctf.iter().sum::<usize>() as f64 / total_visits as f64
        },
        mean_return: mean(&returns),
        mean_objective: mean(&objectives),
        curve: precision_curve(&trajectories),
        lctf,
        visited,
        trajectories,
    })
}

/// Runs `cfg.trials` rollouts per budget from paired start holes.
pub fn run_trials(planner: &dyn Planner, ctx: &EvalContext<'_>, cfg: &TrialConfig) -> Result<TrialReport> {
    cfg.validate()?;
    if ctx.ds.is_empty() {
        return Err(Error::Config("evaluation dataset has no holes".into()));
    }
    let starts = trial_starts(ctx.ds, cfg.trials, cfg.seed);
    let jobs: Vec<(usize, usize)> = (0..cfg.budgets.len())
        .flat_map(|b| (0..cfg.trials).map(move |t| (b, t)))
        .collect();
    let run = |&(b, t): &(usize, usize)| {
        planner.rollout(ctx, starts[t], cfg.budgets[b], trial_seed(cfg.seed, t, b))
    };

    let clock = Instant::now();
    let workers = cfg.workers.clamp(1, jobs.len());
    let results: Vec<Result<Vec<StepRecord>>> = if workers == 1 {
        jobs.iter().map(run).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<StepRecord>>>> = (0..jobs.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let jobs = &jobs;
                    let run = &run;
                    s.spawn(move || {
                        (w..jobs.len())
                            .step_by(workers)
                            .map(|j| (j, run(&jobs[j])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (j, r) in h.join().expect("rollout worker panicked") {
                    slots[j] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every job ran")).collect()
    };
    let wall_clock_secs = clock.elapsed().as_secs_f64();

    let mut by_budget: Vec<Vec<Vec<StepRecord>>> = vec![Vec::with_capacity(cfg.trials); cfg.budgets.len()];
    for (&(b, _), r) in jobs.iter().zip(results) {
        by_budget[b].push(r?);
    }
    let budgets = cfg
        .budgets
        .iter()
        .zip(by_budget)
        .map(|(&budget, trajs)| summarize(budget, trajs, &ctx.penalty))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialReport {
        policy: planner.name(),
        classifier: ctx.classifier.clone(),
        trials: cfg.trials,
        seed: cfg.seed,
        starts: starts.iter().map(|&h| ctx.ds.hole(h).id.clone()).collect(),
        budgets,
        wall_clock_secs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reports: Vec<TrialReport>,
}

/// One report per planner with shared trial seeds, best first by mean #lCTF
/// at the largest budget (ties keep input order).
pub fn compare(planners: &[&dyn Planner], ctx: &EvalContext<'_>, cfg: &TrialConfig) -> Result<Comparison> {
    if planners.is_empty() {
        return Err(Error::Config("nothing to compare".into()));
    }
    let mut reports = planners
        .iter()
        .map(|p| run_trials(*p, ctx, cfg))
        .collect::<Result<Vec<_>>>()?;
    reports.sort_by(|a, b| {
        let key = |r: &TrialReport| r.largest().map_or(0.0, |x| x.mean_lctf);
        key(b).total_cmp(&key(a))
    });
    Ok(Comparison { reports })
}

pub const REPORT_CSV_HEADER: [&str; 11] = [
    "policy",
    "classifier",
    "budget",
    "trials",
    "mean_lctf",
    "std_lctf",
    "mean_visited",
    "precision",
    "mean_return",
    "mean_objective",
    "wall_clock_s",
];

impl Comparison {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn csv<F>(header: &[&str], fill: F) -> Result<String>
    where
        F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        let run = |w: &mut csv::Writer<Vec<u8>>| -> csv::Result<()> {
            w.write_record(header)?;
            fill(w)?;
            w.flush()?;
            Ok(())
        };
        run(&mut w).map_err(|e| Error::Config(format!("csv: {e}")))?;
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// One row per policy and budget.
    pub fn report_csv(&self) -> Result<String> {
        Self::csv(&REPORT_CSV_HEADER, |w| {
            for r in &self.reports {
                for b in &r.budgets {
                    w.write_record([
                        r.policy.clone(),
                        r.classifier.clone(),
                        b.budget.to_string(),
                        r.trials.to_string(),
                        b.mean_lctf.to_string(),
                        b.std_lctf.to_string(),
                        b.mean_visited.to_string(),
                        b.precision.to_string(),
                        b.mean_return.to_string(),
                        b.mean_objective.to_string(),
                        r.wall_clock_secs.to_string(),
                    ])?;
                }
            }
            Ok(())
        })
    }

    pub fn curve_csv(&self) -> Result<String> {
        Self::csv(&["policy", "budget", "elapsed", "fraction"], |w| {
            for r in &self.reports {
                for b in &r.budgets {
                    for p in &b.curve {
                        w.write_record([
                            r.policy.clone(),
                            b.budget.to_string(),
                            p.elapsed.to_string(),
                            p.fraction.to_string(),
                        ])?;
                    }
                }
            }
            Ok(())
        })
    }

    pub fn visits_csv(&self, ds: &Dataset) -> Result<String> {
        Self::csv(&["policy", "budget", "patch_a", "patch_b", "weight"], |w| {
            for r in &self.reports {
                for b in &r.budgets {
                    for e in export_visit_graph(ds, &b.trajectories).edges {
                        w.write_record([
                            r.policy.clone(),
                            b.budget.to_string(),
                            ds.patch(e.a).id.clone(),
                            ds.patch(e.b).id.clone(),
                            e.weight.to_string(),
                        ])?;
                    }
                }
            }
            Ok(())
        })
    }

    /// Writes `report.json`, `report.csv`, `curve.csv`, `visits.csv`, and
    /// `visit_nodes.csv` into `dir`.
    pub fn write_files(&self, ds: &Dataset, threshold: f64, dir: impl AsRef<Path>) -> Result<Vec<String>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let nodes = Self::csv(&["patch", "low_count"], |w| {
            for n in patch_quality(ds, threshold) {
                w.write_record([ds.patch(n.0).id.clone(), n.1.to_string()])?;
            }
            Ok(())
        })?;
        let files = [
            ("report.json", self.to_json()?),
            ("report.csv", self.report_csv()?),
            ("curve.csv", self.curve_csv()?),
            ("visits.csv", self.visits_csv(ds)?),
            ("visit_nodes.csv", nodes),
        ];
        let mut written = Vec::new();
        for (name, body) in files {
            fs::write(dir.join(name), body)?;
            written.push(name.to_string());
        }
        Ok(written)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitEdge {
    pub a: PatchIdx,
    pub b: PatchIdx,
    pub weight: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitGraph {
    /// Undirected, `a < b`, sorted.
    pub edges: Vec<VisitEdge>,
    /// Ground-truth low-CTF count per patch, for node sizing.
    pub nodes: Vec<(PatchIdx, usize)>,
}

impl VisitGraph {
    pub fn weight(&self, x: PatchIdx, y: PatchIdx) -> u64 {
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        self.edges
            .iter()
            .find(|e| e.a == a && e.b == b)
            .map_or(0, |e| e.weight)
    }
}

fn patch_quality(ds: &Dataset, threshold: f64) -> Vec<(PatchIdx, usize)> {
    (0..ds.patches().len() as u32)
        .map(PatchIdx)
        .map(|p| {
            let n = ds
                .patch(p)
                .holes
                .iter()
                .filter(|&&h| ds.hole(h).ctf.get() <= threshold)
                .count();
            (p, n)
        })
        .collect()
}

/// Counts consecutive visits that switch between two patches, ignoring
/// direction.
pub fn export_visit_graph(ds: &Dataset, trajectories: &[Vec<StepRecord>]) -> VisitGraph {
    let mut w: BTreeMap<(PatchIdx, PatchIdx), u64> = BTreeMap::new();
    for t in trajectories {
        for pair in t.windows(2) {
            let pa = ds.hole(pair[0].hole).patch;
            let pb = ds.hole(pair[1].hole).patch;
            if pa != pb {
                *w.entry((pa.min(pb), pa.max(pb))).or_default() += 1;
            }
        }
    }
    VisitGraph {
        edges: w
            .into_iter()
            .map(|((a, b), weight)| VisitEdge { a, b, weight })
            .collect(),
        nodes: patch_quality(ds, RewardTable::default().ctf_threshold),
    }
}
