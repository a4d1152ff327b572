//! Deep Q-learning with experience replay, a periodically synced target
//! network, epsilon-greedy exploration, and optional action elimination.

mod policy;
mod replay;

pub use policy::Policy;
pub use replay::{Replay, Transition};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::{Dataset, HoleIdx, RewardTable};
use crate::classifier::{PredictionTable, QualityCounts};
use crate::elim::{eliminate, ElimConfig, ValidSet};
use crate::episode::EpisodeState;
use crate::error::{Error, Result};
use crate::features::{
    candidate_classes, encode_candidate, encode_history, FeatureConfig, STEP_FEATURES,
};
use crate::qnet::{Adam, AdamConfig, Mlp};
use crate::rng;

const NET_STREAM: u64 = 0xD0_17E7;
const TRAIN_STREAM: u64 = 0xD0_7A1E;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Episode budget in minutes.
    pub budget: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub adam: AdamConfig,
    /// Learning rate multiplier applied after every epoch.
    pub lr_decay: f64,
    pub gamma: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Gradient steps between target-network syncs.
    pub target_sync: u64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of all training episodes over which epsilon decays linearly.
    pub eps_decay_fraction: f64,
    /// Environment steps per gradient step.
    pub train_every: usize,
    pub k: usize,
    pub elim: ElimConfig,
    pub rewards: RewardTable,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            budget: 240.0,
            epochs: 20,
            episodes_per_epoch: 50,
            adam: AdamConfig::default(),
            lr_decay: 1.0,
            gamma: 0.9,
            replay_capacity: 20_000,
            batch_size: 64,
            target_sync: 500,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_fraction: 0.5,
            train_every: 1,
            k: 4,
            elim: ElimConfig::default(),
            rewards: RewardTable::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.budget.is_finite() && self.budget >= 0.0) {
            return bad(format!("budget must be >= 0, got {}", self.budget));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        for (name, e) in [("eps_start", self.eps_start), ("eps_end", self.eps_end)] {
            if !(0.0..=1.0).contains(&e) {
                return bad(format!("{name} must lie in [0, 1], got {e}"));
            }
        }
        if !(self.eps_decay_fraction > 0.0 && self.eps_decay_fraction <= 1.0) {
            return bad("eps_decay_fraction must lie in (0, 1]".into());
        }
        if self.replay_capacity == 0 || self.batch_size == 0 || self.target_sync == 0 || self.train_every == 0 {
            return bad("replay_capacity, batch_size, target_sync and train_every must be positive".into());
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.adam.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        self.elim.validate()?;
        self.rewards.validate()
    }

    /// Exploration rate for the `episode`-th training episode (0-based).
    pub fn epsilon(&self, episode: usize) -> f64 {
        let total = (self.epochs * self.episodes_per_epoch) as f64;
        let horizon = (self.eps_decay_fraction * total).max(1.0);
        let frac = (episode as f64 / horizon).min(1.0);
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

/// Per-epoch training summary, emitted as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_return: f64,
    pub mean_lctf: f64,
    /// Mean TD loss over the epoch's gradient steps; absent before the
    /// replay buffer first fills a batch.
    pub loss: Option<f64>,
    pub epsilon: f64,
    pub env_steps: u64,
    pub grad_steps: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub metrics: Vec<EpochMetrics>,
}

/// Candidate holes for the next move: legal actions, restricted to the valid
/// set when one is given. With `fallback`, an empty restriction falls back to
/// all legal actions.
pub fn candidate_set(st: &EpisodeState<'_>, valid: Option<&ValidSet>, fallback: bool) -> Vec<HoleIdx> {
    let legal = st.legal_actions();
    match valid {
        None => legal,
        Some(v) => {
            let kept: Vec<HoleIdx> = legal.iter().copied().filter(|&h| v.contains(h)).collect();
            if kept.is_empty() && fallback {
                legal
            } else {
                kept
            }
        }
    }
}

/// Everything needed to score the candidates of one state.
#[derive(Clone, Debug)]
pub struct Observation {
    pub history: Vec<f32>,
    pub candidates: Vec<HoleIdx>,
    /// Smallest hole of each (patch, predicted label) class, ascending.
    pub reps: Vec<HoleIdx>,
    /// One candidate block per representative.
    pub blocks: Vec<f32>,
}

impl Observation {
    pub fn new(
        st: &EpisodeState<'_>,
        pt: &PredictionTable,
        counts: &QualityCounts,
        fcfg: &FeatureConfig,
        candidates: Vec<HoleIdx>,
    ) -> Self {
        let reps = candidate_classes(st.dataset(), pt, &candidates);
        let mut blocks = Vec::with_capacity(reps.len() * STEP_FEATURES);
        for &h in &reps {
            blocks.extend_from_slice(&encode_candidate(st, h, pt, counts, fcfg));
        }
        Self {
            history: encode_history(st, pt, counts, fcfg),
            candidates,
            reps,
            blocks,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Network inputs, one row per representative.
    pub fn inputs(&self) -> Vec<f32> {
        let mut x = Vec::with_capacity(self.reps.len() * (self.history.len() + STEP_FEATURES));
        for b in self.blocks.chunks_exact(STEP_FEATURES) {
            x.extend_from_slice(&self.history);
            x.extend_from_slice(b);
        }
        x
    }

    fn block_of(&self, j: usize) -> &[f32] {
        &self.blocks[j * STEP_FEATURES..(j + 1) * STEP_FEATURES]
    }
}

/// Greedy choice: the representative with the highest Q-value, the smallest
/// hole index among ties. Returns the hole and its row in `obs`.
pub fn greedy(net: &Mlp<f32>, obs: &Observation) -> Result<(HoleIdx, usize)> {
    if obs.reps.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let q = net.forward(&obs.inputs(), obs.reps.len())?;
    let mut best = 0;
    for (j, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = j;
        }
    }
    Ok((obs.reps[best], best))
}

fn choose(
    net: &Mlp<f32>,
    st: &EpisodeState<'_>,
    obs: &Observation,
    eps: f64,
    rng: &mut ChaCha8Rng,
    pt: &PredictionTable,
    counts: &QualityCounts,
    fcfg: &FeatureConfig,
) -> Result<(HoleIdx, Vec<f32>)> {
    if obs.candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let explore = rng.random::<f64>() < eps;
    let (hole, block) = if explore {
        let h = obs.candidates[rng.random_range(0..obs.candidates.len())];
        (h, encode_candidate(st, h, pt, counts, fcfg).to_vec())
    } else {
        let (h, j) = greedy(net, obs)?;
        (h, obs.block_of(j).to_vec())
    };
    let mut sa = obs.history.clone();
    sa.extend_from_slice(&block);
    Ok((hole, sa))
}

/// Epsilon-greedy selection among `candidates`: with probability `eps` a
/// uniformly random candidate, otherwise the argmax of the network over all
/// candidates (ties to the smallest hole index).
#[allow(clippy::too_many_arguments)]
pub fn select_action(
    net: &Mlp<f32>,
    st: &EpisodeState<'_>,
    candidates: &[HoleIdx],
    eps: f64,
    rng: &mut ChaCha8Rng,
    pt: &PredictionTable,
    counts: &QualityCounts,
    fcfg: &FeatureConfig,
) -> Result<HoleIdx> {
    let obs = Observation::new(st, pt, counts, fcfg, candidates.to_vec());
    choose(net, st, &obs, eps, rng, pt, counts, fcfg).map(|(h, _)| h)
}

/// `r` for terminal transitions, otherwise `r + gamma * max_a' Q_target(s', a')`.
pub fn td_target(t: &Transition, target: &Mlp<f32>, gamma: f32) -> Result<f32> {
    let rows = t.next_rows(STEP_FEATURES);
    if t.terminal || rows == 0 {
        return Ok(t.reward);
    }
    let mut x = Vec::new();
    t.next_inputs(STEP_FEATURES, &mut x);
    let q = target.forward(&x, rows)?;
    Ok(t.reward + gamma * q.iter().copied().fold(f32::NEG_INFINITY, f32::max))
}

/// Online/target networks plus optimizer state.
#[derive(Clone, Debug)]
pub struct Learner {
    pub online: Mlp<f32>,
    target: Mlp<f32>,
    adam: Adam<f32>,
    grads: Mlp<f32>,
    version: u64,
    grad_steps: u64,
    gamma: f32,
    batch: usize,
    sync: u64,
}

impl Learner {
    pub fn new(net: Mlp<f32>, cfg: &TrainConfig) -> Self {
        Self {
            target: net.clone(),
            adam: Adam::new(&net, cfg.adam),
            grads: net.zeros_like(),
            online: net,
            version: 0,
            grad_steps: 0,
            gamma: cfg.gamma as f32,
            batch: cfg.batch_size,
            sync: cfg.target_sync,
        }
    }

    pub fn target(&self) -> &Mlp<f32> {
        &self.target
    }

    pub fn grad_steps(&self) -> u64 {
        self.grad_steps
    }

    /// One minibatch update; returns the batch's mean squared TD error.
    pub fn train_step(&mut self, replay: &mut Replay, rng: &mut ChaCha8Rng) -> Result<f32> {
        let idx = replay.sample(rng, self.batch);
        self.refresh_targets(replay, &idx)?;
        let dim = self.online.input_dim();
        let mut x = Vec::with_capacity(idx.len() * dim);
        let mut y = Vec::with_capacity(idx.len());
        for &i in &idx {
            let t = replay.get(i);
            x.extend_from_slice(&t.state_action);
            let bootstrap = if t.terminal || t.next_rows(STEP_FEATURES) == 0 {
                0.0
            } else {
                self.gamma * replay.cached(i, self.version).expect("refreshed")
            };
            y.push(t.reward + bootstrap);
        }
        let (loss, dout, cache) = self.online.mse_loss(&x, idx.len(), &y)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss after {} gradient steps",
                self.grad_steps
            )));
        }
        self.online.backward_into(&cache, &dout, &mut self.grads)?;
        self.adam.step(&mut self.online, &self.grads)?;
        self.grad_steps += 1;
        if self.grad_steps.is_multiple_of(self.sync) {
            self.target.copy_from(&self.online);
            self.version += 1;
        }
        Ok(loss)
    }

    /// Computes target maxima for sampled entries not yet evaluated under
    /// the current target network, in one batched forward pass.
    fn refresh_targets(&self, replay: &mut Replay, idx: &[usize]) -> Result<()> {
        let mut stale: Vec<usize> = idx
            .iter()
            .copied()
            .filter(|&i| {
                let t = replay.get(i);
                !t.terminal && t.next_rows(STEP_FEATURES) > 0 && replay.cached(i, self.version).is_none()
            })
            .collect();
        stale.sort_unstable();
        stale.dedup();
        if stale.is_empty() {
            return Ok(());
        }
        let mut x = Vec::new();
        let mut rows = Vec::with_capacity(stale.len());
        for &i in &stale {
            let t = replay.get(i);
            t.next_inputs(STEP_FEATURES, &mut x);
            rows.push(t.next_rows(STEP_FEATURES));
        }
        let q = self.target.forward(&x, rows.iter().sum())?;
        let mut at = 0;
        for (&i, &n) in stale.iter().zip(&rows) {
            let m = q[at..at + n].iter().copied().fold(f32::NEG_INFINITY, f32::max);
            replay.set_cached(i, self.version, m);
            at += n;
        }
        Ok(())
    }
}

pub fn train(ds: &Dataset, pt: &PredictionTable, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(ds, pt, cfg, |_| {})
}

/// Trains a policy, calling `on_epoch` after every epoch.
pub fn train_with_progress(
    ds: &Dataset,
    pt: &PredictionTable,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Config("training dataset has no holes".into()));
    }
    if pt.len() != ds.n_holes() {
        return Err(Error::Shape {
            expected: ds.n_holes(),
            got: pt.len(),
        });
    }
    let fcfg = FeatureConfig::for_dataset(ds, pt, cfg.k);
    let valid = cfg
        .elim
        .enabled
        .then(|| eliminate(ds, pt, cfg.budget, cfg.elim.beta_train));
    let net = Mlp::q_network(fcfg.dim(), rng::derive_seed(cfg.seed, &[NET_STREAM]))?;
    let mut learner = Learner::new(net, cfg);
    let mut replay = Replay::new(cfg.replay_capacity);
    let mut rng = rng::seeded(cfg.seed, &[TRAIN_STREAM]);
    let fresh_counts = QualityCounts::new(ds, pt);

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut env_steps = 0u64;
    let mut episode = 0usize;
    for epoch in 0..cfg.epochs {
        learner.adam.cfg.lr = cfg.adam.lr * cfg.lr_decay.powi(epoch as i32);
        let (mut ret_sum, mut lctf_sum) = (0.0, 0usize);
        let (mut loss_sum, mut loss_n) = (0.0f64, 0u64);
        let mut eps = cfg.epsilon(episode);
        for _ in 0..cfg.episodes_per_epoch {
            eps = cfg.epsilon(episode);
            episode += 1;
            let start = HoleIdx(rng.random_range(0..ds.n_holes() as u32));
            let mut st = EpisodeState::new(ds, start, cfg.budget, cfg.rewards)?;
            let mut counts = fresh_counts.clone();
            counts.visit(ds, pt, start);
            let mut obs = Observation::new(&st, pt, &counts, &fcfg, candidate_set(&st, valid.as_ref(), false));
            while !obs.is_terminal() {
                let (a, sa) = choose(&learner.online, &st, &obs, eps, &mut rng, pt, &counts, &fcfg)?;
                let rec = st.step(a)?;
                counts.visit(ds, pt, a);
                let next = Observation::new(&st, pt, &counts, &fcfg, candidate_set(&st, valid.as_ref(), false));
                let terminal = next.is_terminal();
                replay.push(Transition {
                    state_action: sa,
                    reward: rec.reward as f32,
                    next_history: if terminal { Vec::new() } else { next.history.clone() },
                    next_candidates: if terminal { Vec::new() } else { next.blocks.clone() },
                    terminal,
                });
                env_steps += 1;
                if replay.len() >= cfg.batch_size && env_steps.is_multiple_of(cfg.train_every as u64) {
                    loss_sum += f64::from(learner.train_step(&mut replay, &mut rng)?);
                    loss_n += 1;
                }
                obs = next;
            }
            ret_sum += st.total_return();
            lctf_sum += st.lctf_found();
        }
        let n = cfg.episodes_per_epoch.max(1) as f64;
        let m = EpochMetrics {
            epoch,
            mean_return: ret_sum / n,
            mean_lctf: lctf_sum as f64 / n,
            loss: (loss_n > 0).then(|| loss_sum / loss_n as f64),
            epsilon: eps,
            env_steps,
            grad_steps: learner.grad_steps(),
        };
        on_epoch(&m);
        metrics.push(m);
    }
    if !learner.online.is_finite() {
        return Err(Error::Diverged("non-finite network parameters".into()));
    }
    Ok(TrainOutcome {
        policy: Policy {
            net: learner.online,
            features: fcfg,
            elim: cfg.elim,
            classifier: None,
            rewards: cfg.rewards,
            train: cfg.clone(),
        },
        metrics,
    })
}

/// Greedy rollout from `start` until no candidate fits the budget.
pub fn run_policy<'a>(
    policy: &Policy,
    ds: &'a Dataset,
    pt: &PredictionTable,
    start: HoleIdx,
    budget: f64,
) -> Result<EpisodeState<'a>> {
    run_policy_capped(policy, ds, pt, start, budget, None)
}

/// As [`run_policy`], optionally stopping after `max_steps` visits.
pub fn run_policy_capped<'a>(
    policy: &Policy,
    ds: &'a Dataset,
    pt: &PredictionTable,
    start: HoleIdx,
    budget: f64,
    max_steps: Option<usize>,
) -> Result<EpisodeState<'a>> {
    let fcfg = FeatureConfig::for_dataset(ds, pt, policy.features.k);
    policy.net.check_input_dim(fcfg.dim())?;
    let valid = policy
        .elim
        .enabled
        .then(|| eliminate(ds, pt, budget, policy.elim.beta_test));
    let mut st = EpisodeState::new(ds, start, budget, policy.rewards)?;
    let mut counts = QualityCounts::new(ds, pt);
    counts.visit(ds, pt, start);
    while max_steps.is_none_or(|m| st.trajectory().len() < m) {
        let cands = candidate_set(&st, valid.as_ref(), true);
        if cands.is_empty() {
            break;
        }
        let obs = Observation::new(&st, pt, &counts, &fcfg, cands);
        let (a, _) = greedy(&policy.net, &obs)?;
        st.step(a)?;
        counts.visit(ds, pt, a);
    }
    Ok(st)
}
