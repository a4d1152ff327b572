//! Command-line front end. Every command except `serve` and `replay` writes
//! a manifest that `replay` can re-run and check byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cryoplan::baselines::{GaConfig, SaConfig};
use cryoplan::classifier::{empirical_confusion, ClassifierModel, PredictionTable};
use cryoplan::dataset::{self, generate, split, GenConfig, SplitSpec};
use cryoplan::dqn::{train_with_progress, Policy, TrainConfig};
use cryoplan::eval::{
    compare, DqnPlanner, EvalContext, GaPlanner, GreedyPlanner, Planner, PlannerKind, RandomPlanner, SaPlanner,
    TrialConfig,
};
use cryoplan_bench::{AppState, EventLog, ServiceConfig};

pub mod manifest;

use manifest::{comparable, digest, EvalSpec, RunManifest, RunSpec};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or arguments; exit code 2.
    Usage(String),
    /// Runtime or IO failure; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) | Self::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<cryoplan::Error> for CliError {
    fn from(e: cryoplan::Error) -> Self {
        match e {
            cryoplan::Error::Config(m) => Self::Usage(m),
            other => Self::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "cryoplan", version, about = "Budgeted hole-acquisition planning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic atlas.
    Gen(GenArgs),
    /// Split an atlas by square into two files.
    Split(SplitArgs),
    /// Train a DQN policy.
    Train(TrainArgs),
    /// Evaluate one policy.
    Eval(EvalArgs),
    /// Evaluate several policies on paired trials.
    Compare(EvalArgs),
    /// Run the benchmark HTTP service.
    Serve(ServeArgs),
    /// Re-run a manifest and check that its outputs are reproduced.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GenPreset {
    Y1,
    Custom,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value = "y1")]
    pub preset: GenPreset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON generator settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub holes: Option<usize>,
    #[arg(long)]
    pub squares: Option<usize>,
    #[arg(long)]
    pub grids: Option<usize>,
    #[arg(long)]
    pub low_fraction: Option<f64>,
    #[arg(long)]
    pub clustering: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Square ratio as `a:b`.
    #[arg(long, default_value = "2:1")]
    pub ratio: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// gt | r50 | r18 | m | custom(a,b)
    #[arg(long, default_value = "gt")]
    pub classifier: String,
    #[arg(long, default_value_t = 0)]
    pub classifier_seed: u64,
    /// JSON training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Episode budget in minutes.
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub elim: Option<OnOff>,
    #[arg(long)]
    pub beta_train: Option<f64>,
    #[arg(long)]
    pub beta_test: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the per-epoch metrics stream here.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Trained policy; required when `dqn` is evaluated.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Defaults to the policy's training classifier, else gt.
    #[arg(long)]
    pub classifier: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub classifier_seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "120,240,360,480")]
    pub budgets: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, value_delimiter = ',', value_parser = parse_planner)]
    pub policies: Option<Vec<PlannerKind>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn parse_planner(s: &str) -> Result<PlannerKind, String> {
    s.parse::<PlannerKind>().map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Atlas CSV; repeat for several. The file stem is the dataset id.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub agent_policy: Option<PathBuf>,
    /// Directory for session event logs.
    #[arg(long, default_value = "sessions")]
    pub store: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "50,100")]
    pub budgets: Vec<u32>,
    #[arg(long)]
    pub any_budget: bool,
    #[arg(long)]
    pub patches_only: bool,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Where to write the re-run outputs; a fresh directory by default.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(a) => execute_and_record(gen_spec(a)?).map(drop),
        Command::Split(a) => execute_and_record(split_spec(a)?).map(drop),
        Command::Train(a) => execute_and_record(train_spec(a)?).map(drop),
        Command::Eval(a) => execute_and_record(RunSpec::Eval(eval_spec(a, false)?)).map(drop),
        Command::Compare(a) => execute_and_record(RunSpec::Compare(eval_spec(a, true)?)).map(drop),
        Command::Serve(a) => serve(a),
        Command::Replay(a) => {
            let out = replay(&a.manifest, a.out_dir.as_deref())?;
            let mut stdout = std::io::stdout();
            for (path, same) in &out {
                let _ = writeln!(stdout, "{} {}", if *same { "identical" } else { "DIFFERS" }, path.display());
            }
            if out.iter().all(|(_, same)| *same) {
                Ok(())
            } else {
                Err(CliError::Runtime("replay outputs differ from the recorded run".into()))
            }
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    fs::canonicalize(p).map_err(|e| CliError::io(p, e))
}

fn absolute_out(p: &Path) -> Result<PathBuf, CliError> {
    if p.is_absolute() {
        return Ok(p.to_path_buf());
    }
    let cwd = std::env::current_dir().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(cwd.join(p))
}

pub fn gen_spec(a: GenArgs) -> Result<RunSpec, CliError> {
    let mut g = match &a.config {
        Some(p) => read_json::<GenConfig>(p)?,
        None => GenConfig::y1(a.seed),
    };
    g.seed = a.seed;
    if let Some(v) = a.holes {
        g.total_holes = Some(v);
    }
    if let Some(v) = a.squares {
        g.total_squares = Some(v);
    }
    if let Some(v) = a.grids {
        g.n_grids = v;
    }
    if let Some(v) = a.low_fraction {
        g.target_low_fraction = v;
    }
    if let Some(v) = a.clustering {
        g.clustering_strength = v;
    }
    g.validate()?;
    Ok(RunSpec::Gen {
        preset: format!("{:?}", a.preset).to_lowercase(),
        gen: g,
        out: absolute_out(&a.out)?,
    })
}

fn split_spec(a: SplitArgs) -> Result<RunSpec, CliError> {
    let (l, r) = a
        .ratio
        .split_once(':')
        .and_then(|(l, r)| Some((l.trim().parse().ok()?, r.trim().parse().ok()?)))
        .ok_or_else(|| CliError::Usage(format!("ratio must look like `2:1`, got `{}`", a.ratio)))?;
    Ok(RunSpec::Split {
        data: absolute(&a.data)?,
        ratio: (l, r),
        seed: a.seed,
        train: absolute_out(&a.train)?,
        val: absolute_out(&a.val)?,
    })
}

fn parse_classifier(s: &str, seed: u64) -> Result<ClassifierModel, CliError> {
    let m: ClassifierModel = s.parse().map_err(|e: cryoplan::Error| CliError::Usage(e.to_string()))?;
    Ok(m.with_seed(seed))
}

pub fn train_spec(a: TrainArgs) -> Result<RunSpec, CliError> {
    let mut t = match &a.config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.duration {
        t.budget = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.episodes {
        t.episodes_per_epoch = v;
    }
    if let Some(v) = a.lr {
        t.adam.lr = v;
    }
    if let Some(v) = a.elim {
        t.elim.enabled = v == OnOff::On;
    }
    if let Some(v) = a.beta_train {
        t.elim.beta_train = v;
    }
    if let Some(v) = a.beta_test {
        t.elim.beta_test = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    t.validate()?;
    Ok(RunSpec::Train {
        data: absolute(&a.data)?,
        classifier: parse_classifier(&a.classifier, a.classifier_seed)?,
        train: t,
        out: absolute_out(&a.out)?,
        metrics: a.metrics.as_deref().map(absolute_out).transpose()?,
    })
}

pub fn eval_spec(a: EvalArgs, many: bool) -> Result<EvalSpec, CliError> {
    let policies = a.policies.unwrap_or_else(|| {
        if many {
            PlannerKind::ALL.to_vec()
        } else {
            vec![PlannerKind::Dqn]
        }
    });
    if policies.is_empty() {
        return Err(CliError::Usage("no policies given".into()));
    }
    if !many && policies.len() != 1 {
        return Err(CliError::Usage("eval takes exactly one policy; use compare for several".into()));
    }
    let needs_net = policies.contains(&PlannerKind::Dqn);
    if needs_net && a.policy.is_none() {
        return Err(CliError::Usage("--policy is required to evaluate dqn".into()));
    }
    let policy = a.policy.as_deref().map(absolute).transpose()?;
    let classifier = match (&a.classifier, &policy) {
        (Some(s), _) => parse_classifier(s, a.classifier_seed)?,
        (None, Some(p)) => Policy::load(p)?
            .classifier
            .unwrap_or_else(|| ClassifierModel::preset(cryoplan::classifier::Preset::Gt, 0))
            .with_seed(a.classifier_seed),
        (None, None) => parse_classifier("gt", a.classifier_seed)?,
    };
    let trials = TrialConfig {
        budgets: a.budgets,
        trials: a.trials,
        seed: a.seed,
        workers: a.workers,
    };
    trials.validate()?;
    Ok(EvalSpec {
        data: absolute(&a.data)?,
        policy: if needs_net { policy } else { None },
        classifier,
        policies,
        trials,
        ga: GaConfig::default(),
        sa: SaConfig::default(),
        out_dir: absolute_out(&a.out_dir)?,
    })
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn create_parent(p: &Path) -> Result<(), CliError> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => fs::create_dir_all(d).map_err(|e| CliError::io(d, e)),
        _ => Ok(()),
    }
}

/// Runs `spec`, writes its manifest, and returns it.
pub fn execute_and_record(spec: RunSpec) -> Result<RunManifest, CliError> {
    let started_at_ms = now_ms();
    let inputs = spec.inputs().iter().map(|p| digest(p)).collect::<Result<Vec<_>, _>>()?;
    let artifacts = execute(&spec)?;
    let m = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        spec: spec.clone(),
        inputs,
        artifacts,
        started_at_ms,
        finished_at_ms: now_ms(),
    };
    let path = spec.manifest_path();
    create_parent(&path)?;
    m.save(&path)?;
    eprintln!("manifest: {}", path.display());
    Ok(m)
}

fn load_data(p: &Path) -> Result<cryoplan::atlas::Dataset, CliError> {
    dataset::load(p).map_err(|e| CliError::io(p, e))
}

/// Runs a resolved command and returns the files it wrote.
pub fn execute(spec: &RunSpec) -> Result<Vec<PathBuf>, CliError> {
    match spec {
        RunSpec::Gen { gen, out, .. } => {
            let ds = generate(gen)?;
            create_parent(out)?;
            dataset::save(&ds, out).map_err(|e| CliError::io(out, e))?;
            println!(
                "{} holes, {} patches, {} squares, {} grids, low fraction {:.4}",
                ds.n_holes(),
                ds.patches().len(),
                ds.squares().len(),
                ds.grids().len(),
                ds.base_rate(gen.ctf_threshold)
            );
            Ok(vec![out.clone()])
        }
        RunSpec::Split {
            data,
            ratio,
            seed,
            train,
            val,
        } => {
            let ds = load_data(data)?;
            let (a, b) = split(
                &ds,
                &SplitSpec {
                    ratio: *ratio,
                    ..Default::default()
                },
                *seed,
            )?;
            for (d, p) in [(&a, train), (&b, val)] {
                create_parent(p)?;
                dataset::save(d, p).map_err(|e| CliError::io(p, e))?;
                println!("{}: {} holes, {} squares", p.display(), d.n_holes(), d.squares().len());
            }
            Ok(vec![train.clone(), val.clone()])
        }
        RunSpec::Train {
            data,
            classifier,
            train,
            out,
            metrics,
        } => {
            let ds = load_data(data)?;
            let pt = PredictionTable::predict_all(&ds, classifier);
            let conf = empirical_confusion(&pt, &ds, classifier.ctf_threshold);
            eprintln!(
                "classifier {classifier}: recall low {:.3}, high {:.3}",
                conf.low_recall(),
                conf.high_recall()
            );
            let mut lines = Vec::new();
            let outcome = train_with_progress(&ds, &pt, train, |m| {
                let line = serde_json::to_string(m).expect("metrics serialize");
                println!("{line}");
                lines.push(line);
            })?;
            let policy = outcome.policy.with_classifier(classifier.clone());
            create_parent(out)?;
            policy.save(out).map_err(|e| CliError::io(out, e))?;
            let mut written = vec![out.clone()];
            if let Some(mp) = metrics {
                create_parent(mp)?;
                let mut body = lines.join("\n");
                body.push('\n');
                fs::write(mp, body).map_err(|e| CliError::io(mp, e))?;
                written.push(mp.clone());
            }
            Ok(written)
        }
        RunSpec::Eval(e) | RunSpec::Compare(e) => run_eval(e),
    }
}

fn run_eval(e: &EvalSpec) -> Result<Vec<PathBuf>, CliError> {
    let ds = load_data(&e.data)?;
    let pt = PredictionTable::predict_all(&ds, &e.classifier);
    let ctx = EvalContext::new(&ds, &pt, e.classifier.to_string());
    let mut planners: Vec<Box<dyn Planner>> = Vec::new();
    for k in &e.policies {
        planners.push(match k {
            PlannerKind::Dqn => {
                let p = e
                    .policy
                    .as_ref()
                    .ok_or_else(|| CliError::Usage("--policy is required to evaluate dqn".into()))?;
                Box::new(DqnPlanner::new(Policy::load(p).map_err(|err| CliError::io(p, err))?))
            }
            PlannerKind::Greedy => Box::new(GreedyPlanner),
            PlannerKind::Ga => Box::new(GaPlanner(e.ga.clone())),
            PlannerKind::Sa => Box::new(SaPlanner(e.sa.clone())),
            PlannerKind::Random => Box::new(RandomPlanner),
        });
    }
    let refs: Vec<&dyn Planner> = planners.iter().map(|b| b.as_ref()).collect();
    let cmp = compare(&refs, &ctx, &e.trials)?;
    for r in &cmp.reports {
        for b in &r.budgets {
            println!(
                "{:<8} budget {:>5}: #lCTF {:.2} ± {:.2}, precision {:.3}, {:.2}s",
                r.policy, b.budget, b.mean_lctf, b.std_lctf, b.precision, r.wall_clock_secs
            );
        }
    }
    let names = cmp.write_files(&ds, ctx.rewards.ctf_threshold, &e.out_dir)?;
    Ok(names.into_iter().map(|n| e.out_dir.join(n)).collect())
}

/// Re-runs the manifest at `path` into `out_dir` (a fresh temporary
/// directory by default) and reports, per recorded artifact, whether the new
/// output matches it. Timing fields are ignored.
pub fn replay(path: &Path, out_dir: Option<&Path>) -> Result<Vec<(PathBuf, bool)>, CliError> {
    let m = RunManifest::load(path)?;
    for input in &m.inputs {
        let now = digest(&input.path)?;
        if now.fnv1a != input.fnv1a {
            return Err(CliError::Runtime(format!("input {} changed since the recorded run", input.path.display())));
        }
    }
    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => std::env::temp_dir().join(format!("cryoplan-replay-{}-{}", std::process::id(), now_ms())),
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let fresh = execute(&m.spec.redirected(&dir))?;
    let mut out = Vec::new();
    for (old, new) in m.artifacts.iter().zip(&fresh) {
        let a = fs::read(old).map_err(|e| CliError::io(old, e))?;
        let b = fs::read(new).map_err(|e| CliError::io(new, e))?;
        out.push((old.clone(), comparable(old, &a) == comparable(new, &b)));
    }
    if m.artifacts.len() != fresh.len() {
        return Err(CliError::Runtime("replay produced a different set of files".into()));
    }
    Ok(out)
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let mut datasets = BTreeMap::new();
    for p in &a.data {
        let id = p
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CliError::Usage(format!("cannot name dataset {}", p.display())))?
            .to_string();
        datasets.insert(id, Arc::new(load_data(p)?));
    }
    let policy = a
        .agent_policy
        .as_deref()
        .map(|p| Policy::load(p).map_err(|e| CliError::io(p, e)))
        .transpose()?;
    let log = EventLog::open(&a.store).map_err(|e| CliError::io(&a.store, e))?;
    let cfg = ServiceConfig {
        budgets: a.budgets,
        any_budget: a.any_budget,
        patches_only: a.patches_only,
    };
    let state = Arc::new(AppState::new(cfg, datasets, policy, log).map_err(|e| CliError::Runtime(e.to_string()))?);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad address: {e}")))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(async move {
        let listener = cryoplan_bench::bind(addr)
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {addr}: {e}")))?;
        eprintln!("listening on http://{addr}/v1");
        cryoplan_bench::serve(listener, state, cryoplan_bench::shutdown_signal())
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))
    })
}
