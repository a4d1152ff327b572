//! Run manifests: the resolved configuration of one command plus digests of
//! its inputs and the list of files it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use cryoplan::baselines::{GaConfig, SaConfig};
use cryoplan::classifier::ClassifierModel;
use cryoplan::dataset::GenConfig;
use cryoplan::dqn::TrainConfig;
use cryoplan::eval::{PlannerKind, TrialConfig};
use cryoplan::rng::fnv1a;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Everything a command needs to run again without its flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum RunSpec {
    Gen {
        preset: String,
        gen: GenConfig,
        out: PathBuf,
    },
    Split {
        data: PathBuf,
        ratio: (u32, u32),
        seed: u64,
        train: PathBuf,
        val: PathBuf,
    },
    Train {
        data: PathBuf,
        classifier: ClassifierModel,
        train: TrainConfig,
        out: PathBuf,
        metrics: Option<PathBuf>,
    },
    Eval(EvalSpec),
    Compare(EvalSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub data: PathBuf,
    pub policy: Option<PathBuf>,
    pub classifier: ClassifierModel,
    pub policies: Vec<PlannerKind>,
    pub trials: TrialConfig,
    pub ga: GaConfig,
    pub sa: SaConfig,
    pub out_dir: PathBuf,
}

impl RunSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Gen { .. } => "gen",
            Self::Split { .. } => "split",
            Self::Train { .. } => "train",
            Self::Eval(_) => "eval",
            Self::Compare(_) => "compare",
        }
    }

    pub fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Self::Gen { .. } => Vec::new(),
            Self::Split { data, .. } | Self::Train { data, .. } => vec![data.clone()],
            Self::Eval(e) | Self::Compare(e) => std::iter::once(e.data.clone()).chain(e.policy.clone()).collect(),
        }
    }

    /// Where the manifest of this run is written.
    pub fn manifest_path(&self) -> PathBuf {
        match self {
            Self::Gen { out, .. } | Self::Train { out, .. } => sibling(out, "manifest.json"),
            Self::Split { train, .. } => sibling(train, "manifest.json"),
            Self::Eval(e) | Self::Compare(e) => e.out_dir.join("manifest.json"),
        }
    }

    /// The same run with every output moved into `dir`, keeping file names.
    pub fn redirected(&self, dir: &Path) -> Self {
        let mv = |p: &PathBuf| dir.join(p.file_name().unwrap_or_default());
        let mut s = self.clone();
        match &mut s {
            Self::Gen { out, .. } => *out = mv(out),
            Self::Split { train, val, .. } => {
                *train = mv(train);
                *val = mv(val);
            }
            Self::Train { out, metrics, .. } => {
                *out = mv(out);
                *metrics = metrics.as_ref().map(mv);
            }
            Self::Eval(e) | Self::Compare(e) => e.out_dir = dir.to_path_buf(),
        }
        s
    }
}

fn sibling(p: &Path, suffix: &str) -> PathBuf {
    let mut name = p.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    p.with_file_name(name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    /// FNV-1a of the file bytes, hex.
    pub fnv1a: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub spec: RunSpec,
    pub inputs: Vec<InputDigest>,
    pub artifacts: Vec<PathBuf>,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
}

pub fn digest(path: &Path) -> Result<InputDigest, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(InputDigest {
        path: path.to_path_buf(),
        fnv1a: format!("{:016x}", fnv1a(&bytes)),
    })
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }
}

/// File contents with run-time measurements removed, so that two runs of the
/// same manifest compare equal.
pub fn comparable(path: &Path, bytes: &[u8]) -> Vec<u8> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    match name {
        "report.json" => match serde_json::from_slice::<Value>(bytes) {
            Ok(mut v) => {
                strip_key(&mut v, "wall_clock_secs");
                serde_json::to_vec(&v).expect("value serializes")
            }
            Err(_) => bytes.to_vec(),
        },
        "report.csv" => drop_csv_column(bytes, "wall_clock_s"),
        _ => bytes.to_vec(),
    }
}

fn strip_key(v: &mut Value, key: &str) {
    match v {
        Value::Object(m) => {
            m.remove(key);
            m.values_mut().for_each(|x| strip_key(x, key));
        }
        Value::Array(a) => a.iter_mut().for_each(|x| strip_key(x, key)),
        _ => {}
    }
}

fn drop_csv_column(bytes: &[u8], column: &str) -> Vec<u8> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(bytes);
    let rows: Vec<csv::StringRecord> = match rd.records().collect() {
        Ok(r) => r,
        Err(_) => return bytes.to_vec(),
    };
    let Some(col) = rows.first().and_then(|h| h.iter().position(|c| c == column)) else {
        return bytes.to_vec();
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        let kept: Vec<&str> = r.iter().enumerate().filter(|(i, _)| *i != col).map(|(_, f)| f).collect();
        if w.write_record(&kept).is_err() {
            return bytes.to_vec();
        }
    }
    w.into_inner().unwrap_or_else(|_| bytes.to_vec())
}
