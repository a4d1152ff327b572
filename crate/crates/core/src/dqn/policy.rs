use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::atlas::RewardTable;
use crate::classifier::ClassifierModel;
use crate::elim::ElimConfig;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::qnet::Mlp;

const POLICY_FORMAT: &str = "cryoplan-policy";
const POLICY_VERSION: u32 = 1;

/// Trained network plus the configuration needed to deploy it.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub net: Mlp<f32>,
    /// Feature layout; the normalizers are those of the training set.
    pub features: FeatureConfig,
    pub elim: ElimConfig,
    pub classifier: Option<ClassifierModel>,
    pub rewards: RewardTable,
    pub train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    format: String,
    version: u32,
    features: FeatureConfig,
    elim: ElimConfig,
    classifier: Option<ClassifierModel>,
    rewards: RewardTable,
    train: TrainConfig,
    /// Base64 of the binary network container.
    network: String,
}

impl Policy {
    pub fn with_classifier(mut self, m: ClassifierModel) -> Self {
        self.classifier = Some(m);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        let file = PolicyFile {
            format: POLICY_FORMAT.into(),
            version: POLICY_VERSION,
            features: self.features.clone(),
            elim: self.elim,
            classifier: self.classifier.clone(),
            rewards: self.rewards,
            train: self.train.clone(),
            network: STANDARD.encode(self.net.to_bytes()),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: PolicyFile = serde_json::from_str(text)?;
        if f.format != POLICY_FORMAT {
            return Err(Error::ModelFormat(format!("unexpected format `{}`", f.format)));
        }
        if f.version != POLICY_VERSION {
            return Err(Error::ModelFormat(format!(
                "policy version {}, expected {POLICY_VERSION}",
                f.version
            )));
        }
        f.features.validate()?;
        let bytes = STANDARD
            .decode(f.network.as_bytes())
            .map_err(|e| Error::ModelFormat(format!("network payload: {e}")))?;
        let net = Mlp::<f32>::from_bytes(&bytes)?;
        net.check_input_dim(f.features.dim())?;
        Ok(Self {
            net,
            features: f.features,
            elim: f.elim,
            classifier: f.classifier,
            rewards: f.rewards,
            train: f.train,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy() -> Policy {
        Policy {
            net: Mlp::q_network(32, 8).unwrap(),
            features: FeatureConfig {
                k: 4,
                patch_norm: 12.0,
                square_norm: 40.0,
                grid_norm: 200.0,
            },
            elim: ElimConfig::default(),
            classifier: Some(ClassifierModel::preset(crate::classifier::Preset::R50, 1)),
            rewards: RewardTable::default(),
            train: TrainConfig::default(),
        }
    }

    #[test]
    fn json_round_trip() {
        let p = policy();
        let back = Policy::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn rejects_mismatched_features() {
        let mut p = policy();
        p.features.k = 3;
        assert!(matches!(
            Policy::from_json(&p.to_json().unwrap()),
            Err(Error::Shape { expected: 24, got: 32 })
        ));
    }
}
