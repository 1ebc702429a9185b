//! Versioned JSON checkpoints.
//!
//! Floats are written with round-trip precision, so loading a checkpoint
//! and saving it again reproduces the same bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};
use crate::mimo::MimoSystem;
use crate::system::SingleUserSystem;
use crate::trainer::TrainPlan;

pub const FORMAT: &str = "jcas-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    SingleUser(SingleUserSystem),
    MultiUser(MimoSystem),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Set while training has not finished all three phases.
    pub partial: bool,
    pub plan: TrainPlan,
    pub model: Model,
}

/// Only the header, so a mismatched version is reported before the body is parsed.
#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

impl Checkpoint {
    pub fn new(plan: TrainPlan, model: Model, partial: bool) -> Self {
        Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            partial,
            plan,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let head: Header = serde_json::from_str(text)?;
        if head.format != FORMAT {
            return Err(TrainError::Invalid(format!("not a checkpoint: format tag {:?}", head.format)));
        }
        if head.version != VERSION {
            return Err(TrainError::Version {
                found: head.version,
                expected: VERSION,
            });
        }
        Ok(serde_json::from_str(text)?)
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_json()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn single_user(&self) -> Result<&SingleUserSystem> {
        match &self.model {
            Model::SingleUser(s) => Ok(s),
            Model::MultiUser(_) => Err(TrainError::Invalid("checkpoint holds a multi-user model".into())),
        }
    }

    pub fn multi_user(&self) -> Result<&MimoSystem> {
        match &self.model {
            Model::MultiUser(s) => Ok(s),
            Model::SingleUser(_) => Err(TrainError::Invalid("checkpoint holds a single-user model".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mimo::MimoScenario;
    use crate::system::{AngleLoss, Modulation};
    use crate::trainer::train;
    use jcas_core::airlink::ScenarioConfig;

    fn trained(seed: u64) -> Checkpoint {
        let cfg = ScenarioConfig {
            antennas: 4,
            max_window: 3,
            ..Default::default()
        };
        let mut sys = SingleUserSystem::new(cfg, Modulation::Trained, AngleLoss::CrbNormalized, seed).unwrap();
        let plan = TrainPlan {
            pretrain_symbols: 300,
            finetune_symbols: 300,
            limit_windows: 300,
            batch_symbols: 100,
            ..TrainPlan::desk(0.5, seed)
        };
        train(&mut sys, &plan).unwrap();
        Checkpoint::new(plan, Model::SingleUser(sys), false)
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = trained(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json().unwrap(), fs::read_to_string(&path).unwrap());
    }

    #[test]
    fn same_seed_same_bytes() {
        use sha2::{Digest, Sha256};
        let h = |c: &Checkpoint| hex::encode(Sha256::digest(c.to_json().unwrap().as_bytes()));
        assert_eq!(h(&trained(8)), h(&trained(8)));
        assert_ne!(h(&trained(8)), h(&trained(9)));
    }

    #[test]
    fn other_versions_are_refused() {
        let text = trained(1).to_json().unwrap().replacen("\"version\":1", "\"version\":7", 1);
        match Checkpoint::from_json(&text) {
            Err(TrainError::Version { found: 7, expected: VERSION }) => {}
            other => panic!("expected a version error, got {other:?}"),
        }
        let text = trained(1).to_json().unwrap().replacen(FORMAT, "something-else", 1);
        assert!(Checkpoint::from_json(&text).is_err());
    }

    #[test]
    fn multi_user_round_trip() {
        let sys = MimoSystem::new(MimoScenario::default(), 1.0, 2).unwrap();
        let ck = Checkpoint::new(TrainPlan::desk(0.7, 2), Model::MultiUser(sys), true);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert!(back.partial && back.multi_user().is_ok() && back.single_user().is_err());
    }
}
