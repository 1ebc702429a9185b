//! Experiment configuration read from TOML.
//!
//! Angles are given in degrees here and converted to radians when the
//! scenario is built.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use jcas_core::airlink::{ScenarioConfig, Sector};
use jcas_train::mimo::MimoScenario;
use jcas_train::system::{AngleLoss, Modulation};
use jcas_train::trainer::TrainPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModulationMode {
    Qam,
    Psk,
    Apsk,
    Trained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub modulation: ModulationMode,
    /// Inner ring radius, required for `apsk`.
    pub apsk_inner_radius: Option<f64>,
    #[serde(default = "default_angle_loss")]
    pub angle_loss: AngleLoss,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub scenario: ScenarioSection,
    pub plan: PlanSection,
    /// Present for a multi-user run.
    pub mimo: Option<MimoSection>,
}

fn default_angle_loss() -> AngleLoss {
    AngleLoss::CrbNormalized
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub antennas: usize,
    pub order: usize,
    pub comm_area_deg: [f64; 2],
    pub sensing_area_deg: [f64; 2],
    pub comm_gain_var: f64,
    pub sensing_gain_var: f64,
    pub snr_c_db: [f64; 2],
    pub snr_s_db: [f64; 2],
    pub max_window: usize,
    pub target_prior: f64,
    pub false_alarm: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let d = ScenarioConfig::default();
        ScenarioSection {
            antennas: d.antennas,
            order: d.order,
            comm_area_deg: [d.comm_area.min.to_degrees(), d.comm_area.max.to_degrees()],
            sensing_area_deg: [d.sensing_area.min.to_degrees(), d.sensing_area.max.to_degrees()],
            comm_gain_var: d.comm_gain_var,
            sensing_gain_var: d.sensing_gain_var,
            snr_c_db: [d.snr_c_db.0, d.snr_c_db.1],
            snr_s_db: [d.snr_s_db.0, d.snr_s_db.1],
            max_window: d.max_window,
            target_prior: d.target_prior,
            false_alarm: d.false_alarm,
        }
    }
}

impl ScenarioSection {
    pub fn build(&self) -> ScenarioConfig {
        let sector = |a: [f64; 2]| Sector::from_degrees(a[0], a[1]);
        ScenarioConfig {
            antennas: self.antennas,
            order: self.order,
            comm_area: sector(self.comm_area_deg),
            sensing_area: sector(self.sensing_area_deg),
            comm_gain_var: self.comm_gain_var,
            sensing_gain_var: self.sensing_gain_var,
            snr_c_db: (self.snr_c_db[0], self.snr_c_db[1]),
            snr_s_db: (self.snr_s_db[0], self.snr_s_db[1]),
            max_window: self.max_window,
            target_prior: self.target_prior,
            false_alarm: self.false_alarm,
        }
    }
}

/// Budgets start from the preset; any field given here replaces it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub sensing_weight: f64,
    #[serde(default)]
    pub preset: Preset,
    /// Divides the training budgets of the preset.
    pub divisor: Option<u64>,
    pub pretrain_symbols: Option<u64>,
    pub finetune_symbols: Option<u64>,
    pub limit_windows: Option<usize>,
    pub batch_symbols: Option<usize>,
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MimoSection {
    pub ue_angles_deg: Vec<f64>,
    /// One range per UE; defaults to the scenario range for every UE.
    pub ue_snr_c_db: Option<Vec<[f64; 2]>>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_mimo_order")]
    pub order: usize,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_mimo_order() -> usize {
    4
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub sensing_weight: Option<f64>,
    pub preset: Option<Preset>,
    pub divisor: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        match serde_path_to_error::deserialize::<_, ExperimentConfig>(de) {
            Ok(cfg) => Ok(cfg),
            Err(e) => {
                let path = e.path().to_string();
                let inner = e.into_inner();
                let msg = inner.message().trim_end().to_string();
                if path == "." || path.is_empty() {
                    bail!("invalid config: {msg}");
                }
                bail!("invalid config at `{path}`: {msg}");
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(s) = ov.seed {
            self.seed = s;
        }
        if let Some(w) = ov.sensing_weight {
            self.plan.sensing_weight = w;
        }
        if let Some(p) = ov.preset {
            self.plan.preset = p;
        }
        if let Some(d) = ov.divisor {
            self.plan.divisor = Some(d);
        }
        if let Some(o) = &ov.output_dir {
            self.output_dir = Some(o.clone());
        }
    }

    /// Checks fields that depend on each other, naming the offending one.
    pub fn validate(&self) -> Result<()> {
        match (self.modulation, self.apsk_inner_radius) {
            (ModulationMode::Apsk, None) => bail!("invalid config at `apsk_inner_radius`: required when modulation = \"apsk\""),
            (ModulationMode::Apsk, Some(r)) if !(r > 0.0 && r < 1.0) => {
                bail!("invalid config at `apsk_inner_radius`: must lie in (0, 1), got {r}")
            }
            _ => {}
        }
        if let Some(m) = &self.mimo {
            if m.ue_angles_deg.len() < 2 {
                bail!("invalid config at `mimo.ue_angles_deg`: need at least two UEs");
            }
            if let Some(r) = &m.ue_snr_c_db {
                if r.len() != m.ue_angles_deg.len() {
                    bail!("invalid config at `mimo.ue_snr_c_db`: one range per UE expected, got {}", r.len());
                }
            }
        }
        self.scenario.build().validate().context("invalid config at `scenario`")?;
        self.plan().validate().context("invalid config at `plan`")?;
        if let Some(s) = self.mimo_scenario() {
            s.validate().context("invalid config at `mimo`")?;
        }
        Ok(())
    }

    pub fn plan(&self) -> TrainPlan {
        let p = &self.plan;
        let base = match p.preset {
            Preset::Desk => TrainPlan::desk(p.sensing_weight, self.seed),
            Preset::Full => TrainPlan::full(p.sensing_weight, self.seed),
        };
        let base = match p.divisor {
            Some(d) => base.scaled(d),
            None => base,
        };
        TrainPlan {
            pretrain_symbols: p.pretrain_symbols.unwrap_or(base.pretrain_symbols),
            finetune_symbols: p.finetune_symbols.unwrap_or(base.finetune_symbols),
            limit_windows: p.limit_windows.unwrap_or(base.limit_windows),
            batch_symbols: p.batch_symbols.unwrap_or(base.batch_symbols),
            learning_rate: p.learning_rate.unwrap_or(base.learning_rate),
            ..base
        }
    }

    pub fn modulation(&self) -> Modulation {
        match self.modulation {
            ModulationMode::Qam => Modulation::Qam,
            ModulationMode::Psk => Modulation::Psk,
            ModulationMode::Apsk => Modulation::Apsk {
                inner_radius: self.apsk_inner_radius.unwrap_or(0.5),
            },
            ModulationMode::Trained => Modulation::Trained,
        }
    }

    pub fn mimo_scenario(&self) -> Option<MimoScenario> {
        let m = self.mimo.as_ref()?;
        let base = self.scenario.build();
        let ranges = match &m.ue_snr_c_db {
            Some(r) => r.iter().map(|r| (r[0], r[1])).collect(),
            None => vec![base.snr_c_db; m.ue_angles_deg.len()],
        };
        Some(MimoScenario {
            ue_angles: m.ue_angles_deg.iter().map(|d| d.to_radians()).collect(),
            ue_snr_c_db: ranges,
            order: m.order,
            base,
        })
    }

    /// SHA-256 over the resolved configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
