//! The experiment document. One JSON file describes one run end to end;
//! flags may override the seed, nothing else. Unknown fields are rejected
//! so a typo cannot silently fall back to a default.

use crate::error::{CliError, Result};
use mmkd_core::distill::{DistillConfig, Method};
use mmkd_core::network::{
    teacher_for, Modality, Network, NetworkConfig, StudentConfig, TeacherKind,
};
use mmkd_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Trains on one core in minutes.
    Desk,
    /// Reference widths: d_model 40, 4 layers, 8 heads.
    FullScale,
}

/// Either a named preset or a complete inline network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkSection {
    Preset(Preset),
    Custom(NetworkConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Complete,
    Video,
    Audio,
    Language,
}

impl Branch {
    pub fn kind(self) -> TeacherKind {
        match self {
            Branch::Complete => TeacherKind::Complete,
            Branch::Video => TeacherKind::Branch(Modality::Video),
            Branch::Audio => TeacherKind::Branch(Modality::Audio),
            Branch::Language => TeacherKind::Branch(Modality::Language),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum RoleSpec {
    Teacher {
        #[serde(default = "complete")]
        branch: Branch,
    },
    /// `config` is the ablation index 1 through 5.
    Student { config: StudentConfig },
}

fn complete() -> Branch {
    Branch::Complete
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub temp: f64,
    pub d_crd: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self { alpha: d.alpha, beta: d.beta, tau: d.tau, temp: d.temp, d_crd: d.d_crd }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub clip: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch: t.batch,
            lr: t.lr,
            patience: t.patience,
            factor: t.factor,
            clip: t.clip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { train: 0.7, val: 0.15, test: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkSection,
    pub role: RoleSpec,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub train: TrainSection,
    /// Dataset directory, relative paths resolved against the working dir.
    pub data: PathBuf,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let rc: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("run config: {e}")))?;
        rc.validate()?;
        Ok(rc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn network(&self) -> NetworkConfig {
        match &self.network {
            NetworkSection::Preset(Preset::Desk) => NetworkConfig::desk(),
            NetworkSection::Preset(Preset::FullScale) => NetworkConfig::full_scale(),
            NetworkSection::Custom(c) => c.clone(),
        }
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            method: self.method,
            alpha: self.loss.alpha,
            beta: self.loss.beta,
            tau: self.loss.tau,
            temp: self.loss.temp,
            d_crd: self.loss.d_crd,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch: self.train.batch,
            lr: self.train.lr,
            patience: self.train.patience,
            factor: self.train.factor,
            clip: self.train.clip,
            seed,
            kd: self.distill(),
            ..TrainConfig::default()
        }
    }

    /// Teacher kind whose checkpoint this run expects, if any.
    pub fn expected_teacher(&self) -> Option<TeacherKind> {
        match (self.method, self.role) {
            (Method::None, _) => None,
            (_, RoleSpec::Student { config }) => Some(teacher_for(config)),
            (_, RoleSpec::Teacher { .. }) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network().validate()?;
        self.distill().validate()?;
        self.train_config(0).validate()?;
        if let RoleSpec::Teacher { .. } = self.role {
            if self.method != Method::None {
                return Err(CliError::Config(
                    "teachers train on the task alone; method must be none".into(),
                ));
            }
        }
        let s = self.split;
        let sum = s.train + s.val + s.test;
        if !(s.train > 0.0 && s.val > 0.0 && s.test > 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(CliError::Config(format!(
                "split fractions {}/{}/{} must be positive and sum to 1",
                s.train, s.val, s.test
            )));
        }
        Ok(())
    }

    pub fn build_network(&self, seed: u64) -> Result<Network<f32>> {
        let cfg = self.network();
        Ok(match self.role {
            RoleSpec::Teacher { branch } => Network::teacher(cfg, branch.kind(), seed)?,
            RoleSpec::Student { config } => {
                Network::student(cfg, config, self.method.alignment(), seed)?
            }
        })
    }
}

/// Flag beats `MODAL_DISTILL_SEED`, which beats the document's own value.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("MODAL_DISTILL_SEED") {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map_err(|_| CliError::Config(format!("MODAL_DISTILL_SEED {v:?} is not a u64"))),
        Err(std::env::VarError::NotPresent) => Ok(fallback),
        Err(e) => Err(CliError::Config(format!("MODAL_DISTILL_SEED: {e}"))),
    }
}

/// All Table-style rows: every method crossed with every student config,
/// plus the no-KD baseline, parses to a valid run.
pub fn method_names() -> [&'static str; 7] {
    ["none", "crd_final", "crd_penultimate", "crd_postattn", "crd_attnmap", "edam_s_down", "edam_t_up"]
}
