use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{ProbeConfig, MAX_SWEEP_RATIO};
use crate::graph::{SplitFractions, SynthConfig};
use crate::model::{AbmilDims, ModelDims};
use crate::train::TrainConfig;

/// Name of the resolved config written next to every command's outputs.
pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    #[default]
    Srmil,
    Abmil,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Srmil => "srmil",
            Arch::Abmil => "abmil",
        }
    }
}

/// Widths of the attention-MIL baseline; input width and classes come from `[model]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbmilSection {
    pub hidden: usize,
    pub attention_dim: usize,
    /// Trained checkpoint used by `probe`; trained on the fly when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for AbmilSection {
    fn default() -> Self {
        Self {
            hidden: 128,
            attention_dim: 64,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { seeds: (0..5).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            ratios: vec![0.0, 0.3, 0.5, 0.7, 0.9],
            seeds: (0..5).collect(),
        }
    }
}

/// Everything a command needs. Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run seed; also the training seed.
    pub seed: u64,
    pub arch: Arch,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Dataset manifest written by `synth`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub synth: SynthConfig,
    pub splits: SplitFractions,
    pub model: ModelDims,
    pub abmil: AbmilSection,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub ablate: AblateSection,
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let top_seed = table.get("seed").and_then(toml::Value::as_integer).unwrap_or(0);
        let train_seed = table
            .get("train")
            .and_then(toml::Value::as_table)
            .and_then(|t| t.get("seed"))
            .and_then(toml::Value::as_integer);
        if train_seed.is_some_and(|s| s != top_seed) {
            return Err(Error::Config(
                "train.seed differs from the top-level seed; set the seed once at top level".into(),
            ));
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if i64::try_from(self.seed).is_err() {
            return Err(Error::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        self.synth.validate()?;
        self.splits.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.abmil.hidden == 0 || self.abmil.attention_dim == 0 {
            return Err(Error::Config("abmil widths must be positive".into()));
        }
        if self.probe.k == 0 {
            return Err(Error::Config("probe.k must be positive".into()));
        }
        if self.ablate.seeds.is_empty() || self.sweep.seeds.is_empty() {
            return Err(Error::Config("ablate.seeds and sweep.seeds must not be empty".into()));
        }
        if let Some(r) = self.sweep.ratios.iter().find(|r| !(0.0..=MAX_SWEEP_RATIO).contains(*r)) {
            return Err(Error::Config(format!("sweep ratio {r} outside [0, {MAX_SWEEP_RATIO}]")));
        }
        Ok(())
    }

    pub fn abmil_dims(&self) -> AbmilDims {
        AbmilDims {
            input_dim: self.model.input_dim,
            hidden: self.abmil.hidden,
            attention_dim: self.abmil.attention_dim,
            classes: self.model.classes,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
