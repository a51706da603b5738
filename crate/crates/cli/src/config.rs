//! TOML experiment configuration and command-line overrides.

use anyhow::{bail, Context, Result};
use fedseit_core::model::Mode;
use fedseit_core::server::SitConfig;
use fedseit_core::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Full experiment description as read from the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub sit: SitSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub data: DataSection,
    /// One full experiment per seed; reported as mean +/- std.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![42, 43, 44]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub clients: usize,
    pub tasks: usize,
    pub rounds: usize,
    /// One of `fedseit`, `fedseit-dls`, `fedweit`, `isolated`.
    pub mode: String,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            clients: 3,
            tasks: 5,
            rounds: 10,
            mode: "fedseit".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SitSection {
    pub enabled: bool,
    /// Foreign adapters delivered to each client per task.
    pub k: usize,
    /// Cluster centers per task summary.
    pub q: usize,
}

impl Default for SitSection {
    fn default() -> Self {
        Self {
            enabled: true,
            k: 3,
            q: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub filter_sizes: Vec<usize>,
    pub filters_per_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embed_dim: 300,
            filter_sizes: vec![3, 4, 5],
            filters_per_size: 128,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_per_round: usize,
    pub early_stop_patience: usize,
    pub dropout: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            lambda1: d.lambda1,
            lambda2: d.lambda2,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            epochs_per_round: d.epochs_per_round,
            early_stop_patience: d.early_stop_patience,
            dropout: d.dropout,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// TSV corpus path ("label<TAB>text" per line). When absent, a
    /// synthetic corpus is generated from the fields below.
    pub corpus: Option<String>,
    /// Embedding text file path; when absent, seeded uniform rows.
    pub embeddings: Option<String>,
    pub labels_per_task: usize,
    /// Synthetic corpus shape, used only when `corpus` is unset.
    pub synth_labels: usize,
    pub synth_docs_per_label: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            corpus: None,
            embeddings: None,
            labels_per_task: 4,
            synth_labels: 12,
            synth_docs_per_label: 60,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: Self = toml::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.federation;
        if f.clients == 0 || f.tasks == 0 || f.rounds == 0 {
            bail!("clients, tasks and rounds must all be at least 1");
        }
        self.mode()?;
        let model = self.model_config();
        model.validate().map_err(anyhow::Error::new)?;
        self.train_config(0).validate().map_err(anyhow::Error::new)?;
        self.sit_config().validate().map_err(anyhow::Error::new)?;
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        if self.data.labels_per_task == 0 {
            bail!("labels_per_task must be at least 1");
        }
        Ok(())
    }

    pub fn mode(&self) -> Result<Mode> {
        parse_mode(&self.federation.mode)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.model.embed_dim,
            filter_sizes: self.model.filter_sizes.clone(),
            filters_per_size: self.model.filters_per_size,
            dropout: self.training.dropout,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda1: self.training.lambda1,
            lambda2: self.training.lambda2,
            learning_rate: self.training.learning_rate,
            batch_size: self.training.batch_size,
            epochs_per_round: self.training.epochs_per_round,
            early_stop_patience: self.training.early_stop_patience,
            dropout: self.training.dropout,
            seed,
        }
    }

    pub fn sit_config(&self) -> SitConfig {
        SitConfig {
            enabled: self.sit.enabled,
            k: self.sit.k,
            q: self.sit.q,
        }
    }
}

pub fn parse_mode(s: &str) -> Result<Mode> {
    match s {
        "fedseit" => Ok(Mode::FedSeit),
        "fedseit-dls" => Ok(Mode::FedSeitDls),
        "fedweit" => Ok(Mode::FedWeit),
        "isolated" => Ok(Mode::Isolated),
        other => bail!("unknown mode '{other}' (expected fedseit, fedseit-dls, fedweit or isolated)"),
    }
}

pub fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::FedSeit => "fedseit",
        Mode::FedSeitDls => "fedseit-dls",
        Mode::FedWeit => "fedweit",
        Mode::Isolated => "isolated",
    }
}

/// `--sit off` disables selection; `--sit K` enables it with K adapters.
pub fn parse_sit_override(s: &str) -> Result<(bool, usize)> {
    if s == "off" {
        return Ok((false, 0));
    }
    let k: usize = s
        .parse()
        .with_context(|| format!("--sit expects 'off' or a positive integer, got '{s}'"))?;
    if k == 0 {
        bail!("--sit K must be at least 1 (or 'off')");
    }
    Ok((true, k))
}
