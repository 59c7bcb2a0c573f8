use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use spkv::gating::GateConfig;
use spkv::model::{AttentionKind, ModelConfig};
use spkv::tasks::PalindromeSpec;
use spkv::training::TrainConfig;

use crate::CliError;

/// Contents of a `--config` file. Every section is optional and falls back to
/// the toy defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "GateConfig::toy")]
    pub gate: GateConfig,
    #[serde(default)]
    pub task: PalindromeSpec,
}

fn default_model() -> ModelConfig {
    ModelConfig::toy(AttentionKind::Global)
}

impl RunFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))
            .map_err(CliError::Usage)?;
        let file: RunFile = toml::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))
            .map_err(CliError::Usage)?;
        file.validate().map_err(|e| CliError::Usage(e.context(format!("invalid config {}", path.display()))))?;
        Ok(file)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.gate.validate()?;
        self.task.validate()?;
        if self.task.seq_len() - 1 > self.model.max_seq_len {
            anyhow::bail!(
                "task sequences need {} positions but model.max_seq_len is {}",
                self.task.seq_len() - 1,
                self.model.max_seq_len
            );
        }
        if self.task.vocab_size > self.model.vocab_size {
            anyhow::bail!("task vocabulary {} exceeds model vocabulary {}", self.task.vocab_size, self.model.vocab_size);
        }
        Ok(())
    }
}

/// Written beside every run's outputs as `run.toml`.
#[derive(Debug, Serialize)]
pub struct Snapshot<'a, A: Serialize> {
    pub command: &'a str,
    pub args: &'a A,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<&'a RunFile>,
}

/// Round-trips through JSON so that f32 fields print in their shortest form
/// and unset options disappear.
pub fn write_snapshot<A: Serialize>(dir: &Path, command: &str, args: &A, config: Option<&RunFile>) -> anyhow::Result<()> {
    let mut value: serde_json::Value = serde_json::from_str(&serde_json::to_string(&Snapshot { command, args, config })?)?;
    drop_nulls(&mut value);
    let text = toml::to_string(&value)?;
    std::fs::write(dir.join("run.toml"), text).with_context(|| format!("cannot write snapshot in {}", dir.display()))
}

fn drop_nulls(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.retain(|_, x| !x.is_null());
            map.values_mut().for_each(drop_nulls);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(drop_nulls),
        _ => {}
    }
}
