use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use sddprobe::augment::AugmentParams;
use sddprobe::corpus::SpeakerFilter;
use sddprobe::detector::{DetectorConfig, TrainConfig};

use crate::UsageError;

/// Which cached features a run trains on. A non-empty `fusion` list wins over
/// `name`/`block` and names the store keys to concatenate, in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSelection {
    pub name: String,
    pub block: u32,
    pub fusion: Vec<String>,
}

impl Default for BackendSelection {
    fn default() -> Self {
        BackendSelection {
            name: "synthetic".into(),
            block: 0,
            fusion: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub blocks: Vec<u32>,
    pub m_plus: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            blocks: vec![2, 4, 6, 8, 10, 12],
            m_plus: vec![100, 200, 500, 1000, 1500],
        }
    }
}

/// Experiment file (TOML, or JSON when the extension is `.json`). Relative
/// paths are resolved against the directory holding the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest: PathBuf,
    #[serde(default)]
    pub store: Option<PathBuf>,
    pub output: PathBuf,
    /// Precomputed plan file; built from `augment` when absent.
    #[serde(default)]
    pub plan: Option<PathBuf>,
    #[serde(default)]
    pub backend: BackendSelection,
    #[serde(default)]
    pub filter: SpeakerFilter,
    #[serde(default)]
    pub augment: AugmentParams,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub sweep: SweepSection,
    /// False when the file leaves `detector.input_dim` to be read off the store.
    #[serde(skip)]
    pub input_dim_given: bool,
}

fn default_seeds() -> Vec<u64> {
    (0..20).collect()
}

/// Parses a TOML or JSON file into a JSON value, as a usage error on failure.
pub fn read_structured(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    let value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?
    } else {
        let t: toml::Value = toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        serde_json::to_value(t).context("converting TOML")?
    };
    Ok(value)
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let value = read_structured(path)?;
        let input_dim_given = value.pointer("/detector/input_dim").is_some();
        let mut cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        cfg.input_dim_given = input_dim_given;
        let base = path.parent().unwrap_or(Path::new(""));
        resolve(base, &mut cfg.manifest);
        resolve(base, &mut cfg.output);
        if let Some(p) = cfg.store.as_mut() {
            resolve(base, p);
        }
        if let Some(p) = cfg.plan.as_mut() {
            resolve(base, p);
        }
        Ok(cfg)
    }

    pub fn check_paths(&self) -> Result<()> {
        if !self.manifest.is_file() {
            return Err(UsageError(format!("manifest {} does not exist", self.manifest.display())).into());
        }
        if let Some(p) = &self.plan {
            if !p.is_file() {
                return Err(UsageError(format!("plan {} does not exist", p.display())).into());
            }
        }
        Ok(())
    }
}

/// Starter experiment written next to a synthetic corpus.
pub fn starter_toml(first_block: u32, blocks: &[u32]) -> String {
    let blocks: Vec<String> = blocks.iter().map(|b| b.to_string()).collect();
    format!(
        r#"manifest = "manifest.jsonl"
store = "store"
output = "runs/synthetic"
seeds = [0, 1, 2, 3, 4]

[backend]
name = "synthetic"
block = {first_block}

[augment]
m_plus = 20

[train]
learning_rate = 1e-4
max_epochs = 20
patience = 5

[sweep]
blocks = [{}]
m_plus = [10, 20, 50]
"#,
        blocks.join(", ")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("e.toml");
        std::fs::write(&toml_path, starter_toml(8, &[2, 8])).unwrap();
        let a = ExperimentConfig::load(&toml_path).unwrap();
        assert_eq!(a.manifest, dir.path().join("manifest.jsonl"));
        assert_eq!(a.augment.m_plus, 20);
        assert_eq!(a.sweep.blocks, vec![2, 8]);
        assert!(!a.input_dim_given);

        let json_path = dir.path().join("e.json");
        let json = serde_json::json!({
            "manifest": "manifest.jsonl", "store": "store", "output": "runs/synthetic",
            "seeds": [0, 1, 2, 3, 4], "backend": {"name": "synthetic", "block": 8},
            "augment": {"m_plus": 20}, "train": {"learning_rate": 1e-4, "max_epochs": 20, "patience": 5},
            "sweep": {"blocks": [2, 8], "m_plus": [10, 20, 50]}, "detector": {"input_dim": 32}
        });
        std::fs::write(&json_path, json.to_string()).unwrap();
        let b = ExperimentConfig::load(&json_path).unwrap();
        assert!(b.input_dim_given);
        assert_eq!(
            ExperimentConfig { input_dim_given: false, detector: a.detector.clone(), ..b },
            a
        );
    }

    #[test]
    fn unknown_field_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.toml");
        std::fs::write(&p, "manifest = \"m\"\noutput = \"o\"\nbogus = 1\n").unwrap();
        let err = ExperimentConfig::load(&p).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }
}
