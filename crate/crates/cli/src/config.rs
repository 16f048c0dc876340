//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use deconvparse::network::{AblationMode, NetworkConfig};

use crate::{CliError, Command};

/// Keys understood on top of the network keys.
pub const RUN_KEYS: &[&str] = &[
    "train_samples",
    "test_samples",
    "data_seed",
    "dataset",
    "dataset_dir",
    "model",
    "image",
    "ablation_mode",
    "ablation_seeds",
    "seed_runs",
    "study_variants",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train_samples: usize,
    pub test_samples: usize,
    pub data_seed: u64,
    /// Name written into report rows.
    pub dataset: String,
    /// Dataset root holding `train/` and `test/`; `<out>/dataset` when unset.
    pub dataset_dir: Option<PathBuf>,
    /// Model file; `<out>/model.dpm` when unset.
    pub model: Option<PathBuf>,
    /// Input image (PPM or DPTN) for `predict` and `viz-heatmap`.
    pub image: Option<PathBuf>,
    pub ablation_mode: AblationMode,
    pub ablation_seeds: usize,
    pub seed_runs: usize,
    pub study_variants: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            train_samples: 200,
            test_samples: 50,
            data_seed: 0,
            dataset: "synthetic".into(),
            dataset_dir: None,
            model: None,
            image: None,
            ablation_mode: AblationMode::Remove,
            ablation_seeds: 5,
            seed_runs: 10,
            study_variants: vec!["Deconv-5".into(), "CNN-2".into()],
        }
    }
}

fn parse<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("malformed value {v:?}"))
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "train_samples" => self.train_samples = parse(v)?,
            "test_samples" => self.test_samples = parse(v)?,
            "data_seed" => self.data_seed = parse(v)?,
            "dataset" => self.dataset = v.to_string(),
            "dataset_dir" => self.dataset_dir = Some(v.into()),
            "model" => self.model = Some(v.into()),
            "image" => self.image = Some(v.into()),
            "ablation_mode" => {
                self.ablation_mode = match v {
                    "remove" => AblationMode::Remove,
                    "replace" => AblationMode::Replace,
                    _ => return Err(format!("malformed value {v:?} (remove|replace)")),
                }
            }
            "ablation_seeds" => self.ablation_seeds = parse(v)?,
            "seed_runs" => self.seed_runs = parse(v)?,
            "study_variants" => {
                self.study_variants = v.split(',').map(|s| s.trim().to_string()).collect();
            }
            _ => self.network.set(key, v).map_err(|e| e.to_string())?,
        }
        Ok(())
    }

    /// Errors if `command` needs a key the config does not provide.
    pub fn require(&self, command: Command) -> Result<(), CliError> {
        if matches!(command, Command::Predict | Command::VizHeatmap) && self.image.is_none() {
            return Err(CliError::MissingKey {
                key: "image",
                command: command.name(),
            });
        }
        Ok(())
    }
}

/// Parses `key=value` lines; `#` starts a comment. Later lines may not repeat a key.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    let mut seen = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |message: String| CliError::Config { line, message };
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| err(format!("expected key=value, got {body:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if !RUN_KEYS.contains(&k) && !NetworkConfig::KEYS.contains(&k) {
            return Err(err(format!("unknown key {k}")));
        }
        if let Some(first) = seen.insert(k.to_string(), line) {
            return Err(err(format!("{k} already set on line {first}")));
        }
        cfg.set(k, v).map_err(|m| err(format!("{k}: {m}")))?;
    }
    cfg.network.validate().map_err(CliError::Core)?;
    Ok(cfg)
}
