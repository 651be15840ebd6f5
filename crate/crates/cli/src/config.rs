//! The TOML run configuration shared by every subcommand.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use delayprop_core::error::{Error, Result};
use delayprop_core::eval::{LayerPool, SubgroupConfig, CHANGE_TOLERANCE};
use delayprop_core::features::{FeatureConfig, FEATURE_NAMES};
use delayprop_core::forecast::ForecastConfig;
use delayprop_core::ingest::{CleaningConfig, SyntheticConfig, TripIdConfig};
use delayprop_core::train::{SplitConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Root for every stage's outputs.
    pub workspace: Option<PathBuf>,
    /// Stop-level CSV read by `ingest`; defaults to the synthetic output.
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastSettings {
    /// Held-out days sampled for evaluation.
    pub test_days: usize,
    /// Leading test days whose classifier attention is logged.
    pub attention_days: usize,
}

impl Default for ForecastSettings {
    fn default() -> Self {
        Self {
            test_days: 30,
            attention_days: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub change_tolerance: f64,
    pub subgroups: SubgroupConfig,
    /// Also write SVG charts.
    pub plots: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            change_tolerance: CHANGE_TOLERANCE,
            subgroups: SubgroupConfig::default(),
            plots: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainSettings {
    pub percentile: f64,
    pub layer_pool: LayerPool,
    /// Leading test days used for permutation importance.
    pub importance_days: usize,
    pub repetitions: usize,
    pub features: Vec<String>,
}

impl Default for ExplainSettings {
    fn default() -> Self {
        Self {
            percentile: 95.0,
            layer_pool: LayerPool::All,
            importance_days: 5,
            repetitions: 1,
            features: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives training, day sampling and permutation shuffles.
    pub seed: u64,
    pub log_level: String,
    pub paths: Paths,
    pub synthetic: SyntheticConfig,
    pub trip_ids: TripIdConfig,
    pub cleaning: CleaningConfig,
    /// Keep only trips whose stations all lie in this set.
    pub region: Option<BTreeSet<String>>,
    pub features: FeatureConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub forecast: ForecastSettings,
    pub eval: EvalSettings,
    pub explain: ExplainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            log_level: "info".into(),
            paths: Paths::default(),
            synthetic: SyntheticConfig::default(),
            trip_ids: TripIdConfig::default(),
            cleaning: CleaningConfig::default(),
            region: None,
            features: FeatureConfig::default(),
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            forecast: ForecastSettings::default(),
            eval: EvalSettings::default(),
            explain: ExplainSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Apply the global seed and check every section.
    pub fn finalize(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.rollout.seed = self.seed;
        self.synthetic.validate()?;
        self.train.rollout.validate()?;
        self.train.body.validate()?;
        if self.forecast.test_days == 0 {
            return Err(Error::Config("forecast.test_days must be positive".into()));
        }
        if !(0.0..=100.0).contains(&self.explain.percentile) {
            return Err(Error::Config(
                "explain.percentile must lie in [0, 100]".into(),
            ));
        }
        Ok(self)
    }

    pub fn forecast_config(&self) -> ForecastConfig {
        let r = &self.train.rollout;
        ForecastConfig {
            k: r.k,
            slice_minutes: r.slice_minutes,
            depth: r.depth(&self.train.body),
            threshold: r.threshold,
        }
    }

    /// SHA-256 of the settings, paths excluded so relocated runs hash alike.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
