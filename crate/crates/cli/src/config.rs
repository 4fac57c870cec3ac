//! Experiment configuration: one TOML file with nested sections.
//!
//! The grammar is documented in `schema/config.md`. Every section has
//! defaults, so an empty file is a valid configuration.

use std::path::Path;

use anyhow::{bail, Context, Result};
use fisup_core::analysis::{FaithThresholds, DEFAULT_RESAMPLES};
use fisup_core::explain::{ClassMode, ExplainConfig, FiMethod};
use fisup_core::metrics::EvalConfig;
use fisup_core::objectives::ObjectiveConfig;
use fisup_core::replace::ReplaceKind;
use fisup_core::synthdata::{GeneratorConfig, SplitConfig};
use fisup_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub tau: f64,
    pub seed: u64,
    /// Seed of the distribution-shift split.
    pub split_seed: u64,
    pub generator: GeneratorConfig,
    pub split: SplitConfig,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            tau: 0.5,
            seed: 0,
            split_seed: 0,
            generator: GeneratorConfig::default(),
            split: SplitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
    pub eval_every: usize,
    pub hidden: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            seeds: t.seeds,
            eval_every: t.eval_every,
            hidden: t.hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSection {
    pub presets: Vec<String>,
    /// Fields of the objective replaced after the preset is loaded.
    pub overrides: serde_json::Map<String, serde_json::Value>,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self { presets: vec!["baseline".into()], overrides: Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub explainer: ExplainConfig,
    pub replace: ReplaceKind,
    pub explanations: bool,
    /// When nonempty, each run picks its explainer from these by
    /// faithfulness on Dev.
    pub select_from: Vec<ExplainConfig>,
    /// Dev instances used for that choice.
    pub select_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            explainer: e.explainer,
            replace: e.replace,
            explanations: e.explanations,
            select_from: Vec::new(),
            select_size: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub resamples: usize,
    pub seed: u64,
    pub thresholds: FaithThresholds,
    /// Resamples of the metric/OOD cross-validation.
    pub cv_resamples: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self { resamples: DEFAULT_RESAMPLES, seed: 0, thresholds: FaithThresholds::default(), cv_resamples: DEFAULT_RESAMPLES }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub taus: Vec<f64>,
    pub train_sizes: Vec<usize>,
    pub replace: Vec<ReplaceKind>,
    /// Candidates for the FI-method sweeps.
    pub explainers: Vec<ExplainConfig>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            taus: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.98],
            train_sizes: vec![1000, 2000, 4000, 8000],
            replace: vec![
                ReplaceKind::AllZeros,
                ReplaceKind::AllNegOnes,
                ReplaceKind::Gaussian,
                ReplaceKind::Marginal,
                ReplaceKind::Shuffle,
            ],
            explainers: vec![
                ExplainConfig::new(FiMethod::VanillaGrad, 1, ClassMode::Pred),
                ExplainConfig::new(FiMethod::ExpectedGrad, 10, ClassMode::Pred),
                ExplainConfig::new(FiMethod::Attention, 1, ClassMode::Pred),
                ExplainConfig::new(FiMethod::Loo, 9, ClassMode::Pred),
                ExplainConfig::new(FiMethod::Koi, 9, ClassMode::Pred),
                ExplainConfig::new(FiMethod::Shap, 32, ClassMode::Pred),
                ExplainConfig::new(FiMethod::AvgEffect, 64, ClassMode::Pred),
            ],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub objective: ObjectiveSection,
    pub eval: EvalSection,
    pub analysis: AnalysisSection,
    pub sweep: SweepSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.generator.validate()?;
        if !(self.dataset.tau > 0.0 && self.dataset.tau < 1.0) {
            bail!("dataset.tau must lie in (0, 1)");
        }
        self.train_config("baseline").validate()?;
        if self.train.seeds.is_empty() {
            bail!("train.seeds is empty");
        }
        if self.objective.presets.is_empty() {
            bail!("objective.presets is empty");
        }
        for p in &self.objective.presets {
            self.objective(p)?;
        }
        self.analysis.thresholds.validate()?;
        if self.analysis.resamples == 0 || self.analysis.cv_resamples == 0 {
            bail!("analysis resamples must be at least 1");
        }
        Ok(())
    }

    /// Hash of everything except the run selection (`train.seeds` and
    /// `objective.presets`), which only decides which run directories exist.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.train.seeds.clear();
        c.objective.presets.clear();
        let canonical = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn train_config(&self, preset: &str) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            seeds: self.train.seeds.clone(),
            preset: preset.into(),
            eval_every: self.train.eval_every,
            hidden: self.train.hidden,
        }
    }

    /// The preset with `objective.overrides` applied.
    pub fn objective(&self, preset: &str) -> Result<ObjectiveConfig> {
        let base = ObjectiveConfig::preset(preset)?;
        if self.objective.overrides.is_empty() {
            return Ok(base);
        }
        let mut value = serde_json::to_value(base)?;
        let fields = value.as_object_mut().expect("objective is a struct");
        for (k, v) in &self.objective.overrides {
            if !fields.contains_key(k) {
                bail!("unknown objective override {k:?}");
            }
            fields.insert(k.clone(), v.clone());
        }
        let cfg: ObjectiveConfig = serde_json::from_value(value).context("objective overrides")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig { explainer: self.eval.explainer.clone(), replace: self.eval.replace, explanations: self.eval.explanations }
    }
}
