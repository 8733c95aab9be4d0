use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adnn::{AdnnSpec, AdnnTrainConfig, Mechanism};
use crate::baseline::IterConfig;
use crate::dataset::DatasetSource;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_TAUS;
use crate::gan::{GanTrainConfig, PerturbationBudget};
use crate::mitigation::{DetectorConfig, RetrainConfig};

/// The system under test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectConfig {
    pub mechanism: Mechanism,
    /// Defaults to the 8-block reference model for `mechanism`.
    #[serde(default)]
    pub spec: Option<AdnnSpec>,
    /// Pre-trained weights; when absent the model is trained from scratch.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl SubjectConfig {
    pub fn spec(&self) -> AdnnSpec {
        self.spec.clone().unwrap_or_else(|| AdnnSpec::reference(self.mechanism))
    }
}

/// Generator training knobs; the budget and seed come from the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSettings {
    pub alpha: f32,
    pub beta: f32,
    pub learning_rate: f32,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub temperature: f32,
    pub validation_fraction: f32,
    /// Use only the first `train_count` training images.
    pub train_count: Option<usize>,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        let d = GanTrainConfig::new(PerturbationBudget::linf(0.03).expect("valid"));
        Self {
            alpha: d.alpha,
            beta: d.beta,
            learning_rate: d.learning_rate,
            max_epochs: d.max_epochs,
            early_stop_patience: d.early_stop_patience,
            batch_size: d.batch_size,
            temperature: d.temperature,
            validation_fraction: d.validation_fraction,
            train_count: None,
        }
    }
}

impl GeneratorSettings {
    pub fn to_config(&self, budget: PerturbationBudget, seed: u64) -> GanTrainConfig {
        GanTrainConfig {
            alpha: self.alpha,
            beta: self.beta,
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            early_stop_patience: self.early_stop_patience,
            batch_size: self.batch_size,
            temperature: self.temperature,
            validation_fraction: self.validation_fraction,
            budget,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSettings {
    pub enabled: bool,
    pub max_iterations: usize,
    pub balance_weight: f32,
    pub step_size: Option<f32>,
    pub temperature: f32,
    /// Run on the first `seed_count` seeds only; all seeds when absent.
    pub seed_count: Option<usize>,
    /// Stop once the baseline has used as much wall-clock as the generator
    /// needed for the whole seed set.
    pub equal_time: bool,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        let d = IterConfig::new(PerturbationBudget::linf(0.03).expect("valid"));
        Self {
            enabled: true,
            max_iterations: d.max_iterations,
            balance_weight: d.balance_weight,
            step_size: d.step_size,
            temperature: d.temperature,
            seed_count: None,
            equal_time: true,
        }
    }
}

impl BaselineSettings {
    pub fn to_config(&self, budget: PerturbationBudget) -> IterConfig {
        IterConfig {
            max_iterations: self.max_iterations,
            balance_weight: self.balance_weight,
            step_size: self.step_size,
            temperature: self.temperature,
            budget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    /// Leading suite entries whose latency is measured; 0 disables timing.
    pub latency_entries: usize,
    pub latency_repeats: usize,
    pub sweep_taus: Vec<f32>,
    pub distribution_bins: usize,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            latency_entries: 50,
            latency_repeats: 10,
            sweep_taus: DEFAULT_TAUS.to_vec(),
            distribution_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MitigationSettings {
    pub retrain: RetrainConfig,
    pub detector: DetectorConfig,
    /// After retraining, train a fresh generator against the retrained model
    /// and report its I-FLOPs.
    pub regenerate: bool,
}

impl Default for MitigationSettings {
    fn default() -> Self {
        Self {
            retrain: RetrainConfig::default(),
            detector: DetectorConfig::default(),
            regenerate: true,
        }
    }
}

/// Everything one experiment needs. `subject`, `dataset`, `budget` and
/// `output_dir` are required; every other section has defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub subject: SubjectConfig,
    pub dataset: DatasetSource,
    pub budget: PerturbationBudget,
    /// Relative paths are resolved against the output root.
    pub output_dir: PathBuf,
    #[serde(default = "default_seed_count")]
    pub seed_count: usize,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub adnn_training: AdnnTrainConfig,
    #[serde(default)]
    pub generator: GeneratorSettings,
    #[serde(default)]
    pub baseline: BaselineSettings,
    #[serde(default)]
    pub evaluation: EvaluationSettings,
    #[serde(default)]
    pub mitigation: MitigationSettings,
}

fn default_seed_count() -> usize {
    1000
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("config file {} does not exist", path.display())));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        PerturbationBudget::new(self.budget.norm, self.budget.epsilon)?;
        self.subject.spec().validate()?;
        if let Some(spec) = &self.subject.spec {
            if spec.mechanism != self.subject.mechanism {
                return Err(Error::Config("subject.spec.mechanism disagrees with subject.mechanism".into()));
            }
        }
        if self.seed_count == 0 {
            return Err(Error::Config("seed_count must be positive".into()));
        }
        if self.evaluation.latency_entries > 0 && self.evaluation.latency_repeats < crate::eval::MIN_REPEATS {
            return Err(Error::Config(format!(
                "evaluation.latency_repeats must be at least {}",
                crate::eval::MIN_REPEATS
            )));
        }
        self.adnn_training.validate()?;
        self.generator.to_config(self.budget, self.rng_seed).validate()?;
        self.baseline.to_config(self.budget).validate()?;
        self.mitigation.retrain.validate()?;
        Ok(())
    }

    /// Hash of every setting that influences results. The output directory
    /// is excluded so a run can be relocated.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        crate::adnn::hash_json(&c)
    }

    /// `output_dir`, joined onto `root` when it is relative.
    pub fn resolve_output_dir(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(r) if self.output_dir.is_relative() => r.join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Small synthetic configuration for examples and tests.
    pub fn toy(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            subject: SubjectConfig {
                mechanism: Mechanism::ConditionalSkipping,
                spec: None,
                checkpoint: None,
            },
            dataset: DatasetSource::synthetic(10, 400, 100, 7),
            budget: PerturbationBudget::linf(0.03).expect("valid"),
            output_dir: output_dir.into(),
            seed_count: 40,
            rng_seed: 0,
            adnn_training: AdnnTrainConfig {
                epochs: 2,
                ..Default::default()
            },
            generator: GeneratorSettings {
                max_epochs: 2,
                learning_rate: 1e-3,
                ..Default::default()
            },
            baseline: BaselineSettings {
                max_iterations: 10,
                seed_count: Some(4),
                ..Default::default()
            },
            evaluation: EvaluationSettings {
                latency_entries: 4,
                ..Default::default()
            },
            mitigation: MitigationSettings::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "subject": {"mechanism": "conditional_skipping"},
        "dataset": {"kind": "synthetic", "num_classes": 10, "channels": 3, "height": 32, "width": 32,
                    "train_count": 5000, "test_count": 1000, "seed": 1},
        "budget": {"norm": "linf", "epsilon": 0.03},
        "output_dir": "runs/a"
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.seed_count, 1000);
        assert_eq!(c.generator.alpha, 1.0);
        assert_eq!(c.generator.beta, 0.001);
        assert_eq!(c.baseline.max_iterations, 300);
        assert_eq!(c.evaluation.sweep_taus, vec![0.3, 0.4, 0.5, 0.6, 0.7]);
        assert_eq!(c.mitigation.retrain.beta, 1.0);
        assert_eq!(c.subject.spec().num_blocks(), 8);
    }

    #[test]
    fn missing_key_is_named() {
        let text = MINIMAL.replace(r#""budget": {"norm": "linf", "epsilon": 0.03},"#, "");
        let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("budget"), "{err}");
        let text = MINIMAL.replace(r#""output_dir": "runs/a""#, r#""output_dir": "runs/a", "sede_count": 3"#);
        let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("sede_count"), "{err}");
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::toy("x");
        let b = ExperimentConfig::toy("y");
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.rng_seed = 1;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.resolve_output_dir(Some(Path::new("/r"))), PathBuf::from("/r/x"));
        assert_eq!(ExperimentConfig::toy("/abs").resolve_output_dir(Some(Path::new("/r"))), PathBuf::from("/abs"));
    }

    #[test]
    fn json_round_trip() {
        let c = ExperimentConfig::toy("out");
        let back = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
