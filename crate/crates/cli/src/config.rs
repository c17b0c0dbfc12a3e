//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use eiv_core::datasets::{GeneratorConfig, TabularRecipe};
use eiv_core::nn::MlpConfig;
use eiv_core::predictor::PredictConfig;
use eiv_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    MexicanHat,
    Multinomial,
    /// Red wine quality file with the built-in recipe.
    Wine,
    /// Boston housing file with the built-in recipe.
    Housing,
    /// Any delimited file with an explicit recipe.
    Tabular,
    /// A CSV written by `generate`.
    Csv,
}

impl DatasetKind {
    pub fn is_synthetic(self) -> bool {
        matches!(self, DatasetKind::MexicanHat | DatasetKind::Multinomial)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    /// Held-out points drawn from the generator.
    #[serde(default = "default_test_points")]
    pub test_points: usize,
    #[serde(default = "default_test_seed")]
    pub test_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipe: Option<TabularRecipe>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_test_points() -> usize {
    1000
}

fn default_test_seed() -> u64 {
    1_000_000
}

fn default_test_fraction() -> f64 {
    0.2
}

impl DatasetSpec {
    pub fn synthetic(kind: DatasetKind, generator: GeneratorConfig) -> Self {
        DatasetSpec {
            kind,
            generator: Some(generator),
            test_points: default_test_points(),
            test_seed: default_test_seed(),
            path: None,
            recipe: None,
            test_fraction: default_test_fraction(),
            split_seed: 0,
        }
    }

    pub fn file(kind: DatasetKind, path: PathBuf) -> Self {
        DatasetSpec {
            kind,
            generator: None,
            test_points: default_test_points(),
            test_seed: default_test_seed(),
            path: Some(path),
            recipe: None,
            test_fraction: default_test_fraction(),
            split_seed: 0,
        }
    }

    /// The explicit recipe, or the built-in one for wine and housing.
    pub fn effective_recipe(&self) -> Option<TabularRecipe> {
        self.recipe.clone().or(match self.kind {
            DatasetKind::Wine => Some(TabularRecipe::wine_quality()),
            DatasetKind::Housing => Some(TabularRecipe::boston_housing()),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelSelection {
    #[default]
    Both,
    Eiv,
    NonEiv,
}

impl ModelSelection {
    pub fn eiv(self) -> bool {
        self != ModelSelection::NonEiv
    }

    pub fn non_eiv(self) -> bool {
        self != ModelSelection::Eiv
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSpec {
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_parallel")]
    pub parallel_runs: usize,
    #[serde(default)]
    pub models: ModelSelection,
    /// Deming factors for EiV runs; empty means `train.deming_factor` alone.
    #[serde(default)]
    pub deltas: Vec<f64>,
    /// Points of the uniform input grid on `[-1, 1]` for resampled coverage
    /// (one-dimensional synthetic data only); 0 turns it off.
    #[serde(default = "default_grid")]
    pub coverage_grid: usize,
    #[serde(default = "default_grid")]
    pub coverage_resamples: usize,
    #[serde(default = "default_multiplier")]
    pub multiplier: f64,
    /// Write per-point test predictions of every run.
    #[serde(default = "default_true")]
    pub save_predictions: bool,
}

fn default_runs() -> usize {
    5
}

fn default_parallel() -> usize {
    1
}

fn default_grid() -> usize {
    100
}

fn default_multiplier() -> f64 {
    1.96
}

fn default_true() -> bool {
    true
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        EvaluationSpec {
            runs: default_runs(),
            parallel_runs: default_parallel(),
            models: ModelSelection::Both,
            deltas: Vec::new(),
            coverage_grid: default_grid(),
            coverage_resamples: default_grid(),
            multiplier: default_multiplier(),
            save_predictions: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub model: MlpConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub predict: PredictConfig,
    #[serde(default)]
    pub evaluation: EvaluationSpec,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub delta: Option<f64>,
    pub runs: Option<usize>,
    pub parallel_runs: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok((ExperimentConfig::from_toml(&text)?, text))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the effective configuration, hex encoded.
    /// Hash of the effective settings, ignoring the output directory and the
    /// worker count, neither of which changes results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        c.evaluation.parallel_runs = 1;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.train.seed = s;
        }
        if let Some(d) = o.delta {
            self.train.deming_factor = d;
            self.evaluation.deltas = vec![d];
        }
        if let Some(r) = o.runs {
            self.evaluation.runs = r;
        }
        if let Some(p) = o.parallel_runs {
            self.evaluation.parallel_runs = p;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
    }

    pub fn deltas(&self) -> Vec<f64> {
        if self.evaluation.deltas.is_empty() {
            vec![self.train.deming_factor]
        } else {
            self.evaluation.deltas.clone()
        }
    }

    /// Checks everything that can be checked without touching data files.
    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: String| Err(CliError::Config(m));
        if self.format_version != CONFIG_FORMAT_VERSION {
            return fail(format!(
                "config format_version {} is not supported (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            ));
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.model.output_width() != 1 {
            return fail("only one-dimensional labels are supported".into());
        }
        let d = &self.dataset;
        if d.kind.is_synthetic() {
            let g = match &d.generator {
                Some(g) => g,
                None => return fail("synthetic datasets need a [dataset.generator] table".into()),
            };
            g.validate()?;
            let dim = if d.kind == DatasetKind::MexicanHat { 1 } else { g.dim };
            if d.kind == DatasetKind::MexicanHat && g.dim != 1 {
                return fail("the Mexican hat generator has dim = 1".into());
            }
            if self.model.input_width() != dim {
                return fail(format!(
                    "model input width {} does not match data dimension {dim}",
                    self.model.input_width()
                ));
            }
            if d.test_points == 0 {
                return fail("test_points must be >= 1".into());
            }
        } else {
            if d.path.is_none() {
                return fail(format!("dataset kind {:?} needs a path", d.kind));
            }
            if d.kind == DatasetKind::Tabular && d.recipe.is_none() {
                return fail("tabular datasets need a [dataset.recipe] table".into());
            }
            if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
                return fail(format!("test_fraction {} outside (0, 1)", d.test_fraction));
            }
        }
        if self.predict.k < 2 || self.predict.l < 2 {
            return fail("predict.k and predict.l must be >= 2".into());
        }
        let e = &self.evaluation;
        if e.runs == 0 || e.parallel_runs == 0 {
            return fail("evaluation.runs and evaluation.parallel_runs must be >= 1".into());
        }
        if e.coverage_grid > 0 && e.coverage_resamples == 0 {
            return fail("coverage_resamples must be >= 1".into());
        }
        if !(e.multiplier > 0.0) {
            return fail("evaluation.multiplier must be positive".into());
        }
        if let Some(bad) = self.deltas().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return fail(format!("Deming factor {bad} must be >= 0"));
        }
        Ok(())
    }
}
