//! Built-in experiment suites and their published reference numbers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use eiv_core::datasets::GeneratorConfig;
use eiv_core::eval::with_provenance;
use eiv_core::nn::{Activation, MlpConfig};
use eiv_core::predictor::PredictConfig;
use eiv_core::trainer::TrainConfig;

use crate::config::{
    DatasetKind, DatasetSpec, EvaluationSpec, ExperimentConfig, CONFIG_FORMAT_VERSION,
};
use crate::error::CliError;
use crate::experiment::{create_dir, evaluate, write_file, EvaluationSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    MexicanTable1,
    MexicanFig1,
    MexicanFig3,
    MultinomialTable1,
    WineFig4,
    HousingFig4,
}

pub const SUITE_NAMES: [&str; 6] = [
    "mexican-table1",
    "mexican-fig1",
    "mexican-fig3",
    "multinomial-table1",
    "wine-fig4",
    "housing-fig4",
];

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "mexican-table1" => Suite::MexicanTable1,
            "mexican-fig1" => Suite::MexicanFig1,
            "mexican-fig3" => Suite::MexicanFig3,
            "multinomial-table1" => Suite::MultinomialTable1,
            "wine-fig4" => Suite::WineFig4,
            "housing-fig4" => Suite::HousingFig4,
            _ => {
                return Err(CliError::Config(format!(
                    "unknown suite {s:?}; expected one of {}",
                    SUITE_NAMES.join(", ")
                )))
            }
        })
    }
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::MexicanTable1 => SUITE_NAMES[0],
            Suite::MexicanFig1 => SUITE_NAMES[1],
            Suite::MexicanFig3 => SUITE_NAMES[2],
            Suite::MultinomialTable1 => SUITE_NAMES[3],
            Suite::WineFig4 => SUITE_NAMES[4],
            Suite::HousingFig4 => SUITE_NAMES[5],
        }
    }
}

/// Published Table 1 values for one input-noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableReference {
    pub sigma_x: f64,
    pub delta: f64,
    pub rmse_eiv: f64,
    pub rmse_non_eiv: f64,
    pub coverage_eiv: f64,
    pub coverage_non_eiv: f64,
}

const fn reference(
    sigma_x: f64,
    delta: f64,
    rmse_eiv: f64,
    rmse_non_eiv: f64,
    coverage_eiv: f64,
    coverage_non_eiv: f64,
) -> TableReference {
    TableReference {
        sigma_x,
        delta,
        rmse_eiv,
        rmse_non_eiv,
        coverage_eiv,
        coverage_non_eiv,
    }
}

pub const MEXICAN_HAT_TABLE: [TableReference; 3] = [
    reference(0.05, 0.15, 0.34, 0.34, 0.97, 0.90),
    reference(0.07, 0.20, 0.35, 0.36, 0.93, 0.82),
    reference(0.10, 0.30, 0.38, 0.38, 0.91, 0.72),
];

pub const MULTINOMIAL_TABLE: [TableReference; 3] = [
    reference(0.05, 0.15, 0.67, 0.63, 0.96, 0.80),
    reference(0.07, 0.20, 0.76, 0.71, 0.92, 0.63),
    reference(0.10, 0.30, 0.85, 0.80, 0.79, 0.42),
];

pub const REAL_DATA_DELTAS: [f64; 8] = [0.1, 0.2, 0.4, 0.6, 0.8, 1.0, 1.5, 2.0];

fn net(widths: Vec<usize>) -> MlpConfig {
    MlpConfig::new(widths, Activation::Relu, 0.5).expect("built-in network is valid")
}

fn evaluation(deltas: Vec<f64>, coverage_grid: usize) -> EvaluationSpec {
    EvaluationSpec {
        deltas,
        coverage_grid,
        ..EvaluationSpec::default()
    }
}

/// Mexican hat with the published hyperparameters at input noise `sigma_x`.
pub fn mexican_hat_config(sigma_x: f64, delta: f64) -> ExperimentConfig {
    let mut g = GeneratorConfig::mexican_hat(0);
    g.sigma_x = sigma_x;
    ExperimentConfig {
        format_version: CONFIG_FORMAT_VERSION,
        out: None,
        dataset: DatasetSpec::synthetic(DatasetKind::MexicanHat, g),
        model: net(vec![1, 50, 100, 50, 1]),
        train: TrainConfig::mexican_hat(delta, 0),
        predict: PredictConfig::default(),
        evaluation: evaluation(vec![delta], 100),
    }
}

/// Modulated 5D polynomial at desk scale: `10^4` training points, 100 epochs,
/// the published network and batch size, `10^3` test points.
pub fn multinomial_config(sigma_x: f64, delta: f64) -> ExperimentConfig {
    let mut g = GeneratorConfig::multinomial(0, 0);
    g.sigma_x = sigma_x;
    g.n_points = 10_000;
    let mut train = TrainConfig::mexican_hat(delta, 0);
    train.n_only_phi = 30;
    train.n_increase_delta = 10;
    train.n_fine_tune = 60;
    train.final_epochs = 10;
    train.batch_size = 200;
    train.weight_decay = 1e-6;
    let mut dataset = DatasetSpec::synthetic(DatasetKind::Multinomial, g);
    dataset.test_points = 1000;
    ExperimentConfig {
        format_version: CONFIG_FORMAT_VERSION,
        out: None,
        dataset,
        model: net(vec![5, 500, 300, 100, 1]),
        train,
        predict: PredictConfig::default(),
        evaluation: evaluation(vec![delta], 0),
    }
}

fn real_data_train(n_only_phi: usize, n_fine_tune: usize, weight_decay: f64) -> TrainConfig {
    let mut t = TrainConfig::mexican_hat(1.0, 0);
    t.n_only_phi = n_only_phi;
    t.n_increase_delta = 20;
    t.n_fine_tune = n_fine_tune;
    t.batch_size = 16;
    t.weight_decay = weight_decay;
    t
}

/// Wine quality: 400 epochs, batches of 16, `c = 1e-9`.
pub fn wine_config(path: PathBuf) -> ExperimentConfig {
    ExperimentConfig {
        format_version: CONFIG_FORMAT_VERSION,
        out: None,
        dataset: DatasetSpec::file(DatasetKind::Wine, path),
        model: net(vec![11, 200, 100, 50, 1]),
        train: real_data_train(120, 260, 1e-9),
        predict: PredictConfig::default(),
        evaluation: evaluation(REAL_DATA_DELTAS.to_vec(), 0),
    }
}

/// Boston housing without column 12: 1000 epochs, batches of 16, `c = 1e-2`.
pub fn housing_config(path: PathBuf) -> ExperimentConfig {
    ExperimentConfig {
        format_version: CONFIG_FORMAT_VERSION,
        out: None,
        dataset: DatasetSpec::file(DatasetKind::Housing, path),
        model: net(vec![12, 200, 100, 50, 1]),
        train: real_data_train(300, 680, 1e-2),
        predict: PredictConfig::default(),
        evaluation: evaluation(REAL_DATA_DELTAS.to_vec(), 0),
    }
}

/// The experiments of a suite as `(subdirectory, config)` pairs.
pub fn suite_configs(suite: Suite, data: Option<&Path>) -> Result<Vec<(String, ExperimentConfig)>, CliError> {
    let tag = |s: f64| format!("sigma_x_{s}");
    Ok(match suite {
        Suite::MexicanTable1 => MEXICAN_HAT_TABLE
            .iter()
            .map(|r| (tag(r.sigma_x), mexican_hat_config(r.sigma_x, r.delta)))
            .collect(),
        Suite::MexicanFig1 => {
            let mut c = mexican_hat_config(0.07, 0.2);
            c.evaluation.deltas = vec![0.1, 0.2, 0.5];
            c.evaluation.coverage_grid = 0;
            vec![(String::new(), c)]
        }
        Suite::MexicanFig3 => vec![(String::new(), mexican_hat_config(0.07, 0.2))],
        Suite::MultinomialTable1 => MULTINOMIAL_TABLE
            .iter()
            .map(|r| (tag(r.sigma_x), multinomial_config(r.sigma_x, r.delta)))
            .collect(),
        Suite::WineFig4 | Suite::HousingFig4 => {
            let default = if suite == Suite::WineFig4 {
                "winequality-red.csv"
            } else {
                "housing.data"
            };
            let path = data.map_or_else(|| PathBuf::from(default), Path::to_path_buf);
            let c = if suite == Suite::WineFig4 {
                wine_config(path)
            } else {
                housing_config(path)
            };
            vec![(String::new(), c)]
        }
    })
}

/// Suite-level options from the command line.
#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub parallel_runs: Option<usize>,
    pub data: Option<PathBuf>,
}

fn table_csv(rows: &[(TableReference, &EvaluationSummary)], coverage_metric: &str) -> String {
    let mut out = String::from(
        "sigma_x,delta,model,rmse_mean,rmse_stderr,coverage_mean,coverage_stderr,runs,reference_rmse,reference_coverage\n",
    );
    for (r, s) in rows {
        for (delta, ref_rmse, ref_cov) in [
            (Some(r.delta), r.rmse_eiv, r.coverage_eiv),
            (None, r.rmse_non_eiv, r.coverage_non_eiv),
        ] {
            let Some(g) = s.group(delta) else { continue };
            let cell = |name: &str| {
                g.aggregate.get(name).map_or(("NA".to_string(), "NA".to_string()), |m| {
                    (
                        m.mean.to_string(),
                        m.stderr.map_or_else(|| "NA".to_string(), |e| e.to_string()),
                    )
                })
            };
            let (rm, rs) = cell("rmse");
            let (cm, cs) = cell(coverage_metric);
            let _ = writeln!(
                out,
                "{},{},{},{rm},{rs},{cm},{cs},{},{ref_rmse},{ref_cov}",
                r.sigma_x,
                r.delta,
                g.label,
                g.aggregate.seeds.len()
            );
        }
    }
    out
}

fn reference_note(suite: Suite) -> Option<&'static str> {
    match suite {
        Suite::MexicanFig1 => Some(
            "Learned sigma_y decreases with the Deming factor and stays above the generating sigma_y = 0.30.\n\
             EiV and non-EiV trajectories are nearly identical for small Deming factors.\n",
        ),
        Suite::MexicanFig3 => Some(
            "EiV coverage of the Mexican hat is substantially better than non-EiV coverage,\n\
             except near the peak at zeta = 0 where both models fail. The line 0.95 is the nominal level.\n",
        ),
        Suite::WineFig4 => Some(
            "Wine: a good Deming factor is about 0.6; at 1.0 the EiV RMSE is only slightly worse than non-EiV,\n\
             the per-point errors of both models are almost identical and the EiV uncertainties are larger.\n",
        ),
        Suite::HousingFig4 => Some("Housing: test RMSE against the Deming factor, with the non-EiV band for comparison.\n"),
        _ => None,
    }
}

/// Runs every experiment of `suite` under `out` and writes the comparison files.
pub fn reproduce(suite: Suite, opts: &SuiteOptions, out: &Path) -> Result<Vec<EvaluationSummary>, CliError> {
    let configs = suite_configs(suite, opts.data.as_deref())?;
    create_dir(out)?;
    let mut summaries = Vec::new();
    for (sub, mut cfg) in configs {
        if let Some(s) = opts.seed {
            cfg.train.seed = s;
        }
        if let Some(r) = opts.runs {
            cfg.evaluation.runs = r;
        }
        if let Some(p) = opts.parallel_runs {
            cfg.evaluation.parallel_runs = p;
        }
        let dir = if sub.is_empty() { out.to_path_buf() } else { out.join(&sub) };
        cfg.out = Some(dir.clone());
        eprintln!("== {} {}", suite.name(), sub);
        summaries.push(evaluate(&cfg, None, &dir)?);
    }
    let table = match suite {
        Suite::MexicanTable1 => Some((&MEXICAN_HAT_TABLE, "coverage_grid")),
        Suite::MultinomialTable1 => Some((&MULTINOMIAL_TABLE, "coverage_test")),
        _ => None,
    };
    if let Some((refs, metric)) = table {
        let rows: Vec<(TableReference, &EvaluationSummary)> = refs.iter().copied().zip(summaries.iter()).collect();
        let seeds = summaries.first().map(|s| s.seeds.clone()).unwrap_or_default();
        let hash = summaries.iter().map(|s| s.config_hash.as_str()).collect::<Vec<_>>().join(" ");
        write_file(&out.join("table1.csv"), with_provenance(&hash, &seeds, &table_csv(&rows, metric)))?;
    }
    if let Some(note) = reference_note(suite) {
        write_file(&out.join("reference.txt"), note)?;
    }
    Ok(summaries)
}
