//! Repeated train-and-evaluate runs and the files they produce.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use eiv_core::datasets::{
    gen_mexican_hat, gen_multinomial, load_tabular_raw, mexican_hat, split, split_normalized, Dataset,
    GeneratorConfig,
};
use eiv_core::eval::{
    coverage_curve_csv, coverage_fraction, coverage_under_resampling, map_seeds, rmse, sigma_y_comparison,
    sigma_y_trajectory_csv, uniform_grid, with_provenance, CoverageReport, DeltaSweep, EivInterval,
    IntervalPredictor, MetricAggregate, NonEivInterval, RunAggregate, RunMetrics,
};
use eiv_core::model_io::{save_model, FORMAT_VERSION};
use eiv_core::predictor::{predict_eiv, predict_non_eiv, PredictConfig, PredictionResult};
use eiv_core::trainer::{train, train_non_eiv, TrainRecord, TrainedModel};
use eiv_core::{EivError, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetKind, ExperimentConfig, CONFIG_FORMAT_VERSION};
use crate::error::CliError;

pub struct RunData {
    pub train: Dataset,
    pub test: Dataset,
}

fn generate(kind: DatasetKind, g: &GeneratorConfig) -> eiv_core::Result<Dataset> {
    match kind {
        DatasetKind::MexicanHat => gen_mexican_hat(g),
        _ => gen_multinomial(g),
    }
}

pub fn missing_file_message(kind: DatasetKind, path: &Path) -> String {
    let hint = match kind {
        DatasetKind::Wine => {
            "expected winequality-red.csv from the UCI Wine Quality data set \
             (semicolon-separated, header row, 11 input columns and a `quality` column); pass its location with --data"
        }
        DatasetKind::Housing => {
            "expected housing.data from the UCI Boston Housing data set \
             (whitespace-separated, no header, 14 columns with the price last); pass its location with --data"
        }
        _ => "check the dataset path",
    };
    format!("data file {} not found: {hint}", path.display())
}

/// Training and test data for run `run` (0-based). Synthetic data use
/// `generator.seed + run` and `test_seed + run`; file data are split once
/// with `split_seed`.
pub fn load_run_data(cfg: &ExperimentConfig, run: u64) -> Result<RunData, CliError> {
    let d = &cfg.dataset;
    if d.kind.is_synthetic() {
        let g = d
            .generator
            .as_ref()
            .ok_or_else(|| CliError::Config("synthetic datasets need a generator".into()))?;
        let mut tg = g.clone();
        tg.seed = g.seed + run;
        let train = generate(d.kind, &tg)?;
        let mut eg = g.clone();
        eg.seed = d.test_seed + run;
        eg.n_points = d.test_points;
        let test = generate(d.kind, &eg)?;
        return Ok(RunData { train, test });
    }
    let path = d
        .path
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("dataset kind {:?} needs a path", d.kind)))?;
    if !path.exists() {
        return Err(CliError::MissingData(missing_file_message(d.kind, path)));
    }
    let (train, test) = match d.kind {
        DatasetKind::Csv => split(&Dataset::read_csv(path)?, d.test_fraction, d.split_seed)?,
        _ => {
            let recipe = d
                .effective_recipe()
                .ok_or_else(|| CliError::Config("tabular datasets need a recipe".into()))?;
            split_normalized(&load_tabular_raw(path, &recipe)?, d.test_fraction, d.split_seed)?
        }
    };
    Ok(RunData { train, test })
}

/// One trained model with its test-set evaluation.
pub struct ModelOutcome {
    /// Deming factor of an EiV model, `None` for non-EiV.
    pub delta: Option<f64>,
    pub seed: u64,
    pub model: TrainedModel,
    pub prediction: PredictionResult,
    /// Uncertainty used for intervals: total for EiV, epistemic for non-EiV.
    pub u: Vec<f64>,
    pub metrics: RunMetrics,
    pub grid_coverage: Option<CoverageReport>,
}

pub fn group_label(delta: Option<f64>) -> String {
    match delta {
        Some(d) => format!("eiv_delta_{d}"),
        None => "non_eiv".into(),
    }
}

/// Points of the coverage grid, or `None` if the dataset has no grid protocol.
pub fn coverage_grid(cfg: &ExperimentConfig) -> Option<(Tensor, Vec<f64>, f64)> {
    if cfg.dataset.kind != DatasetKind::MexicanHat || cfg.evaluation.coverage_grid == 0 {
        return None;
    }
    let g = cfg.dataset.generator.as_ref()?;
    let zeta = uniform_grid(-1.0, 1.0, cfg.evaluation.coverage_grid);
    let truth = zeta.data().iter().map(|&z| mexican_hat(z)).collect();
    Some((zeta, truth, g.sigma_x))
}

/// Trains and evaluates one model for run `run`.
pub fn run_model(
    cfg: &ExperimentConfig,
    data: &RunData,
    delta: Option<f64>,
    run: u64,
) -> Result<ModelOutcome, CliError> {
    let mut tc = cfg.train.clone();
    tc.seed = cfg.train.seed + run;
    let pc = PredictConfig {
        seed: cfg.predict.seed + run,
        ..cfg.predict.clone()
    };
    let model = match delta {
        Some(d) => {
            tc.deming_factor = d;
            train(&data.train, &cfg.model, &tc)?
        }
        None => train_non_eiv(&data.train, &cfg.model, &tc)?,
    };
    let prediction = match delta {
        Some(_) => predict_eiv(&model, &data.test.x, &pc)?,
        None => predict_non_eiv(&model, &data.test.x, &pc)?,
    };
    let u = match delta {
        Some(_) => prediction.u_total.data().to_vec(),
        None => prediction.u_epistemic.data().to_vec(),
    };
    let mult = cfg.evaluation.multiplier;
    let mut metrics: RunMetrics = vec![("rmse".into(), rmse(prediction.m.data(), data.test.y.data())?)];
    if let Some(t) = &data.test.truth {
        metrics.push(("coverage_test".into(), coverage_fraction(prediction.m.data(), &u, t.g.data(), mult)?));
    }
    let grid_coverage = match coverage_grid(cfg) {
        Some((zeta, truth, sigma_x)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(pc.seed);
            rng.set_stream(1);
            let predictor: Box<dyn IntervalPredictor + '_> = match delta {
                Some(_) => Box::new(EivInterval {
                    model: &model,
                    config: pc.clone(),
                }),
                None => Box::new(NonEivInterval {
                    model: &model,
                    config: pc.clone(),
                }),
            };
            let report = coverage_under_resampling(
                predictor.as_ref(),
                &zeta,
                &truth,
                sigma_x,
                cfg.evaluation.coverage_resamples,
                mult,
                &mut rng,
            )?;
            metrics.push(("coverage_grid".into(), report.overall));
            Some(report)
        }
        None => None,
    };
    let sigma_y = model
        .record
        .final_sigma_y()
        .ok_or_else(|| EivError::Usage("empty training record".into()))?;
    metrics.push(("final_sigma_y".into(), sigma_y));
    Ok(ModelOutcome {
        delta,
        seed: tc.seed,
        model,
        prediction,
        u,
        metrics,
        grid_coverage,
    })
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Writes the model, training record and (optionally) test predictions of one outcome.
pub fn write_outcome(dir: &Path, o: &ModelOutcome, test: &Dataset, predictions: bool) -> Result<(), CliError> {
    create_dir(dir)?;
    let label = group_label(o.delta);
    let model_path = dir.join(format!("{label}.model"));
    save_model(&o.model, &model_path).map_err(|e| match e {
        EivError::Io(io) => CliError::io(&model_path, io),
        other => other.into(),
    })?;
    write_file(&dir.join(format!("{label}_record.csv")), o.model.record.to_csv())?;
    if predictions {
        let p = match &test.normalization {
            Some(s) => o.prediction.denormalized(s),
            None => o.prediction.clone(),
        };
        let x = match &test.normalization {
            Some(s) => s.denormalize_x(&test.x),
            None => test.x.clone(),
        };
        write_file(&dir.join(format!("{label}_predictions.csv")), p.to_csv(&x, &test.input_names))?;
    }
    let mut m = String::from("metric,value\n");
    for (name, v) in &o.metrics {
        let _ = writeln!(m, "{name},{v}");
    }
    write_file(&dir.join(format!("{label}_metrics.csv")), m)
}

/// All runs of one model group.
pub struct GroupSummary {
    pub label: String,
    pub delta: Option<f64>,
    pub aggregate: RunAggregate,
    pub records: Vec<TrainRecord>,
    pub coverage: Vec<CoverageReport>,
    /// Per run, the test-set interval uncertainties.
    pub u: Vec<Vec<f64>>,
}

pub struct EvaluationSummary {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub groups: Vec<GroupSummary>,
    pub out: PathBuf,
}

impl EvaluationSummary {
    pub fn group(&self, delta: Option<f64>) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.delta == delta)
    }

    pub fn mean(&self, delta: Option<f64>, metric: &str) -> Option<f64> {
        self.group(delta)?.aggregate.get(metric).map(|m| m.mean)
    }
}

fn stderr_text(m: &MetricAggregate) -> String {
    m.stderr.map_or_else(|| "NA".to_string(), |s| s.to_string())
}

/// Fraction of test points where the EiV uncertainty is at least the non-EiV one.
pub fn fraction_not_smaller(eiv: &[f64], non_eiv: &[f64]) -> f64 {
    let n = eiv.len().min(non_eiv.len());
    if n == 0 {
        return f64::NAN;
    }
    eiv.iter().zip(non_eiv).filter(|(a, b)| a >= b).count() as f64 / n as f64
}

/// Runs every selected model over all runs and writes results under `out`.
pub fn evaluate(cfg: &ExperimentConfig, config_text: Option<&str>, out: &Path) -> Result<EvaluationSummary, CliError> {
    cfg.validate()?;
    if let Some(p) = cfg.dataset.path.as_ref().filter(|p| !cfg.dataset.kind.is_synthetic() && !p.exists()) {
        return Err(CliError::MissingData(missing_file_message(cfg.dataset.kind, p)));
    }
    create_dir(out)?;
    let hash = cfg.hash();
    let runs: Vec<u64> = (0..cfg.evaluation.runs as u64).collect();
    let seeds: Vec<u64> = runs.iter().map(|r| cfg.train.seed + r).collect();
    write_file(&out.join("config.toml"), config_text.map_or_else(|| cfg.to_toml(), str::to_string))?;
    write_file(&out.join("config.effective.toml"), cfg.to_toml())?;
    let manifest = format!(
        "config_format_version = {CONFIG_FORMAT_VERSION}\nmodel_format_version = {FORMAT_VERSION}\nconfig_hash = \"{hash}\"\nseeds = {seeds:?}\n"
    );
    write_file(&out.join("manifest.toml"), manifest)?;

    let mut plan: Vec<Option<f64>> = Vec::new();
    if cfg.evaluation.models.non_eiv() {
        plan.push(None);
    }
    if cfg.evaluation.models.eiv() {
        plan.extend(cfg.deltas().into_iter().map(Some));
    }

    let mut groups = Vec::new();
    for delta in plan {
        let label = group_label(delta);
        eprintln!("[{label}] {} run(s)", runs.len());
        let outcomes = map_seeds(&seeds, cfg.evaluation.parallel_runs, &|seed| {
            let run = seed - cfg.train.seed;
            let data = load_run_data(cfg, run).map_err(into_core)?;
            let o = run_model(cfg, &data, delta, run).map_err(into_core)?;
            write_outcome(&out.join(format!("run_{seed}")), &o, &data.test, cfg.evaluation.save_predictions)
                .map_err(into_core)?;
            eprintln!("[{label}] seed {seed}: {}", format_metrics(&o.metrics));
            Ok(o)
        })?;
        let metrics: Vec<RunMetrics> = outcomes.iter().map(|o| o.metrics.clone()).collect();
        groups.push(GroupSummary {
            label,
            delta,
            aggregate: RunAggregate::from_runs(seeds.clone(), &metrics)?,
            records: outcomes.iter().map(|o| o.model.record.clone()).collect(),
            coverage: outcomes.iter().filter_map(|o| o.grid_coverage.clone()).collect(),
            u: outcomes.into_iter().map(|o| o.u).collect(),
        });
    }

    let summary = EvaluationSummary {
        config_hash: hash,
        seeds,
        groups,
        out: out.to_path_buf(),
    };
    write_reports(cfg, &summary)?;
    Ok(summary)
}

fn into_core(e: CliError) -> EivError {
    match e {
        CliError::Core(c) => c,
        CliError::Io { path, source } => EivError::Io(std::io::Error::new(source.kind(), format!("{path}: {source}"))),
        CliError::Config(m) => EivError::Config(m),
        CliError::MissingData(m) => EivError::Io(std::io::Error::new(std::io::ErrorKind::NotFound, m)),
    }
}

pub fn format_metrics(m: &RunMetrics) -> String {
    m.iter().map(|(n, v)| format!("{n}={v:.4}")).collect::<Vec<_>>().join(" ")
}

fn write_reports(cfg: &ExperimentConfig, s: &EvaluationSummary) -> Result<(), CliError> {
    let out = &s.out;
    let prov = |body: &str| with_provenance(&s.config_hash, &s.seeds, body);

    let non_eiv_u = s.group(None).map(|g| &g.u);
    let mut body = String::from("model,delta,metric,mean,stderr,runs\n");
    for g in &s.groups {
        let delta = g.delta.map_or_else(|| "NA".to_string(), |d| d.to_string());
        let mut metrics = g.aggregate.metrics.clone();
        if let (Some(_), Some(base)) = (g.delta, non_eiv_u) {
            let fr = g.u.iter().zip(base).map(|(a, b)| fraction_not_smaller(a, b)).collect();
            metrics.push(MetricAggregate::from_values("frac_u_not_below_non_eiv", fr)?);
        }
        for m in &metrics {
            let _ = writeln!(body, "{},{delta},{},{},{},{}", g.label, m.name, m.mean, stderr_text(m), m.values.len());
        }
    }
    write_file(&out.join("summary.csv"), prov(&body))?;

    let traj: Vec<(String, Vec<TrainRecord>)> = s.groups.iter().map(|g| (g.label.clone(), g.records.clone())).collect();
    write_file(&out.join("sigma_y_trajectory.csv"), prov(&sigma_y_trajectory_csv(&traj)?))?;

    let mut by_delta: Vec<(f64, Vec<TrainRecord>)> = s
        .groups
        .iter()
        .map(|g| (g.delta.unwrap_or(0.0), g.records.clone()))
        .collect();
    by_delta.sort_by(|a, b| a.0.total_cmp(&b.0));
    if by_delta.len() >= 2 {
        let cmp = sigma_y_comparison(&by_delta)?;
        let mut body = String::from("delta,mean,stderr\n");
        for (d, m) in &cmp.rows {
            let _ = writeln!(body, "{d},{},{}", m.mean, stderr_text(m));
        }
        let _ = writeln!(body, "# strictly_decreasing={}", cmp.strictly_decreasing);
        write_file(&out.join("sigma_y_final.csv"), prov(&body))?;
    }

    if let Some((zeta, _, _)) = coverage_grid(cfg) {
        for g in &s.groups {
            if !g.coverage.is_empty() {
                let csv = coverage_curve_csv(&zeta, &g.coverage)?;
                write_file(&out.join(format!("coverage_curve_{}.csv", g.label)), prov(&csv))?;
            }
        }
    }

    if let Some(base) = s.group(None) {
        let rows: Vec<(f64, MetricAggregate)> = s
            .groups
            .iter()
            .filter_map(|g| Some((g.delta?, g.aggregate.get("rmse")?.clone())))
            .collect();
        if !rows.is_empty() {
            if let Some(b) = base.aggregate.get("rmse") {
                let sweep = DeltaSweep {
                    rows,
                    baseline: b.clone(),
                };
                write_file(&out.join("delta_sweep.csv"), prov(&sweep.to_csv()))?;
            }
        }
    }
    Ok(())
}

/// Human-readable table of group means.
pub fn summary_table(s: &EvaluationSummary) -> String {
    let mut out = String::new();
    for g in &s.groups {
        let _ = write!(out, "{:<20}", g.label);
        for m in &g.aggregate.metrics {
            let _ = write!(out, " {}={:.4}", m.name, m.mean);
            if let Some(se) = m.stderr {
                let _ = write!(out, "±{se:.4}");
            }
        }
        out.push('\n');
    }
    out
}
