//! The `eiv` subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use eiv_core::datasets::{read_input_columns, Dataset};
use eiv_core::model_io::{load_model, save_model, FORMAT_VERSION};
use eiv_core::predictor::{predict_eiv, predict_non_eiv, PredictConfig};
use eiv_core::trainer::{train, train_non_eiv, ModelKind};
use eiv_core::EivError;

use crate::config::{ExperimentConfig, Overrides, CONFIG_FORMAT_VERSION};
use crate::error::CliError;
use crate::experiment::{create_dir, evaluate, group_label, load_run_data, summary_table, write_file};
use crate::suites::{reproduce, Suite, SuiteOptions};

const DEFAULT_OUT: &str = "results";

fn core_at(path: &Path) -> impl Fn(EivError) -> CliError + '_ {
    move |e| match e {
        EivError::Io(io) => CliError::io(path, io),
        other => other.into(),
    }
}

/// Loads, overrides and validates a configuration file.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<(ExperimentConfig, String), CliError> {
    let (mut cfg, text) = ExperimentConfig::load(path)?;
    cfg.apply(overrides);
    cfg.validate()?;
    Ok((cfg, text))
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn write_provenance(cfg: &ExperimentConfig, text: &str, out: &Path, seeds: &[u64]) -> Result<(), CliError> {
    write_file(&out.join("config.toml"), text)?;
    write_file(&out.join("config.effective.toml"), cfg.to_toml())?;
    write_file(
        &out.join("manifest.toml"),
        format!(
            "config_format_version = {CONFIG_FORMAT_VERSION}\nmodel_format_version = {FORMAT_VERSION}\nconfig_hash = \"{}\"\nseeds = {seeds:?}\n",
            cfg.hash()
        ),
    )
}

fn column_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Summary statistics of a dataset, one line per column.
pub fn describe(ds: &Dataset) -> String {
    let mut out = format!("{} rows, {} inputs ({})\n", ds.len(), ds.n_inputs(), ds.provenance);
    let n_x = ds.n_inputs();
    for (j, name) in ds.input_names.iter().enumerate() {
        let col: Vec<f64> = (0..ds.len()).map(|i| ds.x.row(i)[j]).collect();
        let (m, s) = column_stats(&col);
        let _ = writeln!(out, "  {name:<24} mean {m:>10.4} std {s:>10.4}");
    }
    let (m, s) = column_stats(ds.y.data());
    let _ = writeln!(out, "  {:<24} mean {m:>10.4} std {s:>10.4}", ds.label_name);
    if let Some(t) = &ds.truth {
        let dx: Vec<f64> = ds.x.data().iter().zip(t.zeta.data()).map(|(x, z)| x - z).collect();
        let dy: Vec<f64> = ds.y.data().iter().zip(t.g.data()).map(|(y, g)| y - g).collect();
        let _ = writeln!(
            out,
            "  input noise std {:.4} over {n_x} column(s), label noise std {:.4}",
            column_stats(&dx).1,
            column_stats(&dy).1
        );
    }
    out
}

/// Writes `train.csv` and `test.csv` of run 0. `--seed` selects the data seed.
pub fn cmd_generate(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let (mut cfg, text) = load_config(config, &Overrides { out, ..Overrides::default() })?;
    if let (Some(s), Some(g)) = (seed, cfg.dataset.generator.as_mut()) {
        g.seed = s;
    }
    let out = out_dir(&cfg);
    create_dir(&out)?;
    let data = load_run_data(&cfg, 0)?;
    write_file(&out.join("train.csv"), data.train.to_csv())?;
    write_file(&out.join("test.csv"), data.test.to_csv())?;
    let seeds: Vec<u64> = cfg.dataset.generator.iter().map(|g| g.seed).collect();
    write_provenance(&cfg, &text, &out, &seeds)?;
    print!("train: {}test: {}", describe(&data.train), describe(&data.test));
    Ok(out)
}

/// Trains the selected models on the run-0 data and saves them with their
/// training records.
pub fn cmd_train(config: &Path, overrides: &Overrides) -> Result<PathBuf, CliError> {
    let (cfg, text) = load_config(config, overrides)?;
    let out = out_dir(&cfg);
    create_dir(&out)?;
    write_provenance(&cfg, &text, &out, &[cfg.train.seed])?;
    let data = load_run_data(&cfg, 0)?;
    let mut plan: Vec<Option<f64>> = Vec::new();
    if cfg.evaluation.models.non_eiv() {
        plan.push(None);
    }
    if cfg.evaluation.models.eiv() {
        plan.extend(cfg.deltas().into_iter().map(Some));
    }
    for delta in plan {
        let label = group_label(delta);
        let model = match delta {
            Some(d) => {
                let mut tc = cfg.train.clone();
                tc.deming_factor = d;
                train(&data.train, &cfg.model, &tc)?
            }
            None => train_non_eiv(&data.train, &cfg.model, &cfg.train)?,
        };
        let path = out.join(format!("{label}.model"));
        save_model(&model, &path).map_err(core_at(&path))?;
        write_file(&out.join(format!("{label}_record.csv")), model.record.to_csv())?;
        println!(
            "{label}: final sigma_y {:.6} after {} epochs -> {}",
            model.record.final_sigma_y().unwrap_or(f64::NAN),
            model.record.sigma_y.len(),
            path.display()
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct PredictOptions {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub l: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Predicts every row of `input`, which must contain the model's input
/// columns by name in raw units.
pub fn cmd_predict(model_path: &Path, input: &Path, opts: &PredictOptions) -> Result<PathBuf, CliError> {
    let model = load_model(model_path).map_err(core_at(model_path))?;
    let mut pc = match &opts.config {
        Some(c) => ExperimentConfig::load(c)?.0.predict,
        None => PredictConfig::default(),
    };
    if let Some(s) = opts.seed {
        pc.seed = s;
    }
    if let Some(k) = opts.k {
        pc.k = k;
    }
    if let Some(l) = opts.l {
        pc.l = l;
    }
    if pc.k < 2 || pc.l < 2 {
        return Err(CliError::Config("K and L must be >= 2".into()));
    }
    let raw = read_input_columns(input, &model.input_names, &[]).map_err(core_at(input))?;
    let x = read_input_columns(input, &model.input_names, &model.log_inputs).map_err(core_at(input))?;
    let x = match &model.normalization {
        Some(s) => s.normalize_x(&x),
        None => x,
    };
    let result = match model.kind {
        ModelKind::Eiv => predict_eiv(&model, &x, &pc)?,
        ModelKind::NonEiv => predict_non_eiv(&model, &x, &pc)?,
    };
    let result = match &model.normalization {
        Some(s) => result.denormalized(s),
        None => result,
    };
    let out = opts.out.clone().unwrap_or_else(|| PathBuf::from("predictions.csv"));
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(&out, result.to_csv(&raw, &model.input_names))?;
    println!("{} predictions -> {}", result.len(), out.display());
    Ok(out)
}

pub fn cmd_evaluate(config: &Path, overrides: &Overrides) -> Result<PathBuf, CliError> {
    let (cfg, text) = load_config(config, overrides)?;
    let out = out_dir(&cfg);
    let summary = evaluate(&cfg, Some(&text), &out)?;
    print!("{}", summary_table(&summary));
    println!("results in {}", out.display());
    Ok(out)
}

pub fn cmd_reproduce(suite: &str, opts: &SuiteOptions, out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let suite: Suite = suite.parse()?;
    let out = out.unwrap_or_else(|| Path::new(DEFAULT_OUT).join(suite.name()));
    for s in reproduce(suite, opts, &out)? {
        println!("{}", s.out.display());
        print!("{}", summary_table(&s));
    }
    Ok(out)
}
