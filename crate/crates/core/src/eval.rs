//! Evaluation protocol: RMSE, ground-truth coverage under resampled inputs,
//! aggregation over independently seeded runs, and the `sigma_y` and Deming
//! factor summaries.

use std::fmt::Write as _;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::error::{EivError, Result};
use crate::predictor::{predict_eiv_with_rng, predict_non_eiv_with_rng, PredictConfig};
use crate::tensor::Tensor;
use crate::trainer::{TrainRecord, TrainedModel};

pub const DEFAULT_MULTIPLIER: f64 = 1.96;

/// `sqrt(mean((m - y)^2))`
pub fn rmse(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(EivError::shape("rmse", &[labels.len()], &[predictions.len()]));
    }
    if predictions.is_empty() {
        return Err(EivError::Usage("rmse of no values".into()));
    }
    let ss: f64 = predictions.iter().zip(labels).map(|(m, y)| (m - y) * (m - y)).sum();
    Ok((ss / predictions.len() as f64).sqrt())
}

/// Anything that turns inputs into a prediction and a standard uncertainty per row.
pub trait IntervalPredictor {
    fn predict_interval(&self, x: &Tensor, rng: &mut dyn RngCore) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// EiV prediction with the total uncertainty.
pub struct EivInterval<'a> {
    pub model: &'a TrainedModel,
    pub config: PredictConfig,
}

impl IntervalPredictor for EivInterval<'_> {
    fn predict_interval(&self, x: &Tensor, rng: &mut dyn RngCore) -> Result<(Vec<f64>, Vec<f64>)> {
        let r = predict_eiv_with_rng(self.model, x, &self.config, rng)?;
        Ok((r.m.into_data(), r.u_total.into_data()))
    }
}

/// Non-EiV prediction with the epistemic uncertainty.
pub struct NonEivInterval<'a> {
    pub model: &'a TrainedModel,
    pub config: PredictConfig,
}

impl IntervalPredictor for NonEivInterval<'_> {
    fn predict_interval(&self, x: &Tensor, rng: &mut dyn RngCore) -> Result<(Vec<f64>, Vec<f64>)> {
        let r = predict_non_eiv_with_rng(self.model, x, &self.config, rng)?;
        Ok((r.m.into_data(), r.u_epistemic.into_data()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    /// Fraction of covered resamples for each grid point.
    pub per_zeta: Vec<f64>,
    pub overall: f64,
    pub n_resamples: usize,
    pub multiplier: f64,
}

fn covered(m: f64, u: f64, truth: f64, multiplier: f64) -> bool {
    (m - truth).abs() <= multiplier * u
}

/// For every row of `zeta`, draws `n_resamples` inputs `x ~ N(zeta, sigma_x^2)`
/// and records how often `|m(x) - g(zeta)| <= multiplier * u(x)`.
pub fn coverage_under_resampling(
    predictor: &dyn IntervalPredictor,
    zeta: &Tensor,
    g: &[f64],
    sigma_x: f64,
    n_resamples: usize,
    multiplier: f64,
    rng: &mut dyn RngCore,
) -> Result<CoverageReport> {
    if zeta.rows() != g.len() {
        return Err(EivError::shape("coverage truth", &[zeta.rows()], &[g.len()]));
    }
    if !(sigma_x >= 0.0) {
        return Err(EivError::Domain(format!("sigma_x {sigma_x} must be >= 0")));
    }
    if n_resamples == 0 || g.is_empty() {
        return Err(EivError::Usage("coverage needs grid points and resamples".into()));
    }
    let n_x = zeta.cols();
    let mut per_zeta = Vec::with_capacity(g.len());
    for (i, &truth) in g.iter().enumerate() {
        let z = zeta.row(i);
        let mut data = Vec::with_capacity(n_resamples * n_x);
        for _ in 0..n_resamples {
            for &zj in z {
                let e: f64 = rng.sample(StandardNormal);
                data.push(zj + sigma_x * e);
            }
        }
        let x = Tensor::from_parts(vec![n_resamples, n_x], data);
        let (m, u) = predictor.predict_interval(&x, rng)?;
        let hits = m.iter().zip(&u).filter(|(&m, &u)| covered(m, u, truth, multiplier)).count();
        per_zeta.push(hits as f64 / n_resamples as f64);
    }
    let overall = per_zeta.iter().sum::<f64>() / per_zeta.len() as f64;
    Ok(CoverageReport {
        per_zeta,
        overall,
        n_resamples,
        multiplier,
    })
}

/// Coverage of `g` on fixed input/truth pairs, such as a held-out test set.
pub fn coverage_of_points(
    predictor: &dyn IntervalPredictor,
    x: &Tensor,
    g: &[f64],
    multiplier: f64,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if x.rows() != g.len() || g.is_empty() {
        return Err(EivError::shape("coverage truth", &[x.rows()], &[g.len()]));
    }
    let (m, u) = predictor.predict_interval(x, rng)?;
    coverage_fraction(&m, &u, g, multiplier)
}

/// Fraction of rows with `|m - g| <= multiplier * u`.
pub fn coverage_fraction(m: &[f64], u: &[f64], g: &[f64], multiplier: f64) -> Result<f64> {
    if m.len() != g.len() || u.len() != g.len() || g.is_empty() {
        return Err(EivError::shape("coverage", &[g.len()], &[m.len(), u.len()]));
    }
    let hits = m
        .iter()
        .zip(u)
        .zip(g)
        .filter(|((&m, &u), &t)| covered(m, u, t, multiplier))
        .count();
    Ok(hits as f64 / g.len() as f64)
}

/// `n` evenly spaced points from `lo` to `hi` inclusive, as an `[n, 1]` grid.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Tensor {
    let data = match n {
        0 => vec![],
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    };
    Tensor::from_parts(vec![n, 1], data)
}

/// Mean and standard error of one metric over runs.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricAggregate {
    pub name: String,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(runs)`; `None` for a single run.
    pub stderr: Option<f64>,
}

impl MetricAggregate {
    pub fn from_values(name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(EivError::Usage("aggregate of no runs".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = (values.len() > 1).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        });
        Ok(MetricAggregate {
            name: name.into(),
            values,
            mean,
            stderr,
        })
    }

    pub fn stderr_or_nan(&self) -> f64 {
        self.stderr.unwrap_or(f64::NAN)
    }
}

/// Named metrics of one run, in a fixed order.
pub type RunMetrics = Vec<(String, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct RunAggregate {
    pub seeds: Vec<u64>,
    pub metrics: Vec<MetricAggregate>,
}

impl RunAggregate {
    pub fn from_runs(seeds: Vec<u64>, runs: &[RunMetrics]) -> Result<Self> {
        let first = runs.first().ok_or_else(|| EivError::Usage("aggregate of no runs".into()))?;
        let mut metrics = Vec::with_capacity(first.len());
        for (j, (name, _)) in first.iter().enumerate() {
            let mut values = Vec::with_capacity(runs.len());
            for r in runs {
                match r.get(j) {
                    Some((n, v)) if n == name => values.push(*v),
                    _ => return Err(EivError::Usage(format!("runs disagree on metric {name}"))),
                }
            }
            metrics.push(MetricAggregate::from_values(name.clone(), values)?);
        }
        Ok(RunAggregate { seeds, metrics })
    }

    pub fn get(&self, name: &str) -> Option<&MetricAggregate> {
        self.metrics.iter().find(|m| m.name == name)
    }

    /// `metric,mean,stderr,runs` with `NA` for an undefined standard error.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,mean,stderr,runs\n");
        for m in &self.metrics {
            let se = m.stderr.map_or_else(|| "NA".to_string(), |s| s.to_string());
            let _ = writeln!(out, "{},{},{},{}", m.name, m.mean, se, m.values.len());
        }
        out
    }
}

/// Runs `run(seed)` for `seed0 .. seed0 + n_runs`, up to `parallel` at a time,
/// and aggregates the metrics. The first failing seed aborts the aggregate.
pub fn repeated_runs<F>(seed0: u64, n_runs: usize, parallel: usize, run: F) -> Result<RunAggregate>
where
    F: Fn(u64) -> Result<RunMetrics> + Sync,
{
    let seeds: Vec<u64> = (0..n_runs as u64).map(|i| seed0 + i).collect();
    let results = map_seeds(&seeds, parallel, &run)?;
    RunAggregate::from_runs(seeds, &results)
}

/// Applies `f` to every seed, preserving order; with `parallel > 1` up to that
/// many seeds run concurrently on scoped threads.
pub fn map_seeds<T, F>(seeds: &[u64], parallel: usize, f: &F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    if seeds.is_empty() {
        return Err(EivError::Usage("need at least one run".into()));
    }
    let wrap = |seed: u64, r: Result<T>| {
        r.map_err(|e| EivError::RunFailed {
            seed,
            source: Box::new(e),
        })
    };
    let mut out = Vec::with_capacity(seeds.len());
    if parallel <= 1 {
        for &s in seeds {
            out.push(wrap(s, f(s))?);
        }
        return Ok(out);
    }
    for window in seeds.chunks(parallel) {
        let results: Vec<Result<T>> = std::thread::scope(|scope| {
            let handles: Vec<_> = window.iter().map(|&s| scope.spawn(move || f(s))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(EivError::Usage("run panicked".into()))))
                .collect()
        });
        for (&s, r) in window.iter().zip(results) {
            out.push(wrap(s, r)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaYComparison {
    /// Deming factor and final `sigma_y` over runs, in the given group order.
    pub rows: Vec<(f64, MetricAggregate)>,
    pub strictly_decreasing: bool,
}

/// Final learned `sigma_y` per Deming-factor group.
pub fn sigma_y_comparison(groups: &[(f64, Vec<TrainRecord>)]) -> Result<SigmaYComparison> {
    if groups.len() < 2 {
        return Err(EivError::Usage("comparison needs at least two groups".into()));
    }
    let mut rows = Vec::with_capacity(groups.len());
    for (delta, records) in groups {
        let finals = records
            .iter()
            .map(|r| r.final_sigma_y().ok_or_else(|| EivError::Usage("empty training record".into())))
            .collect::<Result<Vec<_>>>()?;
        rows.push((*delta, MetricAggregate::from_values(format!("final_sigma_y[{delta}]"), finals)?));
    }
    let strictly_decreasing = rows.windows(2).all(|w| w[1].1.mean < w[0].1.mean);
    Ok(SigmaYComparison {
        rows,
        strictly_decreasing,
    })
}

/// `epoch` then mean and stderr of `sigma_y` for each labelled group.
pub fn sigma_y_trajectory_csv(groups: &[(String, Vec<TrainRecord>)]) -> Result<String> {
    let mut out = String::from("epoch");
    for (label, _) in groups {
        let _ = write!(out, ",{label}_mean,{label}_stderr");
    }
    out.push('\n');
    let n_epochs = groups
        .iter()
        .flat_map(|(_, rs)| rs.iter().map(|r| r.sigma_y.len()))
        .min()
        .unwrap_or(0);
    for e in 0..n_epochs {
        let _ = write!(out, "{e}");
        for (label, records) in groups {
            let agg = MetricAggregate::from_values(label.clone(), records.iter().map(|r| r.sigma_y[e]).collect())?;
            let se = agg.stderr.map_or_else(|| "NA".to_string(), |s| s.to_string());
            let _ = write!(out, ",{},{}", agg.mean, se);
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSweep {
    pub rows: Vec<(f64, MetricAggregate)>,
    pub baseline: MetricAggregate,
}

impl DeltaSweep {
    /// `delta,mean_rmse,stderr` rows, then the non-EiV band.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta,mean_rmse,stderr\n");
        let se = |m: &MetricAggregate| m.stderr.map_or_else(|| "NA".to_string(), |s| s.to_string());
        for (d, m) in &self.rows {
            let _ = writeln!(out, "{d},{},{}", m.mean, se(m));
        }
        let _ = writeln!(out, "non_eiv,{},{}", self.baseline.mean, se(&self.baseline));
        out
    }

    /// Whether mean RMSE increases strictly from the first delta above `knee` onwards.
    pub fn increasing_beyond(&self, knee: f64) -> bool {
        let tail: Vec<f64> = self.rows.iter().filter(|(d, _)| *d >= knee).map(|(_, m)| m.mean).collect();
        tail.len() >= 2 && tail.windows(2).all(|w| w[1] > w[0])
    }
}

/// Test RMSE for every Deming factor and for the non-EiV baseline, each over
/// seeds `seed0 .. seed0 + n_runs`.
pub fn delta_sweep<F, B>(
    deltas: &[f64],
    seed0: u64,
    n_runs: usize,
    parallel: usize,
    eiv_rmse: F,
    non_eiv_rmse: B,
) -> Result<DeltaSweep>
where
    F: Fn(f64, u64) -> Result<f64> + Sync,
    B: Fn(u64) -> Result<f64> + Sync,
{
    if let Some(d) = deltas.iter().find(|d| !(**d >= 0.0)) {
        return Err(EivError::Domain(format!("Deming factor {d} must be >= 0")));
    }
    let seeds: Vec<u64> = (0..n_runs as u64).map(|i| seed0 + i).collect();
    let mut rows = Vec::with_capacity(deltas.len());
    for &d in deltas {
        let values = map_seeds(&seeds, parallel, &|s| eiv_rmse(d, s))?;
        rows.push((d, MetricAggregate::from_values(format!("rmse[{d}]"), values)?));
    }
    let base = map_seeds(&seeds, parallel, &non_eiv_rmse)?;
    Ok(DeltaSweep {
        rows,
        baseline: MetricAggregate::from_values("rmse[non_eiv]", base)?,
    })
}

/// Prepends `# config_hash=...` and `# seeds=...` comment lines to a CSV body.
pub fn with_provenance(config_hash: &str, seeds: &[u64], body: &str) -> String {
    let seeds = seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
    format!("# config_hash={config_hash}\n# seeds={seeds}\n{body}")
}

/// `zeta,mean,stderr` over runs of coverage reports on a shared grid.
pub fn coverage_curve_csv(zeta: &Tensor, reports: &[CoverageReport]) -> Result<String> {
    let mut out = String::from("zeta,mean,stderr\n");
    for i in 0..zeta.rows() {
        let values = reports
            .iter()
            .map(|r| r.per_zeta.get(i).copied().ok_or_else(|| EivError::shape("coverage grid", &[zeta.rows()], &[r.per_zeta.len()])))
            .collect::<Result<Vec<_>>>()?;
        let agg = MetricAggregate::from_values("coverage", values)?;
        let se = agg.stderr.map_or_else(|| "NA".to_string(), |s| s.to_string());
        let _ = writeln!(out, "{},{},{}", zeta.row(i)[0], agg.mean, se);
    }
    Ok(out)
}
