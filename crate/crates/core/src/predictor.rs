//! Predictions and uncertainties from a trained model.
//!
//! For each input a `K x L` grid of network outputs is evaluated: `K` dropout
//! draws shared across `L` latent-input draws. The prediction is the grid mean,
//! the reported uncertainty the sample standard deviation of the grid, and the
//! split into epistemic and aleatoric parts uses grouped population moments so
//! that the law of total variance holds exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::NormalizationStats;
use crate::error::{EivError, Result};
use crate::loss::{standard_normal, zeta_from_eps};
use crate::nn::{mlp_evaluate, sample_dropout_masks, DropoutMaskSet};
use crate::tensor::Tensor;
use crate::trainer::TrainedModel;

/// Rows pushed through the network at once.
const EVAL_ROWS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    /// Dropout draws.
    #[serde(default = "default_draws")]
    pub k: usize,
    /// Latent-input draws.
    #[serde(default = "default_draws")]
    pub l: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub retain_grid: bool,
}

fn default_draws() -> usize {
    100
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            k: 100,
            l: 100,
            seed: 0,
            retain_grid: false,
        }
    }
}

impl PredictConfig {
    pub fn new(k: usize, l: usize, seed: u64) -> Self {
        PredictConfig {
            k,
            l,
            seed,
            retain_grid: false,
        }
    }
}

/// Network outputs for one input, laid out `[k][l][d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    pub k: usize,
    pub l: usize,
    pub n_y: usize,
    pub values: Vec<f64>,
}

impl SampleGrid {
    pub fn new(k: usize, l: usize, n_y: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != k * l * n_y || k * l * n_y == 0 {
            return Err(EivError::shape("sample grid", &[k, l, n_y], &[values.len()]));
        }
        Ok(SampleGrid { k, l, n_y, values })
    }

    pub fn at(&self, k: usize, l: usize, d: usize) -> f64 {
        self.values[(k * self.l + l) * self.n_y + d]
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = (self.k * self.l) as f64;
        let mut m = vec![0.0; self.n_y];
        for c in self.values.chunks(self.n_y) {
            m.iter_mut().zip(c).for_each(|(a, v)| *a += v);
        }
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// Standard deviation over all `K L` values with divisor `K L - 1`.
    pub fn sample_std(&self) -> Vec<f64> {
        let m = self.mean();
        let n = self.k * self.l;
        let mut ss = vec![0.0; self.n_y];
        for c in self.values.chunks(self.n_y) {
            for ((s, v), mu) in ss.iter_mut().zip(c).zip(&m) {
                *s += (v - mu) * (v - mu);
            }
        }
        ss.into_iter().map(|s| (s / (n - 1) as f64).sqrt()).collect()
    }
}

/// Epistemic, aleatoric and total standard deviations per output dimension,
/// all with population divisors.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub epistemic: Vec<f64>,
    pub aleatoric: Vec<f64>,
    pub total: Vec<f64>,
}

fn decompose_unchecked(grid: &SampleGrid) -> Decomposition {
    let (kk, ll, dd) = (grid.k, grid.l, grid.n_y);
    let mut epistemic = vec![0.0; dd];
    let mut aleatoric = vec![0.0; dd];
    let mut total = vec![0.0; dd];
    let mut col_mean = vec![0.0; ll];
    for d in 0..dd {
        let mut within = 0.0;
        for (l, cm) in col_mean.iter_mut().enumerate() {
            let mu = (0..kk).map(|k| grid.at(k, l, d)).sum::<f64>() / kk as f64;
            within += (0..kk).map(|k| (grid.at(k, l, d) - mu).powi(2)).sum::<f64>() / kk as f64;
            *cm = mu;
        }
        let grand = col_mean.iter().sum::<f64>() / ll as f64;
        let between = col_mean.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / ll as f64;
        let tot = (0..kk)
            .flat_map(|k| (0..ll).map(move |l| (k, l)))
            .map(|(k, l)| (grid.at(k, l, d) - grand).powi(2))
            .sum::<f64>()
            / (kk * ll) as f64;
        epistemic[d] = (within / ll as f64).sqrt();
        aleatoric[d] = between.sqrt();
        total[d] = tot.sqrt();
    }
    Decomposition {
        epistemic,
        aleatoric,
        total,
    }
}

/// `epistemic^2 = mean_l Var_k`, `aleatoric^2 = Var_l mean_k`, `total^2 = Var`
/// over the whole grid.
pub fn decompose_uncertainty(grid: &SampleGrid) -> Result<Decomposition> {
    if grid.k < 2 || grid.l < 2 {
        return Err(EivError::Usage(format!(
            "decomposition needs K >= 2 and L >= 2, got K = {}, L = {}",
            grid.k, grid.l
        )));
    }
    Ok(decompose_unchecked(grid))
}

/// Per-input results; every tensor is `[N, n_y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub m: Tensor,
    /// Sample standard deviation of the grid (divisor `K L - 1`).
    pub u_total: Tensor,
    pub u_epistemic: Tensor,
    pub u_aleatoric: Tensor,
    /// `u_total^2 + sigma_y^2`.
    pub var_posterior_predictive: Tensor,
    pub grids: Option<Vec<SampleGrid>>,
}

impl PredictionResult {
    pub fn len(&self) -> usize {
        self.m.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Expresses predictions in raw label units.
    pub fn denormalized(&self, stats: &NormalizationStats) -> PredictionResult {
        let n_y = self.m.cols();
        let scale_by = |t: &Tensor, power: i32| {
            let data = t
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * stats.y_std[i % n_y].powi(power))
                .collect();
            Tensor::from_parts(t.shape().to_vec(), data)
        };
        PredictionResult {
            m: stats.denormalize_y(&self.m),
            u_total: scale_by(&self.u_total, 1),
            u_epistemic: scale_by(&self.u_epistemic, 1),
            u_aleatoric: scale_by(&self.u_aleatoric, 1),
            var_posterior_predictive: scale_by(&self.var_posterior_predictive, 2),
            grids: None,
        }
    }

    /// One row per input: input columns, `m`, `u_total`, `u_epistemic`,
    /// `u_aleatoric`, `u_posterior_predictive`.
    pub fn to_csv(&self, inputs: &Tensor, input_names: &[String]) -> String {
        let n_y = self.m.cols();
        let suffix = |stem: &str, d: usize| {
            if n_y == 1 {
                stem.to_string()
            } else {
                format!("{stem}_{}", d + 1)
            }
        };
        let mut header: Vec<String> = input_names.to_vec();
        for stem in ["m", "u_total", "u_epistemic", "u_aleatoric", "u_posterior_predictive"] {
            header.extend((0..n_y).map(|d| suffix(stem, d)));
        }
        let mut out = header.join(",");
        out.push('\n');
        for i in 0..self.len() {
            let mut fields: Vec<String> = inputs.row(i).iter().map(f64::to_string).collect();
            for t in [&self.m, &self.u_total, &self.u_epistemic, &self.u_aleatoric] {
                fields.extend(t.row(i).iter().map(f64::to_string));
            }
            fields.extend(self.var_posterior_predictive.row(i).iter().map(|v| v.sqrt().to_string()));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

fn check_inputs(model: &TrainedModel, x: &Tensor) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != model.net.input_width() {
        return Err(EivError::shape(
            "prediction inputs",
            &[x.rows(), model.net.input_width()],
            x.shape(),
        ));
    }
    Ok(())
}

/// Network outputs on `rows_per_point` rows per input for each of the `K` draws,
/// arranged as one grid per input. `rows` is `[N * rows_per_point, n_x]`, grouped by input.
fn evaluate_grids(
    model: &TrainedModel,
    rows: &Tensor,
    masks: &DropoutMaskSet,
    n_points: usize,
    rows_per_point: usize,
) -> Result<Vec<SampleGrid>> {
    let (kk, n_y, n_x) = (masks.count(), model.net.output_width(), rows.cols());
    let mut grids: Vec<Vec<f64>> = vec![vec![0.0; kk * rows_per_point * n_y]; n_points];
    let chunk_points = (EVAL_ROWS / rows_per_point).max(1);
    let mut start = 0;
    while start < n_points {
        let end = (start + chunk_points).min(n_points);
        let r0 = start * rows_per_point;
        let r1 = end * rows_per_point;
        let chunk = Tensor::from_parts(vec![r1 - r0, n_x], rows.data()[r0 * n_x..r1 * n_x].to_vec());
        for k in 0..kk {
            let out = mlp_evaluate(&model.net, &model.params, &chunk, &masks.sample(k).row_masks(r1 - r0))?;
            for (p, grid) in grids[start..end].iter_mut().enumerate() {
                let src = &out.data()[p * rows_per_point * n_y..(p + 1) * rows_per_point * n_y];
                grid[k * rows_per_point * n_y..(k + 1) * rows_per_point * n_y].copy_from_slice(src);
            }
        }
        start = end;
    }
    grids
        .into_iter()
        .map(|v| SampleGrid::new(kk, rows_per_point, n_y, v))
        .collect()
}

/// Draws the `K` masks and then the `L` latent inputs per row, and evaluates the grids.
fn eiv_grids<R: Rng + ?Sized>(
    model: &TrainedModel,
    x: &Tensor,
    config: &PredictConfig,
    rng: &mut R,
) -> Result<Vec<SampleGrid>> {
    check_inputs(model, x)?;
    if config.k == 0 || config.l == 0 {
        return Err(EivError::Usage("K and L must be >= 1".into()));
    }
    let masks = sample_dropout_masks(rng, &model.net, config.k)?;
    let eps = standard_normal(rng, x.rows() * config.l, x.cols());
    let zeta = zeta_from_eps(x, &eps, config.l, model.noise.sigma_x(), &model.prior.zeta);
    evaluate_grids(model, &zeta, &masks, x.rows(), config.l)
}

fn assemble(grids: Vec<SampleGrid>, n_y: usize, sigma_y: f64, retain: bool, replicate: Option<usize>) -> PredictionResult {
    let n = grids.len();
    let mut m = Vec::with_capacity(n * n_y);
    let mut ut = Vec::with_capacity(n * n_y);
    let mut ue = Vec::with_capacity(n * n_y);
    let mut ua = Vec::with_capacity(n * n_y);
    let mut vp = Vec::with_capacity(n * n_y);
    for g in &grids {
        let d = decompose_unchecked(g);
        let (mean, sample) = match replicate {
            // A grid of K outputs standing for K x L identical columns.
            Some(l) => {
                let n_all = (g.k * l) as f64;
                let sample: Vec<f64> = d
                    .total
                    .iter()
                    .map(|t| (t * t * n_all / (n_all - 1.0)).sqrt())
                    .collect();
                (g.mean(), sample)
            }
            None => (g.mean(), g.sample_std()),
        };
        for j in 0..n_y {
            m.push(mean[j]);
            ut.push(sample[j]);
            ue.push(d.epistemic[j]);
            ua.push(d.aleatoric[j]);
            vp.push(sample[j] * sample[j] + sigma_y * sigma_y);
        }
    }
    let t = |v: Vec<f64>| Tensor::from_parts(vec![n, n_y], v);
    PredictionResult {
        m: t(m),
        u_total: t(ut),
        u_epistemic: t(ue),
        u_aleatoric: t(ua),
        var_posterior_predictive: t(vp),
        grids: retain.then_some(grids),
    }
}

/// EiV prediction for every row of `x` (model units).
pub fn predict_eiv_with_rng<R: Rng + ?Sized>(
    model: &TrainedModel,
    x: &Tensor,
    config: &PredictConfig,
    rng: &mut R,
) -> Result<PredictionResult> {
    if config.k * config.l < 2 {
        return Err(EivError::Usage("uncertainties need K * L >= 2".into()));
    }
    let grids = eiv_grids(model, x, config, rng)?;
    Ok(assemble(grids, model.net.output_width(), model.noise.sigma_y(), config.retain_grid, None))
}

/// Non-EiV prediction: `K` dropout draws on the observed inputs. The statistics
/// are those of the `K x L` grid with `L` identical columns, so `u_aleatoric = 0`,
/// `u_epistemic` is the population standard deviation over the draws, and the
/// result coincides with [`predict_eiv_with_rng`] at zero input noise.
pub fn predict_non_eiv_with_rng<R: Rng + ?Sized>(
    model: &TrainedModel,
    x: &Tensor,
    config: &PredictConfig,
    rng: &mut R,
) -> Result<PredictionResult> {
    check_inputs(model, x)?;
    if config.k < 2 || config.l == 0 {
        return Err(EivError::Usage("non-EiV uncertainties need K >= 2".into()));
    }
    let masks = sample_dropout_masks(rng, &model.net, config.k)?;
    let grids = evaluate_grids(model, x, &masks, x.rows(), 1)?;
    Ok(assemble(
        grids,
        model.net.output_width(),
        model.noise.sigma_y(),
        config.retain_grid,
        Some(config.l),
    ))
}

/// [`predict_eiv_with_rng`] seeded from `config.seed`.
pub fn predict_eiv(model: &TrainedModel, x: &Tensor, config: &PredictConfig) -> Result<PredictionResult> {
    predict_eiv_with_rng(model, x, config, &mut ChaCha8Rng::seed_from_u64(config.seed))
}

/// [`predict_non_eiv_with_rng`] seeded from `config.seed`.
pub fn predict_non_eiv(model: &TrainedModel, x: &Tensor, config: &PredictConfig) -> Result<PredictionResult> {
    predict_non_eiv_with_rng(model, x, config, &mut ChaCha8Rng::seed_from_u64(config.seed))
}

/// Labels `y* ~ N(f_theta(zeta*), sigma_y^2)`, `per_cell` per grid value.
/// Returns one `[K * L * per_cell, n_y]` tensor per input row.
pub fn posterior_predictive_samples<R: Rng + ?Sized>(
    model: &TrainedModel,
    x: &Tensor,
    config: &PredictConfig,
    per_cell: usize,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    if per_cell == 0 {
        return Err(EivError::Usage("need at least one label per grid value".into()));
    }
    let grids = eiv_grids(model, x, config, rng)?;
    let sigma_y = model.noise.sigma_y();
    let n_y = model.net.output_width();
    Ok(grids
        .into_iter()
        .map(|g| {
            let mut out = Vec::with_capacity(g.values.len() * per_cell);
            for cell in g.values.chunks(n_y) {
                for _ in 0..per_cell {
                    for &f in cell {
                        let e: f64 = rng.sample(StandardNormal);
                        out.push(f + sigma_y * e);
                    }
                }
            }
            Tensor::from_parts(vec![out.len() / n_y, n_y], out)
        })
        .collect())
}
