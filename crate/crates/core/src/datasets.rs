//! Synthetic generators with known ground truth, tabular ingestion,
//! normalization and train/test splitting.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EivError, Result};
use crate::loss::Batch;
use crate::tensor::Tensor;

/// Noise-free inputs and regression values behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub zeta: Tensor,
    pub g: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, n_x]`
    pub x: Tensor,
    /// `[N, 1]`
    pub y: Tensor,
    pub truth: Option<Truth>,
    pub input_names: Vec<String>,
    pub label_name: String,
    /// Inputs that were log-transformed when the file was read.
    pub log_inputs: Vec<String>,
    /// Generator and seed, or source file and recipe.
    pub provenance: String,
    /// Set when `x` and `y` are expressed in normalized units.
    pub normalization: Option<NormalizationStats>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Tensor, truth: Option<Truth>, provenance: impl Into<String>) -> Result<Self> {
        if x.shape().len() != 2 || y.shape().len() != 2 {
            return Err(EivError::Usage("dataset inputs and labels must be matrices".into()));
        }
        if x.rows() != y.rows() {
            return Err(EivError::shape("dataset rows", &[x.rows()], &[y.rows()]));
        }
        if let Some(t) = &truth {
            if t.zeta.shape() != x.shape() || t.g.shape() != y.shape() {
                return Err(EivError::shape("ground truth", x.shape(), t.zeta.shape()));
            }
        }
        let input_names = default_names("x", x.cols());
        Ok(Dataset {
            x,
            y,
            truth,
            input_names,
            label_name: "y".into(),
            log_inputs: Vec::new(),
            provenance: provenance.into(),
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_inputs(&self) -> usize {
        self.x.cols()
    }

    /// Minibatch of the given rows.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            x: gather_rows(&self.x, indices),
            y: gather_rows(&self.y, indices),
            n_total: self.len(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: gather_rows(&self.x, indices),
            y: gather_rows(&self.y, indices),
            truth: self.truth.as_ref().map(|t| Truth {
                zeta: gather_rows(&t.zeta, indices),
                g: gather_rows(&t.g, indices),
            }),
            input_names: self.input_names.clone(),
            label_name: self.label_name.clone(),
            log_inputs: self.log_inputs.clone(),
            provenance: self.provenance.clone(),
            normalization: self.normalization.clone(),
        }
    }

    /// CSV with truth columns (`zeta_true`, `g_true`) when present, then inputs and label.
    pub fn to_csv(&self) -> String {
        let mut header: Vec<String> = Vec::new();
        if self.truth.is_some() {
            header.extend(truth_names(self.n_inputs()));
        }
        header.extend(self.input_names.iter().cloned());
        if self.truth.is_some() {
            header.push("g_true".into());
        }
        header.push(self.label_name.clone());
        let mut out = header.join(",");
        out.push('\n');
        for i in 0..self.len() {
            let mut fields: Vec<f64> = Vec::new();
            if let Some(t) = &self.truth {
                fields.extend_from_slice(t.zeta.row(i));
            }
            fields.extend_from_slice(self.x.row(i));
            if let Some(t) = &self.truth {
                fields.extend_from_slice(t.g.row(i));
            }
            fields.extend_from_slice(self.y.row(i));
            let line = fields.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
            let _ = writeln!(out, "{line}");
        }
        out
    }

    /// Reads a file written by [`Dataset::to_csv`]: columns `x`/`x_i`, `y`,
    /// and optionally `zeta_true`/`zeta_i_true` and `g_true`.
    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let table = read_table(path, &Delimiter::Char(','), true)?;
        let find = |pred: &dyn Fn(&str) -> bool| -> Vec<usize> {
            table.names.iter().enumerate().filter(|(_, n)| pred(n)).map(|(i, _)| i).collect()
        };
        let xs = find(&|n| n == "x" || (n.starts_with("x_") && n[2..].parse::<usize>().is_ok()));
        let zs = find(&|n| truth_names(xs.len()).iter().any(|t| t == n));
        let ys = find(&|n| n == "y");
        let gs = find(&|n| n == "g_true");
        let missing = |what: &str| EivError::Parse {
            path: path.display().to_string(),
            row: 1,
            column: what.into(),
            message: "required column not found in header".into(),
        };
        if xs.is_empty() {
            return Err(missing("x"));
        }
        if ys.len() != 1 {
            return Err(missing("y"));
        }
        let x = table.columns_tensor(&xs);
        let y = table.columns_tensor(&ys);
        let truth = if !zs.is_empty() && gs.len() == 1 {
            Some(Truth {
                zeta: table.columns_tensor(&zs),
                g: table.columns_tensor(&gs),
            })
        } else {
            None
        };
        let mut ds = Dataset::new(x, y, truth, format!("file:{}", path.display()))?;
        ds.input_names = xs.iter().map(|&i| table.names[i].clone()).collect();
        Ok(ds)
    }
}

fn default_names(stem: &str, n: usize) -> Vec<String> {
    if n == 1 {
        vec![stem.to_string()]
    } else {
        (1..=n).map(|i| format!("{stem}_{i}")).collect()
    }
}

fn truth_names(n: usize) -> Vec<String> {
    default_names("zeta", n).into_iter().map(|s| s + "_true").collect()
}

fn gather_rows(t: &Tensor, indices: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(indices.len() * c);
    for &i in indices {
        data.extend_from_slice(t.row(i));
    }
    Tensor::from_parts(vec![indices.len(), c], data)
}

/// Per-column affine standardization of inputs and label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

fn column_moments(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (t.rows(), t.cols());
    let mut mean = vec![0.0; c];
    for r in 0..n {
        mean.iter_mut().zip(t.row(r)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for r in 0..n {
        for ((s, v), m) in var.iter_mut().zip(t.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
    (mean, std)
}

fn affine(t: &Tensor, shift: &[f64], scale: &[f64], forward: bool) -> Tensor {
    let c = t.cols();
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let j = i % c;
            if forward {
                (v - shift[j]) / scale[j]
            } else {
                v * scale[j] + shift[j]
            }
        })
        .collect();
    Tensor::from_parts(t.shape().to_vec(), data)
}

impl NormalizationStats {
    /// Column means and (population) standard deviations; constant columns are rejected.
    pub fn fit(x: &Tensor, y: &Tensor) -> Result<Self> {
        let (x_mean, x_std) = column_moments(x);
        let (y_mean, y_std) = column_moments(y);
        if let Some(j) = x_std.iter().chain(&y_std).position(|&s| !(s > 0.0)) {
            return Err(EivError::Domain(format!(
                "column {j} has zero variance and cannot be normalized"
            )));
        }
        Ok(NormalizationStats {
            x_mean,
            x_std,
            y_mean,
            y_std,
        })
    }

    pub fn identity(n_x: usize, n_y: usize) -> Self {
        NormalizationStats {
            x_mean: vec![0.0; n_x],
            x_std: vec![1.0; n_x],
            y_mean: vec![0.0; n_y],
            y_std: vec![1.0; n_y],
        }
    }

    pub fn normalize_x(&self, x: &Tensor) -> Tensor {
        affine(x, &self.x_mean, &self.x_std, true)
    }

    pub fn normalize_y(&self, y: &Tensor) -> Tensor {
        affine(y, &self.y_mean, &self.y_std, true)
    }

    pub fn denormalize_x(&self, x: &Tensor) -> Tensor {
        affine(x, &self.x_mean, &self.x_std, false)
    }

    pub fn denormalize_y(&self, y: &Tensor) -> Tensor {
        affine(y, &self.y_mean, &self.y_std, false)
    }

    /// Expresses a raw dataset in normalized units.
    pub fn apply(&self, raw: &Dataset) -> Result<Dataset> {
        if raw.normalization.is_some() {
            return Err(EivError::Usage("dataset is already normalized".into()));
        }
        if raw.n_inputs() != self.x_mean.len() || raw.y.cols() != self.y_mean.len() {
            return Err(EivError::shape(
                "normalization",
                &[self.x_mean.len(), self.y_mean.len()],
                &[raw.n_inputs(), raw.y.cols()],
            ));
        }
        let mut ds = raw.clone();
        ds.x = self.normalize_x(&raw.x);
        ds.y = self.normalize_y(&raw.y);
        ds.truth = raw.truth.as_ref().map(|t| Truth {
            zeta: self.normalize_x(&t.zeta),
            g: self.normalize_y(&t.g),
        });
        ds.normalization = Some(self.clone());
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_points: usize,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub seed: u64,
    /// Input dimension of the modulated polynomial.
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default)]
    pub coefficient_seed: u64,
}

fn default_dim() -> usize {
    5
}

fn default_degree() -> usize {
    3
}

impl GeneratorConfig {
    /// 300 points, `sigma_x = 0.07`, `sigma_y = 0.30`.
    pub fn mexican_hat(seed: u64) -> Self {
        GeneratorConfig {
            n_points: 300,
            sigma_x: 0.07,
            sigma_y: 0.30,
            seed,
            dim: 1,
            degree: default_degree(),
            coefficient_seed: 0,
        }
    }

    /// 10^5 points in 5 dimensions, cubic polynomial.
    pub fn multinomial(seed: u64, coefficient_seed: u64) -> Self {
        GeneratorConfig {
            n_points: 100_000,
            sigma_x: 0.07,
            sigma_y: 0.30,
            seed,
            dim: default_dim(),
            degree: default_degree(),
            coefficient_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_x >= 0.0) || !(self.sigma_y >= 0.0) {
            return Err(EivError::Config("generator noise scales must be >= 0".into()));
        }
        if self.n_points == 0 || self.dim == 0 {
            return Err(EivError::Config("generator needs n_points >= 1 and dim >= 1".into()));
        }
        Ok(())
    }
}

/// `g(zeta) = (1 - (4 zeta)^2) exp(-(4 zeta)^2 / 2)`
pub fn mexican_hat(zeta: f64) -> f64 {
    let u = 4.0 * zeta;
    (1.0 - u * u) * (-0.5 * u * u).exp()
}

fn generate<R, G>(cfg: &GeneratorConfig, rng: &mut R, g: G, provenance: String) -> Result<Dataset>
where
    R: Rng + ?Sized,
    G: Fn(&[f64]) -> f64,
{
    cfg.validate()?;
    let (n, d) = (cfg.n_points, cfg.dim);
    let mut zeta = Vec::with_capacity(n * d);
    let mut x = Vec::with_capacity(n * d);
    let mut gv = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for &zi in &z {
            let e: f64 = rng.sample(StandardNormal);
            x.push(zi + cfg.sigma_x * e);
        }
        let gi = g(&z);
        let e: f64 = rng.sample(StandardNormal);
        y.push(gi + cfg.sigma_y * e);
        gv.push(gi);
        zeta.extend(z);
    }
    let truth = Truth {
        zeta: Tensor::from_parts(vec![n, d], zeta),
        g: Tensor::from_parts(vec![n, 1], gv),
    };
    Dataset::new(
        Tensor::from_parts(vec![n, d], x),
        Tensor::from_parts(vec![n, 1], y),
        Some(truth),
        provenance,
    )
}

/// `zeta ~ U(-1, 1)`, `x = zeta + N(0, sigma_x^2)`, `y = g(zeta) + N(0, sigma_y^2)`.
/// Random numbers are consumed point by point in that order.
pub fn gen_mexican_hat(cfg: &GeneratorConfig) -> Result<Dataset> {
    if cfg.dim != 1 {
        return Err(EivError::Config("the Mexican hat is one-dimensional".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    generate(
        cfg,
        &mut rng,
        |z| mexican_hat(z[0]),
        format!(
            "mexican_hat n={} sigma_x={} sigma_y={} seed={}",
            cfg.n_points, cfg.sigma_x, cfg.sigma_y, cfg.seed
        ),
    )
}

/// Polynomial over `R^dim` with one coefficient per monomial of total degree `<= degree`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    dim: usize,
    /// Exponent vector and coefficient per monomial.
    terms: Vec<(Vec<u32>, f64)>,
}

fn monomials(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    fn rec(dim: usize, left: usize, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == dim {
            out.push(prefix.clone());
            return;
        }
        for e in 0..=left {
            prefix.push(e as u32);
            rec(dim, left - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(dim, degree, &mut Vec::new(), &mut out);
    out
}

impl Polynomial {
    /// Coefficients i.i.d. `N(0, 1)` drawn in a fixed monomial order.
    pub fn random<R: Rng + ?Sized>(dim: usize, degree: usize, rng: &mut R) -> Self {
        let terms = monomials(dim, degree)
            .into_iter()
            .map(|e| (e, rng.sample(StandardNormal)))
            .collect();
        Polynomial { dim, terms }
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Polynomial {
            dim,
            terms: vec![(vec![0; dim], c)],
        }
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.dim);
        self.terms
            .iter()
            .map(|(e, c)| c * e.iter().zip(z).map(|(&k, &v)| v.powi(k as i32)).product::<f64>())
            .sum()
    }
}

/// `P(zeta) * exp(-sin(5 |zeta|^2))`
pub fn modulated_polynomial(p: &Polynomial, zeta: &[f64]) -> f64 {
    let r2: f64 = zeta.iter().map(|v| v * v).sum();
    p.eval(zeta) * (-(5.0 * r2).sin()).exp()
}

/// Regression function of the multinomial set: a random polynomial, modulated and
/// rescaled so that `g(zeta)` has unit standard deviation under `zeta ~ U(-1, 1)^dim`.
///
/// The scale is estimated once from a reference sample drawn from the coefficient
/// seed, so every dataset generated with the same coefficient seed shares one `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialTruth {
    pub polynomial: Polynomial,
    pub scale: f64,
}

const REFERENCE_POINTS: usize = 20_000;

impl MultinomialTruth {
    pub fn new(dim: usize, degree: usize, coefficient_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(coefficient_seed);
        let polynomial = Polynomial::random(dim, degree, &mut rng);
        let values: Vec<f64> = (0..REFERENCE_POINTS)
            .map(|_| {
                let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                modulated_polynomial(&polynomial, &z)
            })
            .collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        MultinomialTruth { polynomial, scale }
    }

    pub fn eval(&self, zeta: &[f64]) -> f64 {
        self.scale * modulated_polynomial(&self.polynomial, zeta)
    }
}

/// Modulated random polynomial; sizing and noise as for [`gen_mexican_hat`].
pub fn gen_multinomial(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let truth = MultinomialTruth::new(cfg.dim, cfg.degree, cfg.coefficient_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    generate(
        cfg,
        &mut rng,
        |z| truth.eval(z),
        format!(
            "multinomial n={} dim={} degree={} sigma_x={} sigma_y={} seed={} coefficient_seed={}",
            cfg.n_points, cfg.dim, cfg.degree, cfg.sigma_x, cfg.sigma_y, cfg.seed, cfg.coefficient_seed
        ),
    )
}

/// A column given by header name or by 1-based position in the file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delimiter {
    /// Runs of spaces or tabs.
    Whitespace,
    #[serde(untagged)]
    Char(char),
}

/// Preprocessing for a tabular regression file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularRecipe {
    pub delimiter: Delimiter,
    pub has_header: bool,
    pub label: ColumnRef,
    #[serde(default)]
    pub log_columns: Vec<ColumnRef>,
    #[serde(default)]
    pub drop_columns: Vec<ColumnRef>,
}

impl TabularRecipe {
    /// Red wine quality (semicolon separated, quoted header). Concentration columns
    /// are log-transformed except citric acid, which contains zeros.
    pub fn wine_quality() -> Self {
        let logs = [
            "fixed acidity",
            "volatile acidity",
            "residual sugar",
            "chlorides",
            "free sulfur dioxide",
            "total sulfur dioxide",
            "sulphates",
        ];
        TabularRecipe {
            delimiter: Delimiter::Char(';'),
            has_header: true,
            label: ColumnRef::Name("quality".into()),
            log_columns: logs.iter().map(|s| ColumnRef::Name(s.to_string())).collect(),
            drop_columns: vec![],
        }
    }

    /// Boston housing (`housing.data`, whitespace separated, no header, 14 columns).
    /// The 12th column is removed; the 14th is the label.
    pub fn boston_housing() -> Self {
        TabularRecipe {
            delimiter: Delimiter::Whitespace,
            has_header: false,
            label: ColumnRef::Index(14),
            log_columns: vec![],
            drop_columns: vec![ColumnRef::Index(12)],
        }
    }
}

struct Table {
    names: Vec<String>,
    /// Row-major cells.
    cells: Vec<Vec<f64>>,
}

impl Table {
    fn columns_tensor(&self, cols: &[usize]) -> Tensor {
        let data = self
            .cells
            .iter()
            .flat_map(|r| cols.iter().map(move |&c| r[c]))
            .collect();
        Tensor::from_parts(vec![self.cells.len(), cols.len()], data)
    }

    fn resolve(&self, c: &ColumnRef, path: &Path) -> Result<usize> {
        let err = |m: &str| EivError::Parse {
            path: path.display().to_string(),
            row: 0,
            column: match c {
                ColumnRef::Index(i) => i.to_string(),
                ColumnRef::Name(n) => n.clone(),
            },
            message: m.into(),
        };
        match c {
            ColumnRef::Index(i) if *i >= 1 && *i <= self.names.len() => Ok(i - 1),
            ColumnRef::Index(_) => Err(err("column index out of range")),
            ColumnRef::Name(n) => self
                .names
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| err("no such column")),
        }
    }
}

fn read_table(path: &Path, delimiter: &Delimiter, has_header: bool) -> Result<Table> {
    let text = std::fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut records: Vec<(usize, Vec<String>)> = Vec::new();
    match delimiter {
        Delimiter::Whitespace => {
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                records.push((i + 1, line.split_whitespace().map(str::to_string).collect()));
            }
        }
        Delimiter::Char(c) => {
            if !c.is_ascii() {
                return Err(EivError::Config(format!("delimiter {c:?} is not ASCII")));
            }
            let mut rdr = csv::ReaderBuilder::new()
                .delimiter(*c as u8)
                .has_headers(false)
                .flexible(true)
                .trim(csv::Trim::All)
                .from_reader(text.as_bytes());
            for (i, rec) in rdr.records().enumerate() {
                let rec = rec.map_err(|e| EivError::Parse {
                    path: pstr.clone(),
                    row: i + 1,
                    column: String::new(),
                    message: e.to_string(),
                })?;
                if rec.iter().all(|f| f.is_empty()) {
                    continue;
                }
                records.push((i + 1, rec.iter().map(str::to_string).collect()));
            }
        }
    }
    let mut iter = records.into_iter();
    let names: Vec<String> = if has_header {
        match iter.next() {
            Some((_, h)) => h,
            None => return Err(EivError::Parse { path: pstr, row: 1, column: String::new(), message: "empty file".into() }),
        }
    } else {
        Vec::new()
    };
    let mut cells = Vec::new();
    let mut width = if has_header { Some(names.len()) } else { None };
    for (line, rec) in iter {
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(EivError::Parse {
                path: pstr,
                row: line,
                column: String::new(),
                message: format!("expected {w} fields, found {}", rec.len()),
            });
        }
        let mut row = Vec::with_capacity(w);
        for (j, f) in rec.iter().enumerate() {
            let v: f64 = f.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| EivError::Parse {
                path: pstr.clone(),
                row: line,
                column: names.get(j).cloned().unwrap_or_else(|| (j + 1).to_string()),
                message: format!("not a finite number: {f:?}"),
            })?;
            row.push(v);
        }
        cells.push(row);
    }
    if cells.is_empty() {
        return Err(EivError::Parse { path: pstr, row: 0, column: String::new(), message: "no data rows".into() });
    }
    let names = if has_header {
        names
    } else {
        (1..=width.unwrap_or(0)).map(|i| format!("col{i}")).collect()
    };
    Ok(Table { names, cells })
}

/// Parses the file, log-transforms and drops the listed columns, and returns
/// the result in raw (un-normalized) units.
pub fn load_tabular_raw(path: &Path, recipe: &TabularRecipe) -> Result<Dataset> {
    let mut table = read_table(path, &recipe.delimiter, recipe.has_header)?;
    let label = table.resolve(&recipe.label, path)?;
    let mut logged = Vec::new();
    for c in &recipe.log_columns {
        let j = table.resolve(c, path)?;
        logged.push(j);
        for (r, row) in table.cells.iter_mut().enumerate() {
            if !(row[j] > 0.0) {
                return Err(EivError::Parse {
                    path: path.display().to_string(),
                    row: r + 1 + usize::from(recipe.has_header),
                    column: table.names[j].clone(),
                    message: format!("log transform of non-positive value {}", row[j]),
                });
            }
            row[j] = row[j].ln();
        }
    }
    let dropped = recipe
        .drop_columns
        .iter()
        .map(|c| table.resolve(c, path))
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<usize> = (0..table.names.len())
        .filter(|j| *j != label && !dropped.contains(j))
        .collect();
    if inputs.is_empty() {
        return Err(EivError::Config("recipe leaves no input columns".into()));
    }
    let mut ds = Dataset::new(
        table.columns_tensor(&inputs),
        table.columns_tensor(&[label]),
        None,
        format!("file:{} recipe:{}", path.display(), serde_json::to_string(recipe).unwrap_or_default()),
    )?;
    ds.input_names = inputs.iter().map(|&j| table.names[j].clone()).collect();
    ds.label_name = table.names[label].clone();
    ds.log_inputs = inputs
        .iter()
        .filter(|j| logged.contains(j))
        .map(|&j| table.names[j].clone())
        .collect();
    Ok(ds)
}

/// Reads the named columns from a comma-separated file with a header row,
/// applying `ln` to the columns listed in `log_columns`.
pub fn read_input_columns(path: &Path, names: &[String], log_columns: &[String]) -> Result<Tensor> {
    let mut table = read_table(path, &Delimiter::Char(','), true)?;
    let cols = names
        .iter()
        .map(|n| table.resolve(&ColumnRef::Name(n.clone()), path))
        .collect::<Result<Vec<_>>>()?;
    for n in log_columns {
        let j = table.resolve(&ColumnRef::Name(n.clone()), path)?;
        for (r, row) in table.cells.iter_mut().enumerate() {
            if !(row[j] > 0.0) {
                return Err(EivError::Parse {
                    path: path.display().to_string(),
                    row: r + 2,
                    column: n.clone(),
                    message: format!("log transform of non-positive value {}", row[j]),
                });
            }
            row[j] = row[j].ln();
        }
    }
    Ok(table.columns_tensor(&cols))
}

/// [`load_tabular_raw`] followed by normalization with statistics of the whole file.
pub fn load_tabular(path: &Path, recipe: &TabularRecipe) -> Result<Dataset> {
    let raw = load_tabular_raw(path, recipe)?;
    NormalizationStats::fit(&raw.x, &raw.y)?.apply(&raw)
}

/// Seeded permutation split; `round(test_fraction * N)` rows go to the test set.
/// Both parts keep the original row order.
pub fn split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(EivError::Usage(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let n = dataset.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(EivError::Usage(format!("split of {n} rows leaves an empty part")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test: Vec<usize> = perm[..n_test].to_vec();
    let mut train: Vec<usize> = perm[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Splits a raw dataset and normalizes both parts with training-split statistics.
pub fn split_normalized(raw: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split(raw, test_fraction, seed)?;
    let stats = NormalizationStats::fit(&train.x, &train.y)?;
    Ok((stats.apply(&train)?, stats.apply(&test)?))
}
