//! Acceptance checks. Prints one line per criterion.
//!
//! Criteria 1-4 and 9 are exact or tightly bounded and fail the target when
//! violated. Criteria 5-8 are statistical statements about trained models;
//! their outcome is reported but does not fail the target.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use eiv_cli::config::{DatasetKind, DatasetSpec, ExperimentConfig, ModelSelection};
use eiv_cli::experiment::{evaluate, EvaluationSummary};
use eiv_cli::suites::{mexican_hat_config, multinomial_config, wine_config};
use eiv_core::eval::{coverage_under_resampling, IntervalPredictor};
use eiv_core::loss::{Batch, BernoulliDropout, EivDraws, NoiseState, PriorConfig, ZetaPrior};
use eiv_core::nn::{Activation, MlpConfig, NetworkParams};
use eiv_core::predictor::{
    decompose_uncertainty, posterior_predictive_samples, predict_eiv_with_rng, predict_non_eiv_with_rng,
    PredictConfig, SampleGrid,
};
use eiv_core::trainer::{eiv_loss_and_gradient, non_eiv_loss_and_gradient, ModelKind, TrainedModel};
use eiv_core::Tensor;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    hard_failures: usize,
}

impl Report {
    fn line(&mut self, n: u32, title: &str, verdict: Verdict, detail: String, secs: f64) {
        let tag = match verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail { hard } => {
                if hard {
                    self.hard_failures += 1;
                }
                "FAIL"
            }
            Verdict::Skipped => "SKIPPED",
        };
        println!("criterion {n} [{tag}] {title}: {detail} ({secs:.1} s)");
    }
}

#[derive(Clone, Copy)]
enum Verdict {
    Pass,
    Fail { hard: bool },
    Skipped,
}

fn verdict(ok: bool, hard: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail { hard }
    }
}

fn random_batch_case(
    rng: &mut ChaCha8Rng,
) -> (MlpConfig, NetworkParams, f64, f64, PriorConfig, Batch, EivDraws<eiv_core::nn::DropoutMaskSet>) {
    let n_x = rng.random_range(1..=3);
    let mut widths = vec![n_x];
    for _ in 0..rng.random_range(1..=3) {
        widths.push(rng.random_range(2..=8));
    }
    widths.push(rng.random_range(1..=2));
    let n_y = *widths.last().unwrap();
    let net = MlpConfig::new(widths, Activation::Tanh, [0.0, 0.1, 0.5][rng.random_range(0..3)]).unwrap();
    let params = NetworkParams::init(&net, rng);
    let m = rng.random_range(1..=8);
    let l = rng.random_range(1..=6);
    let x = Tensor::new(vec![m, n_x], (0..m * n_x).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let y = Tensor::new(vec![m, n_y], (0..m * n_y).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let zeta = if rng.random_bool(0.5) {
        ZetaPrior::Improper
    } else {
        ZetaPrior::Gaussian {
            lambda: rng.random_range(0.3..3.0),
        }
    };
    let prior = PriorConfig::new(10f64.powf(rng.random_range(-6.0..-1.0)), zeta).unwrap();
    let draws = EivDraws::sample(&BernoulliDropout, rng, &net, m, l).unwrap();
    let log_s2 = rng.random_range(-2.5..0.5);
    let deming = rng.random_range(0.0..2.0);
    (net, params, log_s2, deming, prior, Batch::new(x, y, 500).unwrap(), draws)
}

fn criterion_1(report: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut coords = 0usize;
    let n_configs = 30;
    for _ in 0..n_configs {
        let (net, params, s, d, prior, batch, draws) = random_batch_case(&mut rng);
        let loss = |p: &NetworkParams, s: f64| eiv_loss_and_gradient(&net, p, s, d, &prior, &batch, &draws).unwrap().0;
        let (_, g, gs) = eiv_loss_and_gradient(&net, &params, s, d, &prior, &batch, &draws).unwrap();
        let rel = |a: f64, n: f64| (a - n).abs() / (a.abs().max(n.abs()).max(1e-4));
        for i in 0..params.len() {
            let mut p = params.clone();
            p.flat_mut()[i] += h;
            let up = loss(&p, s);
            p.flat_mut()[i] -= 2.0 * h;
            let down = loss(&p, s);
            worst = worst.max(rel(g[i], (up - down) / (2.0 * h)));
            coords += 1;
        }
        worst = worst.max(rel(gs, (loss(&params, s + h) - loss(&params, s - h)) / (2.0 * h)));
        coords += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    report.line(
        1,
        "gradient vs central differences",
        verdict(worst < 1e-4 && secs < 60.0, true),
        format!("{n_configs} configurations, {coords} coordinates, max relative error {worst:.2e} (< 1e-4)"),
        secs,
    );
}

fn criterion_2(report: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_loss: f64 = 0.0;
    for _ in 0..100 {
        let (net, params, s, _, mut prior, batch, draws) = random_batch_case(&mut rng);
        prior.zeta = ZetaPrior::Improper;
        let a = eiv_loss_and_gradient(&net, &params, s, 0.0, &prior, &batch, &draws).unwrap().0;
        let b = non_eiv_loss_and_gradient(&net, &params, s, &prior, &batch, &draws.weights).unwrap().0;
        worst_loss = worst_loss.max((a - b).abs());
    }
    let mut worst_pred: f64 = 0.0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = MlpConfig::new(vec![2, 16, 8, 1], Activation::Relu, 0.5).unwrap();
        let params = NetworkParams::init(&net, &mut rng);
        let model = TrainedModel::from_parts(
            ModelKind::Eiv,
            net,
            params,
            NoiseState::new(-1.0, 0.0).unwrap(),
            PriorConfig::new(1e-5, ZetaPrior::Improper).unwrap(),
        );
        let x = Tensor::new(vec![20, 2], (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let cfg = PredictConfig::new(15, 9, 0);
        let a = predict_eiv_with_rng(&model, &x, &cfg, &mut ChaCha8Rng::seed_from_u64(seed + 50)).unwrap();
        let b = predict_non_eiv_with_rng(&model, &x, &cfg, &mut ChaCha8Rng::seed_from_u64(seed + 50)).unwrap();
        for (p, q) in [(&a.m, &b.m), (&a.u_total, &b.u_total), (&a.u_epistemic, &b.u_epistemic), (&a.u_aleatoric, &b.u_aleatoric)] {
            for (u, v) in p.data().iter().zip(q.data()) {
                worst_pred = worst_pred.max((u - v).abs());
            }
        }
    }
    report.line(
        2,
        "zero input noise collapses to non-EiV",
        verdict(worst_loss < 1e-10 && worst_pred <= 1e-12, true),
        format!("100 batches max loss gap {worst_loss:.1e} (< 1e-10); prediction max gap {worst_pred:.1e} (<= 1e-12)"),
        start.elapsed().as_secs_f64(),
    );
}

fn criterion_3(report: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(2..30);
        let l = rng.random_range(2..30);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let values = (0..k * l).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let d = decompose_uncertainty(&SampleGrid::new(k, l, 1, values).unwrap()).unwrap();
        let gap = (d.epistemic[0].powi(2) + d.aleatoric[0].powi(2) - d.total[0].powi(2)).abs() / (scale * scale);
        worst = worst.max(gap);
    }
    let net = MlpConfig::new(vec![1, 20, 20, 1], Activation::Relu, 0.5).unwrap();
    let mut prng = ChaCha8Rng::seed_from_u64(304);
    let params = NetworkParams::init(&net, &mut prng);
    let model = TrainedModel::from_parts(
        ModelKind::Eiv,
        net,
        params,
        NoiseState::new(-2.0, 0.5).unwrap(),
        PriorConfig::new(1e-5, ZetaPrior::Improper).unwrap(),
    );
    let x = Tensor::new(vec![6, 1], vec![-1.0, -0.5, 0.0, 0.3, 0.8, 1.2]).unwrap();
    let cfg = PredictConfig::new(30, 30, 0);
    let pred = predict_eiv_with_rng(&model, &x, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let samples = posterior_predictive_samples(&model, &x, &cfg, 20, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let mut max_z: f64 = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let v = s.data();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let m4 = v.iter().map(|a| (a - mean).powi(4)).sum::<f64>() / n;
        let se = ((m4 - var * var) / n).sqrt();
        max_z = max_z.max((var - pred.var_posterior_predictive.data()[i]).abs() / se);
    }
    report.line(
        3,
        "law of total variance",
        verdict(worst <= 1e-10 && max_z < 3.0, true),
        format!("1000 grids max relative gap {worst:.1e} (<= 1e-10); posterior predictive max |z| {max_z:.2} (< 3)"),
        start.elapsed().as_secs_f64(),
    );
}

/// Returns the observed input as prediction with the true noise level as uncertainty.
struct Calibrated {
    sigma: f64,
}

impl IntervalPredictor for Calibrated {
    fn predict_interval(&self, x: &Tensor, _: &mut dyn RngCore) -> eiv_core::Result<(Vec<f64>, Vec<f64>)> {
        Ok((x.data().to_vec(), vec![self.sigma; x.rows()]))
    }
}

fn criterion_4(report: &mut Report) {
    let start = Instant::now();
    let sigma = 0.2;
    let zeta = Tensor::new(vec![1000, 1], (0..1000).map(|i| -1.0 + 2.0 * i as f64 / 999.0).collect()).unwrap();
    let g = zeta.data().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let r = coverage_under_resampling(&Calibrated { sigma }, &zeta, &g, sigma, 100, 1.96, &mut rng).unwrap();
    report.line(
        4,
        "coverage estimator calibration",
        verdict((r.overall - 0.95).abs() <= 0.005, true),
        format!("10^5 draws, coverage {:.4} (0.950 +- 0.005)", r.overall),
        start.elapsed().as_secs_f64(),
    );
}

fn workdir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn run(cfg: &ExperimentConfig, name: &str) -> EvaluationSummary {
    evaluate(cfg, None, &workdir(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn criterion_5_and_6(report: &mut Report) {
    let start = Instant::now();
    let mut cfg = mexican_hat_config(0.07, 0.2);
    cfg.evaluation.runs = 5;
    cfg.evaluation.coverage_grid = 50;
    cfg.evaluation.coverage_resamples = 50;
    let s = run(&cfg, "mexican_table1");
    let mean = |d: Option<f64>, m: &str| s.mean(d, m).unwrap();
    let (ce, cn) = (mean(Some(0.2), "coverage_grid"), mean(None, "coverage_grid"));
    let (re, rn) = (mean(Some(0.2), "rmse"), mean(None, "rmse"));
    let ok = ce >= 0.88
        && ce - cn >= 0.05
        && (0.32..=0.40).contains(&re)
        && (0.32..=0.40).contains(&rn)
        && (re - rn).abs() <= 0.02;
    report.line(
        5,
        "Mexican hat sigma_x = 0.07, delta = 0.2, 5 runs",
        verdict(ok, false),
        format!(
            "coverage EiV {ce:.3} (>= 0.88) non-EiV {cn:.3} (gap >= 0.05; reference 0.93 vs 0.82); \
             RMSE EiV {re:.3} non-EiV {rn:.3} (in [0.32, 0.40], gap <= 0.02; reference 0.35 vs 0.36)"
        ),
        start.elapsed().as_secs_f64(),
    );

    let start6 = Instant::now();
    let mut c6 = mexican_hat_config(0.07, 0.5);
    c6.evaluation.runs = 5;
    c6.evaluation.models = ModelSelection::Eiv;
    c6.evaluation.coverage_grid = 0;
    c6.dataset.test_points = 100;
    c6.predict = PredictConfig::new(10, 10, 0);
    let s6 = run(&c6, "mexican_fig1");
    let finals = [
        mean(None, "final_sigma_y"),
        mean(Some(0.2), "final_sigma_y"),
        s6.mean(Some(0.5), "final_sigma_y").unwrap(),
    ];
    let ok = finals.windows(2).all(|w| w[1] < w[0]) && finals.iter().all(|&v| v > 0.30);
    report.line(
        6,
        "learned sigma_y ordering over delta in {0 (non-EiV), 0.2, 0.5}",
        verdict(ok, false),
        format!(
            "mean final sigma_y {:.4} > {:.4} > {:.4}, all > 0.30",
            finals[0], finals[1], finals[2]
        ),
        start6.elapsed().as_secs_f64(),
    );
}

fn criterion_7(report: &mut Report) {
    let start = Instant::now();
    let mut cfg = multinomial_config(0.07, 0.2);
    cfg.evaluation.runs = 3;
    cfg.predict = PredictConfig::new(30, 30, 0);
    let s = run(&cfg, "multinomial");
    let (ce, cn) = (s.mean(Some(0.2), "coverage_test").unwrap(), s.mean(None, "coverage_test").unwrap());
    let (re, rn) = (s.mean(Some(0.2), "rmse").unwrap(), s.mean(None, "rmse").unwrap());
    let ok = ce - cn >= 0.05 && re <= 1.15 * rn;
    report.line(
        7,
        "multinomial, 10^4 points, 100 epochs, 3 runs",
        verdict(ok, false),
        format!(
            "coverage EiV {ce:.3} non-EiV {cn:.3} (gap >= 0.05); RMSE EiV {re:.3} <= 1.15 x non-EiV {rn:.3}"
        ),
        start.elapsed().as_secs_f64(),
    );
}

fn wine_like_file(path: &Path) {
    let names = [
        "fixed acidity",
        "volatile acidity",
        "citric acid",
        "residual sugar",
        "chlorides",
        "free sulfur dioxide",
        "total sulfur dioxide",
        "density",
        "pH",
        "sulphates",
        "alcohol",
        "quality",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut text = names.map(|n| format!("\"{n}\"")).join(";");
    text.push('\n');
    for _ in 0..80 {
        let row: Vec<String> = (0..12)
            .map(|j| {
                if j == 2 && rng.random_bool(0.1) {
                    "0".to_string()
                } else if j == 11 {
                    rng.random_range(3..9).to_string()
                } else {
                    format!("{:.4}", rng.random_range(0.1..10.0))
                }
            })
            .collect();
        text.push_str(&row.join(";"));
        text.push('\n');
    }
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, text).unwrap();
}

fn data_file(var: &str, default: &str) -> Option<PathBuf> {
    let p = std::env::var_os(var).map(PathBuf::from).unwrap_or_else(|| {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(default)
    });
    p.exists().then_some(p)
}

fn criterion_8(report: &mut Report) {
    let start = Instant::now();
    let wine = data_file("EIV_WINE_DATA", "winequality-red.csv");
    let housing = data_file("EIV_HOUSING_DATA", "housing.data");
    if wine.is_none() && housing.is_none() {
        let path = workdir("wine_schema").with_extension("csv");
        wine_like_file(&path);
        let mut cfg = wine_config(path);
        cfg.evaluation.runs = 1;
        cfg.evaluation.deltas = vec![1.0];
        cfg.train.n_only_phi = 1;
        cfg.train.n_increase_delta = 1;
        cfg.train.n_fine_tune = 1;
        cfg.train.final_epochs = 1;
        cfg.predict = PredictConfig::new(5, 5, 0);
        let s = run(&cfg, "wine_schema_run");
        let completed = s.group(Some(1.0)).is_some() && s.group(None).is_some();
        report.line(
            8,
            "real-data suites",
            if completed { Verdict::Skipped } else { Verdict::Fail { hard: false } },
            "wine and housing files not present (set EIV_WINE_DATA / EIV_HOUSING_DATA or place them in data/); \
             pipeline exercised on a synthetic file with the wine schema"
                .into(),
            start.elapsed().as_secs_f64(),
        );
        return;
    }
    let mut parts = Vec::new();
    let mut ok = true;
    if let Some(path) = wine {
        let mut cfg = wine_config(path);
        cfg.evaluation.deltas = vec![1.0];
        let s = run(&cfg, "wine");
        let (re, rn) = (s.mean(Some(1.0), "rmse").unwrap(), s.mean(None, "rmse").unwrap());
        let base = &s.group(None).unwrap().u;
        let frac: f64 = s
            .group(Some(1.0))
            .unwrap()
            .u
            .iter()
            .zip(base)
            .map(|(a, b)| eiv_cli::experiment::fraction_not_smaller(a, b))
            .sum::<f64>()
            / base.len() as f64;
        ok &= re <= 1.10 * rn && frac >= 0.90;
        parts.push(format!(
            "wine delta 1: RMSE {re:.3} <= 1.10 x {rn:.3}; EiV u >= non-EiV u on {:.1}% of test points (>= 90%)",
            100.0 * frac
        ));
    }
    if let Some(path) = housing {
        let mut cfg = ExperimentConfig {
            dataset: DatasetSpec::file(DatasetKind::Housing, path.clone()),
            ..eiv_cli::suites::housing_config(path)
        };
        cfg.evaluation.deltas = vec![1.0];
        let s = run(&cfg, "housing");
        parts.push(format!(
            "housing delta 1 completed: RMSE {:.3} vs non-EiV {:.3}",
            s.mean(Some(1.0), "rmse").unwrap(),
            s.mean(None, "rmse").unwrap()
        ));
    }
    report.line(8, "real-data suites", verdict(ok, false), parts.join("; "), start.elapsed().as_secs_f64());
}

fn csv_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_9(report: &mut Report) {
    let start = Instant::now();
    let mut cfg = mexican_hat_config(0.07, 0.2);
    cfg.dataset.generator.as_mut().unwrap().n_points = 60;
    cfg.dataset.test_points = 50;
    cfg.train.n_only_phi = 5;
    cfg.train.n_increase_delta = 3;
    cfg.train.n_fine_tune = 4;
    cfg.train.final_epochs = 2;
    cfg.predict = PredictConfig::new(10, 10, 3);
    cfg.evaluation.runs = 3;
    cfg.evaluation.deltas = vec![0.2, 0.5];
    cfg.evaluation.coverage_grid = 10;
    cfg.evaluation.coverage_resamples = 5;
    let mut dirs = Vec::new();
    for (i, parallel) in [1, 1, 3].into_iter().enumerate() {
        cfg.evaluation.parallel_runs = parallel;
        let name = format!("repeat_{i}");
        run(&cfg, &name);
        dirs.push(workdir_keep(&name));
    }
    let a = csv_files(&dirs[0]);
    let same = dirs[1..].iter().all(|d| csv_files(d) == a);
    report.line(
        9,
        "byte-identical outputs for a repeated seed",
        verdict(same && a.len() > 10, true),
        format!("{} CSV files compared across two serial runs and one parallel run", a.len()),
        start.elapsed().as_secs_f64(),
    );
}

fn workdir_keep(name: &str) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut report = Report { hard_failures: 0 };
    let start = Instant::now();
    criterion_1(&mut report);
    criterion_2(&mut report);
    criterion_3(&mut report);
    criterion_4(&mut report);
    criterion_9(&mut report);
    criterion_5_and_6(&mut report);
    criterion_7(&mut report);
    criterion_8(&mut report);
    println!(
        "acceptance finished in {:.0} s with {} failing exact criteria",
        start.elapsed().as_secs_f64(),
        report.hard_failures
    );
    if report.hard_failures > 0 {
        std::process::exit(1);
    }
}
