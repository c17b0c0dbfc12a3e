//! Checks of the loss, its gradient, training and prediction against
//! independent straight-line computations.

use eiv_core::datasets::{gen_mexican_hat, GeneratorConfig};
use eiv_core::loss::{
    non_eiv_loss, Batch, BernoulliDropout, EivDraws, NoiseState, PriorConfig, ZetaPrior,
};
use eiv_core::nn::{Activation, DropoutMaskSet, MlpConfig, NetworkParams};
use eiv_core::predictor::{
    posterior_predictive_samples, predict_eiv_with_rng, predict_non_eiv_with_rng, PredictConfig,
};
use eiv_core::trainer::{
    deming_schedule, eiv_loss_and_gradient, non_eiv_loss_and_gradient, train_with_rng, ModelKind, TrainConfig,
    TrainedModel,
};
use eiv_core::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    net: MlpConfig,
    params: NetworkParams,
    log_s2: f64,
    deming: f64,
    prior: PriorConfig,
    batch: Batch,
    draws: EivDraws<DropoutMaskSet>,
}

fn random_case(rng: &mut ChaCha8Rng, activation: Activation) -> Case {
    let n_x = rng.random_range(1..=3);
    let n_y = rng.random_range(1..=2);
    let mut widths = vec![n_x];
    for _ in 0..rng.random_range(1..=2) {
        widths.push(rng.random_range(2..=6));
    }
    widths.push(n_y);
    let rate = [0.0, 0.2, 0.5][rng.random_range(0..3)];
    let net = MlpConfig::new(widths, activation, rate).unwrap();
    let mut params = NetworkParams::init(&net, rng);
    for b in params.flat_mut().iter_mut() {
        *b += 0.1 * rng.random_range(-1.0..1.0);
    }
    let m = rng.random_range(1..=6);
    let l = rng.random_range(1..=5);
    let x: Vec<f64> = (0..m * n_x).map(|_| rng.random_range(-1.5..1.5)).collect();
    let y: Vec<f64> = (0..m * n_y).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch = Batch::new(Tensor::new(vec![m, n_x], x).unwrap(), Tensor::new(vec![m, n_y], y).unwrap(), 100).unwrap();
    let zeta = if rng.random_bool(0.5) {
        ZetaPrior::Improper
    } else {
        ZetaPrior::Gaussian {
            lambda: rng.random_range(0.5..2.0),
        }
    };
    let prior = PriorConfig::new(10f64.powf(rng.random_range(-4.0..-1.0)), zeta).unwrap();
    let draws = EivDraws::sample(&BernoulliDropout, rng, &net, m, l).unwrap();
    Case {
        net,
        params,
        log_s2: rng.random_range(-2.0..0.5),
        deming: rng.random_range(0.0..1.5),
        prior,
        batch,
        draws,
    }
}

fn act(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Relu => v.max(0.0),
        Activation::Tanh => v.tanh(),
    }
}

/// Network output for one input row under dropout draw `m`.
fn forward_row(net: &MlpConfig, p: &NetworkParams, masks: &DropoutMaskSet, m: usize, input: &[f64]) -> Vec<f64> {
    let scale = 1.0 / (1.0 - masks.rate());
    let mut h = input.to_vec();
    let n_layers = net.layer_widths.len() - 1;
    for i in 0..n_layers {
        let (fi, fo) = (net.layer_widths[i], net.layer_widths[i + 1]);
        let w = p.weight(i);
        let mut z = p.bias(i).to_vec();
        for (o, zo) in z.iter_mut().enumerate() {
            for (j, hj) in h.iter().enumerate().take(fi) {
                *zo += hj * w[j * fo + o];
            }
        }
        if i + 1 < n_layers {
            let keep = masks.layers()[i].row(m);
            for (o, zo) in z.iter_mut().enumerate() {
                *zo = act(net.activation, *zo) * keep[o] * scale;
            }
        }
        h = z;
    }
    h
}

/// The negative ELBO estimate written out with plain loops.
fn loss_by_hand(c: &Case, params: &NetworkParams, log_s2: f64) -> f64 {
    let (m, l) = (c.batch.len(), c.draws.per_datum);
    let n_x = c.batch.x.cols();
    let n_y = c.batch.y.cols();
    let s2 = log_s2.exp();
    let sx = c.deming * s2.sqrt();
    let mut data = 0.0;
    for i in 0..m {
        let x = c.batch.x.row(i);
        let y = c.batch.y.row(i);
        let mut terms = Vec::with_capacity(l);
        for j in 0..l {
            let e = c.draws.eps.row(i * l + j);
            let zeta: Vec<f64> = (0..n_x)
                .map(|d| match c.prior.zeta {
                    ZetaPrior::Improper => x[d] + sx * e[d],
                    ZetaPrior::Gaussian { lambda } => {
                        let post_var = sx * sx * lambda * lambda / (sx * sx + lambda * lambda);
                        let post_mean = x[d] * lambda * lambda / (sx * sx + lambda * lambda);
                        post_mean + post_var.sqrt() * e[d]
                    }
                })
                .collect();
            let f = forward_row(&c.net, params, &c.draws.weights, i, &zeta);
            let ss: f64 = f.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            terms.push(-0.5 * ss / s2 - 0.5 * n_y as f64 * (2.0 * std::f64::consts::PI * s2).ln());
        }
        let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln();
        data += lse - (l as f64).ln();
    }
    let sq: f64 = params.flat().iter().map(|v| v * v).sum();
    let mut loss = -data / m as f64 + (1.0 - c.net.dropout_rate) * c.prior.weight_decay * sq;
    if let ZetaPrior::Gaussian { lambda } = c.prior.zeta {
        let var = sx * sx + lambda * lambda;
        let mut lp = 0.0;
        for i in 0..m {
            for &v in c.batch.x.row(i) {
                lp += -v * v / (2.0 * var) - 0.5 * (2.0 * std::f64::consts::PI * var).ln();
            }
        }
        loss -= lp / m as f64;
    }
    loss
}

#[test]
fn eiv_loss_matches_loop_implementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for activation in [Activation::Tanh, Activation::Relu] {
        for _ in 0..25 {
            let c = random_case(&mut rng, activation);
            let (loss, _, _) =
                eiv_loss_and_gradient(&c.net, &c.params, c.log_s2, c.deming, &c.prior, &c.batch, &c.draws).unwrap();
            let expected = loss_by_hand(&c, &c.params, c.log_s2);
            assert!((loss - expected).abs() < 1e-10 * (1.0 + expected.abs()), "{loss} vs {expected}");
        }
    }
}

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()) + 1e-8
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    for case in 0..24 {
        let c = random_case(&mut rng, Activation::Tanh);
        let (_, g_phi, g_s) =
            eiv_loss_and_gradient(&c.net, &c.params, c.log_s2, c.deming, &c.prior, &c.batch, &c.draws).unwrap();
        for i in 0..c.params.len() {
            let mut p = c.params.clone();
            p.flat_mut()[i] += h;
            let up = loss_by_hand(&c, &p, c.log_s2);
            p.flat_mut()[i] -= 2.0 * h;
            let down = loss_by_hand(&c, &p, c.log_s2);
            let numeric = (up - down) / (2.0 * h);
            assert!(close(g_phi[i], numeric), "case {case} param {i}: {} vs {numeric}", g_phi[i]);
        }
        let numeric = (loss_by_hand(&c, &c.params, c.log_s2 + h) - loss_by_hand(&c, &c.params, c.log_s2 - h)) / (2.0 * h);
        assert!(close(g_s, numeric), "case {case} log sigma_y^2: {g_s} vs {numeric}");
    }
}

#[test]
fn zero_deming_factor_reduces_to_gaussian_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let mut c = random_case(&mut rng, Activation::Relu);
        c.deming = 0.0;
        c.prior.zeta = ZetaPrior::Improper;
        let eiv = eiv_loss_and_gradient(&c.net, &c.params, c.log_s2, 0.0, &c.prior, &c.batch, &c.draws).unwrap();
        let plain =
            non_eiv_loss_and_gradient(&c.net, &c.params, c.log_s2, &c.prior, &c.batch, &c.draws.weights).unwrap();
        assert!((eiv.0 - plain.0).abs() < 1e-10, "{} vs {}", eiv.0, plain.0);
        assert!((eiv.2 - plain.2).abs() < 1e-10);
        for (a, b) in eiv.1.iter().zip(&plain.1) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn non_eiv_loss_is_gaussian_nll_plus_weight_decay() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let c = random_case(&mut rng, Activation::Tanh);
        let mut tape = Tape::new();
        let vars = c.params.register(&mut tape);
        let s = tape.param("s", Tensor::scalar(c.log_s2));
        let v = non_eiv_loss(&mut tape, &BernoulliDropout, &c.net, &vars, s, &c.prior, &c.batch, &c.draws.weights)
            .unwrap();
        let plain = Case {
            deming: 0.0,
            draws: EivDraws {
                weights: c.draws.weights.clone(),
                eps: Tensor::zeros(&[c.batch.len(), c.batch.x.cols()]),
                per_datum: 1,
            },
            prior: PriorConfig::new(c.prior.weight_decay, ZetaPrior::Improper).unwrap(),
            ..c
        };
        let expected = loss_by_hand(&plain, &plain.params, plain.log_s2);
        assert!((tape.value(v).item() - expected).abs() < 1e-10);
    }
}

fn random_model(rng: &mut ChaCha8Rng, deming: f64) -> TrainedModel {
    let net = MlpConfig::new(vec![2, 7, 5, 1], Activation::Relu, 0.3).unwrap();
    let params = NetworkParams::init(&net, rng);
    let prior = PriorConfig::new(1e-4, ZetaPrior::Improper).unwrap();
    TrainedModel::from_parts(ModelKind::Eiv, net, params, NoiseState::new(-1.3, deming).unwrap(), prior)
}

#[test]
fn eiv_prediction_without_input_noise_equals_non_eiv() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = random_model(&mut rng, 0.0);
    let x = Tensor::new(vec![9, 2], (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let cfg = PredictConfig::new(12, 7, 0);
    let a = predict_eiv_with_rng(&model, &x, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = predict_non_eiv_with_rng(&model, &x, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    for (p, q) in [
        (&a.m, &b.m),
        (&a.u_total, &b.u_total),
        (&a.u_epistemic, &b.u_epistemic),
        (&a.u_aleatoric, &b.u_aleatoric),
        (&a.var_posterior_predictive, &b.var_posterior_predictive),
    ] {
        for (u, v) in p.data().iter().zip(q.data()) {
            assert!((u - v).abs() < 1e-12, "{u} vs {v}");
        }
    }
}

#[test]
fn posterior_predictive_variance_is_total_plus_label_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = random_model(&mut rng, 0.4);
    let x = Tensor::new(vec![5, 2], (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let cfg = PredictConfig::new(20, 20, 0);
    let pred = predict_eiv_with_rng(&model, &x, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let samples =
        posterior_predictive_samples(&model, &x, &cfg, 25, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    for (i, s) in samples.iter().enumerate() {
        let v = s.data();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let m4 = v.iter().map(|a| (a - mean).powi(4)).sum::<f64>() / n;
        let se = ((m4 - var * var) / n).sqrt();
        let expected = pred.var_posterior_predictive.data()[i];
        assert!((var - expected).abs() < 3.0 * se, "row {i}: {var} vs {expected} (se {se})");
    }
}

fn adam_by_hand(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: i32, rate: f64) {
    for i in 0..p.len() {
        m[i] = 0.9 * m[i] + 0.1 * g[i];
        v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
        let mh = m[i] / (1.0 - 0.9f64.powi(t));
        let vh = v[i] / (1.0 - 0.999f64.powi(t));
        p[i] -= rate * mh / (vh.sqrt() + 1e-8);
    }
}

#[test]
fn training_replays_step_by_step() {
    let mut g = GeneratorConfig::mexican_hat(4);
    g.n_points = 8;
    let data = gen_mexican_hat(&g).unwrap();
    let net = MlpConfig::new(vec![1, 6, 4, 1], Activation::Relu, 0.5).unwrap();
    let mut cfg = TrainConfig::mexican_hat(0.3, 0);
    cfg.n_only_phi = 1;
    cfg.n_increase_delta = 1;
    cfg.n_fine_tune = 0;
    cfg.final_epochs = 1;
    cfg.batch_size = 3;
    cfg.zeta_samples = 2;
    let model = train_with_rng(&data, &net, &cfg, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let prior = cfg.prior().unwrap();
    let mut params = NetworkParams::init(&net, &mut rng);
    let mut s = cfg.initial_log_sigma_y_sq;
    let (mut m, mut v) = (vec![0.0; params.len()], vec![0.0; params.len()]);
    let (mut ms, mut vs) = ([0.0], [0.0]);
    let (mut t, mut ts) = (0, 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..2 {
        let deming = deming_schedule(epoch, &cfg).unwrap();
        assert_eq!(deming, [0.0, 0.3][epoch]);
        let rate = if epoch == 1 { 1e-4 } else { 1e-3 };
        order.shuffle(&mut rng);
        for chunk in order.chunks(3) {
            let batch = data.batch(chunk);
            let draws = EivDraws::sample(&BernoulliDropout, &mut rng, &net, chunk.len(), 2).unwrap();
            let (_, gp, gs) = eiv_loss_and_gradient(&net, &params, s, deming, &prior, &batch, &draws).unwrap();
            t += 1;
            adam_by_hand(params.flat_mut(), &gp, &mut m, &mut v, t, rate);
            if epoch >= 1 {
                ts += 1;
                let mut one = [s];
                adam_by_hand(&mut one, &[gs], &mut ms, &mut vs, ts, rate);
                s = one[0];
            }
        }
    }
    for (a, b) in model.params.flat().iter().zip(params.flat()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((model.noise.log_sigma_y_sq - s).abs() < 1e-12);
    assert_eq!(model.record.deming, vec![0.0, 0.3]);
}
