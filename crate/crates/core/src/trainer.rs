//! Minibatch training of the network and `log sigma_y^2` with the three-phase
//! Deming warm-up.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, NormalizationStats};
use crate::error::{EivError, Result};
use crate::loss::{
    eiv_mc_loss, non_eiv_loss, Batch, BernoulliDropout, EivDraws, NoiseState, PriorConfig, VariationalFamily,
    ZetaPrior,
};
use crate::nn::{DropoutMaskSet, MlpConfig, NetworkParams};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Epochs with the Deming factor at 0 and only the network updated.
    pub n_only_phi: usize,
    /// Epochs over which the Deming factor ramps up linearly.
    pub n_increase_delta: usize,
    pub n_fine_tune: usize,
    pub batch_size: usize,
    /// Latent-input samples per datum.
    pub zeta_samples: usize,
    pub deming_factor: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_final_learning_rate")]
    pub final_learning_rate: f64,
    /// Trailing epochs trained at `final_learning_rate`.
    #[serde(default = "default_final_epochs")]
    pub final_epochs: usize,
    /// `c = 1 / (2 N lambda_theta^2)`.
    pub weight_decay: f64,
    #[serde(default)]
    pub zeta_prior: ZetaPrior,
    #[serde(default)]
    pub initial_log_sigma_y_sq: f64,
    pub seed: u64,
}

fn default_learning_rate() -> f64 {
    1e-3
}

fn default_final_learning_rate() -> f64 {
    1e-4
}

fn default_final_epochs() -> usize {
    50
}

impl TrainConfig {
    /// 1000 epochs (300 network-only, 20 ramp), batches of 25, `L = 5`, `c = 1e-7`.
    pub fn mexican_hat(deming_factor: f64, seed: u64) -> Self {
        TrainConfig {
            n_only_phi: 300,
            n_increase_delta: 20,
            n_fine_tune: 680,
            batch_size: 25,
            zeta_samples: 5,
            deming_factor,
            learning_rate: default_learning_rate(),
            final_learning_rate: default_final_learning_rate(),
            final_epochs: default_final_epochs(),
            weight_decay: 1e-7,
            zeta_prior: ZetaPrior::Improper,
            initial_log_sigma_y_sq: 0.0,
            seed,
        }
    }

    pub fn n_train(&self) -> usize {
        self.n_only_phi + self.n_increase_delta + self.n_fine_tune
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EivError::Config(m));
        if self.n_train() == 0 {
            return bad("training needs at least one epoch".into());
        }
        if self.batch_size == 0 || self.zeta_samples == 0 {
            return bad("batch_size and zeta_samples must be >= 1".into());
        }
        if !(self.deming_factor >= 0.0) || !self.deming_factor.is_finite() {
            return bad(format!("deming_factor {} must be >= 0", self.deming_factor));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("final_learning_rate", self.final_learning_rate),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} {v} must be positive"));
            }
        }
        if !self.initial_log_sigma_y_sq.is_finite() {
            return bad("initial_log_sigma_y_sq must be finite".into());
        }
        PriorConfig::new(self.weight_decay, self.zeta_prior)
            .map(|_| ())
            .map_err(|e| EivError::Config(e.to_string()))
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch + self.final_epochs >= self.n_train() {
            self.final_learning_rate
        } else {
            self.learning_rate
        }
    }

    pub fn prior(&self) -> Result<PriorConfig> {
        PriorConfig::new(self.weight_decay, self.zeta_prior)
    }
}

/// Effective Deming factor used during `epoch` (0-based).
pub fn deming_schedule(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.n_train() {
        return Err(EivError::Usage(format!(
            "epoch {epoch} outside 0..{}",
            config.n_train()
        )));
    }
    if epoch < config.n_only_phi {
        return Ok(0.0);
    }
    let k = epoch - config.n_only_phi + 1;
    if k < config.n_increase_delta {
        Ok(k as f64 * config.deming_factor / config.n_increase_delta as f64)
    } else {
        Ok(config.deming_factor)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, rate: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(EivError::shape("adam_step", &[state.m.len()], &[params.len(), grads.len()]));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= rate * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Per-epoch trajectory, recorded at the end of each epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub sigma_y: Vec<f64>,
    pub deming: Vec<f64>,
    pub loss: Vec<f64>,
}

impl TrainRecord {
    pub fn final_sigma_y(&self) -> Option<f64> {
        self.sigma_y.last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,sigma_y,deming,loss\n");
        for i in 0..self.sigma_y.len() {
            out.push_str(&format!("{},{},{},{}\n", i, self.sigma_y[i], self.deming[i], self.loss[i]));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Eiv,
    NonEiv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub net: MlpConfig,
    pub params: NetworkParams,
    /// Final `log sigma_y^2` and the Deming factor used for prediction (0 for non-EiV).
    pub noise: NoiseState,
    pub prior: PriorConfig,
    pub normalization: Option<NormalizationStats>,
    pub record: TrainRecord,
    pub train_config: TrainConfig,
    pub input_names: Vec<String>,
    pub label_name: String,
    /// Inputs the model expects log-transformed.
    pub log_inputs: Vec<String>,
}

impl TrainedModel {
    /// A model assembled from explicit parts, with an empty record and a
    /// placeholder training configuration.
    pub fn from_parts(kind: ModelKind, net: MlpConfig, params: NetworkParams, noise: NoiseState, prior: PriorConfig) -> Self {
        let mut train_config = TrainConfig::mexican_hat(noise.deming, 0);
        train_config.weight_decay = prior.weight_decay;
        train_config.zeta_prior = prior.zeta;
        let input_names = match net.input_width() {
            1 => vec!["x".to_string()],
            n => (1..=n).map(|i| format!("x_{i}")).collect(),
        };
        TrainedModel {
            kind,
            net,
            params,
            noise,
            prior,
            normalization: None,
            record: TrainRecord::default(),
            train_config,
            input_names,
            label_name: "y".into(),
            log_inputs: Vec::new(),
        }
    }
}

/// Loss and gradients (network, `log sigma_y^2`) of one EiV minibatch.
#[allow(clippy::too_many_arguments)]
pub fn eiv_loss_and_gradient(
    net: &MlpConfig,
    params: &NetworkParams,
    log_sigma_y_sq: f64,
    deming: f64,
    prior: &PriorConfig,
    batch: &Batch,
    draws: &EivDraws<DropoutMaskSet>,
) -> Result<(f64, Vec<f64>, f64)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let s = tape.param("log_sigma_y_sq", Tensor::scalar(log_sigma_y_sq));
    let loss = eiv_mc_loss(&mut tape, &BernoulliDropout, net, &vars, s, deming, prior, batch, draws)?;
    collect(&tape, &vars, params.len(), loss, s)
}

/// Loss and gradients of one non-EiV minibatch.
pub fn non_eiv_loss_and_gradient(
    net: &MlpConfig,
    params: &NetworkParams,
    log_sigma_y_sq: f64,
    prior: &PriorConfig,
    batch: &Batch,
    masks: &DropoutMaskSet,
) -> Result<(f64, Vec<f64>, f64)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let s = tape.param("log_sigma_y_sq", Tensor::scalar(log_sigma_y_sq));
    let loss = non_eiv_loss(&mut tape, &BernoulliDropout, net, &vars, s, prior, batch, masks)?;
    collect(&tape, &vars, params.len(), loss, s)
}

fn collect(
    tape: &Tape,
    vars: &crate::nn::ParamVars,
    n: usize,
    loss: crate::tape::Var,
    s: crate::tape::Var,
) -> Result<(f64, Vec<f64>, f64)> {
    let value = tape.value(loss).item();
    let grads = tape.grad(loss)?;
    let mut g = vec![0.0; n];
    vars.flat_gradient(&grads, &mut g);
    let gs = grads.raw(s).map_or(0.0, |v| v[0]);
    Ok((value, g, gs))
}

fn check_dataset(dataset: &Dataset, net: &MlpConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(EivError::Usage("cannot train on an empty dataset".into()));
    }
    if dataset.n_inputs() != net.input_width() || dataset.y.cols() != net.output_width() {
        return Err(EivError::shape(
            "dataset vs network",
            &[net.input_width(), net.output_width()],
            &[dataset.n_inputs(), dataset.y.cols()],
        ));
    }
    Ok(())
}

fn run<R: Rng + ?Sized>(
    kind: ModelKind,
    dataset: &Dataset,
    net: &MlpConfig,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainedModel> {
    config.validate()?;
    net.validate()?;
    check_dataset(dataset, net)?;
    let prior = config.prior()?;
    let n = dataset.len();
    let n_train = config.n_train();

    let mut params = NetworkParams::init(net, rng);
    let mut log_s2 = config.initial_log_sigma_y_sq;
    let mut adam_phi = AdamState::new(params.len());
    let mut adam_sigma = AdamState::new(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut record = TrainRecord::default();

    for epoch in 0..n_train {
        let deming = match kind {
            ModelKind::Eiv => deming_schedule(epoch, config)?,
            ModelKind::NonEiv => 0.0,
        };
        let update_sigma = epoch >= config.n_only_phi;
        let rate = config.learning_rate_at(epoch);
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = dataset.batch(chunk);
            let (loss, g_phi, g_s) = match kind {
                ModelKind::Eiv => {
                    let draws = EivDraws::sample(&BernoulliDropout, rng, net, batch.len(), config.zeta_samples)?;
                    eiv_loss_and_gradient(net, &params, log_s2, deming, &prior, &batch, &draws)?
                }
                ModelKind::NonEiv => {
                    let masks = BernoulliDropout.draw(rng, net, batch.len())?;
                    non_eiv_loss_and_gradient(net, &params, log_s2, &prior, &batch, &masks)?
                }
            };
            if !loss.is_finite() || !g_s.is_finite() || g_phi.iter().any(|v| !v.is_finite()) {
                return Err(EivError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    param_sq_norm: params.squared_norm(),
                    log_sigma_y_sq: log_s2,
                });
            }
            adam_step(params.flat_mut(), &g_phi, &mut adam_phi, rate)?;
            if update_sigma {
                adam_step(std::slice::from_mut(&mut log_s2), &[g_s], &mut adam_sigma, rate)?;
            }
            loss_sum += loss;
            n_batches += 1;
        }
        record.sigma_y.push((0.5 * log_s2).exp());
        record.deming.push(deming);
        record.loss.push(loss_sum / n_batches as f64);
    }

    let pred_deming = match kind {
        ModelKind::Eiv => config.deming_factor,
        ModelKind::NonEiv => 0.0,
    };
    Ok(TrainedModel {
        kind,
        net: net.clone(),
        params,
        noise: NoiseState::new(log_s2, pred_deming)?,
        prior,
        normalization: dataset.normalization.clone(),
        record,
        train_config: config.clone(),
        input_names: dataset.input_names.clone(),
        label_name: dataset.label_name.clone(),
        log_inputs: dataset.log_inputs.clone(),
    })
}

/// EiV training. Randomness is consumed in a fixed order: weight initialization,
/// then per epoch one shuffle, then per minibatch the dropout masks followed by
/// the latent-input noise.
pub fn train_with_rng<R: Rng + ?Sized>(
    dataset: &Dataset,
    net: &MlpConfig,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainedModel> {
    run(ModelKind::Eiv, dataset, net, config, rng)
}

/// Non-EiV training: Gaussian likelihood on the observed inputs, `sigma_y`
/// frozen for the first `n_only_phi` epochs like the EiV run.
pub fn train_non_eiv_with_rng<R: Rng + ?Sized>(
    dataset: &Dataset,
    net: &MlpConfig,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainedModel> {
    run(ModelKind::NonEiv, dataset, net, config, rng)
}

/// [`train_with_rng`] seeded from `config.seed`.
pub fn train(dataset: &Dataset, net: &MlpConfig, config: &TrainConfig) -> Result<TrainedModel> {
    train_with_rng(dataset, net, config, &mut ChaCha8Rng::seed_from_u64(config.seed))
}

/// [`train_non_eiv_with_rng`] seeded from `config.seed`.
pub fn train_non_eiv(dataset: &Dataset, net: &MlpConfig, config: &TrainConfig) -> Result<TrainedModel> {
    train_non_eiv_with_rng(dataset, net, config, &mut ChaCha8Rng::seed_from_u64(config.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_mexican_hat, GeneratorConfig};
    use crate::nn::Activation;

    fn small_config(delta: f64) -> TrainConfig {
        TrainConfig {
            n_only_phi: 2,
            n_increase_delta: 3,
            n_fine_tune: 2,
            batch_size: 4,
            zeta_samples: 3,
            deming_factor: delta,
            learning_rate: 1e-2,
            final_learning_rate: 1e-3,
            final_epochs: 2,
            weight_decay: 1e-4,
            zeta_prior: ZetaPrior::Improper,
            initial_log_sigma_y_sq: 0.0,
            seed: 11,
        }
    }

    fn small_data(n: usize) -> Dataset {
        let mut g = GeneratorConfig::mexican_hat(3);
        g.n_points = n;
        gen_mexican_hat(&g).unwrap()
    }

    #[test]
    fn schedule_phases() {
        let mut c = TrainConfig::mexican_hat(0.2, 0);
        assert_eq!(deming_schedule(0, &c).unwrap(), 0.0);
        assert_eq!(deming_schedule(299, &c).unwrap(), 0.0);
        assert!((deming_schedule(300, &c).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(deming_schedule(319, &c).unwrap(), 0.2);
        assert_eq!(deming_schedule(999, &c).unwrap(), 0.2);
        assert!(matches!(deming_schedule(1000, &c), Err(EivError::Usage(_))));
        let traj: Vec<f64> = (0..c.n_train()).map(|e| deming_schedule(e, &c).unwrap()).collect();
        assert!(traj.windows(2).all(|w| w[0] <= w[1]));
        c.deming_factor = 0.7;
        c.n_increase_delta = 3;
        assert_eq!(deming_schedule(302, &c).unwrap(), 0.7);
    }

    #[test]
    fn learning_rate_tail() {
        let c = TrainConfig::mexican_hat(0.2, 0);
        assert_eq!(c.learning_rate_at(949), 1e-3);
        assert_eq!(c.learning_rate_at(950), 1e-4);
        assert_eq!(c.learning_rate_at(999), 1e-4);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = vec![0.5, -1.0];
        let mut s = AdamState::new(2);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0, 0.0], &mut s, 1e-3).unwrap();
        }
        assert_eq!(p, vec![0.5, -1.0]);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn adam_first_step_moves_by_rate() {
        for g in [3.0, -0.02, 1e3] {
            let mut p = vec![0.0];
            let mut s = AdamState::new(1);
            adam_step(&mut p, &[g], &mut s, 1e-3).unwrap();
            // m_hat = g, v_hat = g^2
            let want = -1e-3 * g / (g.abs() + 1e-8);
            assert!((p[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_constant_gradient_simulation() {
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut q = 1.0f64;
        for t in 1..=200 {
            let prev = p[0];
            adam_step(&mut p, &[2.0], &mut s, 1e-2).unwrap();
            m = 0.9 * m + 0.1 * 2.0;
            v = 0.999 * v + 0.001 * 4.0;
            q -= 1e-2 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert!(p[0] < prev);
            assert!(((prev - p[0]) - 1e-2).abs() < 1e-9);
        }
        assert!((p[0] - q).abs() < 1e-12);
        assert!(adam_step(&mut p, &[1.0, 2.0], &mut s, 1e-2).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(0.2);
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = small_config(-0.1);
        assert!(c.validate().is_err());
        c.deming_factor = 0.1;
        c.zeta_samples = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn training_is_reproducible_and_records_schedule() {
        let ds = small_data(10);
        let net = MlpConfig::new(vec![1, 6, 1], Activation::Relu, 0.5).unwrap();
        let cfg = small_config(0.4);
        let a = train(&ds, &net, &cfg).unwrap();
        let b = train(&ds, &net, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.record.sigma_y.len(), cfg.n_train());
        for (e, d) in a.record.deming.iter().enumerate() {
            assert_eq!(*d, deming_schedule(e, &cfg).unwrap());
        }
        // log sigma_y^2 is frozen during the first phase
        assert_eq!(a.record.sigma_y[0], 1.0);
        assert_eq!(a.record.sigma_y[1], 1.0);
        assert_ne!(a.record.sigma_y[2], 1.0);
        assert_eq!(a.noise.deming, 0.4);
        let c = train_non_eiv(&ds, &net, &cfg).unwrap();
        assert_eq!(c.record.sigma_y[1], 1.0);
        assert!(c.record.deming.iter().all(|&d| d == 0.0));
        assert_eq!(c.noise.deming, 0.0);
    }

    #[test]
    fn rejects_mismatched_dataset() {
        let ds = small_data(5);
        let net = MlpConfig::new(vec![2, 4, 1], Activation::Relu, 0.5).unwrap();
        assert!(matches!(train(&ds, &net, &small_config(0.1)), Err(EivError::Shape { .. })));
    }

    #[test]
    fn diverging_training_aborts_with_diagnostics() {
        let ds = small_data(8);
        let net = MlpConfig::new(vec![1, 4, 1], Activation::Relu, 0.0).unwrap();
        let mut cfg = small_config(0.1);
        cfg.initial_log_sigma_y_sq = -800.0;
        match train(&ds, &net, &cfg) {
            Err(EivError::NonFiniteLoss { epoch, batch, log_sigma_y_sq, .. }) => {
                assert_eq!((epoch, batch), (0, 0));
                assert_eq!(log_sigma_y_sq, -800.0);
            }
            other => panic!("expected NaN abort, got {other:?}"),
        }
    }
}
