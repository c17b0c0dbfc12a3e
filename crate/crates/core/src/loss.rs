//! Monte-Carlo negative ELBO for errors-in-variables regression and the
//! ordinary (non-EiV) Gaussian loss it reduces to when the input noise vanishes.
//!
//! Both losses are assembled on a [`Tape`] from pre-drawn randomness, so the
//! loss is a deterministic function of the network weights and `log sigma_y^2`
//! once the draws are fixed. Training draws fresh randomness per minibatch;
//! gradient checks reuse one set of draws.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EivError, Result};
use crate::nn::{mlp_forward, sample_dropout_masks, DropoutMaskSet, MlpConfig, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Output noise is learned through `log sigma_y^2`; input noise is tied to it
/// by the effective Deming factor, `sigma_x = deming * sigma_y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseState {
    pub log_sigma_y_sq: f64,
    /// Effective Deming factor (the warm-up value during training).
    pub deming: f64,
}

impl NoiseState {
    pub fn new(log_sigma_y_sq: f64, deming: f64) -> Result<Self> {
        if !(deming >= 0.0) || !deming.is_finite() {
            return Err(EivError::Domain(format!("Deming factor {deming} must be >= 0")));
        }
        if !log_sigma_y_sq.is_finite() {
            return Err(EivError::Domain("log sigma_y^2 must be finite".into()));
        }
        Ok(NoiseState {
            log_sigma_y_sq,
            deming,
        })
    }

    pub fn sigma_y(&self) -> f64 {
        (0.5 * self.log_sigma_y_sq).exp()
    }

    pub fn sigma_x(&self) -> f64 {
        self.deming * self.sigma_y()
    }
}

/// Prior on the true inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ZetaPrior {
    /// Flat prior, the `lambda_zeta -> infinity` limit.
    #[default]
    Improper,
    Gaussian { lambda: f64 },
}

/// Priors on weights and inputs.
///
/// The weight prior `N(0, lambda_theta^2)` enters only through the composite
/// coefficient `c = 1 / (2 N lambda_theta^2)`, which is stored as given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub weight_decay: f64,
    #[serde(default)]
    pub zeta: ZetaPrior,
}

impl PriorConfig {
    pub fn new(weight_decay: f64, zeta: ZetaPrior) -> Result<Self> {
        if !(weight_decay > 0.0) || !weight_decay.is_finite() {
            return Err(EivError::Domain(format!(
                "weight-decay coefficient {weight_decay} must be positive"
            )));
        }
        if let ZetaPrior::Gaussian { lambda } = zeta {
            if !(lambda > 0.0) || !lambda.is_finite() {
                return Err(EivError::Domain(format!("lambda_zeta {lambda} must be positive")));
            }
        }
        Ok(PriorConfig { weight_decay, zeta })
    }

    /// Prior from `lambda_theta` and the dataset size.
    pub fn from_lambda_theta(lambda_theta: f64, n: usize, zeta: ZetaPrior) -> Result<Self> {
        PriorConfig::new(1.0 / (2.0 * n as f64 * lambda_theta * lambda_theta), zeta)
    }

    pub fn lambda_theta(&self, n: usize) -> f64 {
        (1.0 / (2.0 * n as f64 * self.weight_decay)).sqrt()
    }
}

/// A minibatch: `x` is `[M, n_x]`, `y` is `[M, n_y]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub n_total: usize,
}

impl Batch {
    pub fn new(x: Tensor, y: Tensor, n_total: usize) -> Result<Self> {
        if x.shape().len() != 2 || y.shape().len() != 2 {
            return Err(EivError::Usage("batch inputs and labels must be matrices".into()));
        }
        if x.rows() != y.rows() {
            return Err(EivError::shape("batch rows", &[x.rows()], &[y.rows()]));
        }
        if n_total == 0 {
            return Err(EivError::Usage("dataset size must be positive".into()));
        }
        Ok(Batch { x, y, n_total })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean factor and standard deviation of `pi(zeta | x, sigma_x^2)`:
/// `zeta ~ N(shrink * x, scale^2 I)`.
pub fn zeta_posterior_params(sigma_x: f64, prior: &ZetaPrior) -> (f64, f64) {
    match *prior {
        ZetaPrior::Improper => (1.0, sigma_x),
        ZetaPrior::Gaussian { lambda } => {
            let shrink = 1.0 / (1.0 + sigma_x * sigma_x / (lambda * lambda));
            (shrink, shrink.sqrt() * sigma_x)
        }
    }
}

/// Latent-input samples in reparametrized form `zeta = shrink * x + scale * eps`.
#[derive(Debug, Clone)]
pub struct ZetaSamples {
    /// Standard-normal draws, `[M * L, n_x]`, rows grouped by datum.
    pub eps: Tensor,
    pub per_datum: usize,
    pub values: Tensor,
}

/// Standard-normal matrix, filled row by row.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Draws `per_datum` samples of each row of `x` from the latent-input posterior.
pub fn sample_zeta_posterior<R: Rng + ?Sized>(
    x: &Tensor,
    noise: &NoiseState,
    prior: &PriorConfig,
    per_datum: usize,
    rng: &mut R,
) -> Result<ZetaSamples> {
    if per_datum == 0 {
        return Err(EivError::Usage("need at least one zeta sample".into()));
    }
    let eps = standard_normal(rng, x.rows() * per_datum, x.cols());
    let values = zeta_from_eps(x, &eps, per_datum, noise.sigma_x(), &prior.zeta);
    Ok(ZetaSamples {
        eps,
        per_datum,
        values,
    })
}

/// Deterministic map from frozen `eps` to latent-input samples.
pub fn zeta_from_eps(x: &Tensor, eps: &Tensor, per_datum: usize, sigma_x: f64, prior: &ZetaPrior) -> Tensor {
    let (shrink, scale) = zeta_posterior_params(sigma_x, prior);
    let rep = x.repeat_rows(per_datum);
    let data = rep
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&xv, &e)| shrink * xv + scale * e)
        .collect();
    Tensor::from_parts(rep.shape().to_vec(), data)
}

/// `sum_d log N(y_d | mean_d, sigma^2)`.
pub fn gaussian_log_density(y: &[f64], mean: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(EivError::Domain(format!("sigma {sigma} must be positive")));
    }
    if y.len() != mean.len() {
        return Err(EivError::shape("gaussian_log_density", &[y.len()], &[mean.len()]));
    }
    let var = sigma * sigma;
    Ok(y
        .iter()
        .zip(mean)
        .map(|(a, b)| -(a - b) * (a - b) / (2.0 * var) - 0.5 * (2.0 * PI * var).ln())
        .sum())
}

pub(crate) fn logsumexp_unchecked(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log sum_k exp(v_k)`, shifted by the maximum.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(EivError::Usage("logsumexp of an empty list".into()));
    }
    Ok(logsumexp_unchecked(values))
}

/// `(1 - p) c |theta|^2`, the KL term of Bernoulli dropout already divided by N.
pub fn kl_weight_decay(squared_norm: f64, dropout_rate: f64, prior: &PriorConfig) -> f64 {
    (1.0 - dropout_rate) * prior.weight_decay * squared_norm
}

/// `log pi(x | sigma_x^2)` for one datum. Zero for the improper prior, whose
/// divergent `-log lambda_zeta` constant is dropped.
pub fn marginal_log_term(x: &[f64], noise: &NoiseState, prior: &PriorConfig) -> f64 {
    match prior.zeta {
        ZetaPrior::Improper => 0.0,
        ZetaPrior::Gaussian { lambda } => {
            let sx = noise.sigma_x();
            let var = sx * sx + lambda * lambda;
            x.iter()
                .map(|v| -v * v / (2.0 * var) - 0.5 * (2.0 * PI * var).ln())
                .sum()
        }
    }
}

/// Variational family over network weights. Only Bernoulli dropout is provided.
pub trait VariationalFamily {
    type Draw;

    /// Draws `count` independent weight samples.
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, net: &MlpConfig, count: usize) -> Result<Self::Draw>;

    /// Network output where rows `m * rows_per_draw ..` use weight sample `m`.
    fn forward(
        &self,
        tape: &mut Tape,
        net: &MlpConfig,
        params: &ParamVars,
        input: Var,
        draw: &Self::Draw,
        rows_per_draw: usize,
    ) -> Result<Var>;

    /// `KL(q || prior) / N` up to an additive constant.
    fn kl_term(&self, tape: &mut Tape, net: &MlpConfig, params: &ParamVars, prior: &PriorConfig) -> Result<Var>;
}

/// Monte Carlo dropout: the variational parameters are the network weights.
#[derive(Debug, Clone, Copy, Default)]
pub struct BernoulliDropout;

impl VariationalFamily for BernoulliDropout {
    type Draw = DropoutMaskSet;

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, net: &MlpConfig, count: usize) -> Result<DropoutMaskSet> {
        sample_dropout_masks(rng, net, count)
    }

    fn forward(
        &self,
        tape: &mut Tape,
        net: &MlpConfig,
        params: &ParamVars,
        input: Var,
        draw: &DropoutMaskSet,
        rows_per_draw: usize,
    ) -> Result<Var> {
        mlp_forward(tape, net, params, input, &draw.row_masks(rows_per_draw))
    }

    fn kl_term(&self, tape: &mut Tape, net: &MlpConfig, params: &ParamVars, prior: &PriorConfig) -> Result<Var> {
        let sq = params.squared_norm(tape)?;
        Ok(tape.scale(sq, (1.0 - net.dropout_rate) * prior.weight_decay))
    }
}

/// Randomness of one EiV loss evaluation: one weight draw per datum and
/// `L` standard-normal input perturbations per datum.
#[derive(Debug, Clone)]
pub struct EivDraws<D> {
    pub weights: D,
    pub eps: Tensor,
    pub per_datum: usize,
}

impl<D> EivDraws<D> {
    /// Weight draws are taken from `rng` before the input perturbations.
    pub fn sample<F, R>(family: &F, rng: &mut R, net: &MlpConfig, batch_len: usize, per_datum: usize) -> Result<Self>
    where
        F: VariationalFamily<Draw = D>,
        R: Rng + ?Sized,
    {
        if per_datum == 0 {
            return Err(EivError::Usage("need at least one zeta sample".into()));
        }
        let weights = family.draw(rng, net, batch_len)?;
        let eps = standard_normal(rng, batch_len * per_datum, net.input_width());
        Ok(EivDraws {
            weights,
            eps,
            per_datum,
        })
    }
}

/// Per-row `log N(y_r | f_r, exp(s))` as a `[rows]` node.
fn row_log_density(tape: &mut Tape, f: Var, y: Var, log_sigma_y_sq: Var) -> Result<Var> {
    let n_y = tape.shape(f)[1] as f64;
    let r = tape.sub(f, y)?;
    let sq = tape.square(r);
    let rs = tape.row_sum(sq);
    let neg_s = tape.scale(log_sigma_y_sq, -1.0);
    let inv_var = tape.exp(neg_s);
    let quad = tape.mul_scalar(rs, inv_var)?;
    let quad = tape.scale(quad, -0.5);
    let norm = tape.add_const(log_sigma_y_sq, LN_2PI);
    let norm = tape.scale(norm, -0.5 * n_y);
    tape.add_scalar(quad, norm)
}

fn check_batch(net: &MlpConfig, batch: &Batch) -> Result<()> {
    if batch.x.cols() != net.input_width() {
        return Err(EivError::shape("batch inputs", &[net.input_width()], &[batch.x.cols()]));
    }
    if batch.y.cols() != net.output_width() {
        return Err(EivError::shape("batch labels", &[net.output_width()], &[batch.y.cols()]));
    }
    Ok(())
}

/// Records the EiV Monte-Carlo loss
///
/// `-(1/M) sum_m log( (1/L) sum_l N(y_m | f_{theta_m}(zeta_{m,l}), sigma_y^2) )
///  + KL/N - (1/M) sum_m log pi(x_m | sigma_x^2)`
///
/// with `sigma_x = deming * sigma_y` and `zeta_{m,l}` reparametrized from the
/// frozen `draws.eps`, so the gradient in `log_sigma_y_sq` includes the path
/// through the latent inputs.
#[allow(clippy::too_many_arguments)]
pub fn eiv_mc_loss<F: VariationalFamily>(
    tape: &mut Tape,
    family: &F,
    net: &MlpConfig,
    params: &ParamVars,
    log_sigma_y_sq: Var,
    deming: f64,
    prior: &PriorConfig,
    batch: &Batch,
    draws: &EivDraws<F::Draw>,
) -> Result<Var> {
    check_batch(net, batch)?;
    let m = batch.len();
    let l = draws.per_datum;
    if draws.eps.shape() != [m * l, net.input_width()] {
        return Err(EivError::shape("zeta noise", &[m * l, net.input_width()], draws.eps.shape()));
    }

    let half = tape.scale(log_sigma_y_sq, 0.5);
    let sigma_y = tape.exp(half);
    let sigma_x = tape.scale(sigma_y, deming);

    let x_rep = tape.constant(batch.x.repeat_rows(l));
    let eps = tape.constant(draws.eps.clone());
    let zeta = match prior.zeta {
        ZetaPrior::Improper => {
            let shift = tape.mul_scalar(eps, sigma_x)?;
            tape.add(x_rep, shift)?
        }
        ZetaPrior::Gaussian { lambda } => {
            let sx2 = tape.square(sigma_x);
            let ratio = tape.scale(sx2, 1.0 / (lambda * lambda));
            let denom = tape.add_const(ratio, 1.0);
            let shrink = tape.powf(denom, -1.0);
            let mean = tape.mul_scalar(x_rep, shrink)?;
            let root = tape.powf(shrink, 0.5);
            let sd = tape.mul(root, sigma_x)?;
            let shift = tape.mul_scalar(eps, sd)?;
            tape.add(mean, shift)?
        }
    };

    let f = family.forward(tape, net, params, zeta, &draws.weights, l)?;
    let y_rep = tape.constant(batch.y.repeat_rows(l));
    let logp = row_log_density(tape, f, y_rep, log_sigma_y_sq)?;
    let lse = tape.group_logsumexp(logp, l)?;
    let total = tape.sum(lse);
    let data = tape.scale(total, -1.0 / m as f64);
    let data = tape.add_const(data, (l as f64).ln());

    let kl = family.kl_term(tape, net, params, prior)?;
    let mut loss = tape.add(data, kl)?;

    if let ZetaPrior::Gaussian { lambda } = prior.zeta {
        let sum_x2 = batch.x.sum_of_squares();
        let n_x = net.input_width() as f64;
        let sx2 = tape.square(sigma_x);
        let var = tape.add_const(sx2, lambda * lambda);
        let inv = tape.powf(var, -1.0);
        let quad = tape.scale(inv, -0.5 * sum_x2);
        let ln_var = tape.ln(var);
        let norm = tape.add_const(ln_var, LN_2PI);
        let norm = tape.scale(norm, -0.5 * m as f64 * n_x);
        let marginal = tape.add(quad, norm)?;
        let marginal = tape.scale(marginal, -1.0 / m as f64);
        loss = tape.add(loss, marginal)?;
    }
    Ok(loss)
}

/// Records the non-EiV loss `-(1/M) sum_m log N(y_m | f_{theta_m}(x_m), sigma_y^2) + KL/N`.
#[allow(clippy::too_many_arguments)]
pub fn non_eiv_loss<F: VariationalFamily>(
    tape: &mut Tape,
    family: &F,
    net: &MlpConfig,
    params: &ParamVars,
    log_sigma_y_sq: Var,
    prior: &PriorConfig,
    batch: &Batch,
    weights: &F::Draw,
) -> Result<Var> {
    check_batch(net, batch)?;
    let m = batch.len();
    let x = tape.constant(batch.x.clone());
    let f = family.forward(tape, net, params, x, weights, 1)?;
    let y = tape.constant(batch.y.clone());
    let logp = row_log_density(tape, f, y, log_sigma_y_sq)?;
    let total = tape.sum(logp);
    let data = tape.scale(total, -1.0 / m as f64);
    let kl = family.kl_term(tape, net, params, prior)?;
    tape.add(data, kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_density_at_mode_and_unit_deviation() {
        let half_ln_2pi = 0.5 * (2.0 * PI).ln();
        assert!((gaussian_log_density(&[0.3], &[0.3], 1.0).unwrap() + half_ln_2pi).abs() < 1e-15);
        assert!((half_ln_2pi - 0.918_938_5).abs() < 1e-7);
        let v = gaussian_log_density(&[1.0], &[0.0], 1.0).unwrap();
        assert!((v - (-0.5 - half_ln_2pi)).abs() < 1e-15);
    }

    #[test]
    fn gaussian_density_rejects_non_positive_sigma() {
        assert!(matches!(
            gaussian_log_density(&[0.0], &[0.0], 0.0),
            Err(EivError::Domain(_))
        ));
        assert!(gaussian_log_density(&[0.0], &[0.0], -1.0).is_err());
    }

    #[test]
    fn gaussian_density_two_dims_against_textbook_formula() {
        // Direct product of two univariate densities, evaluated in linear space.
        let sigma: f64 = 0.5;
        let pdf = |d: f64| (-(d * d) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt());
        let want = (pdf(1.0) * pdf(2.0)).ln();
        let got = gaussian_log_density(&[1.0, 2.0], &[0.0, 0.0], sigma).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_cases() {
        assert_eq!(logsumexp(&[3.25]).unwrap(), 3.25);
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(logsumexp(&[]), Err(EivError::Usage(_))));
        // -1000 + log(1 + e^-0.5); e^-0.5 = 0.60653065971263342360...
        let want = -1000.0 + (1.0f64 + 0.606_530_659_712_633_4).ln();
        let got = logsumexp(&[-1000.0, -1000.5]).unwrap();
        assert!(got.is_finite());
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn kl_weight_decay_values() {
        let p = PriorConfig::new(1e-7, ZetaPrior::Improper).unwrap();
        assert_eq!(kl_weight_decay(0.0, 0.5, &p), 0.0);
        assert!((kl_weight_decay(100.0, 0.5, &p) - 5e-6).abs() < 1e-20);
        let unit = PriorConfig::new(1.0, ZetaPrior::Improper).unwrap();
        assert_eq!(kl_weight_decay(3.0, 0.0, &unit), 3.0);
    }

    #[test]
    fn composite_coefficient_round_trips_through_lambda_theta() {
        let p = PriorConfig::new(1e-7, ZetaPrior::Improper).unwrap();
        let lt = p.lambda_theta(300);
        let back = PriorConfig::from_lambda_theta(lt, 300, ZetaPrior::Improper).unwrap();
        assert!((back.weight_decay - 1e-7).abs() < 1e-20);
        assert!(PriorConfig::new(0.0, ZetaPrior::Improper).is_err());
        assert!(PriorConfig::new(1.0, ZetaPrior::Gaussian { lambda: -1.0 }).is_err());
    }

    #[test]
    fn marginal_term_cases() {
        let improper = PriorConfig::new(1.0, ZetaPrior::Improper).unwrap();
        let noise = NoiseState::new(0.3, 0.7).unwrap();
        assert_eq!(marginal_log_term(&[1.0, -2.0], &noise, &improper), 0.0);

        let std_normal = PriorConfig::new(1.0, ZetaPrior::Gaussian { lambda: 1.0 }).unwrap();
        let silent = NoiseState::new(0.0, 0.0).unwrap();
        assert!((marginal_log_term(&[0.0], &silent, &std_normal) + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);

        // lambda = 2, sigma_x = 1 => variance 5; density evaluated in linear space.
        let p = PriorConfig::new(1.0, ZetaPrior::Gaussian { lambda: 2.0 }).unwrap();
        let noise = NoiseState::new(0.0, 1.0).unwrap();
        let want = ((-1.0f64 / 10.0).exp() / (2.0 * PI * 5.0).sqrt()).ln();
        assert!((marginal_log_term(&[1.0], &noise, &p) - want).abs() < 1e-12);
    }

    #[test]
    fn zero_input_noise_leaves_inputs_unchanged() {
        let x = Tensor::matrix(2, 2, vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let noise = NoiseState::new(-1.0, 0.0).unwrap();
        let prior = PriorConfig::new(1e-3, ZetaPrior::Improper).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = sample_zeta_posterior(&x, &noise, &prior, 4, &mut rng).unwrap();
        assert_eq!(z.values, x.repeat_rows(4));
        assert!(sample_zeta_posterior(&x, &noise, &prior, 0, &mut rng).is_err());
    }

    #[test]
    fn gaussian_zeta_prior_shrinks_posterior() {
        let (shrink, scale) = zeta_posterior_params(1.0, &ZetaPrior::Gaussian { lambda: 1.0 });
        assert_eq!(shrink, 0.5);
        assert!((scale * scale - 0.5).abs() < 1e-15);
    }

    #[test]
    fn improper_posterior_moments() {
        // sigma_x = 0.06 from sigma_y = 0.3, deming = 0.2.
        let noise = NoiseState::new((0.09f64).ln(), 0.2).unwrap();
        assert!((noise.sigma_x() - 0.06).abs() < 1e-15);
        let prior = PriorConfig::new(1e-7, ZetaPrior::Improper).unwrap();
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let n = 100_000;
        let z = sample_zeta_posterior(&x, &noise, &prior, n, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let mean = z.values.data().iter().sum::<f64>() / n as f64;
        let var = z.values.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 1.0).abs() < 3.0 * 0.06 / (n as f64).sqrt());
        assert!((var.sqrt() / 0.06 - 1.0).abs() < 0.01);
    }
}
