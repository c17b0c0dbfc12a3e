//! Fully connected networks with Bernoulli dropout on hidden activations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EivError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{matmul_into, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Layer widths run from input width through the hidden widths to output width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub dropout_rate: f64,
}

impl MlpConfig {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, dropout_rate: f64) -> Result<Self> {
        let cfg = MlpConfig {
            layer_widths,
            activation,
            dropout_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Widths must be positive and there must be an input and an output layer.
    /// A network without hidden layers is affine and ignores dropout.
    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(EivError::Config(
                "a network needs at least input and output widths".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(EivError::Config("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(EivError::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.layer_widths[1..self.layer_widths.len() - 1]
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSpan {
    fan_in: usize,
    fan_out: usize,
    weight: usize,
    bias: usize,
}

/// Weights (`fan_in x fan_out`, row-major) and biases of every layer, stored
/// contiguously so optimizers and norms can work on one flat slice.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    flat: Vec<f64>,
    spans: Vec<LayerSpan>,
}

impl NetworkParams {
    pub fn zeros(config: &MlpConfig) -> Self {
        let mut spans = Vec::with_capacity(config.n_layers());
        let mut offset = 0;
        for w in config.layer_widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            spans.push(LayerSpan {
                fan_in,
                fan_out,
                weight: offset,
                bias: offset + fan_in * fan_out,
            });
            offset += fan_in * fan_out + fan_out;
        }
        NetworkParams {
            flat: vec![0.0; offset],
            spans,
        }
    }

    /// Glorot-uniform weights in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init<R: Rng + ?Sized>(config: &MlpConfig, rng: &mut R) -> Self {
        let mut params = NetworkParams::zeros(config);
        for i in 0..params.spans.len() {
            let s = params.spans[i];
            let limit = (6.0 / (s.fan_in + s.fan_out) as f64).sqrt();
            for w in params.weight_mut(i) {
                *w = rng.random_range(-limit..limit);
            }
        }
        params
    }

    /// Rebuilds parameters from per-layer `(weight, bias)` buffers.
    pub fn from_layers(config: &MlpConfig, layers: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let mut params = NetworkParams::zeros(config);
        if layers.len() != params.spans.len() {
            return Err(EivError::shape(
                "network layers",
                &[params.spans.len()],
                &[layers.len()],
            ));
        }
        for (i, (w, b)) in layers.iter().enumerate() {
            let s = params.spans[i];
            if w.len() != s.fan_in * s.fan_out || b.len() != s.fan_out {
                return Err(EivError::shape(
                    format!("layer {i}"),
                    &[s.fan_in * s.fan_out, s.fan_out],
                    &[w.len(), b.len()],
                ));
            }
            params.weight_mut(i).copy_from_slice(w);
            params.bias_mut(i).copy_from_slice(b);
        }
        Ok(params)
    }

    pub fn n_layers(&self) -> usize {
        self.spans.len()
    }

    pub fn layer_shape(&self, i: usize) -> (usize, usize) {
        (self.spans[i].fan_in, self.spans[i].fan_out)
    }

    pub fn weight(&self, i: usize) -> &[f64] {
        let s = self.spans[i];
        &self.flat[s.weight..s.bias]
    }

    pub fn weight_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.spans[i];
        &mut self.flat[s.weight..s.bias]
    }

    pub fn bias(&self, i: usize) -> &[f64] {
        let s = self.spans[i];
        &self.flat[s.bias..s.bias + s.fan_out]
    }

    pub fn bias_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.spans[i];
        &mut self.flat[s.bias..s.bias + s.fan_out]
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// `|theta|^2` over all weights and biases.
    pub fn squared_norm(&self) -> f64 {
        self.flat.iter().map(|v| v * v).sum()
    }

    /// Registers every weight and bias as a tape leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let layers = (0..self.spans.len())
            .map(|i| {
                let (fi, fo) = self.layer_shape(i);
                let w = tape.param(
                    format!("layer{i}.weight"),
                    Tensor::from_parts(vec![fi, fo], self.weight(i).to_vec()),
                );
                let b = tape.param(
                    format!("layer{i}.bias"),
                    Tensor::from_parts(vec![fo], self.bias(i).to_vec()),
                );
                (w, b)
            })
            .collect();
        ParamVars { layers }
    }
}

/// Tape handles of a registered [`NetworkParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
}

impl ParamVars {
    /// Collects the parameter gradient into the same flat layout as [`NetworkParams`].
    pub fn flat_gradient(&self, grads: &crate::tape::Gradients, out: &mut [f64]) {
        let mut offset = 0;
        for &(w, b) in &self.layers {
            for v in [w, b] {
                let n = grads.numel(v);
                match grads.raw(v) {
                    Some(g) => out[offset..offset + n].copy_from_slice(g),
                    None => out[offset..offset + n].fill(0.0),
                }
                offset += n;
            }
        }
    }

    /// `sum |theta|^2` as a tape node.
    pub fn squared_norm(&self, tape: &mut Tape) -> Result<Var> {
        let mut total: Option<Var> = None;
        for &(w, b) in &self.layers {
            for v in [w, b] {
                let sq = tape.square(v);
                let s = tape.sum(sq);
                total = Some(match total {
                    Some(t) => tape.add(t, s)?,
                    None => s,
                });
            }
        }
        total.ok_or_else(|| EivError::Usage("network has no parameters".into()))
    }
}

/// Binary keep-masks for `count` independent dropout draws.
///
/// `layers[h]` has shape `[count, width_h]` for hidden layer `h`; entries are 0 or 1.
/// Kept activations are scaled by `1 / (1 - rate)` when the masks are applied.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMaskSet {
    rate: f64,
    count: usize,
    layers: Vec<Tensor>,
}

impl DropoutMaskSet {
    /// Masks that keep every unit, for deterministic evaluation.
    pub fn keep_all(config: &MlpConfig, count: usize) -> Self {
        DropoutMaskSet {
            rate: 0.0,
            count,
            layers: config
                .hidden_widths()
                .iter()
                .map(|&w| Tensor::filled(&[count, w], 1.0))
                .collect(),
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    /// The `m`-th draw as a set of size one.
    pub fn sample(&self, m: usize) -> DropoutMaskSet {
        DropoutMaskSet {
            rate: self.rate,
            count: 1,
            layers: self
                .layers
                .iter()
                .map(|t| Tensor::from_parts(vec![1, t.cols()], t.row(m).to_vec()))
                .collect(),
        }
    }

    /// Fraction of retained units over all draws and layers.
    pub fn retention_fraction(&self) -> f64 {
        let (kept, total) = self.layers.iter().fold((0.0, 0usize), |(k, n), t| {
            (k + t.data().iter().sum::<f64>(), n + t.len())
        });
        if total == 0 {
            1.0
        } else {
            kept / total as f64
        }
    }

    /// Scaled per-row masks for a batch laid out draw-major: rows
    /// `m * rows_per_draw .. (m + 1) * rows_per_draw` all use draw `m`.
    pub fn row_masks(&self, rows_per_draw: usize) -> RowMasks {
        let scale = 1.0 / (1.0 - self.rate);
        RowMasks(
            self.layers
                .iter()
                .map(|t| {
                    let scaled = Tensor::from_parts(
                        t.shape().to_vec(),
                        t.data().iter().map(|&k| k * scale).collect(),
                    );
                    scaled.repeat_rows(rows_per_draw)
                })
                .collect(),
        )
    }
}

/// Draws `count` independent Bernoulli(1 - p) keep-masks for every hidden layer.
///
/// Random numbers are consumed draw by draw, layer by layer, unit by unit.
pub fn sample_dropout_masks<R: Rng + ?Sized>(
    rng: &mut R,
    config: &MlpConfig,
    count: usize,
) -> Result<DropoutMaskSet> {
    if count == 0 {
        return Err(EivError::Usage("need at least one dropout draw".into()));
    }
    let keep = 1.0 - config.dropout_rate;
    let widths = config.hidden_widths();
    let mut data: Vec<Vec<f64>> = widths.iter().map(|&w| Vec::with_capacity(count * w)).collect();
    for _ in 0..count {
        for (buf, &w) in data.iter_mut().zip(widths) {
            for _ in 0..w {
                let u: f64 = rng.random();
                buf.push(if u < keep { 1.0 } else { 0.0 });
            }
        }
    }
    Ok(DropoutMaskSet {
        rate: config.dropout_rate,
        count,
        layers: data
            .into_iter()
            .zip(widths)
            .map(|(d, &w)| Tensor::from_parts(vec![count, w], d))
            .collect(),
    })
}

/// Scaled dropout multipliers, one `[rows, width]` matrix per hidden layer.
#[derive(Debug, Clone)]
pub struct RowMasks(pub Vec<Tensor>);

impl RowMasks {
    fn check(&self, config: &MlpConfig, rows: usize) -> Result<()> {
        let hidden = config.hidden_widths();
        if self.0.len() != hidden.len() {
            return Err(EivError::shape("dropout masks", &[hidden.len()], &[self.0.len()]));
        }
        for (t, &w) in self.0.iter().zip(hidden) {
            if t.shape() != [rows, w] {
                return Err(EivError::shape("dropout mask", &[rows, w], t.shape()));
            }
        }
        Ok(())
    }
}

fn check_input(config: &MlpConfig, shape: &[usize]) -> Result<()> {
    if shape.len() != 2 || shape[1] != config.input_width() {
        return Err(EivError::shape(
            "network input",
            &[shape.first().copied().unwrap_or(0), config.input_width()],
            shape,
        ));
    }
    Ok(())
}

/// Records `f_theta(input)` on the tape. `input` is `[rows, n_x]`, the result `[rows, n_y]`.
pub fn mlp_forward(
    tape: &mut Tape,
    config: &MlpConfig,
    params: &ParamVars,
    input: Var,
    masks: &RowMasks,
) -> Result<Var> {
    check_input(config, tape.shape(input))?;
    let rows = tape.shape(input)[0];
    masks.check(config, rows)?;
    let last = params.layers.len() - 1;
    let mut h = input;
    for (i, &(w, b)) in params.layers.iter().enumerate() {
        let z = tape.matmul(h, w)?;
        let z = tape.add_row(z, b)?;
        if i == last {
            return Ok(z);
        }
        let a = match config.activation {
            Activation::Relu => tape.relu(z),
            Activation::Tanh => tape.tanh(z),
        };
        let m = tape.constant(masks.0[i].clone());
        h = tape.mul(a, m)?;
    }
    unreachable!("network has at least one layer")
}

/// Tape-free evaluation with the same arithmetic as [`mlp_forward`].
pub fn mlp_evaluate(
    config: &MlpConfig,
    params: &NetworkParams,
    input: &Tensor,
    masks: &RowMasks,
) -> Result<Tensor> {
    check_input(config, input.shape())?;
    let rows = input.rows();
    masks.check(config, rows)?;
    let last = params.n_layers() - 1;
    let mut h = input.data().to_vec();
    for i in 0..params.n_layers() {
        let (fi, fo) = params.layer_shape(i);
        let mut z = vec![0.0; rows * fo];
        matmul_into(&h, params.weight(i), &mut z, rows, fi, fo);
        let b = params.bias(i);
        for row in z.chunks_mut(fo) {
            row.iter_mut().zip(b).for_each(|(x, bj)| *x += bj);
        }
        if i < last {
            for (x, m) in z.iter_mut().zip(masks.0[i].data()) {
                *x = config.activation.apply(*x) * m;
            }
        }
        h = z;
    }
    Ok(Tensor::from_parts(vec![rows, config.output_width()], h))
}
