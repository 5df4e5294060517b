//! Encoder and decoder MLPs with exact reverse-mode gradients and Adam.
//!
//! Both networks are three-layer perceptrons (tanh hidden layers, linear
//! output) whose backward pass is derived by hand, layer by layer. The
//! contract that matters is finite-difference agreement of the full training
//! loss gradient; the layer backward here supplies the encoder/decoder legs
//! of that chain. Parameters flatten to a single vector in a documented
//! order (encoder layers then decoder layers; per layer the row-major weight
//! matrix then the bias), which is the layout used by Adam, checkpoints, and
//! gradient checks.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};

/// Smooth nonlinearity applied after every layer except the last.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a`.
    #[inline]
    pub fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Layer-dimension list plus activation for one MLP.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config("MLP needs at least input and output dims".into()));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("MLP layer dims must be positive".into()));
        }
        Ok(MlpSpec { layer_dims, activation })
    }

    /// The `input -> h1 -> h2 -> output` shape used throughout the pipeline.
    pub fn three_layer(input: usize, h1: usize, h2: usize, output: usize) -> Result<Self> {
        MlpSpec::new(vec![input, h1, h2, output], Activation::Tanh)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }
}

/// One dense layer: `weights` is (out_dim, in_dim), bias length out_dim.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// All trainable parameters of the encoder-decoder pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderParams {
    enc_spec: MlpSpec,
    dec_spec: MlpSpec,
    pub encoder: Vec<Layer>,
    pub decoder: Vec<Layer>,
}

/// Glorot-uniform initialization: weights uniform in
/// `±sqrt(6 / (fan_in + fan_out))`, biases zero, deterministic per seed.
pub fn init_params(spec_enc: &MlpSpec, spec_dec: &MlpSpec, seed: u64) -> Result<AutoencoderParams> {
    if spec_enc.output_dim() != spec_dec.input_dim()
        || spec_enc.input_dim() != spec_dec.output_dim()
    {
        return Err(Error::Config(format!(
            "encoder {:?} and decoder {:?} are not mirror-compatible",
            spec_enc.layer_dims, spec_dec.layer_dims
        )));
    }
    let mut rng = stream_rng(seed, stream::INIT);
    let mut init_stack = |spec: &MlpSpec| -> Vec<Layer> {
        spec.layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new(-r, r).expect("valid uniform range");
                let weights =
                    Array2::from_shape_fn((fan_out, fan_in), |_| dist.sample(&mut rng));
                Layer { weights, bias: Array1::zeros(fan_out) }
            })
            .collect()
    };
    let encoder = init_stack(spec_enc);
    let decoder = init_stack(spec_dec);
    Ok(AutoencoderParams {
        enc_spec: spec_enc.clone(),
        dec_spec: spec_dec.clone(),
        encoder,
        decoder,
    })
}

impl AutoencoderParams {
    pub fn enc_spec(&self) -> &MlpSpec {
        &self.enc_spec
    }

    pub fn dec_spec(&self) -> &MlpSpec {
        &self.dec_spec
    }

    pub fn latent_dim(&self) -> usize {
        self.enc_spec.output_dim()
    }

    pub fn observation_dim(&self) -> usize {
        self.enc_spec.input_dim()
    }

    pub fn n_params(&self) -> usize {
        self.enc_spec.n_params() + self.dec_spec.n_params()
    }

    /// Encoder forward pass for a batch of observations (rows).
    pub fn encode_batch(&self, y: ArrayView2<'_, f64>) -> Array2<f64> {
        mlp_forward(&self.encoder, self.enc_spec.activation, y)
            .outputs
            .pop()
            .unwrap()
    }

    /// Decoder forward pass for a batch of latents (rows).
    pub fn decode_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        mlp_forward(&self.decoder, self.dec_spec.activation, x)
            .outputs
            .pop()
            .unwrap()
    }

    pub fn encode(&self, y: &[f64]) -> Vec<f64> {
        let view = ArrayView2::from_shape((1, y.len()), y).expect("row vector");
        self.encode_batch(view).row(0).to_vec()
    }

    pub fn decode(&self, x: &[f64]) -> Vec<f64> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        self.decode_batch(view).row(0).to_vec()
    }

    /// Serializes all parameters in the documented flat order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in self.encoder.iter().chain(self.decoder.iter()) {
            out.extend(layer.weights.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    /// Rebuilds parameters from the flat layout.
    pub fn from_flat(spec_enc: &MlpSpec, spec_dec: &MlpSpec, flat: &[f64]) -> Result<Self> {
        let expected = spec_enc.n_params() + spec_dec.n_params();
        if flat.len() != expected {
            return Err(Error::Config(format!(
                "flat parameter vector has length {}, expected {}",
                flat.len(),
                expected
            )));
        }
        let mut cursor = 0usize;
        let mut take_stack = |spec: &MlpSpec| -> Vec<Layer> {
            spec.layer_dims
                .windows(2)
                .map(|w| {
                    let (fan_in, fan_out) = (w[0], w[1]);
                    let n_w = fan_out * fan_in;
                    let weights =
                        Array2::from_shape_vec((fan_out, fan_in), flat[cursor..cursor + n_w].to_vec())
                            .unwrap();
                    cursor += n_w;
                    let bias = Array1::from_vec(flat[cursor..cursor + fan_out].to_vec());
                    cursor += fan_out;
                    Layer { weights, bias }
                })
                .collect()
        };
        let encoder = take_stack(spec_enc);
        let decoder = take_stack(spec_dec);
        Ok(AutoencoderParams {
            enc_spec: spec_enc.clone(),
            dec_spec: spec_dec.clone(),
            encoder,
            decoder,
        })
    }

    /// Visits every parameter mutably in flat order, passing its flat index.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut i = 0usize;
        for layer in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            for w in layer.weights.iter_mut() {
                f(i, w);
                i += 1;
            }
            for b in layer.bias.iter_mut() {
                f(i, b);
                i += 1;
            }
        }
    }
}

/// Post-activation outputs of every layer, in order.
#[derive(Debug)]
pub struct ForwardTrace {
    pub outputs: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().unwrap()
    }
}

/// Batch forward pass: activation after every layer except the last.
pub fn mlp_forward(layers: &[Layer], act: Activation, input: ArrayView2<'_, f64>) -> ForwardTrace {
    let last = layers.len() - 1;
    let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let prev = if l == 0 { input } else { outputs[l - 1].view() };
        let mut z = prev.dot(&layer.weights.t());
        z += &layer.bias;
        if l != last {
            z.mapv_inplace(|v| act.apply(v));
        }
        outputs.push(z);
    }
    ForwardTrace { outputs }
}

/// Forward pass that rejects non-finite intermediates, naming the layer.
pub fn mlp_forward_checked(
    layers: &[Layer],
    act: Activation,
    input: ArrayView2<'_, f64>,
    net_name: &str,
) -> Result<ForwardTrace> {
    let trace = mlp_forward(layers, act, input);
    for (l, out) in trace.outputs.iter().enumerate() {
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite activation in {net_name} layer {l}"
            )));
        }
    }
    Ok(trace)
}

/// Gradients of one MLP: same shape as its layers.
pub type LayerGrads = Vec<Layer>;

/// Batch backward pass.
///
/// `d_output` is the loss gradient with respect to the (linear) final-layer
/// output. Returns per-layer gradients and the gradient with respect to the
/// input rows. Summation order is fixed by the underlying matrix products,
/// so results are bit-reproducible.
pub fn mlp_backward(
    layers: &[Layer],
    act: Activation,
    input: ArrayView2<'_, f64>,
    trace: &ForwardTrace,
    d_output: Array2<f64>,
) -> (LayerGrads, Array2<f64>) {
    let mut grads: Vec<Option<Layer>> = (0..layers.len()).map(|_| None).collect();
    let mut d_z = d_output;
    let mut d_input = None;
    for l in (0..layers.len()).rev() {
        let prev = if l == 0 { input } else { trace.outputs[l - 1].view() };
        let d_w = d_z.t().dot(&prev);
        let d_b = d_z.sum_axis(Axis(0));
        let d_prev = d_z.dot(&layers[l].weights);
        grads[l] = Some(Layer { weights: d_w, bias: d_b });
        if l == 0 {
            d_input = Some(d_prev);
        } else {
            let a_prev = &trace.outputs[l - 1];
            d_z = d_prev;
            d_z.zip_mut_with(a_prev, |dz, &a| *dz *= act.derivative_from_output(a));
        }
    }
    (
        grads.into_iter().map(Option::unwrap).collect(),
        d_input.unwrap(),
    )
}

/// Flattens encoder+decoder gradients in the documented parameter order.
pub fn flatten_grads(enc: &LayerGrads, dec: &LayerGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in enc.iter().chain(dec.iter()) {
        out.extend(layer.weights.iter());
        out.extend(layer.bias.iter());
    }
    out
}

/// Plain reconstruction loss `sum |decode(encode(y)) - y|^2` and its exact
/// gradient; a self-contained probe of the forward/backward machinery.
pub fn recon_loss_gradient(
    params: &AutoencoderParams,
    y: ArrayView2<'_, f64>,
) -> Result<(f64, Vec<f64>)> {
    let enc_trace = mlp_forward_checked(&params.encoder, params.enc_spec.activation, y, "encoder")?;
    let latents = enc_trace.output().view();
    let dec_trace =
        mlp_forward_checked(&params.decoder, params.dec_spec.activation, latents, "decoder")?;
    let residual = dec_trace.output() - &y;
    let loss = residual.iter().map(|r| r * r).sum();
    let (dec_grads, d_latent) = mlp_backward(
        &params.decoder,
        params.dec_spec.activation,
        latents,
        &dec_trace,
        2.0 * residual,
    );
    let (enc_grads, _) =
        mlp_backward(&params.encoder, params.enc_spec.activation, y, &enc_trace, d_latent);
    Ok((loss, flatten_grads(&enc_grads, &dec_grads)))
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second-moment accumulators over the flat parameter vector.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step_count: u64,
    hyper: AdamHyper,
}

impl AdamState {
    pub fn new(n_params: usize, hyper: AdamHyper) -> Self {
        AdamState { m: vec![0.0; n_params], v: vec![0.0; n_params], step_count: 0, hyper }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn hyper(&self) -> &AdamHyper {
        &self.hyper
    }
}

/// One Adam update over the flat gradient, with bias correction.
pub fn adam_step(
    params: &mut AutoencoderParams,
    grad: &[f64],
    state: &mut AdamState,
) -> Result<()> {
    if grad.len() != state.m.len() || grad.len() != params.n_params() {
        return Err(Error::Config(format!(
            "gradient length {} does not match parameter count {}",
            grad.len(),
            params.n_params()
        )));
    }
    state.step_count += 1;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(state.step_count as i32);
    let bc2 = 1.0 - h.beta2.powi(state.step_count as i32);
    let (m, v) = (&mut state.m, &mut state.v);
    params.for_each_param_mut(|i, p| {
        let g = grad[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        *p -= h.lr * m_hat / (v_hat.sqrt() + h.epsilon);
    });
    Ok(())
}
