//! A small fully-convolutional lesion segmenter with hand-written gradients.
//!
//! The network is a stack of same-padded 2-D convolutions with `tanh`
//! between layers and a logistic output. Its parameter layout is
//! `[out, in, k, k]` followed by `[out]` for every layer, so the architecture
//! can be recovered from a [`ParameterSet`] alone.
//!
//! Input channels are standardized against nominal brain tissue: the DWI
//! image minus [`DWI_INPUT_CENTER`], and the ADC map minus
//! [`ADC_INPUT_CENTER`] divided by [`ADC_INPUT_SPREAD`]. Healthy brain then
//! sits near zero in both channels and lesions near +1 / -1.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::params::ParameterSet;
use crate::seed;
use crate::synth::PhantomStudy;

pub const DWI_INPUT_CENTER: f64 = 1.0;
pub const ADC_INPUT_CENTER: f64 = 800.0;
pub const ADC_INPUT_SPREAD: f64 = 200.0;
pub const INPUT_CHANNELS: usize = 2;
pub const DICE_SMOOTH: f64 = 1.0;
/// Probabilities reported in a [`Prediction`] are clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
        }
    }

    fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_size * self.kernel_size
    }

    fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: Vec<ConvSpec>,
    /// Weight of the soft-Dice term; `1 - dice_weight` goes to cross-entropy.
    pub dice_weight: f64,
    pub threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: vec![
                ConvSpec::new(2, 8, 3),
                ConvSpec::new(8, 8, 3),
                ConvSpec::new(8, 1, 1),
            ],
            dice_weight: 0.5,
            threshold: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        validate_layers(&self.layers)?;
        if !(0.0..=1.0).contains(&self.dice_weight) {
            return Err(Error::InvalidConfig(format!(
                "dice_weight {} outside [0, 1]",
                self.dice_weight
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    vec![l.out_channels, l.in_channels, l.kernel_size, l.kernel_size],
                    vec![l.out_channels],
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvSpec::param_len).sum()
    }
}

fn validate_layers(layers: &[ConvSpec]) -> Result<()> {
    let first = layers
        .first()
        .ok_or_else(|| Error::InvalidConfig("model needs at least one layer".into()))?;
    if first.in_channels != INPUT_CHANNELS {
        return Err(Error::InvalidConfig(format!(
            "first layer takes {} channels, expected {INPUT_CHANNELS}",
            first.in_channels
        )));
    }
    if layers.last().unwrap().out_channels != 1 {
        return Err(Error::InvalidConfig(
            "last layer must output one channel".into(),
        ));
    }
    for (i, l) in layers.iter().enumerate() {
        if l.kernel_size % 2 == 0 || l.in_channels == 0 || l.out_channels == 0 {
            return Err(Error::InvalidConfig(format!(
                "layer {i} {l:?} is malformed"
            )));
        }
        if i > 0 && layers[i - 1].out_channels != l.in_channels {
            return Err(Error::InvalidConfig(format!(
                "layer {i} expects {} channels but receives {}",
                l.in_channels,
                layers[i - 1].out_channels
            )));
        }
    }
    Ok(())
}

/// Recovers the layer stack from a parameter layout.
fn layers_from_layout(layout: &[Vec<usize>]) -> Result<Vec<ConvSpec>> {
    let mismatch = || Error::LayoutMismatch(format!("{layout:?} is not a conv stack"));
    if layout.is_empty() || !layout.len().is_multiple_of(2) {
        return Err(mismatch());
    }
    let mut layers = Vec::with_capacity(layout.len() / 2);
    for pair in layout.chunks(2) {
        match (pair[0].as_slice(), pair[1].as_slice()) {
            (&[o, i, k, k2], &[ob]) if k == k2 && o == ob => layers.push(ConvSpec::new(i, o, k)),
            _ => return Err(mismatch()),
        }
    }
    validate_layers(&layers).map_err(|e| Error::LayoutMismatch(e.to_string()))?;
    Ok(layers)
}

/// Xavier-uniform weights, zero biases.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let mut rng = seed::rng(seed);
    let mut values = Vec::with_capacity(config.param_count());
    for l in &config.layers {
        let k2 = l.kernel_size * l.kernel_size;
        let bound = (6.0 / ((l.in_channels + l.out_channels) * k2) as f64).sqrt();
        values.extend((0..l.weight_len()).map(|_| rng.random_range(-bound..bound)));
        values.extend(std::iter::repeat_n(0.0, l.out_channels));
    }
    ParameterSet::new(config.layout(), values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Grid<f64>,
}

/// Channel-major activation buffer.
struct Tensor {
    channels: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Self {
            channels,
            rows,
            cols,
            data: vec![0.0; channels * rows * cols],
        }
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.data[c * n..(c + 1) * n]
    }
}

fn input_tensor(study: &PhantomStudy) -> Tensor {
    let (rows, cols) = study.dims();
    let mut data = Vec::with_capacity(2 * rows * cols);
    data.extend(study.dwi.as_slice().iter().map(|v| v - DWI_INPUT_CENTER));
    data.extend(
        study
            .adc
            .as_slice()
            .iter()
            .map(|v| (v - ADC_INPUT_CENTER) / ADC_INPUT_SPREAD),
    );
    Tensor {
        channels: 2,
        rows,
        cols,
        data,
    }
}

/// Row/col ranges of output positions whose kernel tap `(u, v)` lands inside
/// the image, for same padding.
#[inline]
fn valid_range(len: usize, tap: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap);
    let hi = (len + pad).saturating_sub(tap).min(len);
    (lo, hi.max(lo))
}

struct LayerView<'a> {
    spec: ConvSpec,
    weights: &'a [f64],
    bias: &'a [f64],
}

fn split_layers<'a>(layers: &[ConvSpec], values: &'a [f64]) -> Vec<LayerView<'a>> {
    let mut offset = 0;
    layers
        .iter()
        .map(|&spec| {
            let w = spec.weight_len();
            let view = LayerView {
                spec,
                weights: &values[offset..offset + w],
                bias: &values[offset + w..offset + w + spec.out_channels],
            };
            offset += spec.param_len();
            view
        })
        .collect()
}

fn conv_forward(layer: &LayerView, input: &Tensor) -> Tensor {
    let ConvSpec {
        in_channels,
        out_channels,
        kernel_size: k,
    } = layer.spec;
    let (rows, cols) = (input.rows, input.cols);
    let pad = k / 2;
    let mut out = Tensor::zeros(out_channels, rows, cols);
    let n = rows * cols;
    for o in 0..out_channels {
        let dst = &mut out.data[o * n..(o + 1) * n];
        dst.fill(layer.bias[o]);
        for c in 0..in_channels {
            let src = input.plane(c);
            for u in 0..k {
                let (r0, r1) = valid_range(rows, u, pad);
                for v in 0..k {
                    let w = layer.weights[((o * in_channels + c) * k + u) * k + v];
                    let (c0, c1) = valid_range(cols, v, pad);
                    for r in r0..r1 {
                        let sr = r + u - pad;
                        let d = &mut dst[r * cols + c0..r * cols + c1];
                        let s = &src[sr * cols + c0 + v - pad..sr * cols + c1 + v - pad];
                        for (x, y) in d.iter_mut().zip(s) {
                            *x += w * y;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients into `grad` and returns the gradient
/// with respect to the layer input.
fn conv_backward(
    layer: &LayerView,
    input: &Tensor,
    dout: &Tensor,
    grad: &mut [f64],
    need_dinput: bool,
) -> Option<Tensor> {
    let ConvSpec {
        in_channels,
        out_channels,
        kernel_size: k,
    } = layer.spec;
    let (rows, cols) = (input.rows, input.cols);
    let pad = k / 2;
    let n = rows * cols;
    let (gw, gb) = grad.split_at_mut(layer.spec.weight_len());
    let mut din = need_dinput.then(|| Tensor::zeros(in_channels, rows, cols));
    for o in 0..out_channels {
        let dz = dout.plane(o);
        gb[o] += dz.iter().sum::<f64>();
        for c in 0..in_channels {
            let src = input.plane(c);
            for u in 0..k {
                let (r0, r1) = valid_range(rows, u, pad);
                for v in 0..k {
                    let widx = ((o * in_channels + c) * k + u) * k + v;
                    let w = layer.weights[widx];
                    let (c0, c1) = valid_range(cols, v, pad);
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        let sr = r + u - pad;
                        let d = &dz[r * cols + c0..r * cols + c1];
                        let s_off = sr * cols + c0 + v - pad;
                        let s = &src[s_off..s_off + (c1 - c0)];
                        acc += d.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(din) = din.as_mut() {
                            let t = &mut din.data[c * n + s_off..c * n + s_off + (c1 - c0)];
                            for (x, y) in t.iter_mut().zip(d) {
                                *x += w * y;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    din
}

struct Trace {
    /// Inputs to each layer; `inputs[0]` is the study tensor.
    inputs: Vec<Tensor>,
    logits: Tensor,
}

fn run(layers: &[LayerView], study: &PhantomStudy) -> Trace {
    let mut inputs = vec![input_tensor(study)];
    for (i, layer) in layers.iter().enumerate() {
        let mut z = conv_forward(layer, inputs.last().unwrap());
        if i + 1 == layers.len() {
            return Trace { inputs, logits: z };
        }
        z.data.iter_mut().for_each(|v| *v = v.tanh());
        inputs.push(z);
    }
    unreachable!("layer stack is non-empty")
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn forward(params: &ParameterSet, study: &PhantomStudy) -> Result<Prediction> {
    let layers = layers_from_layout(params.layout())?;
    let views = split_layers(&layers, params.values());
    let trace = run(&views, study);
    let (rows, cols) = study.dims();
    let probs = trace
        .logits
        .data
        .iter()
        .map(|&z| sigmoid(z).clamp(PROB_EPS, 1.0 - PROB_EPS))
        .collect();
    Ok(Prediction {
        probabilities: Grid::from_vec(rows, cols, probs)?,
    })
}

/// Per-study compound loss and its gradient with respect to the logits.
fn study_loss(logits: &[f64], target: &[bool], dice_weight: f64) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let mut bce = 0.0;
    let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
    for ((&z, &p), &y) in logits.iter().zip(&probs).zip(target) {
        let yf = y as u8 as f64;
        bce += softplus(z) - yf * z;
        inter += p * yf;
        psum += p;
        ysum += yf;
    }
    bce /= n;
    let denom = psum + ysum + DICE_SMOOTH;
    let dice = (2.0 * inter + DICE_SMOOTH) / denom;
    let loss = (1.0 - dice_weight) * bce + dice_weight * (1.0 - dice);

    let numer = 2.0 * inter + DICE_SMOOTH;
    let dlogits = probs
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let yf = y as u8 as f64;
            let ddice_dp = (2.0 * yf * denom - numer) / (denom * denom);
            (1.0 - dice_weight) * (p - yf) / n - dice_weight * ddice_dp * p * (1.0 - p)
        })
        .collect();
    (loss, dlogits)
}

fn study_loss_and_grad(
    layers: &[LayerView],
    study: &PhantomStudy,
    dice_weight: f64,
    n_params: usize,
) -> (f64, Vec<f64>) {
    let trace = run(layers, study);
    let (loss, dlogits) = study_loss(&trace.logits.data, study.gt_mask.as_slice(), dice_weight);
    let mut grad = vec![0.0; n_params];
    let (rows, cols) = study.dims();
    let mut delta = Tensor {
        channels: 1,
        rows,
        cols,
        data: dlogits,
    };
    let offsets: Vec<usize> = layers
        .iter()
        .scan(0, |acc, l| {
            let start = *acc;
            *acc += l.spec.param_len();
            Some(start)
        })
        .collect();
    for i in (0..layers.len()).rev() {
        let input = &trace.inputs[i];
        let span = &mut grad[offsets[i]..offsets[i] + layers[i].spec.param_len()];
        let din = conv_backward(&layers[i], input, &delta, span, i > 0);
        if let Some(mut din) = din {
            // input i is tanh output of layer i-1
            for (d, a) in din.data.iter_mut().zip(&input.data) {
                *d *= 1.0 - a * a;
            }
            debug_assert_eq!(din.channels, input.channels);
            delta = din;
        }
    }
    (loss, grad)
}

/// Mean compound loss over the batch,
/// `(1 - lambda) * BCE + lambda * (1 - softDice)`, and its gradient.
pub fn loss_and_grad(
    params: &ParameterSet,
    batch: &[&PhantomStudy],
    config: &ModelConfig,
) -> Result<(f64, ParameterSet)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let layers = layers_from_layout(params.layout())?;
    if layers != config.layers {
        return Err(Error::LayoutMismatch(
            "parameters do not match the model config".into(),
        ));
    }
    let views = split_layers(&layers, params.values());
    let n_params = params.len();
    let per_study: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|s| study_loss_and_grad(&views, s, config.dice_weight, n_params))
        .collect();
    // fixed-order reduction keeps results independent of the thread count
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n_params];
    for (l, g) in per_study {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, params.with_values(grad)?))
}

/// Mean compound loss over the batch without the backward pass.
pub fn loss(params: &ParameterSet, batch: &[&PhantomStudy], config: &ModelConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let layers = layers_from_layout(params.layout())?;
    if layers != config.layers {
        return Err(Error::LayoutMismatch(
            "parameters do not match the model config".into(),
        ));
    }
    let views = split_layers(&layers, params.values());
    let per_study: Vec<f64> = batch
        .par_iter()
        .map(|s| {
            let trace = run(&views, s);
            study_loss(&trace.logits.data, s.gt_mask.as_slice(), config.dice_weight).0
        })
        .collect();
    Ok(per_study.iter().sum::<f64>() / batch.len() as f64)
}

pub fn predict_mask(pred: &Prediction, threshold: f64) -> Mask {
    pred.probabilities.map(|&p| p > threshold)
}
