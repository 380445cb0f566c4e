//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Parameters live in one flat `f64` buffer. Layer `l` stores its weight
//! matrix row-major as `(out, in)` followed by its `out` biases, layers in
//! order from input to output. Hidden layers share one activation; the
//! output layer is linear.

mod codec;
mod dist;
mod optim;

pub use codec::{decode_params, encode_params, MAGIC};
pub use dist::{
    gaussian_kl, gaussian_kl_grad, log_one_minus_tanh_sq, sample_squashed, squashed_log_prob,
    GaussianPolicyHead, KlGrad, LogStdBounds,
};
pub use optim::{Adam, Optimizer, OptimizerKind, RmsProp};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Relu),
            other => Err(Error::format(format!("unknown activation code {other}"))),
        }
    }
}

/// A named slice of the output vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputHead {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    widths: Vec<usize>,
    activation: Activation,
    heads: Vec<OutputHead>,
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

impl NetSpec {
    /// `widths` runs from the input width through the hidden widths to the
    /// output width; at least one hidden layer is required.
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::config(format!(
                "network needs at least one hidden layer, got widths {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::config(format!("zero layer width in {widths:?}")));
        }
        Ok(Self {
            widths,
            activation,
            heads: Vec::new(),
        })
    }

    /// Builds `input -> hidden... -> output`.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self::new(widths, activation)
    }

    pub fn with_head(mut self, name: &str, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.output_width() {
            return Err(Error::config(format!(
                "head {name} [{start}, {}) outside output width {}",
                start + len,
                self.output_width()
            )));
        }
        self.heads.push(OutputHead {
            name: name.to_owned(),
            start,
            len,
        });
        Ok(self)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn heads(&self) -> &[OutputHead] {
        &self.heads
    }

    pub fn head(&self, name: &str) -> Option<&OutputHead> {
        self.heads.iter().find(|h| h.name == name)
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Flat offset of the weight `(row, col)` of `layer`.
    pub fn weight_index(&self, layer: usize, row: usize, col: usize) -> usize {
        let l = self.layout(layer);
        l.weights + row * l.fan_in + col
    }

    /// Flat offset of bias `row` of `layer`.
    pub fn bias_index(&self, layer: usize, row: usize) -> usize {
        self.layout(layer).bias + row
    }

    fn layout(&self, layer: usize) -> LayerLayout {
        let mut offset = 0;
        for (l, w) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            if l == layer {
                return LayerLayout {
                    fan_in,
                    fan_out,
                    weights: offset,
                    bias: offset + fan_in * fan_out,
                };
            }
            offset += fan_in * fan_out + fan_out;
        }
        panic!("layer {layer} out of range");
    }

    fn layouts(&self) -> Vec<LayerLayout> {
        (0..self.num_layers()).map(|l| self.layout(l)).collect()
    }
}

/// Flat parameter (or gradient) storage laid out per [`NetSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    values: Vec<f64>,
}

impl ParamSet {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { values }
    }

    /// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights and biases alike.
    pub fn init<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> Self {
        let mut values = Vec::with_capacity(spec.param_count());
        for w in spec.widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] * w[1] + w[1]) {
                values.push(rng.random_range(-bound..=bound));
            }
        }
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }
}

/// `target <- (1 - tau) * target + tau * online`.
pub fn polyak_update(target: &mut ParamSet, online: &ParamSet, tau: f64) -> Result<()> {
    if target.len() != online.len() {
        return Err(Error::usage(format!(
            "polyak shape mismatch: target {} vs online {}",
            target.len(),
            online.len()
        )));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::usage(format!("polyak coefficient {tau} outside (0, 1]")));
    }
    for (t, o) in target.values.iter_mut().zip(&online.values) {
        *t = (1.0 - tau) * *t + tau * o;
    }
    Ok(())
}

/// Layer activations recorded by [`Mlp::forward_batch`] for a later backward
/// pass. `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
#[derive(Debug, Clone)]
pub struct Tape {
    acts: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("tape holds at least the input")
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.acts[0]
    }

    pub fn batch_size(&self) -> usize {
        self.acts[0].nrows()
    }
}

/// A network: its architecture plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: NetSpec,
    params: ParamSet,
}

impl Mlp {
    pub fn new(spec: NetSpec, params: ParamSet) -> Result<Self> {
        if params.len() != spec.param_count() {
            return Err(Error::usage(format!(
                "parameter count {} does not match spec ({})",
                params.len(),
                spec.param_count()
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn init<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Self {
        let params = ParamSet::init(&spec, rng);
        Self { spec, params }
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        if params.len() != self.spec.param_count() {
            return Err(Error::usage("parameter count mismatch"));
        }
        self.params = params;
        Ok(())
    }

    fn weights(&self, l: &LayerLayout) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(
            (l.fan_out, l.fan_in),
            &self.params.values[l.weights..l.weights + l.fan_out * l.fan_in],
        )
        .expect("layout matches parameter buffer")
    }

    fn bias(&self, l: &LayerLayout) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params.values[l.bias..l.bias + l.fan_out])
    }

    /// Evaluates one input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let input = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let tape = self.forward_batch(input)?;
        Ok(tape.output().row(0).to_vec())
    }

    /// Evaluates a batch (one row per sample) and records the activations.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Tape> {
        self.check_input(x.ncols())?;
        let layouts = self.spec.layouts();
        let last = layouts.len() - 1;
        let mut acts = Vec::with_capacity(layouts.len() + 1);
        acts.push(x.to_owned());
        for (i, l) in layouts.iter().enumerate() {
            let mut z = Array2::<f64>::zeros((x.nrows(), l.fan_out));
            general_mat_mul(1.0, &acts[i], &self.weights(l).t(), 0.0, &mut z);
            z += &self.bias(l);
            if i < last {
                let act = self.spec.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            acts.push(z);
        }
        Ok(Tape { acts })
    }

    /// Back-propagates `upstream = dLoss/dOutput` through a recorded batch.
    /// Returns the parameter gradient (summed over the batch) and, when
    /// requested, the gradient with respect to the input rows.
    pub fn backward(
        &self,
        tape: &Tape,
        upstream: ArrayView2<'_, f64>,
        want_input: bool,
    ) -> Result<(ParamSet, Option<Array2<f64>>)> {
        let mut grad = ParamSet::zeros(self.spec.param_count());
        let input = self.backprop(tape, upstream, Some(&mut grad), want_input)?;
        Ok((grad, input))
    }

    /// Input gradient only; skips the parameter-gradient products.
    pub fn backward_input(&self, tape: &Tape, upstream: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self
            .backprop(tape, upstream, None, true)?
            .expect("input gradient requested"))
    }

    fn backprop(
        &self,
        tape: &Tape,
        upstream: ArrayView2<'_, f64>,
        mut grad: Option<&mut ParamSet>,
        want_input: bool,
    ) -> Result<Option<Array2<f64>>> {
        let out_w = self.spec.output_width();
        if upstream.ncols() != out_w || upstream.nrows() != tape.batch_size() {
            return Err(Error::usage(format!(
                "upstream shape {:?} does not match batch {} x output {out_w}",
                upstream.shape(),
                tape.batch_size()
            )));
        }
        let layouts = self.spec.layouts();
        let mut delta = upstream.to_owned();
        for (i, l) in layouts.iter().enumerate().rev() {
            if let Some(g) = grad.as_deref_mut() {
                let (w_part, rest) = g.values[l.weights..].split_at_mut(l.fan_out * l.fan_in);
                let mut gw = ArrayViewMut2::from_shape((l.fan_out, l.fan_in), w_part)
                    .expect("layout matches gradient buffer");
                general_mat_mul(1.0, &delta.t(), &tape.acts[i], 0.0, &mut gw);
                let gb = delta.sum_axis(Axis(0));
                rest[..l.fan_out].copy_from_slice(gb.as_slice().expect("contiguous"));
            }
            if i == 0 && !want_input {
                return Ok(None);
            }
            let mut prev = Array2::<f64>::zeros((delta.nrows(), l.fan_in));
            general_mat_mul(1.0, &delta, &self.weights(l), 0.0, &mut prev);
            if i > 0 {
                let act = self.spec.activation;
                ndarray::Zip::from(&mut prev)
                    .and(&tape.acts[i])
                    .for_each(|d, &a| *d *= act.derivative_from_output(a));
            }
            delta = prev;
        }
        Ok(Some(delta))
    }

    /// Exact gradient of `<upstream, forward(x)>` with respect to every
    /// parameter.
    pub fn backward_params(&self, x: &[f64], upstream: &[f64]) -> Result<ParamSet> {
        let tape = self.forward_batch(row(x))?;
        let (grad, _) = self.backward(&tape, self.upstream_row(upstream)?, false)?;
        Ok(grad)
    }

    /// Exact gradient of `<upstream, forward(x)>` with respect to `x`.
    pub fn input_gradient(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let tape = self.forward_batch(row(x))?;
        let g = self.backward_input(&tape, self.upstream_row(upstream)?)?;
        Ok(g.row(0).to_vec())
    }

    fn upstream_row<'a>(&self, upstream: &'a [f64]) -> Result<ArrayView2<'a, f64>> {
        if upstream.len() != self.spec.output_width() {
            return Err(Error::usage(format!(
                "upstream length {} != output width {}",
                upstream.len(),
                self.spec.output_width()
            )));
        }
        Ok(row(upstream))
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.spec.input_width() {
            return Err(Error::usage(format!(
                "input length {len} != network input width {}",
                self.spec.input_width()
            )));
        }
        Ok(())
    }
}

fn row(x: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, x.len()), x).expect("row vector")
}

/// Packs rows of equal length into a matrix.
pub fn stack_rows<'a, I>(rows: I, width: usize) -> Array2<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        debug_assert_eq!(r.len(), width);
        data.extend_from_slice(r);
        n += 1;
    }
    Array2::from_shape_vec((n, width), data).expect("rows share one width")
}

/// Column vector helper for scalar-output networks.
pub fn column(values: Vec<f64>) -> Array2<f64> {
    let n = values.len();
    Array1::from(values)
        .into_shape_with_order((n, 1))
        .expect("column shape")
}
