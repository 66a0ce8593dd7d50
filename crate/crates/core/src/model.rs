//! Differentiable classifiers with hand-written forward and backward passes.
//!
//! Every model maps an input of length `m` to `K` logits and is trained with
//! softmax cross-entropy. `BinaryLogistic` reports logits `[w.x, -w.x]` but
//! its loss is the logistic loss `log(1 + exp(-y w.x))` with `y = +1` for
//! class 0 and `y = -1` for class 1, i.e. cross-entropy of the halved logits.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamVector, Segment};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    /// ELU with alpha = 1.
    Elu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
        }
    }

    /// Derivative at `z`, given `a = apply(z)`. ReLU uses 0 at the kink.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    a + 1.0
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(t))` without overflow.
#[inline]
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Numerically stable `log(sum(exp(z)))`.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax cross-entropy of `logits` against class `label`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    log_sum_exp(logits) - logits[label]
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arch {
    /// Logits `W x` with `W` of shape `[classes, inputs]`, no bias.
    LinearMulticlass { inputs: usize, classes: usize },
    /// Logits `[w.x, -w.x]`.
    BinaryLogistic { inputs: usize },
    /// Fully connected network; `widths` includes input and output sizes.
    Mlp {
        widths: Vec<usize>,
        activation: Activation,
    },
}

impl Arch {
    pub fn mlp(widths: &[usize], activation: Activation) -> Self {
        Arch::Mlp {
            widths: widths.to_vec(),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Arch::LinearMulticlass { inputs, .. } | Arch::BinaryLogistic { inputs } => *inputs,
            Arch::Mlp { widths, .. } => widths[0],
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Arch::LinearMulticlass { classes, .. } => *classes,
            Arch::BinaryLogistic { .. } => 2,
            Arch::Mlp { widths, .. } => *widths.last().unwrap_or(&0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Arch::LinearMulticlass { inputs, classes } => {
                if *inputs == 0 || *classes < 2 {
                    return Err(Error::invalid(
                        "linear model needs inputs >= 1 and classes >= 2",
                    ));
                }
            }
            Arch::BinaryLogistic { inputs } => {
                if *inputs == 0 {
                    return Err(Error::invalid("logistic model needs inputs >= 1"));
                }
            }
            Arch::Mlp { widths, .. } => {
                if widths.len() < 2 || widths.contains(&0) {
                    return Err(Error::invalid(
                        "mlp widths need at least two positive entries",
                    ));
                }
                if widths[widths.len() - 1] < 2 {
                    return Err(Error::invalid("mlp needs at least two output classes"));
                }
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<Segment> {
        match self {
            Arch::LinearMulticlass { inputs, classes } => {
                vec![Segment::new("weight", vec![*classes, *inputs])]
            }
            Arch::BinaryLogistic { inputs } => vec![Segment::new("weight", vec![*inputs])],
            Arch::Mlp { widths, .. } => widths
                .windows(2)
                .enumerate()
                .flat_map(|(i, w)| {
                    [
                        Segment::new(format!("layer{i}.weight"), vec![w[1], w[0]]),
                        Segment::new(format!("layer{i}.bias"), vec![w[1]]),
                    ]
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(Segment::size).sum()
    }

    fn activation(&self) -> Option<Activation> {
        match self {
            Arch::Mlp { activation, .. } => Some(*activation),
            _ => None,
        }
    }
}

/// What a batch evaluation should differentiate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Want {
    pub theta: bool,
    pub input: bool,
}

impl Want {
    pub const LOSS: Want = Want {
        theta: false,
        input: false,
    };
    pub const THETA: Want = Want {
        theta: true,
        input: false,
    };
    pub const INPUT: Want = Want {
        theta: false,
        input: true,
    };
}

/// Per-example losses and logits of a batch, with optional gradients.
#[derive(Clone, Debug)]
pub struct BatchEval {
    pub losses: Vec<f64>,
    pub logits: Array2<f64>,
    /// Gradient of the *summed* batch loss with respect to the parameters.
    pub theta_grad: Option<ParamVector>,
    /// Per-example gradient of the loss with respect to the input.
    pub input_grad: Option<Array2<f64>>,
}

impl BatchEval {
    pub fn loss_sum(&self) -> f64 {
        self.losses.iter().sum()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.logits
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("logits are contiguous")))
            .collect()
    }

    pub fn errors(&self, labels: &[usize]) -> usize {
        self.predictions()
            .iter()
            .zip(labels)
            .filter(|(p, y)| p != y)
            .count()
    }
}

struct Dense<'a> {
    weight: ArrayView2<'a, f64>,
    bias: Option<ArrayView1<'a, f64>>,
    weight_offset: usize,
    bias_offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Arch,
    params: ParamVector,
}

impl Model {
    pub fn new(arch: Arch, params: ParamVector) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if params.layout().len() != layout.len() {
            return Err(Error::DimensionMismatch {
                segment: "<layout>".into(),
                expected: layout.len(),
                actual: params.layout().len(),
            });
        }
        for (want, got) in layout.iter().zip(params.layout()) {
            if want != got {
                return Err(Error::DimensionMismatch {
                    segment: want.name.clone(),
                    expected: want.size(),
                    actual: got.size(),
                });
            }
        }
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: Arch) -> Result<Self> {
        let params = ParamVector::zeros(&arch.layout());
        Self::new(arch, params)
    }

    /// Uniform fan-in initialisation `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// biases zero.
    pub fn init<R: Rng + ?Sized>(arch: Arch, rng: &mut R) -> Result<Self> {
        Self::init_scaled(arch, 1.0, rng)
    }

    /// Like [`Model::init`] with every weight multiplied by `scale`.
    pub fn init_scaled<R: Rng + ?Sized>(arch: Arch, scale: f64, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamVector::zeros(&arch.layout());
        let layout = arch.layout();
        let mut offset = 0;
        for seg in &layout {
            let size = seg.size();
            if !seg.name.ends_with("bias") {
                let fan_in = *seg.shape.last().unwrap_or(&1) as f64;
                let bound = (6.0 / fan_in).sqrt();
                for v in &mut params.values_mut()[offset..offset + size] {
                    *v = scale * rng.random_range(-bound..bound);
                }
            }
            offset += size;
        }
        Self::new(arch, params)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn into_params(self) -> ParamVector {
        self.params
    }

    /// Same architecture with different parameters.
    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        Self::new(self.arch.clone(), params)
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    fn dense_layers(&self) -> Vec<Dense<'_>> {
        let values = self.params.values();
        match &self.arch {
            Arch::LinearMulticlass { inputs, classes } => {
                let weight = ArrayView2::from_shape((*classes, *inputs), values)
                    .expect("layout checked at construction");
                vec![Dense {
                    weight,
                    bias: None,
                    weight_offset: 0,
                    bias_offset: 0,
                }]
            }
            Arch::Mlp { widths, .. } => {
                let mut offset = 0;
                let mut layers = Vec::with_capacity(widths.len() - 1);
                for w in widths.windows(2) {
                    let (fan_in, fan_out) = (w[0], w[1]);
                    let weight_offset = offset;
                    let weight = ArrayView2::from_shape(
                        (fan_out, fan_in),
                        &values[offset..offset + fan_in * fan_out],
                    )
                    .expect("layout checked at construction");
                    offset += fan_in * fan_out;
                    let bias_offset = offset;
                    let bias = ArrayView1::from(&values[offset..offset + fan_out]);
                    offset += fan_out;
                    layers.push(Dense {
                        weight,
                        bias: Some(bias),
                        weight_offset,
                        bias_offset,
                    });
                }
                layers
            }
            Arch::BinaryLogistic { .. } => Vec::new(),
        }
    }

    fn check_batch(&self, xs: &ArrayView2<f64>, labels: Option<&[usize]>) -> Result<()> {
        if xs.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                segment: "input".into(),
                expected: self.input_dim(),
                actual: xs.ncols(),
            });
        }
        if let Some(labels) = labels {
            if labels.len() != xs.nrows() {
                return Err(Error::DimensionMismatch {
                    segment: "labels".into(),
                    expected: xs.nrows(),
                    actual: labels.len(),
                });
            }
            let k = self.num_classes();
            if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    classes: k,
                });
            }
        }
        Ok(())
    }

    /// Logits for a batch of inputs (one row per example).
    pub fn forward_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(&xs, None)?;
        match &self.arch {
            Arch::BinaryLogistic { .. } => {
                let w = ArrayView1::from(self.params.values());
                let a = xs.dot(&w);
                if a.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { layer: 0 });
                }
                let mut out = Array2::zeros((xs.nrows(), 2));
                for (i, ai) in a.iter().enumerate() {
                    out[[i, 0]] = *ai;
                    out[[i, 1]] = -*ai;
                }
                Ok(out)
            }
            _ => {
                let act = self.arch.activation();
                let layers = self.dense_layers();
                let last = layers.len() - 1;
                let mut h = xs.to_owned();
                for (l, layer) in layers.iter().enumerate() {
                    let mut z = h.dot(&layer.weight.t());
                    if let Some(b) = &layer.bias {
                        z += b;
                    }
                    if z.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite { layer: l });
                    }
                    if l < last {
                        let act = act.expect("hidden layers only exist in MLPs");
                        z.mapv_inplace(|v| act.apply(v));
                    }
                    h = z;
                }
                Ok(h)
            }
        }
    }

    /// Pre-activations of every hidden layer (MLP only; empty otherwise).
    pub fn hidden_preactivations(&self, xs: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        self.check_batch(&xs, None)?;
        let Some(act) = self.arch.activation() else {
            return Ok(Vec::new());
        };
        let layers = self.dense_layers();
        let mut out = Vec::with_capacity(layers.len() - 1);
        let mut h = xs.to_owned();
        for layer in &layers[..layers.len() - 1] {
            let mut z = h.dot(&layer.weight.t());
            if let Some(b) = &layer.bias {
                z += b;
            }
            h = z.mapv(|v| act.apply(v));
            out.push(z);
        }
        Ok(out)
    }

    /// Class probabilities consistent with the training loss.
    pub fn probabilities(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut logits = self.forward_batch(xs)?;
        if matches!(self.arch, Arch::BinaryLogistic { .. }) {
            logits.mapv_inplace(|v| 0.5 * v);
        }
        for mut row in logits.rows_mut() {
            let p = softmax(row.as_slice().expect("contiguous"));
            row.assign(&Array1::from(p));
        }
        Ok(logits)
    }

    pub fn predict_batch(&self, xs: ArrayView2<f64>) -> Result<Vec<usize>> {
        let logits = self.forward_batch(xs)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("contiguous")))
            .collect())
    }

    /// Losses, logits and the requested gradients for a labelled batch.
    pub fn eval_batch(
        &self,
        xs: ArrayView2<f64>,
        labels: &[usize],
        want: Want,
    ) -> Result<BatchEval> {
        self.check_batch(&xs, Some(labels))?;
        match &self.arch {
            Arch::BinaryLogistic { .. } => self.eval_logistic(xs, labels, want),
            _ => self.eval_dense(xs, labels, want),
        }
    }

    fn eval_logistic(
        &self,
        xs: ArrayView2<f64>,
        labels: &[usize],
        want: Want,
    ) -> Result<BatchEval> {
        let w = ArrayView1::from(self.params.values());
        let a = xs.dot(&w);
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: 0 });
        }
        let n = xs.nrows();
        let mut losses = Vec::with_capacity(n);
        let mut dloss = Array1::zeros(n);
        let mut logits = Array2::zeros((n, 2));
        for i in 0..n {
            let y = if labels[i] == 0 { 1.0 } else { -1.0 };
            losses.push(softplus(-y * a[i]));
            dloss[i] = -y * sigmoid(-y * a[i]);
            logits[[i, 0]] = a[i];
            logits[[i, 1]] = -a[i];
        }
        let theta_grad = if want.theta {
            let g = xs.t().dot(&dloss);
            Some(self.params.with_values(g.to_vec())?)
        } else {
            None
        };
        let input_grad = want.input.then(|| {
            let mut g = Array2::zeros((n, xs.ncols()));
            for (mut row, d) in g.rows_mut().into_iter().zip(dloss.iter()) {
                row.scaled_add(*d, &w);
            }
            g
        });
        Ok(BatchEval {
            losses,
            logits,
            theta_grad,
            input_grad,
        })
    }

    fn eval_dense(&self, xs: ArrayView2<f64>, labels: &[usize], want: Want) -> Result<BatchEval> {
        let act = self.arch.activation();
        let layers = self.dense_layers();
        let last = layers.len() - 1;
        let mut pre: Vec<Array2<f64>> = Vec::with_capacity(last);
        let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(last);
        let mut logits = Array2::zeros((0, 0));
        for (l, layer) in layers.iter().enumerate() {
            let input = if l == 0 { xs } else { hidden[l - 1].view() };
            let mut z = input.dot(&layer.weight.t());
            if let Some(b) = &layer.bias {
                z += b;
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: l });
            }
            if l < last {
                let act = act.expect("hidden layers only exist in MLPs");
                hidden.push(z.mapv(|v| act.apply(v)));
                pre.push(z);
            } else {
                logits = z;
            }
        }

        let n = xs.nrows();
        let mut losses = Vec::with_capacity(n);
        let mut delta = Array2::zeros(logits.raw_dim());
        for (i, row) in logits.rows().into_iter().enumerate() {
            let z = row.as_slice().expect("contiguous");
            losses.push(cross_entropy(z, labels[i]));
            if want.theta || want.input {
                let p = softmax(z);
                for (k, pk) in p.into_iter().enumerate() {
                    delta[[i, k]] = pk;
                }
                delta[[i, labels[i]]] -= 1.0;
            }
        }

        let mut theta_grad = want.theta.then(|| self.params.zeros_like());
        let mut input_grad = None;
        if want.theta || want.input {
            for l in (0..=last).rev() {
                let layer = &layers[l];
                let input = if l == 0 { xs } else { hidden[l - 1].view() };
                if let Some(grad) = theta_grad.as_mut() {
                    let (rows, cols) = layer.weight.dim();
                    let values = grad.values_mut();
                    let mut gw = ArrayViewMut2::from_shape(
                        (rows, cols),
                        &mut values[layer.weight_offset..layer.weight_offset + rows * cols],
                    )
                    .expect("layout checked at construction");
                    general_mat_mul(1.0, &delta.t(), &input, 0.0, &mut gw);
                    if layer.bias.is_some() {
                        let gb = delta.sum_axis(Axis(0));
                        values[layer.bias_offset..layer.bias_offset + rows]
                            .copy_from_slice(gb.as_slice().expect("contiguous"));
                    }
                }
                if l == 0 {
                    if want.input {
                        input_grad = Some(delta.dot(&layer.weight));
                    }
                } else {
                    let act = act.expect("hidden layers only exist in MLPs");
                    let mut dh = delta.dot(&layer.weight);
                    ndarray::Zip::from(&mut dh)
                        .and(&pre[l - 1])
                        .and(&hidden[l - 1])
                        .for_each(|d, &z, &a| *d *= act.derivative(z, a));
                    delta = dh;
                }
            }
        }

        Ok(BatchEval {
            losses,
            logits,
            theta_grad,
            input_grad,
        })
    }

    /// Logits for one input.
    pub fn forward_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xs = row_view(x);
        Ok(self.forward_batch(xs)?.into_raw_vec_and_offset().0)
    }

    pub fn loss(&self, x: &[f64], label: usize) -> Result<f64> {
        Ok(self.eval_batch(row_view(x), &[label], Want::LOSS)?.losses[0])
    }

    /// Loss and parameter gradient at one example.
    pub fn loss_grad_theta(&self, x: &[f64], label: usize) -> Result<(f64, ParamVector)> {
        let eval = self.eval_batch(row_view(x), &[label], Want::THETA)?;
        Ok((eval.losses[0], eval.theta_grad.expect("requested")))
    }

    /// Loss and input gradient at one example.
    pub fn loss_grad_input(&self, x: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        let eval = self.eval_batch(row_view(x), &[label], Want::INPUT)?;
        let grad = eval.input_grad.expect("requested");
        Ok((eval.losses[0], grad.into_raw_vec_and_offset().0))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward_logits(x)?))
    }
}

fn row_view(x: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, x.len()), x).expect("a slice is a valid single row")
}
