//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! A [`DenseNet`] is a stack of affine layers with GELU on every hidden layer
//! and an identity output layer. Batches are row-major: one sample per row.
//! Weights are stored with shape `(in_dim, out_dim)` so a layer evaluates as
//! `x · W + b`.
//!
//! Only the loss forms used by the agent are needed, so there is no general
//! computation graph: [`DenseNet::trace`] records the per-layer activations and
//! [`DenseNet::backward`] walks them in reverse.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{ensure_dim, Error, Result};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// GELU with the exact Gaussian CDF: `x · Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

/// Derivative of [`gelu`]: `Φ(x) + x · φ(x)`.
#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// Shape `(in_dim, out_dim)`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    dims: Vec<usize>,
    layers: Vec<Dense>,
}

/// Activations recorded by [`DenseNet::trace`] for a later backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre_activations: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.output.nrows()
    }
}

/// Gradient of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Per-parameter gradients together with the scalar loss they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<LayerGrad>,
    pub loss: f64,
}

impl GradientBundle {
    pub fn zeros_like(net: &DenseNet) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| LayerGrad {
                weights: Array2::zeros(l.weights.raw_dim()),
                bias: Array1::zeros(l.bias.len()),
            })
            .collect();
        Self { layers, loss: 0.0 }
    }

    /// Gradients flattened in the same order as [`DenseNet::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.to_flat().iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    fn check_shapes(&self, net: &DenseNet) -> Result<()> {
        if self.layers.len() != net.layers.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "gradient has {} layers, network has {}",
                self.layers.len(),
                net.layers.len()
            )));
        }
        for (g, l) in self.layers.iter().zip(&net.layers) {
            if g.weights.dim() != l.weights.dim() || g.bias.len() != l.bias.len() {
                return Err(Error::ArchitectureMismatch(
                    "gradient shape differs from parameter shape".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Output of a batch loss: per-sample losses and the gradient of the batch
/// mean with respect to the network outputs.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub per_sample: Array1<f64>,
    pub d_output: Array2<f64>,
}

impl DenseNet {
    /// He-uniform initialization (`U(±√(6/fan_in))`), zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        validate_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| {
                let limit = (6.0 / w[0] as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                let weights = Array2::from_shape_simple_fn((w[0], w[1]), || dist.sample(rng));
                Dense {
                    weights,
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        validate_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                weights: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let first = layers.first().ok_or(Error::Empty("layer list"))?;
        let mut dims = vec![first.in_dim()];
        for layer in &layers {
            ensure_dim("layer input", *dims.last().unwrap(), layer.in_dim())?;
            ensure_dim("layer bias", layer.out_dim(), layer.bias.len())?;
            dims.push(layer.out_dim());
        }
        validate_dims(&dims)?;
        Ok(Self { dims, layers })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn same_architecture(&self, other: &DenseNet) -> bool {
        self.dims == other.dims
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|_| Error::Empty("forward input"))?;
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        ensure_dim("network input", self.input_dim(), input.ncols())?;
        let last = self.layers.len() - 1;
        let mut x = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = x.dot(&layer.weights);
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(gelu);
            }
            x = z;
        }
        Ok(x)
    }

    /// Forward pass that keeps what [`DenseNet::backward`] needs.
    pub fn trace(&self, input: ArrayView2<f64>) -> Result<ForwardTrace> {
        ensure_dim("network input", self.input_dim(), input.ncols())?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut x = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = x.dot(&layer.weights);
            z += &layer.bias;
            inputs.push(x);
            if i < last {
                let a = z.mapv(gelu);
                pre_activations.push(z);
                x = a;
            } else {
                x = z;
            }
        }
        Ok(ForwardTrace {
            inputs,
            pre_activations,
            output: x,
        })
    }

    /// Back-propagates `d_output` (gradient of the loss w.r.t. the traced
    /// outputs). Returns parameter gradients (with `loss` left at zero) and
    /// the gradient with respect to the network input.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_output: ArrayView2<f64>,
    ) -> Result<(GradientBundle, Array2<f64>)> {
        if d_output.dim() != trace.output.dim() {
            return Err(Error::DimensionMismatch {
                context: "output gradient",
                expected: trace.output.len(),
                actual: d_output.len(),
            });
        }
        let n = self.layers.len();
        let mut grads: Vec<Option<LayerGrad>> = vec![None; n];
        let mut delta = d_output.to_owned();
        for i in (0..n).rev() {
            if i < n - 1 {
                let z = &trace.pre_activations[i];
                ndarray::Zip::from(&mut delta)
                    .and(z)
                    .for_each(|d, &z| *d *= gelu_derivative(z));
            }
            let x = &trace.inputs[i];
            let weights = x.t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            let next = delta.dot(&self.layers[i].weights.t());
            grads[i] = Some(LayerGrad { weights, bias });
            delta = next;
        }
        let layers = grads.into_iter().map(|g| g.unwrap()).collect();
        Ok((GradientBundle { layers, loss: 0.0 }, delta))
    }

    /// All parameters, layer by layer: weights (row-major) then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_flat(&mut self, params: &[f64]) -> Result<()> {
        ensure_dim("flat parameters", self.num_params(), params.len())?;
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut() {
                *w = it.next().unwrap();
            }
            for b in l.bias.iter_mut() {
                *b = it.next().unwrap();
            }
        }
        Ok(())
    }

    /// Euclidean distance between the parameter vectors of two networks.
    pub fn param_distance(&self, other: &DenseNet) -> Result<f64> {
        if !self.same_architecture(other) {
            return Err(Error::ArchitectureMismatch(format!(
                "{:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let sq: f64 = self
            .to_flat()
            .iter()
            .zip(other.to_flat())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sq.sqrt())
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::invalid(
            "a network needs at least an input and an output dim",
        ));
    }
    if dims.contains(&0) {
        return Err(Error::invalid("layer dims must be positive"));
    }
    Ok(())
}

/// Evaluates `loss` on the network outputs for `input` and returns the exact
/// parameter gradient of the batch-mean loss.
pub fn grad<F>(net: &DenseNet, input: ArrayView2<f64>, loss: F) -> Result<GradientBundle>
where
    F: FnOnce(ArrayView2<f64>) -> LossEval,
{
    grad_with_input(net, input, loss).map(|(g, _)| g)
}

/// Like [`grad`], also returning the gradient with respect to the input.
pub fn grad_with_input<F>(
    net: &DenseNet,
    input: ArrayView2<f64>,
    loss: F,
) -> Result<(GradientBundle, Array2<f64>)>
where
    F: FnOnce(ArrayView2<f64>) -> LossEval,
{
    let trace = net.trace(input)?;
    let eval = loss(trace.output.view());
    let mean = mean_finite_loss(eval.per_sample.view())?;
    let (mut bundle, d_input) = net.backward(&trace, eval.d_output.view())?;
    bundle.loss = mean;
    Ok((bundle, d_input))
}

/// Mean of per-sample losses, failing on the first non-finite entry.
pub(crate) fn mean_finite_loss(per_sample: ArrayView1<f64>) -> Result<f64> {
    if per_sample.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    if let Some(index) = per_sample.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFiniteLoss { index });
    }
    Ok(per_sample.sum() / per_sample.len() as f64)
}

/// Soft target update `target ← (1−τ)·target + τ·online`.
pub fn polyak_update(target: &mut DenseNet, online: &DenseNet, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::invalid(format!(
            "polyak coefficient {tau} not in (0, 1]"
        )));
    }
    if !target.same_architecture(online) {
        return Err(Error::ArchitectureMismatch(format!(
            "target {:?} vs online {:?}",
            target.dims, online.dims
        )));
    }
    if tau == 1.0 {
        target.layers.clone_from(&online.layers);
        return Ok(());
    }
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        ndarray::Zip::from(&mut t.weights)
            .and(&o.weights)
            .for_each(|t, &o| *t = (1.0 - tau) * *t + tau * o);
        ndarray::Zip::from(&mut t.bias)
            .and(&o.bias)
            .for_each(|t, &o| *t = (1.0 - tau) * *t + tau * o);
    }
    Ok(())
}
