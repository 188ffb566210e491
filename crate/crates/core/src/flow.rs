//! Flow-matching machinery: interpolation paths, the noise-injection schedule,
//! the training loss, and the Euler sampler.
//!
//! The vector field `v(t, s, x)` is a [`DenseNet`] over the concatenated input
//! `[t, s, x]`. Training perturbs the interpolated point `x_t` with Gaussian
//! noise of standard deviation `α_t` before it reaches the network.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_dim, Error, Result};
use crate::nn::{DenseNet, GradientBundle, LossEval};

/// Default Euler step count for sampling.
pub const DEFAULT_FLOW_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleVariant {
    /// `α_t² = (η² − 2η)t² + 2ηt`.
    Quadratic,
    /// `α_t = η·exp(5(t − 1))`.
    ShiftedExponential,
}

impl FromStr for ScheduleVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(Self::Quadratic),
            "shifted_exponential" | "shifted-exponential" => Ok(Self::ShiftedExponential),
            other => Err(Error::invalid(format!(
                "unknown schedule variant '{other}'"
            ))),
        }
    }
}

impl fmt::Display for ScheduleVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Quadratic => "quadratic",
            Self::ShiftedExponential => "shifted_exponential",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub eta: f64,
    /// Kept for the general conditional path; every built-in path uses 0.
    pub sigma_min: f64,
    pub variant: ScheduleVariant,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            eta: 0.1,
            sigma_min: 0.0,
            variant: ScheduleVariant::ShiftedExponential,
        }
    }
}

impl NoiseSchedule {
    pub fn new(eta: f64, variant: ScheduleVariant) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid(format!("eta {eta} outside [0, 1]")));
        }
        Ok(Self {
            eta,
            sigma_min: 0.0,
            variant,
        })
    }

    pub fn quadratic(eta: f64) -> Result<Self> {
        Self::new(eta, ScheduleVariant::Quadratic)
    }

    pub fn shifted_exponential(eta: f64) -> Result<Self> {
        Self::new(eta, ScheduleVariant::ShiftedExponential)
    }

    /// Variance `α_t²` of the injected noise.
    pub fn variance(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        let eta = self.eta;
        Ok(match self.variant {
            // Non-negative on [0, 1] for η ∈ [0, 1]; max() only absorbs rounding.
            ScheduleVariant::Quadratic => {
                ((eta * eta - 2.0 * eta) * t * t + 2.0 * eta * t).max(0.0)
            }
            ScheduleVariant::ShiftedExponential => {
                let a = eta * (5.0 * (t - 1.0)).exp();
                a * a
            }
        })
    }

    /// Standard deviation `α_t` of the injected noise.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(match self.variant {
            ScheduleVariant::Quadratic => self.variance(t)?.sqrt(),
            ScheduleVariant::ShiftedExponential => self.eta * (5.0 * (t - 1.0)).exp(),
        })
    }
}

/// `α_t` for `schedule` at time `t ∈ [0, 1]`.
pub fn schedule_sigma(schedule: &NoiseSchedule, t: f64) -> Result<f64> {
    schedule.sigma(t)
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Regression target for the vector field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetMode {
    /// `x₁ − (1 − η)x₀`.
    Exact,
    /// `x₁ − x₀`.
    #[default]
    Plain,
}

impl FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "plain" => Ok(Self::Plain),
            other => Err(Error::invalid(format!("unknown target mode '{other}'"))),
        }
    }
}

impl fmt::Display for TargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::Plain => "plain",
        })
    }
}

/// `(1 − t)·x0 + t·x1`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    ensure_dim("interpolate", x0.len(), x1.len())?;
    check_time(t)?;
    Ok(x0
        .iter()
        .zip(x1)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect())
}

/// `t·xi + (1 − t)·x0 + ε`: the OT path shifted by injected noise.
pub fn perturbed_flow(x0: &[f64], xi: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
    ensure_dim("perturbed_flow", x0.len(), xi.len())?;
    ensure_dim("perturbed_flow noise", x0.len(), eps.len())?;
    check_time(t)?;
    Ok(x0
        .iter()
        .zip(xi)
        .zip(eps)
        .map(|((a, b), e)| t * b + (1.0 - t) * a + e)
        .collect())
}

/// `t·xi + (1 − (1 − η)t)·x0`: the deterministic map whose marginal at `t`
/// matches the perturbed path.
pub fn canonical_flow(x0: &[f64], xi: &[f64], t: f64, eta: f64) -> Result<Vec<f64>> {
    ensure_dim("canonical_flow", x0.len(), xi.len())?;
    check_time(t)?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta {eta} outside [0, 1]")));
    }
    let scale = 1.0 - (1.0 - eta) * t;
    Ok(x0.iter().zip(xi).map(|(a, b)| t * b + scale * a).collect())
}

/// State-conditioned vector field `v(t, s, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldNet {
    net: DenseNet,
    state_dim: usize,
    action_dim: usize,
}

impl VectorFieldNet {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let dims = layer_dims(1 + state_dim + action_dim, hidden, action_dim);
        Self::from_net(DenseNet::new(&dims, rng)?, state_dim, action_dim)
    }

    pub fn from_net(net: DenseNet, state_dim: usize, action_dim: usize) -> Result<Self> {
        ensure_dim(
            "vector field input",
            1 + state_dim + action_dim,
            net.input_dim(),
        )?;
        ensure_dim("vector field output", action_dim, net.output_dim())?;
        Ok(Self {
            net,
            state_dim,
            action_dim,
        })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Rows of `[t, s, x]`.
    pub fn assemble_input(
        &self,
        t: ArrayView1<f64>,
        states: ArrayView2<f64>,
        x: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let b = t.len();
        ensure_dim("vector field states", b, states.nrows())?;
        ensure_dim("vector field points", b, x.nrows())?;
        ensure_dim("state dim", self.state_dim, states.ncols())?;
        ensure_dim("action dim", self.action_dim, x.ncols())?;
        let mut input = Array2::zeros((b, 1 + self.state_dim + self.action_dim));
        input.column_mut(0).assign(&t);
        input
            .slice_mut(s![.., 1..1 + self.state_dim])
            .assign(&states);
        input.slice_mut(s![.., 1 + self.state_dim..]).assign(&x);
        Ok(input)
    }

    pub fn velocity(
        &self,
        t: ArrayView1<f64>,
        states: ArrayView2<f64>,
        x: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let input = self.assemble_input(t, states, x)?;
        self.net.forward_batch(input.view())
    }
}

pub(crate) fn layer_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input);
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims
}

/// One minibatch for the flow loss. Row `i` of every matrix belongs to the
/// same sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBatch {
    pub x0: Array2<f64>,
    pub x1: Array2<f64>,
    pub states: Array2<f64>,
    pub t: Array1<f64>,
    pub eps: Array2<f64>,
}

impl FlowBatch {
    /// Draws base noise, times `t ~ U[0, 1]`, and injected noise with
    /// per-sample standard deviation `α_t`.
    pub fn draw<R: Rng + ?Sized>(
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        let (b, d) = actions.dim();
        ensure_dim("flow batch states", b, states.nrows())?;
        if b == 0 {
            return Err(Error::Empty("flow batch"));
        }
        let x0 = Array2::from_shape_simple_fn((b, d), || rng.sample(StandardNormal));
        let t = Array1::from_shape_simple_fn(b, || rng.random::<f64>());
        let mut eps = Array2::zeros((b, d));
        for (i, mut row) in eps.rows_mut().into_iter().enumerate() {
            let sigma = schedule.sigma(t[i])?;
            for e in row.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *e = sigma * z;
            }
        }
        Ok(Self {
            x0,
            x1: actions.to_owned(),
            states: states.to_owned(),
            t,
            eps,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let b = self.t.len();
        if b == 0 {
            return Err(Error::Empty("flow batch"));
        }
        ensure_dim("flow batch x0", b, self.x0.nrows())?;
        ensure_dim("flow batch x1", b, self.x1.nrows())?;
        ensure_dim("flow batch states", b, self.states.nrows())?;
        ensure_dim("flow batch noise", b, self.eps.nrows())?;
        ensure_dim("flow batch x1 dim", self.x0.ncols(), self.x1.ncols())?;
        ensure_dim("flow batch noise dim", self.x0.ncols(), self.eps.ncols())?;
        if self.t.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid("flow batch time outside [0, 1]"));
        }
        Ok(())
    }

    /// Interpolated points `(1 − t)x₀ + t·x₁`, without noise.
    pub fn interpolated(&self) -> Array2<f64> {
        let mut xt = Array2::zeros(self.x0.raw_dim());
        Zip::from(xt.rows_mut())
            .and(self.x0.rows())
            .and(self.x1.rows())
            .and(&self.t)
            .for_each(|mut out, x0, x1, &t| {
                Zip::from(&mut out)
                    .and(x0)
                    .and(x1)
                    .for_each(|o, &a, &b| *o = (1.0 - t) * a + t * b);
            });
        xt
    }

    /// Regression target under `mode`.
    pub fn target(&self, eta: f64, mode: TargetMode) -> Array2<f64> {
        let scale = match mode {
            TargetMode::Exact => 1.0 - eta,
            TargetMode::Plain => 1.0,
        };
        &self.x1 - &(&self.x0 * scale)
    }
}

/// Squared-residual loss `mean_i ‖pred_i − target_i‖²` and its output gradient.
pub(crate) fn squared_residual(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> LossEval {
    let b = pred.nrows() as f64;
    let diff = &pred - &target;
    LossEval {
        per_sample: diff.map_axis(Axis(1), |r| r.dot(&r)),
        d_output: diff.mapv(|d| 2.0 * d / b),
    }
}

/// Noise-injected flow-matching loss and its gradient with respect to the
/// vector-field parameters. The network sees `x_t + ε`; with `η = 0` and the
/// plain target this is ordinary behavior-cloning flow matching.
pub fn fino_loss(
    net: &VectorFieldNet,
    batch: &FlowBatch,
    schedule: &NoiseSchedule,
    mode: TargetMode,
) -> Result<GradientBundle> {
    batch.validate()?;
    ensure_dim("flow batch action dim", net.action_dim, batch.x0.ncols())?;
    let noisy = batch.interpolated() + &batch.eps;
    let input = net.assemble_input(batch.t.view(), batch.states.view(), noisy.view())?;
    let target = batch.target(schedule.eta, mode);
    crate::nn::grad(&net.net, input.view(), |out| {
        squared_residual(out, target.view())
    })
}

/// Flow-matching loss with zero-mean noise added to the regression target
/// instead of the input: `‖v(t, s, x_t) − (x₁ − x₀) − ε‖²`.
pub fn target_noise_loss(
    net: &VectorFieldNet,
    batch: &FlowBatch,
    target_noise: ArrayView2<f64>,
) -> Result<GradientBundle> {
    batch.validate()?;
    if target_noise.dim() != batch.x0.dim() {
        return Err(Error::DimensionMismatch {
            context: "target noise",
            expected: batch.x0.len(),
            actual: target_noise.len(),
        });
    }
    let input = net.assemble_input(
        batch.t.view(),
        batch.states.view(),
        batch.interpolated().view(),
    )?;
    let target = batch.target(0.0, TargetMode::Plain) + target_noise;
    crate::nn::grad(&net.net, input.view(), |out| {
        squared_residual(out, target.view())
    })
}

/// Euler integration of `dx/dt = v(t, s, x)` from `t = 0` to `t = 1`, starting
/// at `z`. No clamping.
pub fn integrate(
    net: &VectorFieldNet,
    states: ArrayView2<f64>,
    z: ArrayView2<f64>,
    steps: usize,
) -> Result<Array2<f64>> {
    if steps == 0 {
        return Err(Error::invalid("flow steps must be positive"));
    }
    ensure_dim("integrate batch", states.nrows(), z.nrows())?;
    let dt = 1.0 / steps as f64;
    let mut x = z.to_owned();
    let mut t = Array1::zeros(x.nrows());
    for k in 0..steps {
        t.fill(k as f64 * dt);
        let v = net.velocity(t.view(), states, x.view())?;
        x.scaled_add(dt, &v);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("euler integration"));
        }
    }
    Ok(x)
}

/// Flow actions for a batch, clamped to `[-1, 1]` after integration.
pub fn sample_actions(
    net: &VectorFieldNet,
    states: ArrayView2<f64>,
    z: ArrayView2<f64>,
    steps: usize,
) -> Result<Array2<f64>> {
    Ok(integrate(net, states, z, steps)?.mapv_into(|a| a.clamp(-1.0, 1.0)))
}

/// Single flow action for state `s` from base noise `z`.
pub fn sample_action(net: &VectorFieldNet, s: &[f64], z: &[f64], steps: usize) -> Result<Vec<f64>> {
    ensure_dim("sample_action state", net.state_dim, s.len())?;
    ensure_dim("sample_action noise", net.action_dim, z.len())?;
    let states =
        ArrayView2::from_shape((1, s.len()), s).map_err(|e| Error::invalid(e.to_string()))?;
    let z = ArrayView2::from_shape((1, z.len()), z).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(sample_actions(net, states, z, steps)?
        .into_raw_vec_and_offset()
        .0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A field that ignores its input and returns `c` (zero weights, bias c).
    fn constant_field(state_dim: usize, c: &[f64]) -> VectorFieldNet {
        let mut net = DenseNet::zeros(&[1 + state_dim + c.len(), 4, c.len()]).unwrap();
        net.layers_mut()[1].bias = Array1::from_vec(c.to_vec());
        VectorFieldNet::from_net(net, state_dim, c.len()).unwrap()
    }

    /// Linear field `v = x` in one dimension (exact solution `x(1) = e·x(0)`).
    fn linear_field() -> VectorFieldNet {
        let net = DenseNet::from_layers(vec![Dense {
            weights: array![[0.0], [0.0], [1.0]],
            bias: array![0.0],
        }])
        .unwrap();
        VectorFieldNet::from_net(net, 1, 1).unwrap()
    }

    #[test]
    fn quadratic_schedule_values() {
        let q = NoiseSchedule::quadratic(0.1).unwrap();
        assert_eq!(schedule_sigma(&q, 0.0).unwrap(), 0.0);
        assert!((schedule_sigma(&q, 1.0).unwrap() - 0.1).abs() < 1e-15);
        assert!((q.variance(1.0).unwrap() - 0.01).abs() < 1e-15);
        assert!((schedule_sigma(&q, 0.5).unwrap() - 0.0525f64.sqrt()).abs() < 1e-15);
        assert!((schedule_sigma(&q, 0.5).unwrap() - 0.22913).abs() < 1e-5);
    }

    #[test]
    fn shifted_exponential_schedule_values() {
        let e = NoiseSchedule::shifted_exponential(0.1).unwrap();
        assert!((schedule_sigma(&e, 0.0).unwrap() - 6.7379e-4).abs() < 1e-8);
        assert!((schedule_sigma(&e, 1.0).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn schedule_rejects_bad_time_and_eta() {
        let q = NoiseSchedule::quadratic(0.1).unwrap();
        assert!(q.sigma(-0.01).is_err());
        assert!(q.sigma(1.01).is_err());
        assert!(NoiseSchedule::quadratic(1.5).is_err());
        assert!(NoiseSchedule::quadratic(-0.1).is_err());
    }

    #[test]
    fn interpolation_examples() {
        assert_eq!(
            interpolate(&[1.0, 2.0], &[3.0, 5.0], 0.0).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            interpolate(&[1.0, 2.0], &[3.0, 5.0], 1.0).unwrap(),
            vec![3.0, 5.0]
        );
        assert_eq!(
            interpolate(&[0.0, 0.0], &[2.0, 2.0], 0.5).unwrap(),
            vec![1.0, 1.0]
        );
        assert!(interpolate(&[0.0], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn perturbed_flow_examples() {
        let x0 = [0.3, -0.7];
        let xi = [1.0, 0.5];
        assert_eq!(
            perturbed_flow(&x0, &xi, 0.4, &[0.0, 0.0]).unwrap(),
            interpolate(&x0, &xi, 0.4).unwrap()
        );
        assert_eq!(
            perturbed_flow(&x0, &xi, 1.0, &[0.25, -0.5]).unwrap(),
            vec![1.25, 0.0]
        );
        assert!(perturbed_flow(&x0, &xi, 0.5, &[0.0]).is_err());
    }

    #[test]
    fn perturbed_flow_variance_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eta = 0.1;
        let q = NoiseSchedule::quadratic(eta).unwrap();
        let n = 1_000_000;
        for t in [0.3, 0.8] {
            let sigma = q.sigma(t).unwrap();
            let (mut sum, mut sq) = (0.0, 0.0);
            for _ in 0..n {
                let x0: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
                let x = perturbed_flow(&[x0], &[0.0], t, &[e]).unwrap()[0];
                sum += x;
                sq += x * x;
            }
            let mean = sum / n as f64;
            let var = sq / n as f64 - mean * mean;
            let expected = (1.0 - (1.0 - eta) * t).powi(2);
            assert!(
                (var / expected - 1.0).abs() < 0.01,
                "t={t}: {var} vs {expected}"
            );
        }
    }

    #[test]
    fn canonical_flow_examples() {
        let x0 = [0.4, -1.0];
        let xi = [0.2, 0.9];
        assert_eq!(
            canonical_flow(&x0, &xi, 0.7, 0.0).unwrap(),
            interpolate(&x0, &xi, 0.7).unwrap()
        );
        let end = canonical_flow(&x0, &xi, 1.0, 0.1).unwrap();
        assert!((end[0] - (0.2 + 0.1 * 0.4)).abs() < 1e-15);
        assert!((end[1] - (0.9 - 0.1)).abs() < 1e-15);
        let mid = canonical_flow(&[1.0], &[0.0], 0.5, 0.1).unwrap();
        assert!((mid[0] - 0.55).abs() < 1e-15);
    }

    #[test]
    fn loss_zero_for_exact_fit() {
        // η = 0 ⇒ no noise; a field equal to x1 − x0 everywhere fits exactly
        // when every sample shares the same x1 − x0.
        let field = constant_field(1, &[0.5, -0.25]);
        let batch = FlowBatch {
            x0: array![[0.0, 0.0], [1.0, 1.0]],
            x1: array![[0.5, -0.25], [1.5, 0.75]],
            states: array![[0.0], [0.0]],
            t: array![0.2, 0.9],
            eps: Array2::zeros((2, 2)),
        };
        let sched = NoiseSchedule::quadratic(0.0).unwrap();
        let g = fino_loss(&field, &batch, &sched, TargetMode::Plain).unwrap();
        assert_eq!(g.loss, 0.0);
    }

    #[test]
    fn loss_unit_for_zero_field() {
        let field = constant_field(1, &[0.0, 0.0]);
        let batch = FlowBatch {
            x0: array![[0.0, 0.0]],
            x1: array![[1.0, 0.0]],
            states: array![[0.0]],
            t: array![0.5],
            eps: Array2::zeros((1, 2)),
        };
        let sched = NoiseSchedule::quadratic(0.1).unwrap();
        let g = fino_loss(&field, &batch, &sched, TargetMode::Plain).unwrap();
        assert!((g.loss - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eta_zero_plain_equals_behavior_cloning_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let field = VectorFieldNet::new(2, 2, &[16, 16], &mut rng).unwrap();
        let sched = NoiseSchedule::quadratic(0.0).unwrap();
        let states = Array2::from_shape_fn((8, 2), |(i, j)| (i + j) as f64 * 0.1);
        let actions = Array2::from_shape_fn((8, 2), |(i, j)| ((i * 3 + j) as f64).sin() * 0.8);
        let batch = FlowBatch::draw(states.view(), actions.view(), &sched, &mut rng).unwrap();
        assert!(batch.eps.iter().all(|&e| e == 0.0));
        let fino = fino_loss(&field, &batch, &sched, TargetMode::Plain).unwrap();
        // Direct evaluation of the behavior-cloning objective.
        let xt = batch.interpolated();
        let v = field
            .velocity(batch.t.view(), batch.states.view(), xt.view())
            .unwrap();
        let target = &batch.x1 - &batch.x0;
        let direct = (&v - &target).mapv(|d| d * d).sum() / 8.0;
        assert!((fino.loss - direct).abs() < 1e-12);
    }

    #[test]
    fn fino_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut field = VectorFieldNet::new(1, 2, &[10, 10], &mut rng).unwrap();
        let sched = NoiseSchedule::quadratic(0.1).unwrap();
        let states = Array2::from_elem((6, 1), 0.0);
        let actions = Array2::from_shape_fn((6, 2), |(i, j)| {
            (i as f64 * 0.3 - 0.7) * (j as f64 + 1.0) * 0.5
        });
        let batch = FlowBatch::draw(states.view(), actions.view(), &sched, &mut rng).unwrap();
        for mode in [TargetMode::Exact, TargetMode::Plain] {
            let g = fino_loss(&field, &batch, &sched, mode).unwrap().to_flat();
            let params = field.net().to_flat();
            let h = 1e-5;
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..params.len() {
                let mut p = params.clone();
                p[i] += h;
                field.net_mut().set_flat(&p).unwrap();
                let up = fino_loss(&field, &batch, &sched, mode).unwrap().loss;
                p[i] -= 2.0 * h;
                field.net_mut().set_flat(&p).unwrap();
                let down = fino_loss(&field, &batch, &sched, mode).unwrap().loss;
                let fd = (up - down) / (2.0 * h);
                num += (fd - g[i]).powi(2);
                den += fd * fd;
            }
            field.net_mut().set_flat(&params).unwrap();
            assert!((num / den).sqrt() < 1e-4);
        }
    }

    #[test]
    fn draw_uses_schedule_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sched = NoiseSchedule::quadratic(0.3).unwrap();
        let n = 20_000;
        let states = Array2::zeros((n, 1));
        let actions = Array2::zeros((n, 1));
        let batch = FlowBatch::draw(states.view(), actions.view(), &sched, &mut rng).unwrap();
        // ε/α_t is standard normal.
        let z: Vec<f64> = (0..n)
            .filter(|&i| batch.t[i] > 0.05)
            .map(|i| batch.eps[[i, 0]] / sched.sigma(batch.t[i]).unwrap())
            .collect();
        let m = z.iter().sum::<f64>() / z.len() as f64;
        let v = z.iter().map(|x| (x - m).powi(2)).sum::<f64>() / z.len() as f64;
        assert!(m.abs() < 0.05 && (v - 1.0).abs() < 0.05, "mean {m} var {v}");
    }

    #[test]
    fn constant_field_integrates_exactly() {
        let c = [0.3, -0.2];
        let field = constant_field(1, &c);
        for steps in [1, 3, 10] {
            let a = sample_action(&field, &[0.0], &[0.1, 0.5], steps).unwrap();
            assert!((a[0] - 0.4).abs() < 1e-12 && (a[1] - 0.3).abs() < 1e-12);
        }
        // Clamped at the box edge.
        let a = sample_action(&field, &[0.0], &[0.9, -0.95], 10).unwrap();
        assert_eq!(a, vec![1.0, -1.0]);
    }

    #[test]
    fn zero_field_returns_clamped_noise() {
        let field = constant_field(2, &[0.0, 0.0]);
        let a = sample_action(&field, &[1.0, 2.0], &[0.25, -3.0], 10).unwrap();
        assert_eq!(a, vec![0.25, -1.0]);
    }

    #[test]
    fn euler_is_first_order() {
        let field = linear_field();
        let exact = std::f64::consts::E * 0.5;
        let err = |steps| {
            let x = integrate(&field, array![[0.0]].view(), array![[0.5]].view(), steps).unwrap();
            (x[[0, 0]] - exact).abs()
        };
        for steps in [10, 20, 40, 80] {
            let ratio = err(steps) / err(2 * steps);
            assert!(ratio >= 1.9, "steps {steps}: ratio {ratio}");
        }
    }

    #[test]
    fn sample_action_validates_dims() {
        let field = constant_field(1, &[0.0, 0.0]);
        assert!(sample_action(&field, &[0.0, 1.0], &[0.0, 0.0], 10).is_err());
        assert!(sample_action(&field, &[0.0], &[0.0], 10).is_err());
        assert!(sample_action(&field, &[0.0], &[0.0, 0.0], 0).is_err());
    }

    proptest! {
        #[test]
        fn schedule_identity(t in 0.0f64..=1.0, eta in 0.0f64..=1.0) {
            let q = NoiseSchedule::quadratic(eta).unwrap();
            let lhs = (1.0 - t).powi(2) + q.variance(t).unwrap();
            let rhs = (1.0 - (1.0 - eta) * t).powi(2);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn quadratic_variance_bounds(t in 0.0f64..=1.0, eta in 0.0f64..=1.0) {
            let q = NoiseSchedule::quadratic(eta).unwrap();
            let v = q.variance(t).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert!(q.variance(0.0).unwrap() == 0.0);
            prop_assert!((q.variance(1.0).unwrap() - eta * eta).abs() < 1e-15);
        }

        #[test]
        fn conditional_variance_monotone_in_eta(t in 0.0f64..=1.0, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let var = |eta: f64| (1.0 - (1.0 - eta) * t).powi(2);
            prop_assert!(var(hi) >= var(lo));
        }

        #[test]
        fn sampled_actions_stay_in_box(seed in any::<u64>(), z0 in -5.0f64..5.0, z1 in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut field = VectorFieldNet::new(1, 2, &[8], &mut rng).unwrap();
            let p: Vec<f64> = field.net().to_flat().iter().map(|w| w * 5.0).collect();
            field.net_mut().set_flat(&p).unwrap();
            let a = sample_action(&field, &[0.3], &[z0, z1], 10).unwrap();
            prop_assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }
}
