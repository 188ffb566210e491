use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::Critic;
use crate::error::{ensure_dim, Result};
use crate::flow::{layer_dims, sample_actions, VectorFieldNet};
use crate::nn::{mean_finite_loss, DenseNet, GradientBundle, LossEval};

/// A stochastic policy realized as a deterministic map of state and base
/// noise `z ~ N(0, I)`.
pub trait ActionSampler {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// One action per row of `(states, z)`.
    fn act_batch(&self, states: ArrayView2<f64>, z: ArrayView2<f64>) -> Result<Array2<f64>>;
}

/// Direct noise-to-action policy `a = tanh(f(s, z))`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneStepPolicy {
    net: DenseNet,
    state_dim: usize,
    action_dim: usize,
}

impl OneStepPolicy {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let dims = layer_dims(state_dim + action_dim, hidden, action_dim);
        Self::from_net(DenseNet::new(&dims, rng)?, state_dim, action_dim)
    }

    pub fn from_net(net: DenseNet, state_dim: usize, action_dim: usize) -> Result<Self> {
        ensure_dim("policy input", state_dim + action_dim, net.input_dim())?;
        ensure_dim("policy output", action_dim, net.output_dim())?;
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

    fn input(&self, states: ArrayView2<f64>, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        ensure_dim("policy batch", states.nrows(), z.nrows())?;
        ensure_dim("policy state dim", self.state_dim, states.ncols())?;
        ensure_dim("policy noise dim", self.action_dim, z.ncols())?;
        let mut x = Array2::zeros((states.nrows(), self.state_dim + self.action_dim));
        x.slice_mut(s![.., ..self.state_dim]).assign(&states);
        x.slice_mut(s![.., self.state_dim..]).assign(&z);
        Ok(x)
    }

    pub fn act(&self, state: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let s = ArrayView2::from_shape((1, state.len()), state)
            .map_err(|e| crate::Error::invalid(e.to_string()))?;
        let z = ArrayView2::from_shape((1, z.len()), z)
            .map_err(|e| crate::Error::invalid(e.to_string()))?;
        Ok(self.act_batch(s, z)?.into_raw_vec_and_offset().0)
    }
}

impl ActionSampler for OneStepPolicy {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn act_batch(&self, states: ArrayView2<f64>, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        let x = self.input(states, z)?;
        Ok(self.net.forward_batch(x.view())?.mapv_into(f64::tanh))
    }
}

/// Per-sample `−Q + α‖a − a_flow‖²` and its gradient with respect to `a`
/// (already divided by the batch size).
pub(crate) fn distill_terms(
    q: ndarray::ArrayView1<f64>,
    dq_da: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    flow_actions: ArrayView2<f64>,
    alpha: f64,
) -> LossEval {
    let b = actions.nrows() as f64;
    let diff = &actions - &flow_actions;
    let per_sample = diff.map_axis(Axis(1), |r| alpha * r.dot(&r)) - q;
    let mut d_output = Array2::zeros(actions.raw_dim());
    Zip::from(&mut d_output)
        .and(&diff)
        .and(&dq_da)
        .for_each(|d, &diff, &g| *d = (2.0 * alpha * diff - g) / b);
    LossEval {
        per_sample,
        d_output,
    }
}

/// Distillation-plus-value objective for the one-step policy and its gradient
/// with respect to the policy parameters. The same `z` drives the policy
/// and the Euler-integrated flow; flow and critic are held fixed.
pub fn distill_loss(
    policy: &OneStepPolicy,
    flow: &VectorFieldNet,
    critic: &Critic,
    states: ArrayView2<f64>,
    z: ArrayView2<f64>,
    alpha: f64,
    flow_steps: usize,
) -> Result<GradientBundle> {
    let flow_actions = sample_actions(flow, states, z, flow_steps)?;
    let x = policy.input(states, z)?;
    let trace = policy.net.trace(x.view())?;
    let actions = trace.output.mapv(f64::tanh);
    let (q, dq_da) = critic.q_and_action_grad(states, actions.view())?;
    let eval = distill_terms(
        q.view(),
        dq_da.view(),
        actions.view(),
        flow_actions.view(),
        alpha,
    );
    let loss = mean_finite_loss(eval.per_sample.view())?;
    // Chain through tanh: da/du = 1 − a².
    let d_pre = &eval.d_output * &actions.mapv(|a| 1.0 - a * a);
    let (mut grads, _) = policy.net.backward(&trace, d_pre.view())?;
    grads.loss = loss;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::VectorFieldNet;
    use crate::nn::{adam_step, AdamState, Dense};
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn linear_critic(state_dim: usize, weights_a: &[f64]) -> Critic {
        let mut w = vec![0.0; state_dim];
        w.extend_from_slice(weights_a);
        let net = DenseNet::from_layers(vec![Dense {
            weights: Array2::from_shape_vec((w.len(), 1), w).unwrap(),
            bias: array![0.0],
        }])
        .unwrap();
        Critic::from_nets(vec![net], state_dim, weights_a.len(), 1e-3).unwrap()
    }

    /// One Euler step of `v = −x` sends every z to 0.
    fn collapsing_flow(state_dim: usize, action_dim: usize) -> VectorFieldNet {
        let mut w = Array2::zeros((1 + state_dim + action_dim, action_dim));
        for j in 0..action_dim {
            w[[1 + state_dim + j, j]] = -1.0;
        }
        let net = DenseNet::from_layers(vec![Dense {
            weights: w,
            bias: Array1::zeros(action_dim),
        }])
        .unwrap();
        VectorFieldNet::from_net(net, state_dim, action_dim).unwrap()
    }

    /// Flow whose one-step Euler output is `tanh(policy)` is hard to build
    /// directly; instead a policy with zero output weights and a flow that
    /// collapses to 0 agree exactly (both yield 0).
    #[test]
    fn matching_policy_and_zero_critic_give_zero_loss() {
        let policy = OneStepPolicy::from_net(DenseNet::zeros(&[3, 4, 2]).unwrap(), 1, 2).unwrap();
        let flow = collapsing_flow(1, 2);
        let critic =
            Critic::from_nets(vec![DenseNet::zeros(&[3, 4, 1]).unwrap()], 1, 2, 1e-3).unwrap();
        let states = array![[0.2], [-0.4]];
        let z = array![[0.5, -1.0], [2.0, 0.1]];
        let g = distill_loss(&policy, &flow, &critic, states.view(), z.view(), 1.0, 1).unwrap();
        assert_eq!(g.loss, 0.0);
    }

    #[test]
    fn alpha_zero_is_pure_value_maximization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = OneStepPolicy::new(1, 2, &[8], &mut rng).unwrap();
        let flow = VectorFieldNet::new(1, 2, &[8], &mut rng).unwrap();
        let critic = Critic::new(1, 2, &[8], false, 1e-3, &mut rng).unwrap();
        let states = array![[0.2], [-0.4], [0.9]];
        let z = Array2::from_shape_simple_fn((3, 2), || rng.sample(StandardNormal));
        let g = distill_loss(&policy, &flow, &critic, states.view(), z.view(), 0.0, 10).unwrap();
        let a = policy.act_batch(states.view(), z.view()).unwrap();
        let q = critic.q_values(states.view(), a.view()).unwrap();
        assert!((g.loss + q.mean().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn alpha_term_gradient_is_two_alpha_residual() {
        let a = array![[0.3, -0.2], [0.9, 0.1]];
        let a_flow = array![[0.1, 0.4], [-0.5, 0.0]];
        let alpha = 2.5;
        let q = Array1::zeros(2);
        let dq = Array2::zeros((2, 2));
        let eval = distill_terms(q.view(), dq.view(), a.view(), a_flow.view(), alpha);
        let loss = |a: &Array2<f64>| {
            distill_terms(q.view(), dq.view(), a.view(), a_flow.view(), alpha)
                .per_sample
                .mean()
                .unwrap()
        };
        for i in 0..2 {
            for j in 0..2 {
                let mut up = a.clone();
                up[[i, j]] += 1e-6;
                let mut down = a.clone();
                down[[i, j]] -= 1e-6;
                let fd = (loss(&up) - loss(&down)) / 2e-6;
                let analytic = 2.0 * alpha * (a[[i, j]] - a_flow[[i, j]]) / 2.0;
                assert!((fd - analytic).abs() < 1e-8);
                assert!((eval.d_output[[i, j]] - analytic).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for use_min in [false, true] {
            let mut policy = OneStepPolicy::new(2, 2, &[12, 12], &mut rng).unwrap();
            let flow = VectorFieldNet::new(2, 2, &[12], &mut rng).unwrap();
            let critic = Critic::new(2, 2, &[12, 12], use_min, 1e-3, &mut rng).unwrap();
            let states = Array2::from_shape_simple_fn((5, 2), || rng.random_range(-1.0..1.0));
            let z = Array2::from_shape_simple_fn((5, 2), || rng.sample(StandardNormal));
            let run = |p: &OneStepPolicy| {
                distill_loss(p, &flow, &critic, states.view(), z.view(), 0.7, 10).unwrap()
            };
            let g = run(&policy).to_flat();
            let params = policy.net().to_flat();
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..params.len() {
                let mut p = params.clone();
                p[i] += 1e-5;
                policy.net_mut().set_flat(&p).unwrap();
                let up = run(&policy).loss;
                p[i] -= 2e-5;
                policy.net_mut().set_flat(&p).unwrap();
                let down = run(&policy).loss;
                let fd = (up - down) / 2e-5;
                num += (fd - g[i]).powi(2);
                den += fd * fd;
            }
            policy.net_mut().set_flat(&params).unwrap();
            assert!((num / den).sqrt() < 1e-4, "use_min={use_min}");
        }
    }

    #[test]
    fn scalar_toy_converges_to_half() {
        // Q(s, a) = a, a_flow ≡ 0, α = 1 ⇒ per-sample loss −a + a², minimized at a = ½.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut policy = OneStepPolicy::new(1, 1, &[16], &mut rng).unwrap();
        let flow = collapsing_flow(1, 1);
        let critic = linear_critic(1, &[1.0]);
        let mut opt = AdamState::new(policy.net(), 1e-2);
        let states = Array2::zeros((64, 1));
        for _ in 0..2000 {
            let z = Array2::from_shape_simple_fn((64, 1), || rng.sample(StandardNormal));
            let g = distill_loss(&policy, &flow, &critic, states.view(), z.view(), 1.0, 1).unwrap();
            adam_step(policy.net_mut(), &mut opt, &g).unwrap();
        }
        let z = Array2::from_shape_simple_fn((1000, 1), || rng.sample(StandardNormal));
        let a = policy
            .act_batch(Array2::zeros((1000, 1)).view(), z.view())
            .unwrap();
        let mean = a.mean().unwrap();
        let max_dev = a.iter().map(|x| (x - 0.5).abs()).fold(0.0, f64::max);
        assert!(
            (mean - 0.5).abs() < 1e-2 && max_dev < 5e-2,
            "mean {mean} max_dev {max_dev}"
        );
    }

    #[test]
    fn policy_outputs_stay_in_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut policy = OneStepPolicy::new(2, 3, &[8], &mut rng).unwrap();
        let p: Vec<f64> = policy.net().to_flat().iter().map(|w| w * 50.0).collect();
        policy.net_mut().set_flat(&p).unwrap();
        let z =
            Array2::from_shape_simple_fn((100, 3), || rng.sample::<f64, _>(StandardNormal) * 10.0);
        let s = Array2::from_shape_simple_fn((100, 2), || rng.random_range(-5.0..5.0));
        let a = policy.act_batch(s.view(), z.view()).unwrap();
        assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)));
    }
}
