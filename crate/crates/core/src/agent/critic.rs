use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{ActionSampler, AgentConfig};
use crate::data::TransitionBatch;
use crate::error::{ensure_dim, Error, Result};
use crate::flow::layer_dims;
use crate::nn::{self, adam_step, polyak_update, AdamState, DenseNet, GradientBundle, LossEval};

/// Action-value function `Q(s, a)` with Polyak-averaged target copies.
///
/// With `use_min_of_two` the critic holds two networks and every scoring
/// query (TD target, policy objective, candidate ranking) uses their minimum.
#[derive(Debug, Clone)]
pub struct Critic {
    online: Vec<DenseNet>,
    target: Vec<DenseNet>,
    optimizers: Vec<AdamState>,
    use_min_of_two: bool,
    state_dim: usize,
    action_dim: usize,
}

#[derive(Debug, Clone)]
pub struct TdReport {
    /// Mean over critics of the mean squared TD error.
    pub loss: f64,
    pub targets: Array1<f64>,
    pub grads: Vec<GradientBundle>,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        use_min_of_two: bool,
        learning_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let dims = layer_dims(state_dim + action_dim, hidden, 1);
        let count = if use_min_of_two { 2 } else { 1 };
        let online = (0..count)
            .map(|_| DenseNet::new(&dims, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_nets(online, state_dim, action_dim, learning_rate)
    }

    /// Wraps existing online networks; targets start as exact copies.
    pub fn from_nets(
        online: Vec<DenseNet>,
        state_dim: usize,
        action_dim: usize,
        learning_rate: f64,
    ) -> Result<Self> {
        if !(1..=2).contains(&online.len()) {
            return Err(Error::invalid("a critic holds one or two networks"));
        }
        for net in &online {
            ensure_dim("critic input", state_dim + action_dim, net.input_dim())?;
            ensure_dim("critic output", 1, net.output_dim())?;
        }
        let target = online.clone();
        let optimizers = online
            .iter()
            .map(|n| AdamState::new(n, learning_rate))
            .collect();
        Ok(Self {
            use_min_of_two: online.len() == 2,
            online,
            target,
            optimizers,
            state_dim,
            action_dim,
        })
    }

    pub fn with_targets(mut self, target: Vec<DenseNet>) -> Result<Self> {
        if target.len() != self.online.len()
            || target
                .iter()
                .zip(&self.online)
                .any(|(t, o)| !t.same_architecture(o))
        {
            return Err(Error::ArchitectureMismatch("critic targets".into()));
        }
        self.target = target;
        Ok(self)
    }

    pub fn use_min_of_two(&self) -> bool {
        self.use_min_of_two
    }

    pub fn online(&self) -> &[DenseNet] {
        &self.online
    }

    pub fn online_mut(&mut self) -> &mut [DenseNet] {
        &mut self.online
    }

    pub fn target(&self) -> &[DenseNet] {
        &self.target
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn input(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
        ensure_dim("critic batch", states.nrows(), actions.nrows())?;
        ensure_dim("critic state dim", self.state_dim, states.ncols())?;
        ensure_dim("critic action dim", self.action_dim, actions.ncols())?;
        let mut x = Array2::zeros((states.nrows(), self.state_dim + self.action_dim));
        x.slice_mut(s![.., ..self.state_dim]).assign(&states);
        x.slice_mut(s![.., self.state_dim..]).assign(&actions);
        Ok(x)
    }

    fn reduce(nets: &[DenseNet], input: ArrayView2<f64>) -> Result<Array1<f64>> {
        let mut q = nets[0].forward_batch(input)?.column(0).to_owned();
        for net in &nets[1..] {
            let other = net.forward_batch(input)?;
            q.zip_mut_with(&other.column(0), |a, &b| *a = a.min(b));
        }
        Ok(q)
    }

    /// Scoring value: the single online critic, or the minimum of the two.
    pub fn q_values(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<Array1<f64>> {
        let x = self.input(states, actions)?;
        Self::reduce(&self.online, x.view())
    }

    pub fn target_q_values(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<Array1<f64>> {
        let x = self.input(states, actions)?;
        Self::reduce(&self.target, x.view())
    }

    /// Scoring values and their per-sample gradients with respect to the
    /// action. Under the minimum, each sample's gradient comes from the
    /// network that attains it.
    pub fn q_and_action_grad(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let x = self.input(states, actions)?;
        let b = x.nrows();
        let ones = Array2::ones((b, 1));
        let mut best: Option<(Array1<f64>, Array2<f64>)> = None;
        for net in &self.online {
            let trace = net.trace(x.view())?;
            let q = trace.output.column(0).to_owned();
            let (_, d_input) = net.backward(&trace, ones.view())?;
            let d_action = d_input.slice(s![.., self.state_dim..]).to_owned();
            best = Some(match best {
                None => (q, d_action),
                Some((mut bq, mut bg)) => {
                    for i in 0..b {
                        if q[i] < bq[i] {
                            bq[i] = q[i];
                            bg.row_mut(i).assign(&d_action.row(i));
                        }
                    }
                    (bq, bg)
                }
            });
        }
        Ok(best.unwrap())
    }
}

/// Bootstrapped regression targets `r + γ(1 − done)·Q̄(s′, a′)` with
/// `a′ = π(s′, z_next)`.
pub fn td_targets<P: ActionSampler + ?Sized>(
    critic: &Critic,
    batch: &TransitionBatch,
    policy: &P,
    discount: f64,
    z_next: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    let next_actions = policy.act_batch(batch.next_states.view(), z_next)?;
    let next_q = critic.target_q_values(batch.next_states.view(), next_actions.view())?;
    let mut y = Array1::zeros(batch.len());
    for i in 0..batch.len() {
        let bootstrap = if batch.dones[i] > 0.5 {
            0.0
        } else {
            discount * next_q[i]
        };
        y[i] = batch.rewards[i] + bootstrap;
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("td target"));
    }
    Ok(y)
}

/// One TD regression step on every online critic, followed by the Polyak
/// update of the targets.
pub fn td_update<P: ActionSampler + ?Sized, R: Rng + ?Sized>(
    critic: &mut Critic,
    batch: &TransitionBatch,
    policy: &P,
    config: &AgentConfig,
    rng: &mut R,
) -> Result<TdReport> {
    if batch.is_empty() {
        return Err(Error::Empty("td batch"));
    }
    let z_next = Array2::from_shape_simple_fn((batch.len(), critic.action_dim), || {
        rng.sample(StandardNormal)
    });
    let targets = td_targets(critic, batch, policy, config.discount, z_next.view())?;
    let x = critic.input(batch.states.view(), batch.actions.view())?;
    let mut grads = Vec::with_capacity(critic.online.len());
    for k in 0..critic.online.len() {
        let g = nn::grad(&critic.online[k], x.view(), |out| {
            td_loss(out, targets.view())
        })?;
        adam_step(&mut critic.online[k], &mut critic.optimizers[k], &g)?;
        grads.push(g);
    }
    for (target, online) in critic.target.iter_mut().zip(&critic.online) {
        polyak_update(target, online, config.tau)?;
    }
    let loss = grads.iter().map(|g| g.loss).sum::<f64>() / grads.len() as f64;
    Ok(TdReport {
        loss,
        targets,
        grads,
    })
}

fn td_loss(out: ArrayView2<f64>, targets: ndarray::ArrayView1<f64>) -> LossEval {
    let b = out.nrows() as f64;
    let diff = &out.column(0) - &targets;
    LossEval {
        per_sample: diff.mapv(|d| d * d),
        d_output: diff.mapv(|d| 2.0 * d / b).insert_axis(Axis(1)),
    }
}
