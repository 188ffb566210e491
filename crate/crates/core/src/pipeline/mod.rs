//! Offline pre-training, online fine-tuning and evaluation.
//!
//! Every gradient step updates the critic, then the flow, then the one-step
//! policy, each on the same minibatch.

mod config;
mod metrics;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use config::{Exploration, RunConfig};
pub use metrics::{read_metrics, steps_are_monotone, write_metrics, MetricsRecord, Phase};

use crate::agent::{
    distill_loss, select_action_eval, select_action_explore, td_update, update_temperature,
    AgentConfig, Critic, EntropyController, OneStepPolicy, SamplerState,
};
use crate::data::{Dataset, ReplayBuffer, Transition, TransitionBatch};
use crate::envs::{Env, Environment};
use crate::error::{ensure_dim, Error, Result};
use crate::flow::{fino_loss, FlowBatch, NoiseSchedule, TargetMode, VectorFieldNet};
use crate::gmm::estimate_policy_entropy;
use crate::nn::{adam_step, AdamState, DenseNet};
use metrics::LossAccumulator;

/// Losses of one combined gradient step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub critic: f64,
    pub flow: f64,
    pub policy: f64,
}

/// Everything that learns, plus the exploration state.
#[derive(Debug, Clone)]
pub struct Agent {
    pub flow: VectorFieldNet,
    flow_opt: AdamState,
    pub policy: OneStepPolicy,
    policy_opt: AdamState,
    pub critic: Critic,
    pub sampler: SamplerState,
    pub entropy: EntropyController,
    pub schedule: NoiseSchedule,
    pub target_mode: TargetMode,
    pub config: AgentConfig,
    explore_calls: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AgentMeta {
    state_dim: usize,
    action_dim: usize,
    critics: usize,
    xi: f64,
    n_sample: usize,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        config: &RunConfig,
        state_dim: usize,
        action_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let flow = VectorFieldNet::new(state_dim, action_dim, &config.hidden, rng)?;
        let policy = OneStepPolicy::new(state_dim, action_dim, &config.hidden, rng)?;
        let critic = Critic::new(
            state_dim,
            action_dim,
            &config.hidden,
            config.min_of_two,
            config.learning_rate,
            rng,
        )?;
        Self::assemble(
            config,
            flow,
            policy,
            critic,
            config.sampler_state(action_dim),
        )
    }

    fn assemble(
        config: &RunConfig,
        flow: VectorFieldNet,
        policy: OneStepPolicy,
        critic: Critic,
        sampler: SamplerState,
    ) -> Result<Self> {
        let action_dim = flow.action_dim();
        Ok(Self {
            flow_opt: AdamState::new(flow.net(), config.learning_rate),
            policy_opt: AdamState::new(policy.net(), config.learning_rate),
            flow,
            policy,
            critic,
            sampler,
            entropy: config.entropy_controller(action_dim),
            schedule: config.noise_schedule()?,
            target_mode: config.target,
            config: config.agent_config(),
            explore_calls: 0,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.flow.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.flow.action_dim()
    }

    /// Number of times the exploration sampler has been queried.
    pub fn explore_calls(&self) -> u64 {
        self.explore_calls
    }

    /// Critic TD step, then the noise-injected flow step, then the
    /// distillation step.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        batch: &TransitionBatch,
        rng: &mut R,
    ) -> Result<StepLosses> {
        let td = td_update(&mut self.critic, batch, &self.policy, &self.config, rng)?;

        let flow_batch = FlowBatch::draw(
            batch.states.view(),
            batch.actions.view(),
            &self.schedule,
            rng,
        )?;
        let g = fino_loss(&self.flow, &flow_batch, &self.schedule, self.target_mode)?;
        let flow_loss = g.loss;
        adam_step(self.flow.net_mut(), &mut self.flow_opt, &g)?;

        let z = Array2::from_shape_simple_fn((batch.len(), self.action_dim()), || {
            rng.sample(StandardNormal)
        });
        let g = distill_loss(
            &self.policy,
            &self.flow,
            &self.critic,
            batch.states.view(),
            z.view(),
            self.config.bc_alpha,
            self.config.flow_steps,
        )?;
        let policy_loss = g.loss;
        adam_step(self.policy.net_mut(), &mut self.policy_opt, &g)?;

        Ok(StepLosses {
            critic: td.loss,
            flow: flow_loss,
            policy: policy_loss,
        })
    }

    pub fn explore<R: Rng + ?Sized>(&mut self, state: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        self.explore_calls += 1;
        select_action_explore(&self.policy, &self.critic, state, &self.sampler, rng)
    }

    pub fn act_eval<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        select_action_eval(
            &self.policy,
            &self.critic,
            state,
            self.sampler.n_sample,
            rng,
        )
    }

    /// Writes every network in the checkpoint format plus a small JSON file
    /// with the dimensions and temperature. Optimizer moments are not saved.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.flow.net().save(dir.join("flow.ckpt"))?;
        self.policy.net().save(dir.join("policy.ckpt"))?;
        for (k, (online, target)) in self
            .critic
            .online()
            .iter()
            .zip(self.critic.target())
            .enumerate()
        {
            online.save(dir.join(format!("critic_{k}.ckpt")))?;
            target.save(dir.join(format!("critic_target_{k}.ckpt")))?;
        }
        let meta = AgentMeta {
            state_dim: self.state_dim(),
            action_dim: self.action_dim(),
            critics: self.critic.online().len(),
            xi: self.sampler.xi,
            n_sample: self.sampler.n_sample,
        };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Decode(e.to_string()))?;
        std::fs::write(dir.join("agent.json"), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, config: &RunConfig) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: AgentMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("agent.json"))?)
                .map_err(|e| Error::Decode(format!("agent.json: {e}")))?;
        let (sd, ad) = (meta.state_dim, meta.action_dim);
        let flow = VectorFieldNet::from_net(DenseNet::load(dir.join("flow.ckpt"))?, sd, ad)?;
        let policy = OneStepPolicy::from_net(DenseNet::load(dir.join("policy.ckpt"))?, sd, ad)?;
        let mut online = Vec::new();
        let mut target = Vec::new();
        for k in 0..meta.critics {
            online.push(DenseNet::load(dir.join(format!("critic_{k}.ckpt")))?);
            target.push(DenseNet::load(dir.join(format!("critic_target_{k}.ckpt")))?);
        }
        let critic =
            Critic::from_nets(online, sd, ad, config.learning_rate)?.with_targets(target)?;
        let sampler = SamplerState::new(meta.xi, meta.n_sample)?;
        Self::assemble(config, flow, policy, critic, sampler)
    }
}

fn check_dataset(agent: &Agent, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Empty("offline dataset"));
    }
    ensure_dim("dataset state dim", agent.state_dim(), dataset.state_dim)?;
    ensure_dim("dataset action dim", agent.action_dim(), dataset.action_dim)?;
    Ok(())
}

/// Offline phase: `config.offline_steps` gradient steps on minibatches drawn
/// uniformly from the dataset.
pub fn pretrain_offline<R: Rng + ?Sized>(
    agent: &mut Agent,
    dataset: &Dataset,
    config: &RunConfig,
    rng: &mut R,
) -> Result<Vec<MetricsRecord>> {
    check_dataset(agent, dataset)?;
    let mut buffer = ReplayBuffer::new(dataset.len())?;
    for t in &dataset.transitions {
        buffer.push(t.clone())?;
    }
    let started = Instant::now();
    let mut acc = LossAccumulator::default();
    let mut records = Vec::new();
    for step in 1..=config.offline_steps {
        let batch = buffer.sample(config.batch_size, rng)?;
        let losses = agent.update(&batch, rng).map_err(|e| e.at_step(step))?;
        acc.add(losses.critic, losses.flow, losses.policy);
        if step % config.log_interval == 0 || step == config.offline_steps {
            let mut r = MetricsRecord::new(step as u64, Phase::Offline, agent.sampler.xi);
            acc.drain_into(&mut r);
            r.wall_clock = started.elapsed().as_secs_f64();
            log::info!(
                "offline step {step}: q {:.4} flow {:.4} pi {:.4}",
                losses.critic,
                losses.flow,
                losses.policy
            );
            records.push(r);
        }
    }
    Ok(records)
}

/// One temperature adaptation event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureUpdate {
    pub step: usize,
    pub xi_before: f64,
    pub entropy: f64,
    pub xi_after: f64,
}

/// Per-cell visit counts of the point maze.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Visitation {
    counts: BTreeMap<(usize, usize), u64>,
}

impl Visitation {
    pub fn record(&mut self, cell: (usize, usize)) {
        *self.counts.entry(cell).or_insert(0) += 1;
    }

    pub fn unique_cells(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, cell: (usize, usize)) -> u64 {
        self.counts.get(&cell).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// `cell_x,cell_y,count` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "cell_x,cell_y,count")?;
        for ((x, y), c) in &self.counts {
            writeln!(w, "{x},{y},{c}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OnlineReport {
    pub metrics: Vec<MetricsRecord>,
    pub visitation: Visitation,
    pub temperature: Vec<TemperatureUpdate>,
    /// Replay contents when fine-tuning started.
    pub initial_buffer_len: usize,
}

fn record_cell(env: &Env, visits: &mut Visitation) {
    if let Env::Maze(m) = env {
        visits.record(m.current_cell());
    }
}

/// Online phase: one environment step and one gradient step per iteration,
/// with the replay buffer seeded by the offline dataset.
pub fn finetune_online<R: Rng + ?Sized>(
    agent: &mut Agent,
    env: &mut Env,
    dataset: &Dataset,
    config: &RunConfig,
    rng: &mut R,
) -> Result<OnlineReport> {
    check_dataset(agent, dataset)?;
    ensure_dim("environment state dim", agent.state_dim(), env.state_dim())?;
    let mut buffer = ReplayBuffer::new(dataset.len() + config.online_steps)?;
    for t in &dataset.transitions {
        buffer.push(t.clone())?;
    }
    let initial_buffer_len = buffer.len();
    let base = config.offline_steps as u64;
    let started = Instant::now();
    let em = config.em_config();
    let entropy_states = config.entropy_states.unwrap_or(config.batch_size);

    let mut metrics = Vec::new();
    let mut visitation = Visitation::default();
    let mut temperature = Vec::new();
    let mut acc = LossAccumulator::default();
    let mut last_entropy = None;

    let eval_env = env.clone();
    let eval = |agent: &Agent, step: u64, rng: &mut R| -> Result<MetricsRecord> {
        let summary = evaluate(agent, eval_env.clone(), config.eval_episodes, rng.random())?;
        let mut r = MetricsRecord::new(step, Phase::Eval, agent.sampler.xi);
        r.mean_return = Some(summary.mean_return);
        r.success = Some(summary.success_rate);
        r.wall_clock = started.elapsed().as_secs_f64();
        log::info!(
            "eval at step {step}: return {:.3} success {:.2}",
            summary.mean_return,
            summary.success_rate
        );
        Ok(r)
    };
    metrics.push(eval(agent, base, rng)?);

    let mut state = env.reset(rng.random());
    record_cell(env, &mut visitation);
    for step in 1..=config.online_steps {
        let action = match config.exploration {
            Exploration::EntropyGuided => agent.explore(&state, rng),
            Exploration::Greedy => agent.act_eval(&state, rng),
        }
        .map_err(|e| e.at_step(step))?;
        let out = env.step(&action).map_err(|e| e.at_step(step))?;
        record_cell(env, &mut visitation);
        buffer.push(Transition {
            state: std::mem::take(&mut state),
            action,
            reward: out.reward,
            next_state: out.state.clone(),
            done: out.done,
        })?;
        state = if out.done || out.truncated {
            let s = env.reset(rng.random());
            record_cell(env, &mut visitation);
            s
        } else {
            out.state
        };

        let batch = buffer.sample(config.batch_size, rng)?;
        let losses = agent.update(&batch, rng).map_err(|e| e.at_step(step))?;
        acc.add(losses.critic, losses.flow, losses.policy);

        if config.exploration == Exploration::EntropyGuided
            && step % agent.entropy.update_period == 0
        {
            let n = entropy_states.min(batch.len());
            let h = estimate_policy_entropy(
                &agent.policy,
                batch.states.slice(s![..n, ..]),
                config.actions_per_state,
                config.gmm_components,
                &em,
                rng,
            )
            .map_err(|e| e.at_step(step))?;
            let before = agent.sampler.xi;
            agent.sampler.xi = update_temperature(before, h, &agent.entropy);
            temperature.push(TemperatureUpdate {
                step,
                xi_before: before,
                entropy: h,
                xi_after: agent.sampler.xi,
            });
            last_entropy = Some(h);
            log::debug!(
                "step {step}: entropy {h:.4}, xi {before:.4} -> {:.4}",
                agent.sampler.xi
            );
        }
        if step % config.log_interval == 0 || step == config.online_steps {
            let mut r = MetricsRecord::new(base + step as u64, Phase::Online, agent.sampler.xi);
            acc.drain_into(&mut r);
            r.entropy = last_entropy.take();
            r.wall_clock = started.elapsed().as_secs_f64();
            metrics.push(r);
        }
        if step % config.eval_interval == 0 {
            metrics.push(eval(agent, base + step as u64, rng)?);
        }
    }
    Ok(OnlineReport {
        metrics,
        visitation,
        temperature,
        initial_buffer_len,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub returns: Vec<f64>,
    pub successes: Vec<bool>,
    pub mean_return: f64,
    pub success_rate: f64,
}

/// Mean undiscounted return and success rate of the agent's greedy
/// candidate selection.
pub fn evaluate(agent: &Agent, env: Env, episodes: usize, seed: u64) -> Result<EvalSummary> {
    evaluate_with(env, episodes, seed, |s, rng| agent.act_eval(s, rng))
}

/// Evaluation with an arbitrary actor.
pub fn evaluate_with<F>(
    mut env: Env,
    episodes: usize,
    seed: u64,
    mut actor: F,
) -> Result<EvalSummary>
where
    F: FnMut(&[f64], &mut ChaCha8Rng) -> Result<Vec<f64>>,
{
    if episodes == 0 {
        return Err(Error::invalid("evaluation needs at least one episode"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(episodes);
    let mut successes = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = env.reset(rng.random());
        let (mut total, mut success) = (0.0, false);
        for _ in 0..env.horizon() {
            let action = actor(&state, &mut rng)?;
            let out = env.step(&action)?;
            total += out.reward;
            success |= out.success;
            if out.done || out.truncated {
                break;
            }
            state = out.state;
        }
        returns.push(total);
        successes.push(success);
    }
    let n = episodes as f64;
    Ok(EvalSummary {
        mean_return: returns.iter().sum::<f64>() / n,
        success_rate: successes.iter().filter(|&&s| s).count() as f64 / n,
        returns,
        successes,
    })
}

/// Result of a full offline-then-online run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub agent: Agent,
    pub offline_metrics: Vec<MetricsRecord>,
    pub online: OnlineReport,
}

/// Generator for one phase of a seeded run. The offline and online phases use
/// separate streams so either can be rerun on its own.
fn phase_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Builds the agent from `config.seed` and pre-trains it on `dataset`.
pub fn offline_run(config: &RunConfig, dataset: &Dataset) -> Result<(Agent, Vec<MetricsRecord>)> {
    let mut rng = phase_rng(config.seed, 0);
    let env = Env::from_kind(config.env);
    let mut agent = Agent::new(config, env.state_dim(), env.action_dim(), &mut rng)?;
    let metrics = pretrain_offline(&mut agent, dataset, config, &mut rng)?;
    Ok((agent, metrics))
}

/// Fine-tunes `agent` in a fresh environment of kind `config.env`.
pub fn online_run(
    agent: &mut Agent,
    config: &RunConfig,
    dataset: &Dataset,
) -> Result<OnlineReport> {
    let mut rng = phase_rng(config.seed, 1);
    let mut env = Env::from_kind(config.env);
    finetune_online(agent, &mut env, dataset, config, &mut rng)
}

/// [`offline_run`] followed by [`online_run`].
pub fn run(config: &RunConfig, dataset: &Dataset) -> Result<RunOutcome> {
    let (mut agent, offline_metrics) = offline_run(config, dataset)?;
    let online = online_run(&mut agent, config, dataset)?;
    Ok(RunOutcome {
        agent,
        offline_metrics,
        online,
    })
}
