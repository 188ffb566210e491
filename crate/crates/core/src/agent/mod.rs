//! The reinforcement-learning agent around the flow model: critic, one-step
//! policy, entropy-guided candidate sampling and temperature adaptation.

mod critic;
mod policy;
mod sampler;

pub use critic::{td_targets, td_update, Critic, TdReport};
pub use policy::{distill_loss, ActionSampler, OneStepPolicy};
pub use sampler::{
    argmax_first, candidate_actions, default_n_sample, sample_index, sampling_probs,
    select_action_eval, select_action_explore, update_temperature, EntropyController, SamplerState,
};

use crate::error::{Error, Result};

/// Scalar hyperparameters shared by the agent updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    /// Weight of the distillation term in the policy objective.
    pub bc_alpha: f64,
    pub discount: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub flow_steps: usize,
    pub learning_rate: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            bc_alpha: 1.0,
            discount: 0.99,
            tau: 0.005,
            batch_size: 256,
            flow_steps: crate::flow::DEFAULT_FLOW_STEPS,
            learning_rate: 3e-4,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bc_alpha >= 0.0) {
            return Err(Error::invalid("bc_alpha must be non-negative"));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) && self.discount != 0.0 {
            return Err(Error::invalid("discount must lie in (0, 1)"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::invalid("tau must lie in (0, 1]"));
        }
        if self.batch_size == 0 || self.flow_steps == 0 {
            return Err(Error::invalid("batch_size and flow_steps must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }
}
