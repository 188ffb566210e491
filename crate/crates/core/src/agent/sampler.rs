use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{ActionSampler, Critic};
use crate::error::{ensure_dim, Error, Result};

/// Exploration temperature and candidate count.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub xi: f64,
    pub n_sample: usize,
}

impl SamplerState {
    pub fn new(xi: f64, n_sample: usize) -> Result<Self> {
        let state = Self { xi, n_sample };
        state.validate()?;
        Ok(state)
    }

    pub fn for_action_dim(action_dim: usize) -> Self {
        Self {
            xi: 1.0,
            n_sample: default_n_sample(action_dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sample == 0 {
            return Err(Error::invalid("n_sample must be at least 1"));
        }
        if !self.xi.is_finite() {
            return Err(Error::NonFinite("temperature"));
        }
        Ok(())
    }
}

/// Schedule for adapting the temperature toward a target policy entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyController {
    pub target_entropy: f64,
    pub learning_rate: f64,
    pub update_period: usize,
}

impl EntropyController {
    pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
    pub const DEFAULT_UPDATE_PERIOD: usize = 2000;

    /// Target entropy `−dim(A)`.
    pub fn for_action_dim(action_dim: usize) -> Self {
        Self {
            target_entropy: -(action_dim as f64),
            learning_rate: Self::DEFAULT_LEARNING_RATE,
            update_period: Self::DEFAULT_UPDATE_PERIOD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.update_period == 0 {
            return Err(Error::invalid("entropy update period must be at least 1"));
        }
        if !self.target_entropy.is_finite() || !self.learning_rate.is_finite() {
            return Err(Error::NonFinite("entropy controller"));
        }
        Ok(())
    }
}

/// `max(4, ⌈d/2⌉)`.
pub fn default_n_sample(action_dim: usize) -> usize {
    action_dim.div_ceil(2).max(4)
}

/// Softmax of `ξ·q`, stabilized by subtracting the maximum.
pub fn sampling_probs(q_values: &[f64], xi: f64) -> Result<Vec<f64>> {
    if q_values.is_empty() {
        return Err(Error::Empty("q values"));
    }
    if !xi.is_finite() || q_values.iter().any(|q| !q.is_finite()) {
        return Err(Error::NonFinite("sampling logits"));
    }
    let logits: Vec<f64> = q_values.iter().map(|q| xi * q).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Categorical draw by inverse CDF.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// `n` actions for one state from independent base-noise draws.
pub fn candidate_actions<P: ActionSampler + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    state: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::invalid("candidate count must be at least 1"));
    }
    ensure_dim("candidate state", policy.state_dim(), state.len())?;
    let states = ArrayView2::from_shape((1, state.len()), state)
        .map_err(|e| Error::invalid(e.to_string()))?
        .broadcast((n, state.len()))
        .ok_or_else(|| Error::invalid("broadcast failed"))?
        .to_owned();
    let z = Array2::from_shape_simple_fn((n, policy.action_dim()), || rng.sample(StandardNormal));
    policy.act_batch(states.view(), z.view())
}

fn score<P: ActionSampler + ?Sized>(
    critic: &Critic,
    state: &[f64],
    candidates: &Array2<f64>,
    policy: &P,
) -> Result<Vec<f64>> {
    let states = Array2::from_shape_fn((candidates.nrows(), policy.state_dim()), |(_, j)| state[j]);
    Ok(critic.q_values(states.view(), candidates.view())?.to_vec())
}

/// Draws candidates, scores them with the critic and samples one in
/// proportion to `exp(ξ·Q)`.
pub fn select_action_explore<P: ActionSampler + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    critic: &Critic,
    state: &[f64],
    sampler: &SamplerState,
    rng: &mut R,
) -> Result<Vec<f64>> {
    sampler.validate()?;
    let candidates = candidate_actions(policy, state, sampler.n_sample, rng)?;
    let q = score(critic, state, &candidates, policy)?;
    let probs = sampling_probs(&q, sampler.xi)?;
    let i = sample_index(&probs, rng);
    Ok(candidates.row(i).to_vec())
}

/// Highest-valued candidate.
pub fn select_action_eval<P: ActionSampler + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    critic: &Critic,
    state: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let candidates = candidate_actions(policy, state, n, rng)?;
    let q = score(critic, state, &candidates, policy)?;
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("candidate values"));
    }
    let i = argmax_first(&q).expect("n >= 1");
    Ok(candidates.row(i).to_vec())
}

/// `ξ − α_ξ(H − H̄)`.
pub fn update_temperature(xi: f64, entropy: f64, controller: &EntropyController) -> f64 {
    xi - controller.learning_rate * (entropy - controller.target_entropy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::OneStepPolicy;
    use crate::nn::{Dense, DenseNet};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_candidate_count() {
        assert_eq!(default_n_sample(1), 4);
        assert_eq!(default_n_sample(2), 4);
        assert_eq!(default_n_sample(8), 4);
        assert_eq!(default_n_sample(9), 5);
        assert_eq!(default_n_sample(21), 11);
    }

    #[test]
    fn softmax_examples() {
        let p = sampling_probs(&[1.0, 2.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p[0] - 0.26894).abs() < 1e-5 && (p[1] - 0.73106).abs() < 1e-5);
        assert_eq!(
            sampling_probs(&[3.0, -1.0, 7.0], 0.0).unwrap(),
            vec![1.0 / 3.0; 3]
        );
        assert_eq!(sampling_probs(&[2.5; 4], 17.0).unwrap(), vec![0.25; 4]);
        assert!(sampling_probs(&[], 1.0).is_err());
        assert!(sampling_probs(&[f64::NAN], 1.0).is_err());
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = sampling_probs(&[1e6, 1e6 - 1.0], 1e3).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert_eq!(p[0], 1.0);
    }

    #[test]
    fn temperature_limits() {
        let q = [0.1, 0.5, -0.3, 0.45];
        let hot = sampling_probs(&q, 1e3).unwrap();
        assert!(hot[1] > 1.0 - 1e-12);
        let cold = sampling_probs(&q, 1e-6).unwrap();
        assert!(cold.iter().all(|p| (p - 0.25).abs() < 1e-6));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_first(&[0.0, 1.0]), Some(1));
        assert_eq!(argmax_first(&[2.0, 1.0, 2.0]), Some(0));
        assert_eq!(argmax_first(&[]), None);
    }

    #[test]
    fn sample_index_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 4;
        let trials = 10_000;
        let probs = sampling_probs(&[0.3, -2.0, 5.0, 1.0], 0.0).unwrap();
        let mut counts = vec![0usize; n];
        for _ in 0..trials {
            counts[sample_index(&probs, &mut rng)] += 1;
        }
        let p = 1.0 / n as f64;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - trials as f64 * p).abs() < 3.0 * sigma, "{c}");
        }
        let probs = sampling_probs(&[0.3, -2.0, 5.0, 1.0], 1e3).unwrap();
        let hits = (0..trials)
            .filter(|_| sample_index(&probs, &mut rng) == 2)
            .count();
        assert!(hits as f64 / trials as f64 > 0.999);
    }

    #[test]
    fn temperature_update() {
        let c = EntropyController {
            target_entropy: -2.0,
            learning_rate: 0.01,
            update_period: 1,
        };
        assert_eq!(update_temperature(0.7, -2.0, &c), 0.7);
        assert!((update_temperature(1.0, 0.0, &c) - 0.98).abs() < 1e-15);
        assert!(update_temperature(1.0, 1.0, &c) < 1.0);
        assert!(update_temperature(1.0, -5.0, &c) > 1.0);
        assert!(EntropyController {
            update_period: 0,
            ..c
        }
        .validate()
        .is_err());
    }

    /// Policy `a = tanh(z)` ignoring the state; critic `Q = a`.
    fn identity_pair() -> (OneStepPolicy, Critic) {
        let policy = OneStepPolicy::from_net(
            DenseNet::from_layers(vec![Dense {
                weights: array![[0.0], [1.0]],
                bias: array![0.0],
            }])
            .unwrap(),
            1,
            1,
        )
        .unwrap();
        let critic = Critic::from_nets(
            vec![DenseNet::from_layers(vec![Dense {
                weights: array![[0.0], [1.0]],
                bias: array![0.0],
            }])
            .unwrap()],
            1,
            1,
            1e-3,
        )
        .unwrap();
        (policy, critic)
    }

    #[test]
    fn singleton_candidate_ignores_temperature() {
        let (policy, critic) = identity_pair();
        for xi in [0.0, 1.0, 1e6] {
            let sampler = SamplerState::new(xi, 1).unwrap();
            let mut a = ChaCha8Rng::seed_from_u64(5);
            let mut b = ChaCha8Rng::seed_from_u64(5);
            let chosen = select_action_explore(&policy, &critic, &[0.0], &sampler, &mut a).unwrap();
            let lone = candidate_actions(&policy, &[0.0], 1, &mut b).unwrap();
            assert_eq!(chosen, lone.row(0).to_vec());
        }
    }

    #[test]
    fn candidates_are_reproducible_and_boxed() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let policy = OneStepPolicy::new(2, 3, &[8], &mut rng).unwrap();
        let a =
            candidate_actions(&policy, &[0.1, 0.2], 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b =
            candidate_actions(&policy, &[0.1, 0.2], 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)));
        assert!(candidate_actions(&policy, &[0.1, 0.2], 0, &mut rng).is_err());
    }

    #[test]
    fn state_only_policy_gives_identical_candidates() {
        let policy = OneStepPolicy::from_net(
            DenseNet::from_layers(vec![Dense {
                weights: array![[0.5], [0.0]],
                bias: array![0.1],
            }])
            .unwrap(),
            1,
            1,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = candidate_actions(&policy, &[0.4], 8, &mut rng).unwrap();
        assert!(c.iter().all(|&x| x == c[[0, 0]]));
    }

    #[test]
    fn eval_selects_highest_value_candidate() {
        let (policy, critic) = identity_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut replay = ChaCha8Rng::seed_from_u64(8);
        let chosen = select_action_eval(&policy, &critic, &[0.0], 6, &mut rng).unwrap();
        let c = candidate_actions(&policy, &[0.0], 6, &mut replay).unwrap();
        let best = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(chosen, vec![best]);
    }

    #[test]
    fn explore_concentrates_on_argmax_when_hot() {
        let (policy, critic) = identity_pair();
        let sampler = SamplerState::new(1e3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut hits = 0;
        let trials = 2000;
        for _ in 0..trials {
            let mut probe = rng.clone();
            let c = candidate_actions(&policy, &[0.0], 4, &mut probe).unwrap();
            let best = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let gap = {
                let mut v = c.iter().copied().collect::<Vec<_>>();
                v.sort_by(|a, b| b.total_cmp(a));
                v[0] - v[1]
            };
            let a = select_action_explore(&policy, &critic, &[0.0], &sampler, &mut rng).unwrap();
            if a[0] == best || gap < 1e-2 {
                hits += 1;
            }
        }
        assert!(hits as f64 / trials as f64 > 0.999);
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one_and_are_shift_invariant(
            q in proptest::collection::vec(-50.0f64..50.0, 1..12),
            xi in -20.0f64..20.0,
            c in -1e3f64..1e3,
        ) {
            let p = sampling_probs(&q, xi).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = q.iter().map(|v| v + c).collect();
            let ps = sampling_probs(&shifted, xi).unwrap();
            for (a, b) in p.iter().zip(&ps) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn argmax_is_shift_invariant(q in proptest::collection::vec(-5.0f64..5.0, 1..10), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = q.iter().map(|v| v + c).collect();
            let i = argmax_first(&q).unwrap();
            let j = argmax_first(&shifted).unwrap();
            prop_assert!(i == j || (q[i] - q[j]).abs() < 1e-9);
        }
    }
}
