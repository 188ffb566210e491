//! Transitions, offline datasets with their binary file format, and the
//! replay buffer.
//!
//! Dataset file layout: one ASCII header line
//!
//! ```text
//! FINO-DATASET v1 env=<name> seed=<u64> size=<n> state_dim=<ds> action_dim=<da>\n
//! ```
//!
//! followed by `size` records of `2·ds + da + 2` little-endian f64 values:
//! state, action, reward, next state, done (0 or 1).

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::envs::maze::CorridorScript;
use crate::envs::{
    circle_of, Cell, Corridor, Env, EnvKind, Environment, CIRCLE_CENTERS, CIRCLE_RADIUS,
    RIGHTWARD_DATA_STD,
};
use crate::error::{ensure_dim, Error, Result};

pub const DATASET_MAGIC: &str = "FINO-DATASET";
pub const DATASET_VERSION: &str = "v1";
const MAX_HEADER: usize = 512;
const MAX_DIM: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Row-stacked transitions; `dones` holds 0.0 or 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub dones: Array1<f64>,
}

impl TransitionBatch {
    pub fn from_transitions<'a, I>(transitions: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Transition>,
    {
        let items: Vec<&Transition> = transitions.into_iter().collect();
        let first = items.first().ok_or(Error::Empty("transition batch"))?;
        let (ds, da, n) = (first.state.len(), first.action.len(), items.len());
        let mut batch = Self {
            states: Array2::zeros((n, ds)),
            actions: Array2::zeros((n, da)),
            rewards: Array1::zeros(n),
            next_states: Array2::zeros((n, ds)),
            dones: Array1::zeros(n),
        };
        for (i, t) in items.iter().enumerate() {
            ensure_dim("batch state", ds, t.state.len())?;
            ensure_dim("batch action", da, t.action.len())?;
            ensure_dim("batch next state", ds, t.next_state.len())?;
            batch.states.row_mut(i).assign(&ndarray::aview1(&t.state));
            batch.actions.row_mut(i).assign(&ndarray::aview1(&t.action));
            batch
                .next_states
                .row_mut(i)
                .assign(&ndarray::aview1(&t.next_state));
            batch.rewards[i] = t.reward;
            batch.dones[i] = if t.done { 1.0 } else { 0.0 };
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// How the offline data is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Behavior {
    /// Uniform inside the four-circles disks.
    UniformInRegion,
    /// Isotropic Gaussian around the origin, clamped to the box.
    Gaussian,
    /// Waypoint follower along corridor A with occasional uniform actions.
    ScriptedCorridor,
}

impl Behavior {
    pub fn default_for(kind: EnvKind) -> Self {
        match kind {
            EnvKind::FourCircles => Behavior::UniformInRegion,
            EnvKind::Rightward => Behavior::Gaussian,
            EnvKind::PointMaze => Behavior::ScriptedCorridor,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Behavior::UniformInRegion => "uniform-in-region",
            Behavior::Gaussian => "gaussian",
            Behavior::ScriptedCorridor => "scripted-corridor",
        }
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Behavior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Behavior::UniformInRegion,
            Behavior::Gaussian,
            Behavior::ScriptedCorridor,
        ]
        .into_iter()
        .find(|b| b.name() == s)
        .ok_or_else(|| Error::invalid(format!("unknown behavior '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env: EnvKind,
    pub seed: u64,
    pub state_dim: usize,
    pub action_dim: usize,
    pub transitions: Vec<Transition>,
}

/// Fraction of maze actions replaced by uniform draws.
pub const MAZE_NOISE_FRACTION: f64 = 0.1;
const MAZE_SCRIPT_NOISE: f64 = 0.05;

pub fn generate_offline_dataset(
    env: &Env,
    behavior: Behavior,
    size: usize,
    seed: u64,
) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    let kind = env.kind();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transitions = match (kind, behavior, env) {
        (EnvKind::FourCircles, Behavior::UniformInRegion, Env::Bandit(b)) => {
            let mut b = b.clone();
            (0..size)
                .map(|_| bandit_transition(&mut b, uniform_in_disks(&mut rng)))
                .collect::<Result<Vec<_>>>()?
        }
        (EnvKind::Rightward, Behavior::Gaussian, Env::Bandit(b)) => {
            let mut b = b.clone();
            let normal = Normal::new(0.0, RIGHTWARD_DATA_STD).expect("positive std");
            (0..size)
                .map(|_| {
                    let a = [normal.sample(&mut rng), normal.sample(&mut rng)];
                    bandit_transition(&mut b, [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)])
                })
                .collect::<Result<Vec<_>>>()?
        }
        (EnvKind::PointMaze, Behavior::ScriptedCorridor, Env::Maze(m)) => {
            maze_rollouts(m, size, &mut rng)?
        }
        _ => {
            return Err(Error::invalid(format!(
                "behavior {behavior} is not supported for {kind}"
            )))
        }
    };
    Ok(Dataset {
        env: kind,
        seed,
        state_dim: env.state_dim(),
        action_dim: env.action_dim(),
        transitions,
    })
}

fn bandit_transition<E: Environment>(env: &mut E, action: [f64; 2]) -> Result<Transition> {
    let state = env.reset(0);
    let out = env.step(&action)?;
    Ok(Transition {
        state,
        action: action.to_vec(),
        reward: out.reward,
        next_state: out.state,
        done: true,
    })
}

fn uniform_in_disks<R: Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    let c = CIRCLE_CENTERS[rng.random_range(0..4)];
    let r = CIRCLE_RADIUS * rng.random::<f64>().sqrt();
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    [c[0] + r * theta.cos(), c[1] + r * theta.sin()]
}

fn maze_rollouts<R: Rng + ?Sized>(
    maze: &crate::envs::PointMaze,
    size: usize,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    let mut env = maze.clone();
    let noise = Normal::new(0.0, MAZE_SCRIPT_NOISE).expect("positive std");
    let enters_b = |env: &crate::envs::PointMaze, p: [f64; 2], a: &[f64; 2]| {
        let (c, r) = env.cell_of(env.transition(p, a)).expect("free cell");
        env.layout().cell(c, r) == Some(Cell::Corridor(Corridor::B))
    };
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let mut state = env.reset(rng.random());
        let mut script = CorridorScript::new(env.layout(), Corridor::A);
        for _ in 0..env.horizon() {
            let p = env.position();
            let scripted = script.action(p);
            let mut action = [
                (scripted[0] + noise.sample(rng)).clamp(-1.0, 1.0),
                (scripted[1] + noise.sample(rng)).clamp(-1.0, 1.0),
            ];
            if rng.random::<f64>() < MAZE_NOISE_FRACTION {
                let uniform = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
                if !enters_b(&env, p, &uniform) {
                    action = uniform;
                }
            }
            if enters_b(&env, p, &action) {
                action = scripted;
            }
            let step = env.step(&action)?;
            out.push(Transition {
                state: std::mem::replace(&mut state, step.state.clone()),
                action: action.to_vec(),
                reward: step.reward,
                next_state: step.state,
                done: step.done,
            });
            if out.len() == size || step.done || step.truncated {
                break;
            }
        }
    }
    Ok(out)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    fn record_len(&self) -> usize {
        2 * self.state_dim + self.action_dim + 2
    }

    pub fn header(&self) -> String {
        format!(
            "{DATASET_MAGIC} {DATASET_VERSION} env={} seed={} size={} state_dim={} action_dim={}\n",
            self.env,
            self.seed,
            self.len(),
            self.state_dim,
            self.action_dim
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let mut out = Vec::with_capacity(header.len() + 8 * self.record_len() * self.len());
        out.extend_from_slice(header.as_bytes());
        for t in &self.transitions {
            let values = t
                .state
                .iter()
                .chain(&t.action)
                .chain(std::iter::once(&t.reward))
                .chain(&t.next_state)
                .chain(std::iter::once(if t.done { &1.0 } else { &0.0 }));
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .take(MAX_HEADER)
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Decode("missing dataset header line".into()))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| Error::Decode("dataset header is not UTF-8".into()))?;
        let mut fields = header.split(' ');
        if fields.next() != Some(DATASET_MAGIC) {
            return Err(Error::Decode("bad dataset magic".into()));
        }
        if fields.next() != Some(DATASET_VERSION) {
            return Err(Error::Decode("unsupported dataset version".into()));
        }
        let mut value = |key: &str| -> Result<&str> {
            let field = fields
                .next()
                .ok_or_else(|| Error::Decode(format!("missing header field {key}")))?;
            field
                .strip_prefix(key)
                .and_then(|v| v.strip_prefix('='))
                .ok_or_else(|| {
                    Error::Decode(format!("expected header field {key}, found '{field}'"))
                })
        };
        let env: EnvKind = value("env")?
            .parse()
            .map_err(|e: Error| Error::Decode(e.to_string()))?;
        let number = |s: &str, key: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::Decode(format!("header field {key} is not an integer")))
        };
        let seed = number(value("seed")?, "seed")?;
        let size = number(value("size")?, "size")? as usize;
        let state_dim = number(value("state_dim")?, "state_dim")? as usize;
        let action_dim = number(value("action_dim")?, "action_dim")? as usize;
        if fields.next().is_some() {
            return Err(Error::Decode("trailing header fields".into()));
        }
        if state_dim == 0 || action_dim == 0 || state_dim > MAX_DIM || action_dim > MAX_DIM {
            return Err(Error::Decode("invalid dataset dimensions".into()));
        }
        let record = 2 * state_dim + action_dim + 2;
        let body = &bytes[newline + 1..];
        let expected = size
            .checked_mul(record)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Decode("dataset size overflow".into()))?;
        if body.len() != expected {
            return Err(Error::Decode(format!(
                "expected {expected} record bytes, found {}",
                body.len()
            )));
        }
        let mut transitions = Vec::with_capacity(size);
        for (i, chunk) in body.chunks_exact(8 * record).enumerate() {
            let v: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let (state, rest) = v.split_at(state_dim);
            let (action, rest) = rest.split_at(action_dim);
            let (reward, rest) = (rest[0], &rest[1..]);
            let (next_state, done) = rest.split_at(state_dim);
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::Decode(format!("non-finite value in record {i}")));
            }
            if action.iter().any(|a| a.abs() > 1.0) {
                return Err(Error::Decode(format!(
                    "action outside the box in record {i}"
                )));
            }
            let done = match done[0] {
                0.0 => false,
                1.0 => true,
                _ => {
                    return Err(Error::Decode(format!(
                        "done flag is not 0 or 1 in record {i}"
                    )))
                }
            };
            transitions.push(Transition {
                state: state.to_vec(),
                action: action.to_vec(),
                reward,
                next_state: next_state.to_vec(),
                done,
            });
        }
        Ok(Self {
            env,
            seed,
            state_dim,
            action_dim,
            transitions,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut cols = Vec::new();
        cols.extend((0..self.state_dim).map(|i| format!("s{i}")));
        cols.extend((0..self.action_dim).map(|i| format!("a{i}")));
        cols.push("r".into());
        cols.extend((0..self.state_dim).map(|i| format!("next_s{i}")));
        cols.push("done".into());
        writeln!(w, "{}", cols.join(","))?;
        for t in &self.transitions {
            let mut row: Vec<String> = t
                .state
                .iter()
                .chain(&t.action)
                .map(f64::to_string)
                .collect();
            row.push(t.reward.to_string());
            row.extend(t.next_state.iter().map(f64::to_string));
            row.push(u8::from(t.done).to_string());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn actions(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.len(), self.action_dim));
        for (i, t) in self.transitions.iter().enumerate() {
            a.row_mut(i).assign(&ndarray::aview1(&t.action));
        }
        a
    }

    pub fn states(&self) -> Array2<f64> {
        let mut s = Array2::zeros((self.len(), self.state_dim));
        for (i, t) in self.transitions.iter().enumerate() {
            s.row_mut(i).assign(&ndarray::aview1(&t.state));
        }
        s
    }
}

/// Fixed-capacity FIFO store with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("replay capacity must be at least 1"));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 20)),
            next: 0,
            inserted: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn insertions(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if let Some(first) = self.items.first() {
            ensure_dim("replay state", first.state.len(), t.state.len())?;
            ensure_dim("replay action", first.action.len(), t.action.len())?;
        }
        if !t.reward.is_finite() {
            return Err(Error::NonFinite("reward"));
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        self.inserted += 1;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<TransitionBatch> {
        if self.items.is_empty() {
            return Err(Error::Empty("replay buffer"));
        }
        let n = self.items.len();
        TransitionBatch::from_transitions(
            (0..batch_size.max(1)).map(|_| &self.items[rng.random_range(0..n)]),
        )
    }
}

pub fn in_disks(a: &[f64]) -> bool {
    circle_of(a).is_some()
}
