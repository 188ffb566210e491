//! Desk-scale environments: two single-step bandits over a 2-D action box
//! and a sparse-reward point maze.

pub(crate) mod maze;

use std::fmt;
use std::str::FromStr;

pub use maze::{
    Cell, Corridor, MazeLayout, PointMaze, DEFAULT_MAZE_LAYOUT, MAZE_HORIZON, MAZE_MAX_STEP,
};

use crate::error::{ensure_dim, Error, Result};

/// Centers of the four disks of the four-circles bandit.
pub const CIRCLE_CENTERS: [[f64; 2]; 4] = [[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]];
pub const CIRCLE_RADIUS: f64 = 0.15;
/// Per-axis standard deviation of the rightward bandit's behavior data.
pub const RIGHTWARD_DATA_STD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// Episode cut off by the horizon rather than terminated.
    pub truncated: bool,
    pub success: bool,
}

pub trait Environment {
    fn kind(&self) -> EnvKind;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    /// Actions outside `[-1, 1]^d` are clamped.
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvKind {
    FourCircles,
    Rightward,
    PointMaze,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::FourCircles, EnvKind::Rightward, EnvKind::PointMaze];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::FourCircles => "four-circles",
            EnvKind::Rightward => "rightward",
            EnvKind::PointMaze => "point-maze",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown environment '{s}'")))
    }
}

pub fn clamp_action(action: &[f64]) -> Vec<f64> {
    action.iter().map(|a| a.clamp(-1.0, 1.0)).collect()
}

/// Bandit with a constant one-dimensional state and a 2-D action.
#[derive(Debug, Clone, PartialEq)]
pub struct Bandit {
    kind: EnvKind,
}

impl Bandit {
    pub fn four_circles() -> Self {
        Self {
            kind: EnvKind::FourCircles,
        }
    }

    pub fn rightward() -> Self {
        Self {
            kind: EnvKind::Rightward,
        }
    }

    pub fn reward(&self, action: &[f64]) -> f64 {
        match self.kind {
            EnvKind::Rightward => action[0].clamp(-1.0, 1.0),
            _ => 0.0,
        }
    }
}

impl Environment for Bandit {
    fn kind(&self) -> EnvKind {
        self.kind
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        1
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        vec![0.0]
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        ensure_dim("bandit action", 2, action.len())?;
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("action"));
        }
        Ok(StepOutcome {
            state: vec![0.0],
            reward: self.reward(action),
            done: true,
            truncated: false,
            success: false,
        })
    }
}

/// Index of the four-circles disk containing `a`, if any.
pub fn circle_of(a: &[f64]) -> Option<usize> {
    CIRCLE_CENTERS.iter().position(|c| {
        let dx = a[0] - c[0];
        let dy = a[1] - c[1];
        dx * dx + dy * dy <= CIRCLE_RADIUS * CIRCLE_RADIUS
    })
}

/// Closed set of environments the pipeline can run.
#[derive(Debug, Clone, PartialEq)]
pub enum Env {
    Bandit(Bandit),
    Maze(PointMaze),
}

impl Env {
    pub fn from_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::FourCircles => Env::Bandit(Bandit::four_circles()),
            EnvKind::Rightward => Env::Bandit(Bandit::rightward()),
            EnvKind::PointMaze => Env::Maze(PointMaze::default()),
        }
    }

    pub fn as_maze(&self) -> Option<&PointMaze> {
        match self {
            Env::Maze(m) => Some(m),
            Env::Bandit(_) => None,
        }
    }
}

impl Environment for Env {
    fn kind(&self) -> EnvKind {
        match self {
            Env::Bandit(b) => b.kind(),
            Env::Maze(m) => m.kind(),
        }
    }

    fn state_dim(&self) -> usize {
        match self {
            Env::Bandit(b) => b.state_dim(),
            Env::Maze(m) => m.state_dim(),
        }
    }

    fn action_dim(&self) -> usize {
        match self {
            Env::Bandit(b) => b.action_dim(),
            Env::Maze(m) => m.action_dim(),
        }
    }

    fn horizon(&self) -> usize {
        match self {
            Env::Bandit(b) => b.horizon(),
            Env::Maze(m) => m.horizon(),
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        match self {
            Env::Bandit(b) => b.reset(seed),
            Env::Maze(m) => m.reset(seed),
        }
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        match self {
            Env::Bandit(b) => b.step(action),
            Env::Maze(m) => m.step(action),
        }
    }
}
