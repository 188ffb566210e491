use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{clamp_action, EnvKind, Environment, StepOutcome};
use crate::error::{ensure_dim, Error, Result};

pub const MAZE_HORIZON: usize = 200;
/// Displacement per unit action.
pub const MAZE_MAX_STEP: f64 = 0.2;
const MAX_SIDE: usize = 64;
const RESET_JITTER: f64 = 0.1;

/// Two disjoint start-to-goal corridors around a central wall block.
pub const DEFAULT_MAZE_LAYOUT: &str = "\
#######
#AAAAA#
#A###A#
#S###G#
#B###B#
#BBBBB#
#######
";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Wall,
    Open,
    Start,
    Goal,
    Corridor(Corridor),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Corridor {
    A,
    B,
}

impl Cell {
    fn from_char(c: char) -> Option<Self> {
        Some(match c {
            '#' => Cell::Wall,
            '.' => Cell::Open,
            'S' => Cell::Start,
            'G' => Cell::Goal,
            'A' => Cell::Corridor(Corridor::A),
            'B' => Cell::Corridor(Corridor::B),
            _ => return None,
        })
    }

    fn to_char(self) -> char {
        match self {
            Cell::Wall => '#',
            Cell::Open => '.',
            Cell::Start => 'S',
            Cell::Goal => 'G',
            Cell::Corridor(Corridor::A) => 'A',
            Cell::Corridor(Corridor::B) => 'B',
        }
    }
}

/// Wall grid parsed from text, one row per line. Cells are addressed as
/// `(column, row)` with row 0 at the top.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MazeLayout {
    width: usize,
    height: usize,
    cells: Vec<Cell>,
    start: (usize, usize),
    goal: (usize, usize),
}

impl MazeLayout {
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .collect();
        let height = rows.len();
        if height == 0 {
            return Err(Error::InvalidLayout("empty layout".into()));
        }
        let width = rows[0].chars().count();
        if width > MAX_SIDE || height > MAX_SIDE {
            return Err(Error::InvalidLayout(format!(
                "layout exceeds {MAX_SIDE}x{MAX_SIDE}"
            )));
        }
        let mut cells = Vec::with_capacity(width * height);
        let (mut start, mut goal) = (None, None);
        for (r, line) in rows.iter().enumerate() {
            if line.chars().count() != width {
                return Err(Error::InvalidLayout(format!(
                    "row {r} is not {width} cells wide"
                )));
            }
            for (c, ch) in line.chars().enumerate() {
                let cell = Cell::from_char(ch).ok_or_else(|| {
                    Error::InvalidLayout(format!("unknown cell '{ch}' at ({c}, {r})"))
                })?;
                let slot = match cell {
                    Cell::Start => Some(&mut start),
                    Cell::Goal => Some(&mut goal),
                    _ => None,
                };
                if let Some(slot) = slot {
                    if slot.replace((c, r)).is_some() {
                        return Err(Error::InvalidLayout(format!("duplicate '{ch}' cell")));
                    }
                }
                cells.push(cell);
            }
        }
        let start = start.ok_or_else(|| Error::InvalidLayout("missing start cell".into()))?;
        let goal = goal.ok_or_else(|| Error::InvalidLayout("missing goal cell".into()))?;
        let layout = Self {
            width,
            height,
            cells,
            start,
            goal,
        };
        layout.validate()?;
        Ok(layout)
    }

    fn validate(&self) -> Result<()> {
        let (s, g) = (self.start, self.goal);
        if s.0.abs_diff(g.0) + s.1.abs_diff(g.1) == 1 {
            return Err(Error::InvalidLayout("start and goal are adjacent".into()));
        }
        for corridor in [Corridor::A, Corridor::B] {
            if self.route(corridor).is_none() {
                return Err(Error::InvalidLayout(format!(
                    "corridor {corridor:?} does not connect start to goal"
                )));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn start(&self) -> (usize, usize) {
        self.start
    }

    pub fn goal(&self) -> (usize, usize) {
        self.goal
    }

    pub fn cell(&self, col: usize, row: usize) -> Option<Cell> {
        (col < self.width && row < self.height).then(|| self.cells[row * self.width + col])
    }

    pub fn is_free(&self, col: usize, row: usize) -> bool {
        matches!(self.cell(col, row), Some(c) if c != Cell::Wall)
    }

    pub fn free_cells(&self) -> usize {
        self.cells.iter().filter(|c| **c != Cell::Wall).count()
    }

    /// Shortest 4-connected path from start to goal through start, goal and
    /// the corridor's own cells.
    pub fn route(&self, corridor: Corridor) -> Option<Vec<(usize, usize)>> {
        let allowed = |c: usize, r: usize| {
            matches!(
                self.cell(c, r),
                Some(Cell::Start | Cell::Goal) | Some(Cell::Corridor(_))
            ) && self.cell(c, r) != Some(Cell::Corridor(other(corridor)))
        };
        let idx = |(c, r): (usize, usize)| r * self.width + c;
        let mut prev = vec![usize::MAX; self.cells.len()];
        let mut queue = VecDeque::from([self.start]);
        prev[idx(self.start)] = idx(self.start);
        while let Some((c, r)) = queue.pop_front() {
            if (c, r) == self.goal {
                let mut path = vec![self.goal];
                let mut at = idx(self.goal);
                while at != idx(self.start) {
                    at = prev[at];
                    path.push((at % self.width, at / self.width));
                }
                path.reverse();
                return Some(path);
            }
            let neighbors = [
                (c.wrapping_sub(1), r),
                (c + 1, r),
                (c, r.wrapping_sub(1)),
                (c, r + 1),
            ];
            for (nc, nr) in neighbors {
                if allowed(nc, nr) && prev[idx((nc, nr))] == usize::MAX {
                    prev[idx((nc, nr))] = idx((c, r));
                    queue.push_back((nc, nr));
                }
            }
        }
        None
    }
}

fn other(c: Corridor) -> Corridor {
    match c {
        Corridor::A => Corridor::B,
        Corridor::B => Corridor::A,
    }
}

impl FromStr for MazeLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl fmt::Display for MazeLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.cells.chunks(self.width) {
            let line: String = row.iter().map(|c| c.to_char()).collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

impl Default for MazeLayout {
    fn default() -> Self {
        Self::parse(DEFAULT_MAZE_LAYOUT).expect("default layout is valid")
    }
}

/// Continuous point agent on a wall grid. Each cell is a unit square; the
/// observed state is the position rescaled to `[-1, 1]^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMaze {
    layout: MazeLayout,
    position: [f64; 2],
    steps: usize,
}

impl Default for PointMaze {
    fn default() -> Self {
        Self::new(MazeLayout::default())
    }
}

impl PointMaze {
    pub fn new(layout: MazeLayout) -> Self {
        let (c, r) = layout.start;
        Self {
            layout,
            position: [c as f64 + 0.5, r as f64 + 0.5],
            steps: 0,
        }
    }

    pub fn layout(&self) -> &MazeLayout {
        &self.layout
    }

    pub fn position(&self) -> [f64; 2] {
        self.position
    }

    pub fn set_position(&mut self, position: [f64; 2]) -> Result<()> {
        if self.cell_of(position).is_none() {
            return Err(Error::invalid("position is not in a free cell"));
        }
        self.position = position;
        Ok(())
    }

    /// Free cell containing a position.
    pub fn cell_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        if !(p[0] >= 0.0 && p[1] >= 0.0) {
            return None;
        }
        let (c, r) = (p[0].floor() as usize, p[1].floor() as usize);
        self.layout.is_free(c, r).then_some((c, r))
    }

    pub fn current_cell(&self) -> (usize, usize) {
        self.cell_of(self.position)
            .expect("agent stays in free cells")
    }

    pub fn state_of(&self, p: [f64; 2]) -> Vec<f64> {
        vec![
            2.0 * p[0] / self.layout.width as f64 - 1.0,
            2.0 * p[1] / self.layout.height as f64 - 1.0,
        ]
    }

    pub fn position_of(&self, state: &[f64]) -> [f64; 2] {
        [
            (state[0] + 1.0) * self.layout.width as f64 / 2.0,
            (state[1] + 1.0) * self.layout.height as f64 / 2.0,
        ]
    }

    pub fn state(&self) -> Vec<f64> {
        self.state_of(self.position)
    }

    /// Position reached from `p` under a (clamped) action, moving one axis
    /// at a time and cancelling any axis move that would enter a wall.
    pub fn transition(&self, p: [f64; 2], action: &[f64]) -> [f64; 2] {
        let a = clamp_action(action);
        let mut next = p;
        for axis in 0..2 {
            let mut probe = next;
            probe[axis] += MAZE_MAX_STEP * a[axis];
            if self.cell_of(probe).is_some() {
                next = probe;
            }
        }
        next
    }
}

impl Environment for PointMaze {
    fn kind(&self) -> EnvKind {
        EnvKind::PointMaze
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        MAZE_HORIZON
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, r) = self.layout.start;
        self.position = [
            c as f64 + 0.5 + rng.random_range(-RESET_JITTER..=RESET_JITTER),
            r as f64 + 0.5 + rng.random_range(-RESET_JITTER..=RESET_JITTER),
        ];
        self.steps = 0;
        self.state()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        ensure_dim("maze action", 2, action.len())?;
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("action"));
        }
        self.position = self.transition(self.position, action);
        self.steps += 1;
        let success = self.current_cell() == self.layout.goal;
        Ok(StepOutcome {
            state: self.state(),
            reward: if success { 1.0 } else { 0.0 },
            done: success,
            truncated: !success && self.steps >= MAZE_HORIZON,
            success,
        })
    }
}

/// Waypoint follower along one corridor's cell centers.
#[derive(Debug, Clone)]
pub(crate) struct CorridorScript {
    waypoints: Vec<[f64; 2]>,
    next: usize,
}

impl CorridorScript {
    pub(crate) fn new(layout: &MazeLayout, corridor: Corridor) -> Self {
        let waypoints = layout
            .route(corridor)
            .expect("validated layout")
            .into_iter()
            .map(|(c, r)| [c as f64 + 0.5, r as f64 + 0.5])
            .collect();
        Self { waypoints, next: 1 }
    }

    pub(crate) fn action(&mut self, p: [f64; 2]) -> [f64; 2] {
        while self.next + 1 < self.waypoints.len() {
            let w = self.waypoints[self.next];
            if (w[0] - p[0]).hypot(w[1] - p[1]) < 0.1 {
                self.next += 1;
            } else {
                break;
            }
        }
        let w = self.waypoints[self.next];
        [
            ((w[0] - p[0]) / MAZE_MAX_STEP).clamp(-1.0, 1.0),
            ((w[1] - p[1]) / MAZE_MAX_STEP).clamp(-1.0, 1.0),
        ]
    }
}
