//! Multi-agent grid worlds: FourRooms, Switch and DualSwitch.
//!
//! Agents occupy walkable cells and face one of four directions. Actions
//! are Left, Right, Forward, Toggle, Pickup and Drop (the last two do
//! nothing: layouts carry no objects). A joint step applies toggles, then
//! rotations and simultaneous moves, then goal collection.
//!
//! The learner's view of the world is the joint state index: a shared
//! component (switch bits and remaining-goal bits, visible to every agent)
//! times one local state per agent (walkable cell × orientation). The
//! field-of-view symbol from [`observe`] is a separate rendering of what
//! the agent sees.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::RngCore;
use thiserror::Error;

use crate::belief::LocalDynamics;
use crate::learner::{Environment, Outcome, Tracking};
use crate::model::{DecPomdpModel, ModelError, ModelParts, ObservationKernel, RewardModel, SparseMatrix};
use crate::sample::{self, SimRng};
use crate::space::{ProductSpace, StateSpace};

pub const NUM_ACTIONS: usize = 6;
pub const ACTION_NAMES: [&str; NUM_ACTIONS] = ["left", "right", "forward", "toggle", "pickup", "drop"];
pub const MAX_SIDE: usize = 19;
pub const MAX_AGENTS: usize = 4;
pub const DEFAULT_EXPORT_LIMIT: usize = 2_000_000;

/// View depth and width of the field of view.
pub const VIEW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Left = 0,
    Right = 1,
    Forward = 2,
    Toggle = 3,
    Pickup = 4,
    Drop = 5,
}

impl Action {
    pub fn from_index(i: usize) -> Option<Self> {
        [Self::Left, Self::Right, Self::Forward, Self::Toggle, Self::Pickup, Self::Drop].get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dir {
    North = 0,
    East = 1,
    South = 2,
    West = 3,
}

impl Dir {
    pub fn from_index(i: usize) -> Self {
        [Self::North, Self::East, Self::South, Self::West][i % 4]
    }

    pub fn left(self) -> Self {
        Self::from_index(self as usize + 3)
    }

    pub fn right(self) -> Self {
        Self::from_index(self as usize + 1)
    }

    pub fn delta(self) -> (isize, isize) {
        match self {
            Self::North => (0, -1),
            Self::East => (1, 0),
            Self::South => (0, 1),
            Self::West => (-1, 0),
        }
    }

    pub fn glyph(self) -> char {
        ['^', '>', 'v', '<'][self as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Switch {
    pub x: usize,
    pub y: usize,
    /// Rooms lit while the switch is on.
    pub lights: Vec<usize>,
}

/// Inclusive rectangle of cells; dark unless `lit_by` is on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Room {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub lit_by: Option<usize>,
}

impl Room {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Goal {
    pub x: usize,
    pub y: usize,
    /// Visible (and collectable) only while this switch is on.
    pub revealed_by: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Spawn {
    pub x: usize,
    pub y: usize,
    pub dir: Dir,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub name: String,
    pub width: usize,
    pub height: usize,
    /// Row-major wall flags.
    pub walls: Vec<bool>,
    pub doors: Vec<(usize, usize)>,
    pub switches: Vec<Switch>,
    pub rooms: Vec<Room>,
    pub goals: Vec<Goal>,
    pub spawns: Vec<Spawn>,
    pub max_steps: usize,
    pub collision_penalty: f64,
    pub goal_reward: f64,
    /// Probability that an agent's action is replaced by a uniformly random one.
    pub slip_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("unknown environment {0:?} (expected fourrooms, switch or dualswitch)")]
    UnknownEnv(String),
    #[error("infeasible parameters: {0}")]
    Infeasible(String),
    #[error("invalid grid: {0}")]
    InvalidSpec(String),
    #[error("invalid action index {0}")]
    InvalidAction(usize),
    #[error("tabular export needs {count} joint states, limit is {limit}")]
    TooManyStates { count: u128, limit: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Parameters accepted by [`make_env`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvParams {
    pub agents: usize,
    pub goals: usize,
    pub width: usize,
    pub height: usize,
    pub max_steps: usize,
}

impl EnvParams {
    /// Desk-scale defaults for a layout name.
    pub fn defaults(name: &str) -> Self {
        match name {
            "fourrooms" => Self { agents: 2, goals: 3, width: 9, height: 9, max_steps: 100 },
            "dualswitch" => Self { agents: 2, goals: 2, width: 7, height: 5, max_steps: 50 },
            _ => Self { agents: 2, goals: 1, width: 5, height: 5, max_steps: 30 },
        }
    }
}

/// Builds a named layout.
pub fn make_env(name: &str, p: EnvParams) -> Result<GridSpec, GridError> {
    if p.agents == 0 || p.agents > MAX_AGENTS {
        return Err(GridError::Infeasible(alloc::format!("agents must be 1..={MAX_AGENTS}, got {}", p.agents)));
    }
    if p.width > MAX_SIDE || p.height > MAX_SIDE {
        return Err(GridError::Infeasible(alloc::format!("grid is at most {MAX_SIDE}x{MAX_SIDE}")));
    }
    if p.max_steps == 0 {
        return Err(GridError::Infeasible("max_steps must be positive".into()));
    }
    let spec = match name {
        "fourrooms" => four_rooms(p)?,
        "switch" => switch_rooms(p)?,
        "dualswitch" => dual_switch(p)?,
        other => return Err(GridError::UnknownEnv(other.into())),
    };
    spec.validate()?;
    Ok(spec)
}

fn bordered(width: usize, height: usize) -> Vec<bool> {
    let mut walls = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            if x == 0 || y == 0 || x + 1 == width || y + 1 == height {
                walls[y * width + x] = true;
            }
        }
    }
    walls
}

fn base(name: &str, p: EnvParams) -> GridSpec {
    GridSpec {
        name: name.into(),
        width: p.width,
        height: p.height,
        walls: bordered(p.width, p.height),
        doors: Vec::new(),
        switches: Vec::new(),
        rooms: Vec::new(),
        goals: Vec::new(),
        spawns: Vec::new(),
        max_steps: p.max_steps,
        collision_penalty: -0.1,
        goal_reward: 1.0,
        slip_prob: 0.0,
    }
}

fn four_rooms(p: EnvParams) -> Result<GridSpec, GridError> {
    if p.width != p.height || p.width < 5 {
        return Err(GridError::Infeasible("fourrooms needs a square grid of side >= 5".into()));
    }
    let n = p.width;
    let mid = n / 2;
    let mut g = base("fourrooms", p);
    for i in 0..n {
        g.walls[mid * n + i] = true;
        g.walls[i * n + mid] = true;
    }
    let near = mid / 2;
    let far = mid + (n - 1 - mid) / 2;
    let far = far.max(mid + 1);
    let near = near.max(1);
    for &(x, y) in &[(mid, near), (mid, far), (near, mid), (far, mid)] {
        g.walls[y * n + x] = false;
        g.doors.push((x, y));
    }
    g.rooms = vec![
        Room { x0: 1, y0: 1, x1: mid - 1, y1: mid - 1, lit_by: None },
        Room { x0: mid + 1, y0: 1, x1: n - 2, y1: mid - 1, lit_by: None },
        Room { x0: 1, y0: mid + 1, x1: mid - 1, y1: n - 2, lit_by: None },
        Room { x0: mid + 1, y0: mid + 1, x1: n - 2, y1: n - 2, lit_by: None },
    ];
    // Spawns walk the rooms from their top-left corners, goals from their
    // bottom-right corners, round-robin across rooms.
    let mut spawn_cells = Vec::new();
    let mut goal_cells = Vec::new();
    let per_room: Vec<Vec<(usize, usize)>> = g
        .rooms
        .iter()
        .map(|r| {
            let mut cells = Vec::new();
            for y in r.y0..=r.y1 {
                for x in r.x0..=r.x1 {
                    cells.push((x, y));
                }
            }
            cells
        })
        .collect();
    let total: usize = per_room.iter().map(Vec::len).sum();
    if p.agents + p.goals > total {
        return Err(GridError::Infeasible(alloc::format!(
            "{} agents and {} goals do not fit in {} room cells",
            p.agents,
            p.goals,
            total
        )));
    }
    let mut used = vec![false; n * n];
    let mut k = 0;
    while spawn_cells.len() < p.agents {
        let room = &per_room[k % 4];
        if let Some(&c) = room.iter().find(|&&(x, y)| !used[y * n + x]) {
            used[c.1 * n + c.0] = true;
            spawn_cells.push(c);
        }
        k += 1;
    }
    k = 3;
    while goal_cells.len() < p.goals {
        let room = &per_room[k % 4];
        if let Some(&c) = room.iter().rev().find(|&&(x, y)| !used[y * n + x]) {
            used[c.1 * n + c.0] = true;
            goal_cells.push(c);
        }
        k += 3;
    }
    g.spawns = spawn_cells.into_iter().map(|(x, y)| Spawn { x, y, dir: Dir::North }).collect();
    g.goals = goal_cells.into_iter().map(|(x, y)| Goal { x, y, revealed_by: None }).collect();
    Ok(g)
}

fn two_rooms(name: &str, p: EnvParams) -> Result<(GridSpec, usize), GridError> {
    if p.width < 5 || p.height < 5 {
        return Err(GridError::Infeasible(alloc::format!("{name} needs at least 5x5")));
    }
    let (w, h) = (p.width, p.height);
    let mid = w / 2;
    let mut g = base(name, p);
    for y in 0..h {
        g.walls[y * w + mid] = true;
    }
    let door = (mid, h / 2);
    g.walls[door.1 * w + door.0] = false;
    g.doors.push(door);
    Ok((g, mid))
}

fn switch_rooms(p: EnvParams) -> Result<GridSpec, GridError> {
    let (mut g, mid) = two_rooms("switch", p)?;
    let (w, h) = (p.width, p.height);
    g.switches.push(Switch { x: 1, y: 1, lights: vec![1] });
    g.rooms = vec![
        Room { x0: 1, y0: 1, x1: mid - 1, y1: h - 2, lit_by: None },
        Room { x0: mid + 1, y0: 1, x1: w - 2, y1: h - 2, lit_by: Some(0) },
    ];
    let right: Vec<(usize, usize)> = (1..h - 1).flat_map(|y| (mid + 1..w - 1).map(move |x| (x, y))).collect();
    let left: Vec<(usize, usize)> =
        (1..h - 1).rev().flat_map(|y| (1..mid).map(move |x| (x, y))).filter(|&c| c != (1, 1)).collect();
    if p.goals == 0 || p.goals > right.len() / 2 {
        return Err(GridError::Infeasible("switch needs 1 goal per two right-room cells".into()));
    }
    g.goals = right.iter().take(p.goals).map(|&(x, y)| Goal { x, y, revealed_by: Some(0) }).collect();
    // Agents alternate left room (bottom up) and right room (bottom up).
    let mut right_spawns = right.iter().rev().copied();
    let mut left_spawns = left.iter().copied();
    for k in 0..p.agents {
        let c = if k % 2 == 0 { left_spawns.next() } else { right_spawns.next() };
        let (x, y) = c.ok_or_else(|| GridError::Infeasible("too many agents for switch".into()))?;
        g.spawns.push(Spawn { x, y, dir: Dir::North });
    }
    Ok(g)
}

fn dual_switch(p: EnvParams) -> Result<GridSpec, GridError> {
    if p.goals != 2 {
        return Err(GridError::Infeasible("dualswitch has exactly 2 goals".into()));
    }
    let (mut g, mid) = two_rooms("dualswitch", p)?;
    let (w, h) = (p.width, p.height);
    g.switches.push(Switch { x: 1, y: 1, lights: Vec::new() });
    g.switches.push(Switch { x: w - 2, y: 1, lights: Vec::new() });
    g.rooms = vec![
        Room { x0: 1, y0: 1, x1: mid - 1, y1: h - 2, lit_by: None },
        Room { x0: mid + 1, y0: 1, x1: w - 2, y1: h - 2, lit_by: None },
    ];
    // The left switch reveals the right goal and vice versa.
    g.goals = vec![Goal { x: mid + 1, y: h - 2, revealed_by: Some(0) }, Goal { x: mid - 1, y: h - 2, revealed_by: Some(1) }];
    let spawns = [(1, h - 2), (w - 2, h - 2), (1, h - 3), (w - 2, h - 3)];
    for &(x, y) in spawns.iter().take(p.agents) {
        g.spawns.push(Spawn { x, y, dir: Dir::North });
    }
    Ok(g)
}

/// What occupies a cell, ignoring agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Wall,
    Floor,
    Door,
    Switch(usize),
}

/// World state of one episode.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EnvState {
    /// Per agent `(x, y, dir)`.
    pub agents: Vec<(usize, usize, Dir)>,
    pub carrying: Vec<bool>,
    /// Bit `i` set while switch `i` is on.
    pub switches: u32,
    /// Bit `i` set while goal `i` has not been collected.
    pub goals: u32,
    pub step: usize,
}

/// Things that happened during a step.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StepEvents {
    pub collisions: usize,
    pub toggled: Vec<usize>,
    pub collected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: EnvState,
    pub reward: f64,
    /// All goals collected.
    pub terminal: bool,
    /// Terminal or step cap reached.
    pub done: bool,
    pub events: StepEvents,
}

impl GridSpec {
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn cell(&self, x: isize, y: isize) -> Cell {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return Cell::Wall;
        }
        let (x, y) = (x as usize, y as usize);
        if let Some(i) = self.switches.iter().position(|s| s.x == x && s.y == y) {
            return Cell::Switch(i);
        }
        if self.walls[self.index(x, y)] {
            Cell::Wall
        } else if self.doors.contains(&(x, y)) {
            Cell::Door
        } else {
            Cell::Floor
        }
    }

    pub fn walkable(&self, x: isize, y: isize) -> bool {
        matches!(self.cell(x, y), Cell::Floor | Cell::Door)
    }

    /// Walkable cells in row-major order.
    pub fn walkable_cells(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .filter(|&(x, y)| self.walkable(x as isize, y as isize))
            .collect()
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let bad = |m: String| Err(GridError::InvalidSpec(m));
        if self.walls.len() != self.width * self.height {
            return bad("wall map size does not match grid".into());
        }
        if self.width * self.height < self.spawns.len() {
            return bad("more agents than cells".into());
        }
        if self.spawns.is_empty() || self.spawns.len() > MAX_AGENTS {
            return bad(alloc::format!("need 1..={MAX_AGENTS} spawns"));
        }
        if self.switches.len() > 8 || self.goals.len() > 8 {
            return bad("at most 8 switches and 8 goals".into());
        }
        for s in &self.switches {
            if s.x >= self.width || s.y >= self.height || self.walls[self.index(s.x, s.y)] {
                return bad(alloc::format!("switch at ({}, {}) is not on a non-wall cell", s.x, s.y));
            }
            if s.lights.iter().any(|&r| r >= self.rooms.len()) {
                return bad("switch lights an unknown room".into());
            }
        }
        for r in &self.rooms {
            if r.lit_by.is_some_and(|i| i >= self.switches.len()) {
                return bad("room lit by an unknown switch".into());
            }
        }
        for (i, g) in self.goals.iter().enumerate() {
            if !self.walkable(g.x as isize, g.y as isize) {
                return bad(alloc::format!("goal {i} at ({}, {}) is not walkable", g.x, g.y));
            }
            if g.revealed_by.is_some_and(|s| s >= self.switches.len()) {
                return bad(alloc::format!("goal {i} revealed by an unknown switch"));
            }
        }
        for (i, s) in self.spawns.iter().enumerate() {
            if !self.walkable(s.x as isize, s.y as isize) {
                return bad(alloc::format!("spawn {i} at ({}, {}) is not walkable", s.x, s.y));
            }
            if self.spawns[..i].iter().any(|o| o.x == s.x && o.y == s.y) {
                return bad(alloc::format!("spawn {i} shares a cell"));
            }
        }
        if !(self.collision_penalty <= 0.0) || !(self.goal_reward > 0.0) {
            return bad("collision penalty must be <= 0 and goal reward > 0".into());
        }
        if !(0.0..=1.0).contains(&self.slip_prob) {
            return bad("slip probability must lie in [0, 1]".into());
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        Ok(())
    }

    pub fn initial_state(&self) -> EnvState {
        EnvState {
            agents: self.spawns.iter().map(|s| (s.x, s.y, s.dir)).collect(),
            carrying: vec![false; self.spawns.len()],
            switches: 0,
            goals: (1u32 << self.goals.len()) - 1,
            step: 0,
        }
    }

    pub fn goal_visible(&self, state: &EnvState, i: usize) -> bool {
        self.goals[i].revealed_by.is_none_or(|s| state.switches >> s & 1 == 1)
    }

    pub fn dark(&self, state: &EnvState, x: usize, y: usize) -> bool {
        self.rooms.iter().any(|r| r.contains(x, y) && r.lit_by.is_some_and(|s| state.switches >> s & 1 == 0))
    }

    /// Deterministic part of a step, for the given effective actions.
    pub fn transition(&self, state: &EnvState, actions: &[usize]) -> Result<(EnvState, f64, StepEvents), GridError> {
        let n = state.agents.len();
        let mut acts = Vec::with_capacity(n);
        for &a in actions {
            acts.push(Action::from_index(a).ok_or(GridError::InvalidAction(a))?);
        }
        let mut next = state.clone();
        let mut events = StepEvents::default();
        let mut reward = 0.0;

        for (j, act) in acts.iter().enumerate() {
            if *act == Action::Toggle {
                let (x, y, d) = state.agents[j];
                let (dx, dy) = d.delta();
                if let Cell::Switch(i) = self.cell(x as isize + dx, y as isize + dy) {
                    next.switches ^= 1 << i;
                    events.toggled.push(i);
                }
            }
        }
        for (j, act) in acts.iter().enumerate() {
            let d = next.agents[j].2;
            next.agents[j].2 = match act {
                Action::Left => d.left(),
                Action::Right => d.right(),
                _ => d,
            };
        }

        let positions: Vec<(usize, usize)> = state.agents.iter().map(|a| (a.0, a.1)).collect();
        let mut target: Vec<Option<(usize, usize)>> = vec![None; n];
        for j in 0..n {
            if acts[j] == Action::Forward {
                let (x, y, d) = state.agents[j];
                let (dx, dy) = d.delta();
                let (tx, ty) = (x as isize + dx, y as isize + dy);
                if self.walkable(tx, ty) {
                    target[j] = Some((tx as usize, ty as usize));
                }
            }
        }
        let mut moving: Vec<bool> = target.iter().map(Option::is_some).collect();
        let mut by_agent = vec![false; n];
        loop {
            let mut changed = false;
            let blocked: Vec<bool> = (0..n)
                .map(|j| {
                    moving[j] && {
                        let t = target[j].unwrap();
                        (0..n).any(|k| {
                            k != j
                                && ((positions[k] == t && !moving[k])
                                    || target[k] == Some(t)
                                    || (positions[k] == t && target[k] == Some(positions[j])))
                        })
                    }
                })
                .collect();
            for j in 0..n {
                if blocked[j] {
                    moving[j] = false;
                    by_agent[j] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        for j in 0..n {
            if moving[j] {
                let (tx, ty) = target[j].unwrap();
                next.agents[j].0 = tx;
                next.agents[j].1 = ty;
            }
            if by_agent[j] {
                events.collisions += 1;
                reward += self.collision_penalty;
            }
        }

        for i in 0..self.goals.len() {
            if next.goals >> i & 1 == 0 || !self.goal_visible(&next, i) {
                continue;
            }
            let g = &self.goals[i];
            if next.agents.iter().any(|a| a.0 == g.x && a.1 == g.y) {
                next.goals &= !(1 << i);
                events.collected.push(i);
                reward += self.goal_reward;
            }
        }
        next.step = state.step + 1;
        Ok((next, reward, events))
    }

    /// Effective action distribution of one agent under slipping.
    pub fn effective_actions(&self, action: usize) -> Vec<(usize, f64)> {
        if self.slip_prob == 0.0 {
            return vec![(action, 1.0)];
        }
        let u = self.slip_prob / NUM_ACTIONS as f64;
        (0..NUM_ACTIONS).map(|b| (b, if b == action { 1.0 - self.slip_prob + u } else { u })).collect()
    }

    pub fn terminal(&self, state: &EnvState) -> bool {
        !self.goals.is_empty() && state.goals == 0
    }
}

/// One environment step. Slip draws (one Bernoulli per agent, plus a
/// uniform action on a slip) happen only when `slip_prob > 0`.
pub fn step<R: RngCore + ?Sized>(
    spec: &GridSpec,
    state: &EnvState,
    actions: &[usize],
    rng: &mut R,
) -> Result<StepResult, GridError> {
    if let Some(&a) = actions.iter().find(|&&a| a >= NUM_ACTIONS) {
        return Err(GridError::InvalidAction(a));
    }
    let mut effective = actions.to_vec();
    if spec.slip_prob > 0.0 {
        for a in effective.iter_mut() {
            if sample::bernoulli(rng, spec.slip_prob) {
                *a = sample::index(rng, NUM_ACTIONS);
            }
        }
    }
    let (next, reward, events) = spec.transition(state, &effective)?;
    let terminal = spec.terminal(&next);
    let done = terminal || next.step >= spec.max_steps;
    Ok(StepResult { state: next, reward, terminal, done, events })
}

/// Field-of-view symbol: 5×5 cells ahead of the agent, one base-8 digit
/// per cell (0 unseen, 1 floor, 2 wall, 3 door, 4 switch off, 5 switch on,
/// 6 goal, 7 agent), farthest row first, left to right.
pub fn observe(spec: &GridSpec, state: &EnvState, j: usize) -> u128 {
    let grid = view_grid(spec, state, j);
    grid.iter().flatten().fold(0u128, |acc, &c| acc * 8 + c as u128)
}

/// The decoded view used by [`observe`]; row 0 is farthest from the agent,
/// the agent sits at row 4, column 2.
pub fn view_grid(spec: &GridSpec, state: &EnvState, j: usize) -> [[u8; VIEW]; VIEW] {
    let (ax, ay, d) = state.agents[j];
    let (fx, fy) = d.delta();
    let (rx, ry) = d.right().delta();
    let world = |row: usize, col: usize| -> (isize, isize) {
        let depth = (VIEW - 1 - row) as isize;
        let lateral = col as isize - (VIEW / 2) as isize;
        (ax as isize + depth * fx + lateral * rx, ay as isize + depth * fy + lateral * ry)
    };
    let opaque = |row: usize, col: usize| {
        let (x, y) = world(row, col);
        matches!(spec.cell(x, y), Cell::Wall | Cell::Switch(_))
    };
    let mut mask = [[false; VIEW]; VIEW];
    mask[VIEW - 1][VIEW / 2] = true;
    for row in (0..VIEW).rev() {
        for col in 0..VIEW - 1 {
            if !mask[row][col] || opaque(row, col) {
                continue;
            }
            mask[row][col + 1] = true;
            if row > 0 {
                mask[row - 1][col + 1] = true;
                mask[row - 1][col] = true;
            }
        }
        for col in (1..VIEW).rev() {
            if !mask[row][col] || opaque(row, col) {
                continue;
            }
            mask[row][col - 1] = true;
            if row > 0 {
                mask[row - 1][col - 1] = true;
                mask[row - 1][col] = true;
            }
        }
    }
    let mut out = [[0u8; VIEW]; VIEW];
    for row in 0..VIEW {
        for col in 0..VIEW {
            if !mask[row][col] {
                continue;
            }
            let (x, y) = world(row, col);
            let inside = x >= 0 && y >= 0 && (x as usize) < spec.width && (y as usize) < spec.height;
            if inside && spec.dark(state, x as usize, y as usize) {
                continue;
            }
            out[row][col] = match spec.cell(x, y) {
                Cell::Wall => 2,
                Cell::Door => 3,
                Cell::Switch(i) => {
                    if state.switches >> i & 1 == 1 {
                        5
                    } else {
                        4
                    }
                }
                Cell::Floor => 1,
            };
            if out[row][col] == 1 || out[row][col] == 3 {
                let (ux, uy) = (x as usize, y as usize);
                let goal = spec
                    .goals
                    .iter()
                    .enumerate()
                    .any(|(i, g)| g.x == ux && g.y == uy && state.goals >> i & 1 == 1 && spec.goal_visible(state, i));
                if goal {
                    out[row][col] = 6;
                }
                if state.agents.iter().enumerate().any(|(k, a)| k != j && a.0 == ux && a.1 == uy) {
                    out[row][col] = 7;
                }
            }
        }
    }
    out
}

/// One character per cell, rows separated by newlines.
pub fn render(spec: &GridSpec, state: &EnvState) -> String {
    let mut out = String::new();
    for y in 0..spec.height {
        for x in 0..spec.width {
            let ch = if let Some(a) = state.agents.iter().find(|a| a.0 == x && a.1 == y) {
                a.2.glyph()
            } else if let Some(i) = spec
                .goals
                .iter()
                .position(|g| g.x == x && g.y == y && state.goals >> spec.goals.iter().position(|h| h == g).unwrap() & 1 == 1)
            {
                if spec.goal_visible(state, i) {
                    'G'
                } else {
                    'g'
                }
            } else {
                match spec.cell(x as isize, y as isize) {
                    Cell::Wall => '#',
                    Cell::Door => 'D',
                    Cell::Switch(i) => {
                        if state.switches >> i & 1 == 1 {
                            'L'
                        } else {
                            'S'
                        }
                    }
                    Cell::Floor => '.',
                }
            };
            out.push(ch);
        }
        out.push('\n');
    }
    out
}

/// Indexing between [`EnvState`] and joint state indices.
#[derive(Debug, Clone, PartialEq)]
pub struct GridIndex {
    cells: Vec<(usize, usize)>,
    local_of_cell: Vec<Option<usize>>,
    switches: usize,
    states: StateSpace,
}

impl GridIndex {
    pub fn new(spec: &GridSpec) -> Self {
        let cells = spec.walkable_cells();
        let mut local_of_cell = vec![None; spec.width * spec.height];
        for (i, &(x, y)) in cells.iter().enumerate() {
            local_of_cell[spec.index(x, y)] = Some(i);
        }
        let shared = 1usize << (spec.switches.len() + spec.goals.len());
        let states = StateSpace::with_shared(shared, vec![cells.len() * 4; spec.spawns.len()]);
        Self { cells, local_of_cell, switches: spec.switches.len(), states }
    }

    pub fn states(&self) -> &StateSpace {
        &self.states
    }

    pub fn cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    pub fn local(&self, spec: &GridSpec, agent: (usize, usize, Dir)) -> usize {
        self.local_of_cell[spec.index(agent.0, agent.1)].expect("agent on a walkable cell") * 4 + agent.2 as usize
    }

    pub fn agent_of_local(&self, local: usize) -> (usize, usize, Dir) {
        let (x, y) = self.cells[local / 4];
        (x, y, Dir::from_index(local % 4))
    }

    pub fn shared(&self, state: &EnvState) -> usize {
        state.switches as usize | (state.goals as usize) << self.switches
    }

    pub fn encode(&self, spec: &GridSpec, state: &EnvState) -> usize {
        let locals: Vec<usize> = state.agents.iter().map(|&a| self.local(spec, a)).collect();
        self.states.encode(self.shared(state), &locals)
    }

    /// Inverse of [`GridIndex::encode`]; the step counter is set to 0.
    pub fn decode(&self, index: usize) -> EnvState {
        let shared = self.states.shared_of(index);
        let agents: Vec<(usize, usize, Dir)> = self.states.locals(index).into_iter().map(|l| self.agent_of_local(l)).collect();
        EnvState {
            carrying: vec![false; agents.len()],
            agents,
            switches: (shared & ((1 << self.switches) - 1)) as u32,
            goals: (shared >> self.switches) as u32,
            step: 0,
        }
    }

    /// No two agents share a cell.
    pub fn valid(&self, index: usize) -> bool {
        let locals = self.states.locals(index);
        (0..locals.len()).all(|a| (0..a).all(|b| locals[a] / 4 != locals[b] / 4))
    }
}

/// Exact tabular model of a layout. Observations are the agents' local
/// states; states with co-located agents and finished episodes are
/// absorbing with zero reward. Returns the model and per-state terminal
/// flags.
pub fn export_tabular(
    spec: &GridSpec,
    discount: f64,
    broadcast_penalty: f64,
    limit: usize,
) -> Result<(DecPomdpModel, Vec<bool>), GridError> {
    spec.validate()?;
    let index = GridIndex::new(spec);
    let states = index.states().clone();
    let count = states.shared_size() as u128 * states.agent_sizes().iter().map(|&n| n as u128).product::<u128>();
    if count > limit as u128 {
        return Err(GridError::TooManyStates { count, limit });
    }
    let agents = spec.spawns.len();
    let n = states.size();
    let actions = ProductSpace::new(vec![NUM_ACTIONS; agents]);
    let na = actions.size();
    let observations = states.agents().clone();
    let mut transition = SparseMatrix::with_capacity(n * na, n * na);
    let mut rewards = Vec::with_capacity(n * na);
    let mut terminal = vec![false; n];
    let mut acts = vec![0usize; agents];
    let mut combo = vec![0usize; agents];
    for s in 0..n {
        let state = index.decode(s);
        let absorbing = !index.valid(s) || spec.terminal(&state);
        terminal[s] = spec.terminal(&state);
        for a in 0..na {
            if absorbing {
                transition.push_row([(s, 1.0)]);
                rewards.push(0.0);
                continue;
            }
            actions.decode_into(a, &mut acts);
            let per_agent: Vec<Vec<(usize, f64)>> = acts.iter().map(|&x| spec.effective_actions(x)).collect();
            let mut row: Vec<(usize, f64, f64)> = Vec::new();
            let sizes: Vec<usize> = per_agent.iter().map(Vec::len).collect();
            let combos: usize = sizes.iter().product();
            for c in 0..combos {
                let mut rest = c;
                let mut p = 1.0;
                for j in (0..agents).rev() {
                    let (b, q) = per_agent[j][rest % sizes[j]];
                    rest /= sizes[j];
                    combo[j] = b;
                    p *= q;
                }
                let (next, r, _) = spec.transition(&state, &combo)?;
                let s2 = index.encode(spec, &next);
                match row.iter_mut().find(|e| e.0 == s2) {
                    Some(e) => {
                        e.1 += p;
                        e.2 += p * r;
                    }
                    None => row.push((s2, p, p * r)),
                }
            }
            row.sort_by_key(|e| e.0);
            for e in &row {
                rewards.push(e.2 / e.1);
            }
            transition.push_row(row.iter().map(|e| (e.0, e.1)));
        }
    }
    let local_total = states.agents().size();
    let observation = SparseMatrix::from_rows((0..n).map(|s| [(s % local_total, 1.0)]));
    let mut initial = vec![0.0; n];
    initial[index.encode(spec, &spec.initial_state())] = 1.0;
    let reward_bound = spec.goals.len() as f64 * spec.goal_reward + agents as f64 * spec.collision_penalty.abs();
    let model = DecPomdpModel::new(ModelParts {
        states,
        actions,
        observations,
        transition,
        observation: ObservationKernel::StateOnly(observation),
        reward: RewardModel::Joint(rewards),
        broadcast_penalty,
        discount,
        initial,
        reward_bound,
        factored: None,
    })?;
    Ok((model, terminal))
}

/// A layout as a learning environment. Belief tracking uses per-agent
/// marginals in which Forward stays put with probability `kappa`, covering
/// moves blocked by other agents.
#[derive(Debug, Clone)]
pub struct TeamGrid {
    spec: GridSpec,
    index: GridIndex,
    actions: ProductSpace,
    state: EnvState,
    kappa: f64,
}

impl TeamGrid {
    pub fn new(spec: GridSpec) -> Result<Self, GridError> {
        spec.validate()?;
        let index = GridIndex::new(&spec);
        let actions = ProductSpace::new(vec![NUM_ACTIONS; spec.spawns.len()]);
        let state = spec.initial_state();
        Ok(Self { spec, index, actions, state, kappa: 0.1 })
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        assert!(kappa > 0.0 && kappa < 1.0, "kappa lies in (0, 1)");
        self.kappa = kappa;
        self
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn index(&self) -> &GridIndex {
        &self.index
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn set_state(&mut self, state: EnvState) {
        self.state = state;
    }
}

impl LocalDynamics for TeamGrid {
    fn initial_marginal(&self, j: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.index.states().agent_size(j)];
        let s = &self.spec.spawns[j];
        m[self.index.local(&self.spec, (s.x, s.y, s.dir))] = 1.0;
        m
    }

    fn local_transition(&self, _j: usize, _shared: usize, local: usize, action: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let (x, y, d) = self.index.agent_of_local(local);
        for (b, p) in self.spec.effective_actions(action) {
            let push = |out: &mut Vec<(usize, f64)>, l: usize, q: f64| match out.iter_mut().find(|e| e.0 == l) {
                Some(e) => e.1 += q,
                None => out.push((l, q)),
            };
            match Action::from_index(b) {
                Some(Action::Left) => push(out, self.index.local(&self.spec, (x, y, d.left())), p),
                Some(Action::Right) => push(out, self.index.local(&self.spec, (x, y, d.right())), p),
                Some(Action::Forward) => {
                    let (dx, dy) = d.delta();
                    let (tx, ty) = (x as isize + dx, y as isize + dy);
                    if self.spec.walkable(tx, ty) {
                        push(out, self.index.local(&self.spec, (tx as usize, ty as usize, d)), p * (1.0 - self.kappa));
                        push(out, local, p * self.kappa);
                    } else {
                        push(out, local, p);
                    }
                }
                _ => push(out, local, p),
            }
        }
    }
}

impl Environment for TeamGrid {
    fn states(&self) -> &StateSpace {
        self.index.states()
    }

    fn actions(&self) -> &ProductSpace {
        &self.actions
    }

    fn max_steps(&self) -> usize {
        self.spec.max_steps
    }

    fn reset(&mut self, _rng: &mut SimRng) -> usize {
        self.state = self.spec.initial_state();
        self.index.encode(&self.spec, &self.state)
    }

    fn step(&mut self, action: usize, rng: &mut SimRng) -> Outcome {
        let acts = self.actions.decode(action);
        let r = step(&self.spec, &self.state, &acts, rng).expect("joint action indices are in range");
        self.state = r.state;
        let s = self.index.encode(&self.spec, &self.state);
        Outcome { state: s, observation: self.index.states().locals(s), reward: r.reward, done: r.terminal }
    }

    fn tracking(&self) -> Tracking<'_> {
        Tracking::Local(self)
    }
}

/// Human-readable summary of a layout, used by the command line.
pub fn describe(spec: &GridSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} {}x{}: {} agents, {} goals, {} switches, max {} steps",
        spec.name,
        spec.width,
        spec.height,
        spec.spawns.len(),
        spec.goals.len(),
        spec.switches.len(),
        spec.max_steps
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::stream_rng;

    fn params(agents: usize, goals: usize, side: usize) -> EnvParams {
        EnvParams { agents, goals, width: side, height: side, max_steps: 50 }
    }

    #[test]
    fn fourrooms_counts() {
        let g = make_env("fourrooms", params(2, 3, 9)).unwrap();
        assert_eq!((g.spawns.len(), g.goals.len()), (2, 3));
        let g = make_env("fourrooms", params(3, 5, 9)).unwrap();
        assert_eq!((g.spawns.len(), g.goals.len()), (3, 5));
        assert_eq!(g.doors.len(), 4);
    }

    #[test]
    fn unknown_and_infeasible() {
        assert!(matches!(make_env("maze", params(2, 1, 5)), Err(GridError::UnknownEnv(_))));
        assert!(matches!(make_env("fourrooms", params(5, 1, 9)), Err(GridError::Infeasible(_))));
        assert!(matches!(make_env("fourrooms", params(2, 1, 21)), Err(GridError::Infeasible(_))));
    }

    #[test]
    fn switch_reveals_goal() {
        let g = make_env("switch", params(2, 1, 5)).unwrap();
        let s0 = g.initial_state();
        assert!(!g.goal_visible(&s0, 0));
        assert!(g.dark(&s0, 3, 2));
        // Agent 0 stands below the switch facing north after one Forward.
        let mut rng = stream_rng(0, 0);
        let r = step(&g, &s0, &[2, 4], &mut rng).unwrap();
        assert_eq!(r.state.agents[0], (1, 2, Dir::North));
        let r = step(&g, &r.state, &[3, 4], &mut rng).unwrap();
        assert_eq!(r.events.toggled, vec![0]);
        assert!(g.goal_visible(&r.state, 0));
        assert!(!g.dark(&r.state, 3, 2));
    }

    #[test]
    fn forward_into_wall_stays() {
        let g = make_env("switch", params(2, 1, 5)).unwrap();
        let mut s = g.initial_state();
        s.agents[0] = (1, 3, Dir::West);
        let mut rng = stream_rng(0, 0);
        let r = step(&g, &s, &[2, 4], &mut rng).unwrap();
        assert_eq!(r.state.agents[0], (1, 3, Dir::West));
        assert_eq!(r.reward, 0.0);
    }

    #[test]
    fn tie_blocks_both_with_penalty() {
        let g = make_env("fourrooms", params(2, 1, 7)).unwrap();
        let mut s = g.initial_state();
        s.agents = vec![(1, 1, Dir::East), (3, 1, Dir::West)];
        s.goals = 1;
        let mut rng = stream_rng(0, 0);
        let r = step(&g, &s, &[2, 2], &mut rng).unwrap();
        assert_eq!(r.state.agents[0].0, 1);
        assert_eq!(r.state.agents[1].0, 3);
        assert!((r.reward - 2.0 * g.collision_penalty).abs() < 1e-15);
        assert_eq!(r.events.collisions, 2);
    }

    #[test]
    fn swap_and_chain_moves() {
        let g = make_env("fourrooms", params(2, 1, 7)).unwrap();
        let mut s = g.initial_state();
        s.goals = 1;
        let mut rng = stream_rng(0, 0);
        s.agents = vec![(1, 1, Dir::East), (2, 1, Dir::West)];
        let r = step(&g, &s, &[2, 2], &mut rng).unwrap();
        assert_eq!(r.state.agents, s.agents);
        assert_eq!(r.events.collisions, 2);
        // A follows B, which moves away: both advance.
        s.agents = vec![(1, 1, Dir::South), (1, 2, Dir::South)];
        let r = step(&g, &s, &[2, 2], &mut rng).unwrap();
        assert_eq!((r.state.agents[0].1, r.state.agents[1].1), (2, 3));
        assert_eq!(r.reward, 0.0);
    }

    #[test]
    fn observation_examples() {
        let g = make_env("switch", params(2, 1, 5)).unwrap();
        let mut s = g.initial_state();
        s.agents[0] = (1, 3, Dir::West);
        let v = view_grid(&g, &s, 0);
        assert_eq!(v[3][2], 2);
        assert_eq!(v[2][2], 0, "view is cut behind the wall");
        // Right-room agent before the toggle sees no room cells.
        let v = view_grid(&g, &s, 1);
        let (ax, ay, d) = s.agents[1];
        for row in 0..VIEW {
            for col in 0..VIEW {
                let depth = (VIEW - 1 - row) as isize;
                let lateral = col as isize - 2;
                let (fx, fy) = d.delta();
                let (rx, ry) = d.right().delta();
                let (x, y) = (ax as isize + depth * fx + lateral * rx, ay as isize + depth * fy + lateral * ry);
                if x >= 0 && y >= 0 && g.rooms[1].contains(x as usize, y as usize) {
                    assert_eq!(v[row][col], 0);
                }
            }
        }
        assert_eq!(observe(&g, &s, 1), observe(&g, &s, 1));
    }

    #[test]
    fn render_switch_layout() {
        let g = make_env("switch", params(2, 1, 5)).unwrap();
        let s = g.initial_state();
        assert_eq!(render(&g, &s), "#####\n#S#g#\n#.D.#\n#^#^#\n#####\n");
    }

    #[test]
    fn export_one_agent_room() {
        let mut g = make_env("fourrooms", params(1, 1, 5)).unwrap();
        // Replace with an open 3x3 room and no goals.
        g.walls = bordered(5, 5);
        g.doors.clear();
        g.goals.clear();
        g.rooms.clear();
        let (m, _) = export_tabular(&g, 0.9, 0.0, DEFAULT_EXPORT_LIMIT).unwrap();
        assert_eq!(m.num_states(), 36);
        assert!(m.validate().is_empty());
        for s in 0..36 {
            for a in 0..NUM_ACTIONS {
                assert_eq!(m.transition_row(s, a).len(), 1);
            }
        }
    }

    #[test]
    fn export_refuses_large_spaces() {
        let g = make_env("fourrooms", params(3, 5, 9)).unwrap();
        assert!(matches!(export_tabular(&g, 0.9, 0.0, 1000), Err(GridError::TooManyStates { .. })));
    }

    #[test]
    fn index_round_trip() {
        let g = make_env("switch", params(2, 1, 5)).unwrap();
        let idx = GridIndex::new(&g);
        assert_eq!(idx.states().size(), 4 * 24 * 24);
        for s in (0..idx.states().size()).step_by(7) {
            if idx.valid(s) {
                assert_eq!(idx.encode(&g, &idx.decode(s)), s);
            }
        }
    }
}
