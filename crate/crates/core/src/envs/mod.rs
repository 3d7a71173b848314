//! Planar point-mass tasks with scripted experts.
//!
//! All tasks share a `[-1, 1]^2` arena and 2-d displacement actions bounded
//! per axis by `max_step`.

mod expert;

pub use expert::Expert;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::rng_stream;

pub const ACTION_DIMS: usize = 2;
pub const ARENA: f64 = 1.0;
pub const FORK_RADIUS: f64 = 0.3;
pub const FORK_MARGIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Reach,
    Fork,
    Waypoints(usize),
}

impl Task {
    pub fn name(&self) -> String {
        match self {
            Task::Reach => "reach".into(),
            Task::Fork => "fork".into(),
            Task::Waypoints(3) => "waypoints".into(),
            Task::Waypoints(n) => format!("waypoints:{n}"),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Task::Reach | Task::Fork => 4,
            Task::Waypoints(n) => 4 + n,
        }
    }

    /// Number of subgoals reported by the staged metric.
    pub fn stages(&self) -> usize {
        match self {
            Task::Waypoints(n) => *n,
            _ => 1,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    /// `reach`, `fork`, `waypoints` (three waypoints) or `waypoints:N`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reach" => Ok(Task::Reach),
            "fork" => Ok(Task::Fork),
            "waypoints" => Ok(Task::Waypoints(3)),
            _ => {
                let n = s
                    .strip_prefix("waypoints:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&n| (1..=8).contains(&n))
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown task '{s}', expected reach, fork or waypoints[:N]")))?;
                Ok(Task::Waypoints(n))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: Task,
    /// Episode step cap.
    pub cap: usize,
    /// Success tolerance.
    pub eps: f64,
    /// Per-axis action bound.
    pub max_step: f64,
    /// Stationary standard deviation of the expert's action jitter.
    pub jitter: f64,
    /// Step-to-step correlation of the jitter process.
    pub jitter_corr: f64,
}

impl TaskConfig {
    pub fn new(task: Task) -> Self {
        let (cap, eps) = match task {
            Task::Reach | Task::Fork => (100, 0.05),
            Task::Waypoints(_) => (200, 0.06),
        };
        TaskConfig { task, cap, eps, max_step: 0.1, jitter: 0.01, jitter_corr: 0.9 }
    }
}

pub type Point = [f64; 2];

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub pos: Point,
    /// Goal for Reach/Fork; the final waypoint for Waypoints.
    pub goal: Point,
    pub waypoints: Vec<Point>,
    /// Waypoints reached so far, in order.
    pub progress: usize,
    pub steps: usize,
}

impl EnvState {
    /// Randomized start (and goal) drawn from `seed`.
    pub fn reset(cfg: &TaskConfig, seed: u64) -> Self {
        let mut rng = rng_stream(seed, 0);
        let mut uniform = |lo: f64, hi: f64| rng.random_range(lo..hi);
        match cfg.task {
            Task::Reach => {
                let pos = [uniform(-0.8, 0.8), uniform(-0.8, 0.8)];
                let goal = loop {
                    let g = [uniform(-0.8, 0.8), uniform(-0.8, 0.8)];
                    if dist(g, pos) > 0.3 {
                        break g;
                    }
                };
                EnvState { pos, goal, waypoints: Vec::new(), progress: 0, steps: 0 }
            }
            Task::Fork => {
                let pos = [uniform(-0.15, 0.15), uniform(-0.85, -0.7)];
                let goal = [uniform(-0.15, 0.15), uniform(0.7, 0.85)];
                EnvState { pos, goal, waypoints: Vec::new(), progress: 0, steps: 0 }
            }
            Task::Waypoints(n) => {
                let pos = [uniform(-0.8, 0.8), uniform(-0.8, 0.8)];
                let mut waypoints: Vec<Point> = Vec::with_capacity(n);
                while waypoints.len() < n {
                    let w = [uniform(-0.8, 0.8), uniform(-0.8, 0.8)];
                    let prev = waypoints.last().copied().unwrap_or(pos);
                    if dist(w, prev) > 0.3 && dist(w, prev) < 1.0 {
                        waypoints.push(w);
                    }
                }
                let goal = *waypoints.last().unwrap();
                EnvState { pos, goal, waypoints, progress: 0, steps: 0 }
            }
        }
    }

    /// Point the agent is currently heading for.
    pub fn target(&self) -> Point {
        match self.waypoints.get(self.progress) {
            Some(&w) => w,
            None => self.goal,
        }
    }

    /// Agent position, current target and, for Waypoints, the progress one-hot.
    pub fn observe(&self, cfg: &TaskConfig) -> Vec<f32> {
        let t = self.target();
        let mut obs = vec![self.pos[0] as f32, self.pos[1] as f32, t[0] as f32, t[1] as f32];
        if let Task::Waypoints(n) = cfg.task {
            obs.extend((0..n).map(|i| if i == self.progress { 1.0 } else { 0.0 }));
        }
        obs
    }

    /// Applies one clamped displacement.
    pub fn step(&self, cfg: &TaskConfig, action: &[f32]) -> EnvState {
        let mut next = self.clone();
        next.steps += 1;
        let a = [
            (action.first().copied().unwrap_or(0.0) as f64).clamp(-cfg.max_step, cfg.max_step),
            (action.get(1).copied().unwrap_or(0.0) as f64).clamp(-cfg.max_step, cfg.max_step),
        ];
        let a = if a[0].is_finite() && a[1].is_finite() { a } else { [0.0, 0.0] };
        let mut target = [
            (self.pos[0] + a[0]).clamp(-ARENA, ARENA),
            (self.pos[1] + a[1]).clamp(-ARENA, ARENA),
        ];
        if cfg.task == Task::Fork {
            target = block_at_obstacle(self.pos, target);
        }
        next.pos = target;
        if let Some(&w) = next.waypoints.get(next.progress) {
            if dist(next.pos, w) <= cfg.eps {
                next.progress += 1;
            }
        }
        next
    }

    pub fn is_success(&self, cfg: &TaskConfig) -> bool {
        match cfg.task {
            Task::Reach | Task::Fork => dist(self.pos, self.goal) <= cfg.eps,
            Task::Waypoints(n) => self.progress >= n,
        }
    }

    pub fn is_done(&self, cfg: &TaskConfig) -> bool {
        self.is_success(cfg) || self.steps >= cfg.cap
    }
}

/// Stops a straight move at the first contact with the fork obstacle.
fn block_at_obstacle(from: Point, to: Point) -> Point {
    let d = [to[0] - from[0], to[1] - from[1]];
    let a = d[0] * d[0] + d[1] * d[1];
    if a == 0.0 {
        return from;
    }
    let b = 2.0 * (from[0] * d[0] + from[1] * d[1]);
    let c = from[0] * from[0] + from[1] * from[1] - FORK_RADIUS * FORK_RADIUS;
    if c <= 1e-12 {
        // on the boundary: only non-inward moves are allowed
        return if b < 0.0 { from } else { to };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return to;
    }
    let t = (-b - disc.sqrt()) / (2.0 * a);
    if (0.0..=1.0).contains(&t) {
        [from[0] + t * d[0], from[1] + t * d[1]]
    } else {
        to
    }
}

/// Reach/Fork: final position within tolerance of the goal. Waypoints: all
/// waypoints reached in order.
pub fn success(cfg: &TaskConfig, history: &[EnvState]) -> bool {
    history.last().is_some_and(|s| s.is_success(cfg))
}

/// `p_i` is true iff the first `i` subgoals were completed in order.
pub fn staged_success(cfg: &TaskConfig, history: &[EnvState]) -> Vec<bool> {
    match cfg.task {
        Task::Waypoints(n) => {
            let reached = history.iter().map(|s| s.progress).max().unwrap_or(0);
            (1..=n).map(|i| reached >= i).collect()
        }
        _ => vec![success(cfg, history)],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForkMode {
    Left,
    Right,
}

impl ForkMode {
    pub fn label(&self) -> &'static str {
        match self {
            ForkMode::Left => "left",
            ForkMode::Right => "right",
        }
    }
}

/// Side of the obstacle a trajectory passed on, from its mean x inside the
/// obstacle's y-band. `None` when the band is never entered or the mean is
/// within the margin.
pub fn fork_mode(positions: &[Point]) -> Option<ForkMode> {
    let xs: Vec<f64> = positions.iter().filter(|p| p[1].abs() < FORK_RADIUS).map(|p| p[0]).collect();
    if xs.is_empty() {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if mean < -FORK_MARGIN {
        Some(ForkMode::Left)
    } else if mean > FORK_MARGIN {
        Some(ForkMode::Right)
    } else {
        None
    }
}

/// One expert episode: observation before each action and the action taken.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demo {
    pub task: String,
    pub seed: u64,
    pub mode: Option<String>,
    pub obs: Vec<Vec<f32>>,
    pub act: Vec<Vec<f32>>,
}

impl Demo {
    pub fn len(&self) -> usize {
        self.act.len()
    }

    pub fn is_empty(&self) -> bool {
        self.act.is_empty()
    }
}

/// Seed of the `j`-th episode drawn from a master seed.
pub fn episode_seed(master: u64, j: u64) -> u64 {
    master.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(j)
}

/// Runs the expert from `seed` until success or the cap; returns the demo and
/// whether it succeeded.
pub fn expert_episode(cfg: &TaskConfig, seed: u64) -> (Demo, bool) {
    let mut state = EnvState::reset(cfg, seed);
    let mut rng = rng_stream(seed, 1);
    let mut expert = Expert::new(cfg, &state, &mut rng);
    let (mut obs, mut act, mut path) = (Vec::new(), Vec::new(), vec![state.pos]);
    while !state.is_done(cfg) {
        let a = expert.act(cfg, &state, &mut rng);
        obs.push(state.observe(cfg));
        act.push(a.to_vec());
        state = state.step(cfg, &a);
        path.push(state.pos);
    }
    let ok = state.is_success(cfg);
    let mode = match cfg.task {
        Task::Fork => expert.mode().map(|m| m.label().to_string()),
        _ => None,
    };
    (Demo { task: cfg.task.name(), seed, mode, obs, act }, ok)
}

/// `n` successful expert demos; failed episodes are re-rolled with fresh seeds.
pub fn generate_demos(cfg: &TaskConfig, n: usize, seed: u64) -> Result<Vec<Demo>> {
    if n == 0 {
        return Err(Error::InvalidArgument("number of demos must be at least 1".into()));
    }
    let mut demos = Vec::with_capacity(n);
    let (mut attempts, mut failures) = (0u64, 0u64);
    while demos.len() < n {
        let (demo, ok) = expert_episode(cfg, episode_seed(seed, attempts));
        attempts += 1;
        if ok {
            demos.push(demo);
        } else {
            failures += 1;
            warn!("expert failed on {} episode {}", cfg.task, demo.seed);
            if attempts >= 10 && failures * 2 > attempts {
                return Err(Error::InvalidArgument(format!(
                    "expert failed {failures} of {attempts} episodes on {}; environment misconfigured",
                    cfg.task
                )));
            }
        }
    }
    Ok(demos)
}
