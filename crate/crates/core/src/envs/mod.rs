//! Contextual point-mass suite.
//!
//! Four analytic problems whose reward depends on a task parameter `c`
//! that never enters the observation: running at a goal velocity, moving in
//! a goal direction, reaching a goal point, and navigating a maze to a goal
//! cell. Each problem has a scripted expert.

pub mod maze;

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    PointVelocity,
    PointDirection,
    PointReach,
    GridMaze,
}

impl Problem {
    pub const ALL: [Problem; 4] =
        [Problem::PointVelocity, Problem::PointDirection, Problem::PointReach, Problem::GridMaze];

    pub fn name(self) -> &'static str {
        match self {
            Problem::PointVelocity => "point_velocity",
            Problem::PointDirection => "point_direction",
            Problem::PointReach => "point_reach",
            Problem::GridMaze => "grid_maze",
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            Problem::PointVelocity => 1,
            Problem::PointDirection => 4,
            Problem::PointReach => 2,
            Problem::GridMaze => 4,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            Problem::PointVelocity => 1,
            _ => 2,
        }
    }

    pub fn param_dim(self) -> usize {
        match self {
            Problem::PointVelocity | Problem::PointDirection => 1,
            Problem::PointReach | Problem::GridMaze => 2,
        }
    }

    pub fn horizon(self) -> usize {
        match self {
            Problem::PointVelocity | Problem::PointDirection => 50,
            Problem::PointReach => 32,
            Problem::GridMaze => 64,
        }
    }

    pub fn index(self) -> usize {
        Problem::ALL.iter().position(|&p| p == self).expect("listed")
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Problem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Problem::ALL
            .into_iter()
            .find(|p| p.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown problem `{s}`")))
    }
}

/// One task of a contextual MDP family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub problem: Problem,
    pub task_id: usize,
    /// Task parameter: goal velocity, goal angle, goal point or goal cell.
    pub c: Vec<f64>,
    /// Return-to-go the policy is conditioned on at evaluation.
    pub target_return: f64,
    pub horizon: usize,
    /// Withhold per-step rewards and pay their sum at the final step.
    #[serde(default)]
    pub sparse: bool,
}

impl TaskSpec {
    pub fn new(problem: Problem, task_id: usize, c: Vec<f64>) -> Self {
        TaskSpec { problem, task_id, c, target_return: 0.0, horizon: problem.horizon(), sparse: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// A running episode. Dynamics are deterministic; randomness is confined
/// to [`reset`].
#[derive(Clone, Debug)]
pub struct EnvInstance {
    spec: TaskSpec,
    state: Vec<f64>,
    t: usize,
    withheld: f64,
}

/// Starts an episode of `spec` with the initial state drawn from `seed`.
pub fn reset(spec: &TaskSpec, seed: u64) -> EnvInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = match spec.problem {
        Problem::PointVelocity => vec![0.0],
        Problem::PointDirection => vec![0.0; 4],
        Problem::PointReach => vec![rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25)],
        Problem::GridMaze => {
            let cells = maze::empty_cells();
            let (r, c) = cells[rng.random_range(0..cells.len())];
            let x = r as f64 + rng.random_range(-0.5..0.5);
            let y = c as f64 + rng.random_range(-0.5..0.5);
            vec![x, y, 0.0, 0.0]
        }
    };
    EnvInstance { spec: spec.clone(), state, t: 0, withheld: 0.0 }
}

/// Immediate reward of arriving at `next` in a task with parameter `c`.
fn dense_reward(problem: Problem, c: &[f64], next: &[f64]) -> f64 {
    match problem {
        Problem::PointVelocity => -(next[0] - c[0]).abs(),
        Problem::PointDirection => next[2] * c[0].cos() + next[3] * c[0].sin(),
        Problem::PointReach => -((next[0] - c[0]).powi(2) + (next[1] - c[1]).powi(2)).sqrt(),
        Problem::GridMaze => {
            let d = ((next[0] - c[0]).powi(2) + (next[1] - c[1]).powi(2)).sqrt();
            if d <= 0.5 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Transition function. Sees only the physical state and the action.
fn transition(problem: Problem, state: &[f64], action: &[f64]) -> Vec<f64> {
    match problem {
        Problem::PointVelocity => vec![state[0] + 0.1 * action[0]],
        Problem::PointDirection => {
            let vx = 0.9 * state[2] + 0.1 * action[0];
            let vy = 0.9 * state[3] + 0.1 * action[1];
            vec![state[0] + vx, state[1] + vy, vx, vy]
        }
        Problem::PointReach => vec![state[0] + 0.05 * action[0], state[1] + 0.05 * action[1]],
        Problem::GridMaze => {
            let vel = [
                (state[2] + 0.1 * action[0]).clamp(-0.25, 0.25),
                (state[3] + 0.1 * action[1]).clamp(-0.25, 0.25),
            ];
            let (pos, vel) = maze::integrate([state[0], state[1]], vel);
            vec![pos[0], pos[1], vel[0], vel[1]]
        }
    }
}

pub fn clip_action(action: &[f64]) -> Vec<f64> {
    action.iter().map(|a| a.clamp(-1.0, 1.0)).collect()
}

impl EnvInstance {
    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    /// Current observation (the physical state only).
    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.spec.horizon
    }

    pub fn step(&mut self, action: &[f64]) -> Result<Step> {
        if self.is_done() {
            return Err(Error::Contract(format!(
                "step called after episode end (t = {})",
                self.t
            )));
        }
        let problem = self.spec.problem;
        if action.len() != problem.action_dim() {
            return Err(Error::Dimension(format!(
                "{problem} expects {} action values, got {}",
                problem.action_dim(),
                action.len()
            )));
        }
        let action = clip_action(action);
        let next = transition(problem, &self.state, &action);
        let r = dense_reward(problem, &self.spec.c, &next);
        self.t += 1;
        let done = self.t == self.spec.horizon;
        let reward = if self.spec.sparse {
            self.withheld += r;
            if done {
                std::mem::take(&mut self.withheld)
            } else {
                0.0
            }
        } else {
            r
        };
        self.state = next.clone();
        Ok(Step { state: next, reward, done })
    }
}

/// Scripted expert controller.
pub fn expert_action(spec: &TaskSpec, state: &[f64]) -> Result<Vec<f64>> {
    let c = &spec.c;
    let action = match spec.problem {
        Problem::PointVelocity => vec![(10.0 * (c[0] - state[0])).clamp(-1.0, 1.0)],
        Problem::PointDirection => vec![c[0].cos(), c[0].sin()],
        Problem::PointReach => {
            let dx = (c[0] - state[0]) / 0.05;
            let dy = (c[1] - state[1]) / 0.05;
            let norm = (dx * dx + dy * dy).sqrt();
            let scale = if norm > 1.0 { 1.0 / norm } else { 1.0 };
            clip_action(&[dx * scale, dy * scale])
        }
        Problem::GridMaze => {
            let goal = (c[0].round() as usize, c[1].round() as usize);
            let here = maze::cell_of(state[0], state[1])
                .ok_or_else(|| Error::Contract("maze position outside the grid".into()))?;
            let wp = maze::next_waypoint(here, goal).ok_or_else(|| {
                Error::Config(format!("maze goal {goal:?} unreachable from {here:?}"))
            })?;
            let target = if wp == goal { [c[0], c[1]] } else { [wp.0 as f64, wp.1 as f64] };
            // track a desired velocity pointing at the waypoint
            let mut dv = [target[0] - state[0], target[1] - state[1]];
            let norm = (dv[0] * dv[0] + dv[1] * dv[1]).sqrt();
            if norm > 0.25 {
                dv = [dv[0] * 0.25 / norm, dv[1] * 0.25 / norm];
            }
            clip_action(&[(dv[0] - state[2]) / 0.1, (dv[1] - state[3]) / 0.1])
        }
    };
    Ok(action)
}

pub fn random_action<R: Rng + ?Sized>(problem: Problem, rng: &mut R) -> Vec<f64> {
    (0..problem.action_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

#[derive(Clone, Debug)]
pub struct TaskSplit {
    pub train: Vec<TaskSpec>,
    pub test: Vec<TaskSpec>,
}

/// Indices of held-out tasks spread evenly through a grid of `total`.
fn interleaved_test_indices(total: usize, n_test: usize) -> Vec<usize> {
    (0..n_test).map(|k| ((2 * k + 1) * total) / (2 * n_test)).collect()
}

/// Builds train/test task lists. Point problems place goals on an even grid
/// with held-out goals interleaved between training goals; the maze uses the
/// fixed 21/5 goal-cell split.
pub fn make_split(problem: Problem, n_train: usize, n_test: usize) -> Result<TaskSplit> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("n_train and n_test must both be at least 1".into()));
    }
    if problem == Problem::GridMaze {
        if n_train > maze::TRAIN_GOALS.len() || n_test > maze::TEST_GOALS.len() {
            return Err(Error::Config(format!(
                "grid_maze supports at most {} train and {} test tasks, asked for {n_train}/{n_test}",
                maze::TRAIN_GOALS.len(),
                maze::TEST_GOALS.len()
            )));
        }
        let cells = maze::empty_cells();
        let spec_for = |g: &(usize, usize)| {
            let id = cells.iter().position(|c| c == g).expect("goal is an empty cell");
            TaskSpec::new(problem, id, vec![g.0 as f64, g.1 as f64])
        };
        return Ok(TaskSplit {
            train: maze::TRAIN_GOALS[..n_train].iter().map(spec_for).collect(),
            test: maze::TEST_GOALS[..n_test].iter().map(spec_for).collect(),
        });
    }
    let total = n_train + n_test;
    let params: Vec<Vec<f64>> = (0..total)
        .map(|i| match problem {
            Problem::PointVelocity => {
                let g = if total == 1 { 0.1 } else { 0.1 + 0.9 * i as f64 / (total - 1) as f64 };
                vec![g]
            }
            Problem::PointDirection => vec![TAU * i as f64 / total as f64],
            Problem::PointReach => {
                let a = TAU * i as f64 / total as f64;
                vec![a.cos(), a.sin()]
            }
            Problem::GridMaze => unreachable!(),
        })
        .collect();
    let test_idx = interleaved_test_indices(total, n_test);
    let mut split = TaskSplit { train: Vec::new(), test: Vec::new() };
    for (i, c) in params.into_iter().enumerate() {
        let spec = TaskSpec::new(problem, i, c);
        if test_idx.contains(&i) {
            split.test.push(spec);
        } else {
            split.train.push(spec);
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(problem: Problem, c: Vec<f64>) -> TaskSpec {
        TaskSpec::new(problem, 0, c)
    }

    #[test]
    fn fixed_starts_and_seeded_starts() {
        assert_eq!(reset(&spec(Problem::PointVelocity, vec![0.5]), 9).state(), &[0.0]);
        assert_eq!(reset(&spec(Problem::PointDirection, vec![0.5]), 9).state(), &[0.0; 4]);
        let reach = spec(Problem::PointReach, vec![1.0, 0.0]);
        assert_eq!(reset(&reach, 4).state(), reset(&reach, 4).state());
        assert_ne!(reset(&reach, 4).state(), reset(&reach, 5).state());
        for s in reset(&reach, 4).state() {
            assert!(s.abs() <= 0.25);
        }
        let m = spec(Problem::GridMaze, vec![1.0, 1.0]);
        for seed in 0..500 {
            let e = reset(&m, seed);
            assert!(maze::is_free_position(e.state()[0], e.state()[1]));
        }
    }

    #[test]
    fn step_examples() {
        let mut e = reset(&spec(Problem::PointVelocity, vec![0.1]), 0);
        let s = e.step(&[1.0]).unwrap();
        assert!((s.state[0] - 0.1).abs() < 1e-15);
        assert!(s.reward.abs() < 1e-15);

        let mut d = reset(&spec(Problem::PointDirection, vec![0.0]), 0);
        d.state = vec![0.0, 0.0, 0.5 / 0.9, 0.0];
        let s = d.step(&[0.0, 0.0]).unwrap();
        assert!((s.reward - 0.5).abs() < 1e-12);

        let mut m = reset(&spec(Problem::GridMaze, vec![2.0, 2.0]), 0);
        m.state = vec![2.0, 1.6, 0.0, 0.0];
        assert_eq!(m.step(&[0.0, 0.0]).unwrap().reward, 1.0);
        m.state = vec![2.0, 1.4, 0.0, 0.0];
        assert_eq!(m.step(&[0.0, 0.0]).unwrap().reward, 0.0);
    }

    #[test]
    fn episode_ends_at_horizon() {
        let mut e = reset(&spec(Problem::PointReach, vec![1.0, 0.0]), 1);
        for t in 0..32 {
            let s = e.step(&[0.0, 0.0]).unwrap();
            assert_eq!(s.done, t == 31);
        }
        assert!(matches!(e.step(&[0.0, 0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn sparse_rewards_pay_the_sum_at_the_end() {
        let dense = spec(Problem::PointReach, vec![0.0, 1.0]);
        let sparse = TaskSpec { sparse: true, ..dense.clone() };
        let (mut a, mut b) = (reset(&dense, 3), reset(&sparse, 3));
        let (mut ra, mut rb) = (0.0, Vec::new());
        while !a.is_done() {
            let act = expert_action(&dense, a.state()).unwrap();
            ra += a.step(&act).unwrap().reward;
            rb.push(b.step(&act).unwrap().reward);
        }
        assert!(rb[..31].iter().all(|&r| r == 0.0));
        assert!((rb[31] - ra).abs() < 1e-12);
    }

    #[test]
    fn expert_examples() {
        let reach = spec(Problem::PointReach, vec![1.0, 0.0]);
        assert_eq!(expert_action(&reach, &[0.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        let vel = spec(Problem::PointVelocity, vec![0.4]);
        assert_eq!(expert_action(&vel, &[0.4]).unwrap(), vec![0.0]);
    }

    #[test]
    fn splits() {
        let s = make_split(Problem::GridMaze, 21, 5).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (21, 5));
        assert_eq!(s.test.iter().map(|t| t.task_id).collect::<Vec<_>>(), vec![1, 6, 10, 12, 25]);
        assert!(make_split(Problem::GridMaze, 22, 5).is_err());

        let r = make_split(Problem::PointReach, 12, 4).unwrap();
        assert_eq!((r.train.len(), r.test.len()), (12, 4));
        let mut angles: Vec<i64> = r
            .train
            .iter()
            .chain(&r.test)
            .map(|t| (t.c[1].atan2(t.c[0]) * 1e6).round() as i64)
            .collect();
        angles.sort();
        angles.dedup();
        assert_eq!(angles.len(), 16);
        for t in &r.test {
            assert!(!r.train.iter().any(|u| u.c == t.c));
        }
        // every held-out goal sits between two training goals
        let v = make_split(Problem::PointVelocity, 12, 4).unwrap();
        for t in &v.test {
            assert!(v.train.iter().any(|u| u.c[0] < t.c[0]));
            assert!(v.train.iter().any(|u| u.c[0] > t.c[0]));
        }
        assert_eq!(
            make_split(Problem::PointDirection, 5, 2).unwrap().test,
            make_split(Problem::PointDirection, 5, 2).unwrap().test
        );
    }
}
