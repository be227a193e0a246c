//! Offline datasets: generation in three quality tiers, returns-to-go,
//! JSON storage and K-step segment sampling.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::envs::{self, Problem, TaskSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Expert,
    Medium,
    Random,
}

impl Quality {
    pub fn name(self) -> &'static str {
        match self {
            Quality::Expert => "expert",
            Quality::Medium => "medium",
            Quality::Random => "random",
        }
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(Quality::Expert),
            "medium" => Ok(Quality::Medium),
            "random" => Ok(Quality::Random),
            other => Err(Error::Config(format!("unknown data quality `{other}`"))),
        }
    }
}

/// Suffix sums: `rtg[t] = rewards[t] + rewards[t+1] + ... + rewards[T-1]`.
pub fn compute_rtg(rewards: &[f64]) -> Vec<f64> {
    let mut rtg = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (out, r) in rtg.iter_mut().zip(rewards).rev() {
        acc += r;
        *out = acc;
    }
    rtg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    #[serde(default)]
    pub rtg: Vec<f64>,
}

impl Trajectory {
    pub fn from_rollout(states: Vec<Vec<f64>>, actions: Vec<Vec<f64>>, rewards: Vec<f64>) -> Self {
        let rtg = compute_rtg(&rewards);
        Trajectory { states, actions, rewards, rtg }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rtg.first().copied().unwrap_or(0.0)
    }
}

/// Per-component affine state normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-6;

impl StateNorm {
    pub fn identity(dim: usize) -> Self {
        StateNorm { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Population statistics over every state of every trajectory given.
    pub fn fit<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let trajs: Vec<&Trajectory> = trajectories.into_iter().collect();
        for s in trajs.iter().flat_map(|t| &t.states) {
            n += 1;
            for (acc, x) in sum.iter_mut().zip(s) {
                *acc += x;
            }
        }
        if n == 0 {
            return StateNorm::identity(dim);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0; dim];
        for s in trajs.iter().flat_map(|t| &t.states) {
            for ((acc, x), m) in var.iter_mut().zip(s).zip(&mean) {
                *acc += (x - m) * (x - m);
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
        StateNorm { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, state: &[f64]) -> Vec<f64> {
        state.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub quality: Quality,
    pub trajectories: Vec<Trajectory>,
    pub prompt_pool: Vec<Trajectory>,
    pub norm: StateNorm,
}

impl TaskDataset {
    pub fn file_name(&self) -> String {
        dataset_file_name(self.spec.problem, self.spec.task_id, self.quality)
    }

    pub fn n_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

pub fn dataset_file_name(problem: Problem, task_id: usize, quality: Quality) -> String {
    format!("{problem}_task{task_id}_{quality}.json")
}

fn run_episode(spec: &TaskSpec, quality: Quality, episode_seed: u64, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
    let noise = Normal::new(0.0, 0.3).expect("valid normal");
    let mut env = envs::reset(spec, episode_seed);
    let (mut states, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
    while !env.is_done() {
        let action = match quality {
            Quality::Expert => envs::expert_action(spec, env.state())?,
            Quality::Medium => {
                let a = envs::expert_action(spec, env.state())?;
                let noisy: Vec<f64> = a.iter().map(|x| x + noise.sample(rng)).collect();
                envs::clip_action(&noisy)
            }
            Quality::Random => envs::random_action(spec.problem, rng),
        };
        states.push(env.state().to_vec());
        let step = env.step(&action)?;
        actions.push(action);
        rewards.push(step.reward);
    }
    Ok(Trajectory::from_rollout(states, actions, rewards))
}

/// Rolls out `n_traj` episodes with the tier policy plus `n_prompt` expert
/// episodes for the prompt pool. The target return is the best expert
/// return seen: over the training trajectories when they are expert, and
/// over the prompt pool. With neither available, the best of 20 extra
/// expert rollouts is used.
pub fn generate_dataset(spec: &TaskSpec, quality: Quality, n_traj: usize, n_prompt: usize, seed: u64) -> Result<TaskDataset> {
    if n_traj == 0 {
        return Err(Error::Config("a dataset needs at least one trajectory".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let episode_seed = rng.random();
        trajectories.push(run_episode(spec, quality, episode_seed, &mut rng)?);
    }
    let mut prompt_pool = Vec::with_capacity(n_prompt);
    for _ in 0..n_prompt {
        let episode_seed = rng.random();
        prompt_pool.push(run_episode(spec, Quality::Expert, episode_seed, &mut rng)?);
    }
    let mut expert_returns: Vec<f64> = prompt_pool.iter().map(Trajectory::total_return).collect();
    if quality == Quality::Expert {
        expert_returns.extend(trajectories.iter().map(Trajectory::total_return));
    }
    if expert_returns.is_empty() {
        for _ in 0..20 {
            let episode_seed = rng.random();
            expert_returns.push(run_episode(spec, Quality::Expert, episode_seed, &mut rng)?.total_return());
        }
    }
    let target_return = expert_returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm = StateNorm::fit(&trajectories, spec.problem.state_dim());
    Ok(TaskDataset {
        spec: TaskSpec { target_return, ..spec.clone() },
        quality,
        trajectories,
        prompt_pool,
        norm,
    })
}

/// Mean returns of the scripted expert and of the uniform random policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub expert_return: f64,
    pub random_return: f64,
}

pub fn estimate_baselines(spec: &TaskSpec, episodes: usize, seed: u64) -> Result<Baselines> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean_of = |quality| -> Result<f64> {
        let mut total = 0.0;
        for _ in 0..episodes {
            let episode_seed = rng.random();
            total += run_episode(spec, quality, episode_seed, &mut rng)?.total_return();
        }
        Ok(total / episodes as f64)
    };
    Ok(Baselines { expert_return: mean_of(Quality::Expert)?, random_return: mean_of(Quality::Random)? })
}

/// A K-step window, left padded with zeros. States are normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub rtg: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub loss_mask: Vec<bool>,
    pub timesteps: Vec<usize>,
}

impl Segment {
    /// The window of `traj` ending at step `end` (inclusive).
    pub fn window(traj: &Trajectory, end: usize, k: usize, norm: &StateNorm) -> Result<Segment> {
        if end >= traj.len() {
            return Err(Error::Contract(format!("window end {end} beyond trajectory of length {}", traj.len())));
        }
        let start = (end + 1).saturating_sub(k);
        let valid = end + 1 - start;
        let pad = k - valid;
        let d_s = norm.dim();
        let d_a = traj.actions[0].len();
        let mut seg = Segment {
            rtg: vec![0.0; pad],
            states: vec![vec![0.0; d_s]; pad],
            actions: vec![vec![0.0; d_a]; pad],
            loss_mask: vec![false; pad],
            timesteps: vec![0; pad],
        };
        for t in start..=end {
            seg.rtg.push(traj.rtg[t]);
            seg.states.push(norm.apply(&traj.states[t]));
            seg.actions.push(traj.actions[t].clone());
            seg.loss_mask.push(true);
            seg.timesteps.push(t);
        }
        Ok(seg)
    }

    pub fn len(&self) -> usize {
        self.loss_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss_mask.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Draws a trajectory with probability proportional to its length, then an
/// end step uniformly, and returns the window ending there.
pub fn sample_segment<R: Rng + ?Sized>(dataset: &TaskDataset, k: usize, norm: &StateNorm, rng: &mut R) -> Result<Segment> {
    let total = dataset.n_steps();
    if total == 0 {
        return Err(Error::Contract(format!("dataset for task {} is empty", dataset.spec.task_id)));
    }
    // a uniform step over all trajectories is both choices at once
    let mut pick = rng.random_range(0..total);
    for traj in &dataset.trajectories {
        if pick < traj.len() {
            return Segment::window(traj, pick, k, norm);
        }
        pick -= traj.len();
    }
    unreachable!("pick is below the total step count")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    task_id: usize,
    problem: Problem,
    parameter: Vec<f64>,
    quality: Quality,
    horizon: usize,
    target_return: f64,
    #[serde(default)]
    sparse: bool,
    state_mean: Vec<f64>,
    state_std: Vec<f64>,
    trajectories: Vec<Trajectory>,
    prompt_pool: Vec<Trajectory>,
}

/// JSON formatter printing every float with 17 significant digits.
struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

/// Serializes with full float precision. Non-finite floats are rejected.
pub fn to_json_exact<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FullPrecision);
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(out)
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("{what}[{i}] is not finite"))),
        None => Ok(()),
    }
}

pub fn write_dataset(dataset: &TaskDataset, dir: &Path) -> Result<PathBuf> {
    for (i, t) in dataset.trajectories.iter().chain(&dataset.prompt_pool).enumerate() {
        check_finite(&t.rewards, &format!("trajectory {i} rewards"))?;
    }
    let file = DatasetFile {
        task_id: dataset.spec.task_id,
        problem: dataset.spec.problem,
        parameter: dataset.spec.c.clone(),
        quality: dataset.quality,
        horizon: dataset.spec.horizon,
        target_return: dataset.spec.target_return,
        sparse: dataset.spec.sparse,
        state_mean: dataset.norm.mean.clone(),
        state_std: dataset.norm.std.clone(),
        trajectories: dataset.trajectories.clone(),
        prompt_pool: dataset.prompt_pool.clone(),
    };
    let path = dir.join(dataset.file_name());
    fs::write(&path, to_json_exact(&file)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn validate_trajectory(t: &mut Trajectory, problem: Problem, field: &str) -> std::result::Result<(), String> {
    let n = t.rewards.len();
    if n == 0 {
        return Err(format!("{field}: empty trajectory"));
    }
    if t.states.len() != n || t.actions.len() != n {
        return Err(format!(
            "{field}: {} states, {} actions and {n} rewards",
            t.states.len(),
            t.actions.len()
        ));
    }
    for (name, rows, dim) in [("states", &t.states, problem.state_dim()), ("actions", &t.actions, problem.action_dim())] {
        if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(format!("{field}.{name}[{i}]: expected {dim} values for {problem}, got {}", row.len()));
        }
    }
    if t.rtg.is_empty() {
        t.rtg = compute_rtg(&t.rewards);
    } else if t.rtg.len() != n {
        return Err(format!("{field}.rtg: expected {n} values, got {}", t.rtg.len()));
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<TaskDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |detail: String| Error::Parse { path: path.to_path_buf(), detail };
    let mut file: DatasetFile = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    let problem = file.problem;
    if file.parameter.len() != problem.param_dim() {
        return Err(parse_err(format!(
            "parameter: expected {} values for {problem}, got {}",
            problem.param_dim(),
            file.parameter.len()
        )));
    }
    if file.state_mean.len() != problem.state_dim() || file.state_std.len() != problem.state_dim() {
        return Err(parse_err(format!("state_mean/state_std: expected {} values", problem.state_dim())));
    }
    for (i, t) in file.trajectories.iter_mut().enumerate() {
        validate_trajectory(t, problem, &format!("trajectories[{i}]")).map_err(parse_err)?;
    }
    for (i, t) in file.prompt_pool.iter_mut().enumerate() {
        validate_trajectory(t, problem, &format!("prompt_pool[{i}]")).map_err(parse_err)?;
    }
    Ok(TaskDataset {
        spec: TaskSpec {
            problem,
            task_id: file.task_id,
            c: file.parameter,
            target_return: file.target_return,
            horizon: file.horizon,
            sparse: file.sparse,
        },
        quality: file.quality,
        trajectories: file.trajectories,
        prompt_pool: file.prompt_pool,
        norm: StateNorm { mean: file.state_mean, std: file.state_std },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub task_id: usize,
    pub split: SplitKind,
    pub parameter: Vec<f64>,
    pub target_return: f64,
    pub horizon: usize,
    pub expert_return: f64,
    pub random_return: f64,
}

/// Task list of one problem with evaluation baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub problem: Problem,
    pub quality: Quality,
    pub sparse: bool,
    pub tasks: Vec<SplitEntry>,
}

pub const SPLIT_FILE: &str = "split.json";

impl SplitFile {
    pub fn entry(&self, task_id: usize) -> Option<&SplitEntry> {
        self.tasks.iter().find(|e| e.task_id == task_id)
    }

    pub fn task_spec(&self, entry: &SplitEntry) -> TaskSpec {
        TaskSpec {
            problem: self.problem,
            task_id: entry.task_id,
            c: entry.parameter.clone(),
            target_return: entry.target_return,
            horizon: entry.horizon,
            sparse: self.sparse,
        }
    }

    pub fn specs(&self, kind: SplitKind) -> Vec<TaskSpec> {
        self.tasks.iter().filter(|e| e.split == kind).map(|e| self.task_spec(e)).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, to_json_exact(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), detail: e.to_string() })
    }
}

/// Everything `gen-data` produces for one problem, kept in memory.
#[derive(Clone, Debug)]
pub struct ProblemData {
    pub split: SplitFile,
    pub train: Vec<TaskDataset>,
    pub test: Vec<TaskDataset>,
}

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub problem: Problem,
    pub n_train: usize,
    pub n_test: usize,
    pub trajectories: usize,
    pub prompt_trajectories: usize,
    pub quality: Quality,
    pub sparse: bool,
    pub seed: u64,
    pub baseline_episodes: usize,
}

impl GenConfig {
    pub fn new(problem: Problem, n_train: usize, n_test: usize) -> Self {
        GenConfig {
            problem,
            n_train,
            n_test,
            trajectories: 50,
            prompt_trajectories: 5,
            quality: Quality::Expert,
            sparse: false,
            seed: 0,
            baseline_episodes: 100,
        }
    }
}

/// Builds the split, one dataset per task (seeded with `seed + task_id`)
/// and the baselines of every task.
pub fn generate_problem(cfg: &GenConfig) -> Result<ProblemData> {
    let split = envs::make_split(cfg.problem, cfg.n_train, cfg.n_test)?;
    let mut tasks = Vec::new();
    let mut build = |specs: &[TaskSpec], kind: SplitKind| -> Result<Vec<TaskDataset>> {
        let mut out = Vec::new();
        for spec in specs {
            let spec = TaskSpec { sparse: cfg.sparse, ..spec.clone() };
            let seed = cfg.seed.wrapping_add(spec.task_id as u64);
            let ds = generate_dataset(&spec, cfg.quality, cfg.trajectories, cfg.prompt_trajectories, seed)?;
            let base = estimate_baselines(&spec, cfg.baseline_episodes, seed ^ 0x9e37_79b9_7f4a_7c15)?;
            tasks.push(SplitEntry {
                task_id: spec.task_id,
                split: kind,
                parameter: spec.c.clone(),
                target_return: ds.spec.target_return,
                horizon: spec.horizon,
                expert_return: base.expert_return,
                random_return: base.random_return,
            });
            out.push(ds);
        }
        Ok(out)
    };
    let train = build(&split.train, SplitKind::Train)?;
    let test = build(&split.test, SplitKind::Test)?;
    Ok(ProblemData {
        split: SplitFile { problem: cfg.problem, quality: cfg.quality, sparse: cfg.sparse, tasks },
        train,
        test,
    })
}

impl ProblemData {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for ds in self.train.iter().chain(&self.test) {
            write_dataset(ds, dir)?;
        }
        self.split.write(&dir.join(SPLIT_FILE))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let split = SplitFile::read(&dir.join(SPLIT_FILE))?;
        let load = |kind: SplitKind| -> Result<Vec<TaskDataset>> {
            split
                .tasks
                .iter()
                .filter(|e| e.split == kind)
                .map(|e| read_dataset(&dir.join(dataset_file_name(split.problem, e.task_id, split.quality))))
                .collect()
        };
        let train = load(SplitKind::Train)?;
        let test = load(SplitKind::Test)?;
        Ok(ProblemData { split, train, test })
    }

    /// State normalization pooled over all training tasks of the problem.
    pub fn pooled_norm(&self) -> StateNorm {
        StateNorm::fit(self.train.iter().flat_map(|d| &d.trajectories), self.split.problem.state_dim())
    }

    /// Largest |G| over training tasks.
    pub fn default_rtg_scale(&self) -> f64 {
        let m = self.train.iter().map(|d| d.spec.target_return.abs()).fold(0.0, f64::max);
        if m > 0.0 {
            m
        } else {
            1.0
        }
    }
}
