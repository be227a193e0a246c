//! Conditioning prefixes for the five model variants.

use std::fmt;
use std::str::FromStr;

use mpdt_tensor::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{StateNorm, Trajectory};
use crate::envs::TaskSpec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTag {
    TaskLearned,
    Task,
    PureLearned,
    Trajectory,
    None,
}

impl PromptTag {
    pub const ALL: [PromptTag; 5] =
        [PromptTag::TaskLearned, PromptTag::Task, PromptTag::PureLearned, PromptTag::Trajectory, PromptTag::None];

    /// Name used on the command line and in metrics files.
    pub fn cli_name(self) -> &'static str {
        match self {
            PromptTag::TaskLearned => "task-learned",
            PromptTag::Task => "task",
            PromptTag::PureLearned => "pure-learned",
            PromptTag::Trajectory => "trajectory",
            PromptTag::None => "none",
        }
    }

    pub fn uses_c(self) -> bool {
        matches!(self, PromptTag::TaskLearned | PromptTag::Task)
    }

    pub fn uses_z(self) -> bool {
        matches!(self, PromptTag::TaskLearned | PromptTag::PureLearned)
    }
}

impl fmt::Display for PromptTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for PromptTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-");
        PromptTag::ALL
            .into_iter()
            .find(|t| t.cli_name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptVariant {
    pub tag: PromptTag,
    /// Tokens per learned block.
    pub learned_len: usize,
    /// Demonstration episodes in a trajectory prompt.
    pub traj_episodes: usize,
    /// Steps taken from each demonstration.
    pub traj_seg_len: usize,
}

impl PromptVariant {
    pub fn new(tag: PromptTag, learned_len: usize) -> Self {
        PromptVariant { tag, learned_len, traj_episodes: 1, traj_seg_len: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        match self.tag {
            PromptTag::Task if self.learned_len > 0 => Err(Error::Config(format!(
                "variant `task` has no learned prompt, but learned_len = {}",
                self.learned_len
            ))),
            PromptTag::PureLearned if self.learned_len == 0 => {
                Err(Error::Config("variant `pure-learned` needs learned_len >= 1".into()))
            }
            PromptTag::Trajectory if self.traj_episodes == 0 || self.traj_seg_len == 0 => {
                Err(Error::Config("trajectory prompts need J >= 1 and H >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Learned tokens per block actually in use.
    pub fn n(&self) -> usize {
        if self.tag.uses_z() {
            self.learned_len
        } else {
            0
        }
    }

    pub fn prompt_len(&self) -> usize {
        match self.tag {
            PromptTag::TaskLearned => 3 * (self.learned_len + 1),
            PromptTag::Task => 3,
            PromptTag::PureLearned => 3 * self.learned_len,
            PromptTag::Trajectory => 3 * self.traj_seg_len * self.traj_episodes,
            PromptTag::None => 0,
        }
    }
}

pub const Z_NAMES: [&str; 3] = ["prompt_z1", "prompt_z2", "prompt_z3"];

/// Registers `prompt_z1..3`, each `n × h`, drawn i.i.d. from N(0, 0.02²).
/// Nothing is registered for `n = 0`.
pub fn init_learned_prompt<T: Scalar>(store: &mut ParamStore<T>, n: usize, h: usize, seed: u64) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid normal");
    for name in Z_NAMES {
        let values: Vec<f64> = (0..n * h).map(|_| normal.sample(&mut rng)).collect();
        store.insert(name, Tensor::from_f64(vec![n, h], &values)?)?;
    }
    Ok(())
}

/// Demonstration steps forming a trajectory prompt, with states already
/// normalized and returns-to-go unscaled.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPrompt {
    pub rtg: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub timesteps: Vec<usize>,
}

impl TrajectoryPrompt {
    pub fn steps(&self) -> usize {
        self.rtg.len()
    }
}

/// The conditioning inputs of one sequence before embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledPrompt {
    pub tag: PromptTag,
    /// Task parameter, embedded into three identical tokens.
    pub c: Option<Vec<f64>>,
    /// Learned block length; zero means no z blocks.
    pub n: usize,
    pub trajectory: Option<TrajectoryPrompt>,
}

impl AssembledPrompt {
    pub fn empty() -> Self {
        AssembledPrompt { tag: PromptTag::None, c: None, n: 0, trajectory: None }
    }

    pub fn len(&self) -> usize {
        let c = if self.c.is_some() { 3 } else { 0 };
        let traj = self.trajectory.as_ref().map_or(0, |t| 3 * t.steps());
        c + 3 * self.n + traj
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples `j` demonstrations from `pool` and keeps the first `h` steps of
/// each. Demonstrations shorter than `h` are skipped and redrawn.
pub fn sample_trajectory_prompt<R: Rng + ?Sized>(
    pool: &[Trajectory],
    j: usize,
    h: usize,
    norm: &StateNorm,
    rng: &mut R,
) -> Result<TrajectoryPrompt> {
    if pool.is_empty() {
        return Err(Error::Contract("trajectory prompt pool is empty".into()));
    }
    if pool.iter().all(|t| t.len() < h) {
        return Err(Error::Contract(format!("no prompt trajectory has {h} steps")));
    }
    let mut out = TrajectoryPrompt { rtg: Vec::new(), states: Vec::new(), actions: Vec::new(), timesteps: Vec::new() };
    let mut taken = 0;
    while taken < j {
        let traj = &pool[rng.random_range(0..pool.len())];
        if traj.len() < h {
            continue;
        }
        for t in 0..h {
            out.rtg.push(traj.rtg[t]);
            out.states.push(norm.apply(&traj.states[t]));
            out.actions.push(traj.actions[t].clone());
            out.timesteps.push(t);
        }
        taken += 1;
    }
    Ok(out)
}

/// Builds the prefix of `variant` for `task`. Only the trajectory variant
/// reads `pool` or draws from `rng`.
pub fn assemble<R: Rng + ?Sized>(
    variant: &PromptVariant,
    task: &TaskSpec,
    pool: &[Trajectory],
    norm: &StateNorm,
    rng: &mut R,
) -> Result<AssembledPrompt> {
    let mut p = AssembledPrompt { tag: variant.tag, ..AssembledPrompt::empty() };
    match variant.tag {
        PromptTag::TaskLearned | PromptTag::Task => {
            p.c = Some(task.c.clone());
            p.n = variant.n();
        }
        PromptTag::PureLearned => p.n = variant.n(),
        PromptTag::Trajectory => {
            if pool.is_empty() {
                return Err(Error::Config(format!(
                    "trajectory variant needs a prompt pool for task {}",
                    task.task_id
                )));
            }
            p.trajectory =
                Some(sample_trajectory_prompt(pool, variant.traj_episodes, variant.traj_seg_len, norm, rng)?);
        }
        PromptTag::None => {}
    }
    Ok(p)
}

/// Embeds each row's `c` once through `embed_param`: `[B, d_c] -> [B, 1, h]`.
/// The caller places that token three times.
pub fn make_task_prompt<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, cs: &[&[f64]]) -> Result<Var> {
    let w = store.require("embed_param.weight")?;
    let d_c = w.shape()[0];
    if let Some(bad) = cs.iter().find(|c| c.len() != d_c) {
        return Err(Error::Contract(format!("task parameter has {} values, model expects {d_c}", bad.len())));
    }
    let flat: Vec<T> = cs.iter().flat_map(|c| c.iter().map(|&x| T::from_f64(x))).collect();
    let x = tape.constant_from(vec![cs.len(), 1, d_c], flat)?;
    let w = tape.param(store, "embed_param.weight")?;
    let b = tape.param(store, "embed_param.bias")?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

/// Broadcasts the three learned blocks over a batch of `b` rows.
pub fn z_blocks<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, n: usize, b: usize) -> Result<[Var; 3]> {
    let idx: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
    let mut out = Vec::with_capacity(3);
    for name in Z_NAMES {
        let table = tape.param(store, name)?;
        out.push(tape.embedding_lookup(table, &idx, &[b, n])?);
    }
    Ok([out[0], out[1], out[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Problem;

    #[test]
    fn lengths() {
        let v = |tag, n| PromptVariant::new(tag, n);
        assert_eq!(v(PromptTag::TaskLearned, 15).prompt_len(), 48);
        assert_eq!(v(PromptTag::TaskLearned, 3).prompt_len(), 12);
        assert_eq!(v(PromptTag::Task, 0).prompt_len(), 3);
        assert_eq!(v(PromptTag::PureLearned, 15).prompt_len(), 45);
        assert_eq!(v(PromptTag::None, 0).prompt_len(), 0);
        let mut t = v(PromptTag::Trajectory, 0);
        t.traj_seg_len = 2;
        assert_eq!(t.prompt_len(), 6);
        assert!(v(PromptTag::Task, 3).validate().is_err());
        assert!(v(PromptTag::PureLearned, 0).validate().is_err());
        assert!(v(PromptTag::TaskLearned, 0).validate().is_ok());
    }

    #[test]
    fn z_init() {
        let mut a = ParamStore::<f32>::new();
        init_learned_prompt(&mut a, 15, 128, 4).unwrap();
        assert_eq!(a.total_len(), 5760);
        let mut b = ParamStore::<f32>::new();
        init_learned_prompt(&mut b, 15, 128, 4).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let mut e = ParamStore::<f32>::new();
        init_learned_prompt(&mut e, 0, 128, 4).unwrap();
        assert!(e.is_empty());
    }

    #[test]
    fn assemble_variants() {
        let task = TaskSpec::new(Problem::GridMaze, 0, vec![1.0, 1.0]);
        let norm = StateNorm::identity(4);
        let traj = Trajectory::from_rollout(vec![vec![0.0; 4]; 5], vec![vec![0.0; 2]; 5], vec![1.0; 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = assemble(&PromptVariant::new(PromptTag::None, 0), &task, &[], &norm, &mut rng).unwrap();
        assert_eq!(none.len(), 0);
        let pure = assemble(&PromptVariant::new(PromptTag::PureLearned, 15), &task, &[], &norm, &mut rng).unwrap();
        assert_eq!((pure.len(), pure.c.is_none()), (45, true));
        let tl = assemble(&PromptVariant::new(PromptTag::TaskLearned, 3), &task, &[], &norm, &mut rng).unwrap();
        assert_eq!(tl.len(), 12);
        let tv = PromptVariant::new(PromptTag::Trajectory, 0);
        assert!(matches!(assemble(&tv, &task, &[], &norm, &mut rng), Err(Error::Config(_))));
        let a = assemble(&tv, &task, std::slice::from_ref(&traj), &norm, &mut rng).unwrap();
        let b = assemble(&tv, &task, std::slice::from_ref(&traj), &norm, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
        assert_eq!(a.trajectory.unwrap().rtg, vec![5.0, 4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn short_demonstrations_are_skipped() {
        let norm = StateNorm::identity(1);
        let short = Trajectory::from_rollout(vec![vec![0.0]; 2], vec![vec![0.0]; 2], vec![1.0; 2]);
        let long = Trajectory::from_rollout(vec![vec![0.0]; 6], vec![vec![0.0]; 6], vec![1.0; 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = sample_trajectory_prompt(&[short.clone(), long], 3, 4, &norm, &mut rng).unwrap();
        assert_eq!(p.steps(), 12);
        assert!(sample_trajectory_prompt(&[short], 1, 4, &norm, &mut rng).is_err());
    }
}
