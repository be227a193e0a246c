//! How one task is presented to a model: state normalization, padding to
//! the model's dimensions, the task parameter it sees and its baselines.

use rand::Rng;

use crate::data::{Baselines, ProblemData, SplitKind, StateNorm, TaskDataset};
use crate::envs::{Problem, TaskSpec};
use crate::error::{Error, Result};
use crate::prompts::{self, AssembledPrompt, PromptVariant};

/// Model-side dimensions shared by every task of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub state_dim: usize,
    pub action_dim: usize,
    pub param_dim: usize,
}

impl ModelDims {
    pub fn of(problem: Problem) -> Self {
        ModelDims { state_dim: problem.state_dim(), action_dim: problem.action_dim(), param_dim: problem.param_dim() }
    }

    /// Dimensions of a run mixing all problems: zero-padded states and
    /// actions, and a one-hot problem id appended to `c`.
    pub fn mixed() -> Self {
        let max = |f: fn(Problem) -> usize| Problem::ALL.iter().map(|&p| f(p)).max().unwrap_or(1);
        ModelDims {
            state_dim: max(Problem::state_dim),
            action_dim: max(Problem::action_dim),
            param_dim: max(Problem::param_dim) + Problem::ALL.len(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskContext {
    pub spec: TaskSpec,
    pub split: SplitKind,
    pub dataset: TaskDataset,
    pub norm: StateNorm,
    pub rtg_scale: f64,
    pub dims: ModelDims,
    /// Whether `c` carries a one-hot problem id.
    pub tag_problem: bool,
    pub baselines: Baselines,
}

fn pad(v: &[f64], len: usize) -> Vec<f64> {
    let mut out = v.to_vec();
    out.resize(len, 0.0);
    out
}

impl TaskContext {
    /// Normalized, zero-padded state as the model sees it.
    pub fn model_state(&self, raw: &[f64]) -> Vec<f64> {
        pad(&self.norm.apply(raw), self.dims.state_dim)
    }

    pub fn model_action(&self, action: &[f64]) -> Vec<f64> {
        pad(action, self.dims.action_dim)
    }

    /// The environment's share of a model action.
    pub fn env_action(&self, model_action: &[f64]) -> Vec<f64> {
        model_action[..self.spec.problem.action_dim()].to_vec()
    }

    /// Task parameter as the model sees it.
    pub fn model_c(&self) -> Vec<f64> {
        if self.tag_problem {
            let mut c = pad(&self.spec.c, self.dims.param_dim - Problem::ALL.len());
            let mut onehot = vec![0.0; Problem::ALL.len()];
            onehot[self.spec.problem.index()] = 1.0;
            c.extend(onehot);
            c
        } else {
            self.spec.c.clone()
        }
    }

    /// Builds this task's prompt for `variant`.
    pub fn prompt<R: Rng + ?Sized>(&self, variant: &PromptVariant, rng: &mut R) -> Result<AssembledPrompt> {
        let spec = TaskSpec { c: self.model_c(), ..self.spec.clone() };
        let mut p = prompts::assemble(variant, &spec, &self.dataset.prompt_pool, &self.norm, rng)?;
        if let Some(t) = p.trajectory.as_mut() {
            for s in &mut t.states {
                s.resize(self.dims.state_dim, 0.0);
            }
            for a in &mut t.actions {
                a.resize(self.dims.action_dim, 0.0);
            }
        }
        Ok(p)
    }
}

/// Training data of a run: one or more problems plus the model dimensions.
#[derive(Clone, Debug)]
pub struct RunData {
    pub problems: Vec<ProblemData>,
    pub dims: ModelDims,
    pub rtg_scales: Vec<f64>,
    pub norms: Vec<StateNorm>,
}

impl RunData {
    /// `rtg_scale` overrides the per-problem default when given.
    pub fn new(problems: Vec<ProblemData>, rtg_scale: Option<f64>) -> Result<Self> {
        if problems.is_empty() {
            return Err(Error::Config("no problem data".into()));
        }
        let dims = if problems.len() == 1 { ModelDims::of(problems[0].split.problem) } else { ModelDims::mixed() };
        if let Some(s) = rtg_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("rtg_scale must be positive, got {s}")));
            }
        }
        let rtg_scales = problems.iter().map(|p| rtg_scale.unwrap_or_else(|| p.default_rtg_scale())).collect();
        let norms = problems.iter().map(ProblemData::pooled_norm).collect();
        Ok(RunData { problems, dims, rtg_scales, norms })
    }

    pub fn is_mixed(&self) -> bool {
        self.problems.len() > 1
    }

    /// Contexts of every task in `kind`, problems in order.
    pub fn contexts(&self, kind: SplitKind) -> Result<Vec<TaskContext>> {
        let mut out = Vec::new();
        for (i, pd) in self.problems.iter().enumerate() {
            let datasets = match kind {
                SplitKind::Train => &pd.train,
                SplitKind::Test => &pd.test,
            };
            for ds in datasets {
                let entry = pd.split.entry(ds.spec.task_id).ok_or_else(|| {
                    Error::Config(format!("task {} of {} missing from the split file", ds.spec.task_id, pd.split.problem))
                })?;
                out.push(TaskContext {
                    spec: pd.split.task_spec(entry),
                    split: kind,
                    dataset: ds.clone(),
                    norm: self.norms[i].clone(),
                    rtg_scale: self.rtg_scales[i],
                    dims: self.dims,
                    tag_problem: self.is_mixed(),
                    baselines: Baselines { expert_return: entry.expert_return, random_return: entry.random_return },
                });
            }
        }
        Ok(out)
    }
}
