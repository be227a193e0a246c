//! Online rollouts with returns-to-go bookkeeping and normalized scores.
//!
//! Episodes of one task advance in lockstep so that the model runs one
//! batched forward pass per environment step. Every row of that pass is
//! computed independently, so results match single-episode rollouts bit
//! for bit.

use mpdt_tensor::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::TaskContext;
use crate::data::SplitKind;
use crate::envs::{self, EnvInstance};
use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelConfig};
use crate::prompts::{AssembledPrompt, PromptVariant};
use crate::train::MetricRow;

/// `100 · (ret − random) / (expert − random)`
pub fn normalized_score(ret: f64, random_ret: f64, expert_ret: f64) -> Result<f64> {
    let span = expert_ret - random_ret;
    if span == 0.0 || !span.is_finite() {
        return Err(Error::Config(format!(
            "degenerate task: expert return {expert_ret} equals random return {random_ret}"
        )));
    }
    Ok((ret - random_ret) / span * 100.0)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of episode `episode` of task `task_id`; independent of the order
/// in which tasks are evaluated.
pub fn episode_seed(base: u64, task_id: usize, episode: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ task_id as u64) ^ episode as u64)
}

/// One running episode with its raw history.
#[derive(Clone, Debug)]
pub struct Episode {
    pub env: EnvInstance,
    pub seed: u64,
    pub prompt: AssembledPrompt,
    /// Raw observed states `s_0 .. s_t`.
    pub states: Vec<Vec<f64>>,
    /// Actions taken, as the model sees them (padded).
    pub actions: Vec<Vec<f64>>,
    /// `R̂_0 .. R̂_t`, starting at the target return.
    pub rtg: Vec<f64>,
    pub rewards: Vec<f64>,
    pub total: f64,
    /// Target return minus every reward observed, including the last one.
    pub remaining: f64,
}

impl Episode {
    pub fn steps(&self) -> usize {
        self.states.len()
    }
}

/// Anything that picks actions for a batch of lockstep episodes.
pub trait ActionSource {
    /// Actions in environment dimensions, one per episode.
    fn act(&mut self, task: &TaskContext, episodes: &[Episode]) -> Result<Vec<Vec<f64>>>;

    /// Prompt attached to each episode; the default is empty.
    fn prompt(&mut self, _task: &TaskContext, _seed: u64) -> Result<AssembledPrompt> {
        Ok(AssembledPrompt::empty())
    }
}

/// The trained decision transformer.
pub struct ModelPolicy<'a> {
    pub store: &'a ParamStore<f32>,
    pub config: &'a ModelConfig,
    pub variant: &'a PromptVariant,
}

impl ModelPolicy<'_> {
    /// Window of the last K steps of every episode, left padded. The action
    /// slot of the current step is zero; it cannot influence the prediction.
    pub fn window_batch(&self, task: &TaskContext, episodes: &[Episode]) -> Result<Batch> {
        let k = self.config.context_len;
        let mut batch = Batch::new(k);
        for ep in episodes {
            let t = ep.steps() - 1;
            let start = (t + 1).saturating_sub(k);
            let pad = k - (t + 1 - start);
            let mut rtg = vec![0.0; pad];
            let mut states = vec![vec![0.0; task.dims.state_dim]; pad];
            let mut actions = vec![vec![0.0; task.dims.action_dim]; pad];
            let mut steps = vec![0; pad];
            let mut mask = vec![false; pad];
            for i in start..=t {
                rtg.push(ep.rtg[i]);
                states.push(task.model_state(&ep.states[i]));
                actions.push(ep.actions.get(i).cloned().unwrap_or_else(|| vec![0.0; task.dims.action_dim]));
                steps.push(i);
                mask.push(true);
            }
            batch.push(&rtg, &states, &actions, &steps, &mask, task.rtg_scale, ep.prompt.clone())?;
        }
        Ok(batch)
    }
}

impl ActionSource for ModelPolicy<'_> {
    fn act(&mut self, task: &TaskContext, episodes: &[Episode]) -> Result<Vec<Vec<f64>>> {
        let batch = self.window_batch(task, episodes)?;
        let pred = model::predict(self.store, self.config, &batch)?;
        let (k, d_a) = (self.config.context_len, self.config.action_dim);
        (0..episodes.len())
            .map(|row| {
                let off = (row * k + k - 1) * d_a;
                let a = &pred[off..off + d_a];
                if a.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite action for task {} at step {}",
                        task.spec.task_id,
                        episodes[row].steps() - 1
                    )));
                }
                Ok(task.env_action(a))
            })
            .collect()
    }

    fn prompt(&mut self, task: &TaskContext, seed: u64) -> Result<AssembledPrompt> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_6f6d_7074);
        task.prompt(self.variant, &mut rng)
    }
}

/// The scripted expert, which sees the task parameter directly.
pub struct ExpertPolicy;

impl ActionSource for ExpertPolicy {
    fn act(&mut self, task: &TaskContext, episodes: &[Episode]) -> Result<Vec<Vec<f64>>> {
        episodes.iter().map(|ep| envs::expert_action(&task.spec, ep.env.state())).collect()
    }
}

/// Uniform actions over the action box, seeded per episode.
#[derive(Default)]
pub struct RandomPolicy {
    rngs: Vec<ChaCha8Rng>,
}

impl ActionSource for RandomPolicy {
    fn act(&mut self, task: &TaskContext, episodes: &[Episode]) -> Result<Vec<Vec<f64>>> {
        if episodes.first().is_some_and(|e| e.steps() == 1) {
            self.rngs = episodes.iter().map(|e| ChaCha8Rng::seed_from_u64(e.seed ^ 0x72_616e_64)).collect();
        }
        Ok(self.rngs.iter_mut().map(|rng| envs::random_action(task.spec.problem, rng)).collect())
    }
}

/// Runs one episode per seed in lockstep until every episode ends.
pub fn rollout_batch<P: ActionSource + ?Sized>(policy: &mut P, task: &TaskContext, seeds: &[u64]) -> Result<Vec<Episode>> {
    let g = task.spec.target_return;
    let mut episodes = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let env = envs::reset(&task.spec, seed);
        let s0 = env.state().to_vec();
        episodes.push(Episode {
            env,
            seed,
            prompt: policy.prompt(task, seed)?,
            states: vec![s0],
            actions: Vec::new(),
            rtg: vec![g],
            rewards: Vec::new(),
            total: 0.0,
            remaining: g,
        });
    }
    if episodes.is_empty() {
        return Ok(episodes);
    }
    loop {
        let actions = policy.act(task, &episodes)?;
        let mut all_done = true;
        for (ep, a) in episodes.iter_mut().zip(actions) {
            let a = envs::clip_action(&a);
            let step = ep.env.step(&a)?;
            ep.total += step.reward;
            ep.remaining -= step.reward;
            ep.rewards.push(step.reward);
            ep.actions.push(task.model_action(&a));
            if step.done {
                continue;
            }
            all_done = false;
            ep.rtg.push(ep.remaining);
            ep.states.push(step.state);
        }
        if all_done {
            return Ok(episodes);
        }
        if episodes.iter().any(|e| e.env.is_done()) {
            return Err(Error::Contract("lockstep episodes of one task must share a horizon".into()));
        }
    }
}

pub fn rollout_episode<P: ActionSource + ?Sized>(policy: &mut P, task: &TaskContext, seed: u64) -> Result<Episode> {
    Ok(rollout_batch(policy, task, &[seed])?.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Seen,
    Unseen,
}

impl EvalSplit {
    pub fn of(kind: SplitKind) -> Self {
        match kind {
            SplitKind::Train => EvalSplit::Seen,
            SplitKind::Test => EvalSplit::Unseen,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Seen => "seen",
            EvalSplit::Unseen => "unseen",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub problem: String,
    pub task_id: usize,
    pub split: EvalSplit,
    pub mean_return: f64,
    pub normalized_score: f64,
    pub n_episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub split: EvalSplit,
    pub mean: f64,
    pub std: f64,
    pub n_tasks: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: Vec<TaskResult>,
    pub aggregate: Vec<Aggregate>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn from_results(per_task: Vec<TaskResult>) -> Self {
        let mut aggregate = Vec::new();
        for split in [EvalSplit::Seen, EvalSplit::Unseen] {
            let scores: Vec<f64> = per_task.iter().filter(|r| r.split == split).map(|r| r.normalized_score).collect();
            if !scores.is_empty() {
                let (mean, std) = mean_std(&scores);
                aggregate.push(Aggregate { split, mean, std, n_tasks: scores.len() });
            }
        }
        EvalReport { per_task, aggregate }
    }

    pub fn mean(&self, split: EvalSplit) -> Option<f64> {
        self.aggregate.iter().find(|a| a.split == split).map(|a| a.mean)
    }

    pub fn merge(mut self, other: EvalReport) -> Self {
        self.per_task.extend(other.per_task);
        EvalReport::from_results(self.per_task)
    }

    pub fn metric_rows(&self, iteration: usize, variant: &str) -> Vec<MetricRow> {
        let row = |split: &str, task_id: String, kind: &str, value: f64| MetricRow {
            iteration,
            phase: "eval".into(),
            variant: variant.into(),
            split: split.into(),
            task_id,
            value_kind: kind.into(),
            value,
        };
        let mut rows = Vec::new();
        for r in &self.per_task {
            let id = format!("{}:{}", r.problem, r.task_id);
            rows.push(row(r.split.name(), id.clone(), "mean_return", r.mean_return));
            rows.push(row(r.split.name(), id, "normalized_score", r.normalized_score));
        }
        for a in &self.aggregate {
            rows.push(row(a.split.name(), "all".into(), "normalized_score", a.mean));
        }
        rows
    }
}

/// Evaluates `policy` on every task with `episodes` rollouts each.
pub fn evaluate_split<P: ActionSource + ?Sized>(
    policy: &mut P,
    tasks: &[TaskContext],
    episodes: usize,
    base_seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Config("episodes_per_task must be at least 1".into()));
    }
    let mut results = Vec::with_capacity(tasks.len());
    for task in tasks {
        let b = task.baselines;
        if !(b.expert_return.is_finite() && b.random_return.is_finite()) {
            return Err(Error::Config(format!("task {} lacks baseline returns", task.spec.task_id)));
        }
        let seeds: Vec<u64> = (0..episodes).map(|e| episode_seed(base_seed, task.spec.task_id, e)).collect();
        let eps = rollout_batch(policy, task, &seeds)?;
        let mean_return = eps.iter().map(|e| e.total).sum::<f64>() / episodes as f64;
        results.push(TaskResult {
            problem: task.spec.problem.name().into(),
            task_id: task.spec.task_id,
            split: EvalSplit::of(task.split),
            mean_return,
            normalized_score: normalized_score(mean_return, b.random_return, b.expert_return)?,
            n_episodes: episodes,
        });
    }
    Ok(EvalReport::from_results(results))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_score_examples() {
        assert_eq!(normalized_score(5.0, 5.0, 10.0).unwrap(), 0.0);
        assert_eq!(normalized_score(10.0, 5.0, 10.0).unwrap(), 100.0);
        assert_eq!(normalized_score(7.5, 5.0, 10.0).unwrap(), 50.0);
        assert!(normalized_score(1.0, 3.0, 3.0).is_err());
    }

    #[test]
    fn episode_seeds_differ() {
        assert_ne!(episode_seed(1, 0, 0), episode_seed(1, 0, 1));
        assert_ne!(episode_seed(1, 0, 0), episode_seed(1, 1, 0));
        assert_eq!(episode_seed(1, 3, 2), episode_seed(1, 3, 2));
    }
}
