//! Multi-task behavior cloning of the prompted model.

use mpdt_tensor::{adam_step, AdamConfig, AdamState, ParamStore, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::TaskContext;
use crate::data::{sample_segment, Segment};
use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelConfig};
use crate::prompts::{PromptTag, PromptVariant, Z_NAMES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: PromptVariant,
    pub model: ModelConfig,
    pub batch_per_task: usize,
    pub grad_steps_per_iter: usize,
    pub max_iters: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    /// Overrides the default of max |G| over training tasks.
    #[serde(default)]
    pub rtg_scale: Option<f64>,
    #[serde(default)]
    pub sparse_reward: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        self.model.validate()?;
        if self.batch_per_task == 0 || self.grad_steps_per_iter == 0 || self.max_iters == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "batch_per_task, grad_steps_per_iter, max_iters and eval_every must be positive".into(),
            ));
        }
        if self.optimizer.warmup_steps == 0 {
            return Err(Error::Config("optimizer.warmup_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Gradient norms of the learned prompt observed on the last step, before
/// the optimizer cleared them.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepStats {
    pub loss: f64,
    pub z_grad_norm: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub store: ParamStore<f32>,
    opt: AdamState<f32>,
    rng: ChaCha8Rng,
    tape: Tape<f32>,
    pub last: StepStats,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let store = model::init_params::<f32>(&config.model, &config.variant, config.seed)?;
        let opt = AdamState::new(config.optimizer.clone(), &store)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e37_79b9).wrapping_add(17));
        Ok(Trainer { config, store, opt, rng, tape: Tape::new(), last: StepStats::default() })
    }

    pub fn steps_taken(&self) -> u64 {
        self.opt.step_count()
    }

    /// Builds the combined batch: `batch_per_task` windows from every task,
    /// each paired with its task's prompt.
    pub fn sample_batch(&mut self, tasks: &[TaskContext]) -> Result<Batch> {
        if tasks.is_empty() {
            return Err(Error::Contract("train_step needs at least one task".into()));
        }
        let k = self.config.model.context_len;
        let mut batch = Batch::new(k);
        for task in tasks {
            for _ in 0..self.config.batch_per_task {
                let seg = sample_segment(&task.dataset, k, &task.norm, &mut self.rng)?;
                let prompt = task.prompt(&self.config.variant, &mut self.rng)?;
                push_segment(&mut batch, task, &seg, prompt)?;
            }
        }
        Ok(batch)
    }

    /// One gradient step on `batch`; returns the loss.
    pub fn step_on(&mut self, batch: &Batch) -> Result<f64> {
        let mut drop_rng = ChaCha8Rng::seed_from_u64(self.rng.random());
        let loss = model::batch_loss(&mut self.tape, &self.store, &self.config.model, batch, true, &mut drop_rng)?;
        let value = f64::from(self.tape.value(loss)?[0]);
        if !value.is_finite() {
            self.tape.reset();
            return Err(Error::Numeric(format!("non-finite loss at step {}", self.steps_taken() + 1)));
        }
        self.tape.backward(loss, &mut self.store)?;
        let z_grad_norm = if self.store.contains(Z_NAMES[0]) { self.store.grad_norm("prompt_z") } else { 0.0 };
        adam_step(&mut self.store, &mut self.opt)?;
        self.last = StepStats { loss: value, z_grad_norm };
        Ok(value)
    }

    pub fn train_step(&mut self, tasks: &[TaskContext]) -> Result<f64> {
        let batch = self.sample_batch(tasks)?;
        self.step_on(&batch)
    }
}

pub(crate) fn push_segment(
    batch: &mut Batch,
    task: &TaskContext,
    seg: &Segment,
    prompt: crate::prompts::AssembledPrompt,
) -> Result<()> {
    let states: Vec<Vec<f64>> = seg.states.iter().map(|s| padded(s, task.dims.state_dim)).collect();
    let actions: Vec<Vec<f64>> = seg.actions.iter().map(|a| task.model_action(a)).collect();
    batch.push(&seg.rtg, &states, &actions, &seg.timesteps, &seg.loss_mask, task.rtg_scale, prompt)
}

fn padded(v: &[f64], len: usize) -> Vec<f64> {
    let mut out = v.to_vec();
    out.resize(len, 0.0);
    out
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: usize,
    pub phase: String,
    pub variant: String,
    pub split: String,
    pub task_id: String,
    pub value_kind: String,
    pub value: f64,
}

pub const METRICS_HEADER: [&str; 7] = ["iteration", "phase", "variant", "split", "task_id", "value_kind", "value"];

/// Runs `max_iters` iterations of `grad_steps_per_iter` steps. `eval_hook`
/// is called with the 1-based iteration index every `eval_every`
/// iterations and after the last one, and returns metric rows to log.
pub fn train_run<F>(config: &TrainConfig, tasks: &[TaskContext], mut eval_hook: F) -> Result<(ParamStore<f32>, Vec<MetricRow>)>
where
    F: FnMut(usize, &ParamStore<f32>) -> Result<Vec<MetricRow>>,
{
    if config.variant.tag == PromptTag::Trajectory {
        if let Some(t) = tasks.iter().find(|t| t.dataset.prompt_pool.is_empty()) {
            return Err(Error::Config(format!(
                "trajectory variant needs prompt trajectories, task {} has none",
                t.spec.task_id
            )));
        }
    }
    let mut trainer = Trainer::new(config.clone())?;
    let mut rows = Vec::new();
    let variant = config.variant.tag.cli_name().to_string();
    for iter in 1..=config.max_iters {
        let mut total = 0.0;
        for _ in 0..config.grad_steps_per_iter {
            total += trainer.train_step(tasks).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("iteration {iter}: {m}")),
                other => other,
            })?;
        }
        rows.push(MetricRow {
            iteration: iter,
            phase: "train".into(),
            variant: variant.clone(),
            split: "train".into(),
            task_id: "all".into(),
            value_kind: "loss".into(),
            value: total / config.grad_steps_per_iter as f64,
        });
        if iter % config.eval_every == 0 || iter == config.max_iters {
            rows.extend(eval_hook(iter, &trainer.store)?);
        }
    }
    Ok((trainer.store, rows))
}

pub fn write_metrics(path: &std::path::Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            r.phase.clone(),
            r.variant.clone(),
            r.split.clone(),
            r.task_id.clone(),
            r.value_kind.clone(),
            format!("{:?}", r.value),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_metrics(path: &std::path::Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(Error::Parse { path: path.to_path_buf(), detail: format!("unexpected header {header:?}") });
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
