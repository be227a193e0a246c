#![allow(dead_code)]

use mpdt::model::{Batch, ModelConfig, PromptOrder};
use mpdt::prompts::{AssembledPrompt, PromptTag, PromptVariant, TrajectoryPrompt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config(k: usize) -> ModelConfig {
    ModelConfig {
        context_len: k,
        n_layers: 2,
        n_heads: 2,
        embed_dim: 16,
        dropout: 0.1,
        state_dim: 3,
        action_dim: 2,
        param_dim: 2,
        max_timestep: 40,
        prompt_order: PromptOrder::Interleaved,
        prompt_pos_embedding: true,
        traj_prompt_timesteps: true,
    }
}

/// One window of raw step data.
#[derive(Clone, Debug)]
pub struct Window {
    pub rtg: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub timesteps: Vec<usize>,
    pub mask: Vec<bool>,
}

pub fn random_window(config: &ModelConfig, k: usize, start: usize, rng: &mut ChaCha8Rng) -> Window {
    let mut vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    Window {
        rtg: vec(k),
        states: (0..k).map(|_| vec(config.state_dim)).collect(),
        actions: (0..k).map(|_| vec(config.action_dim)).collect(),
        timesteps: (start..start + k).collect(),
        mask: vec![true; k],
    }
}

impl Window {
    /// Adds `p` padded steps in front.
    pub fn left_padded(&self, p: usize, config: &ModelConfig) -> Window {
        let mut w = Window {
            rtg: vec![0.0; p],
            states: vec![vec![0.0; config.state_dim]; p],
            actions: vec![vec![0.0; config.action_dim]; p],
            timesteps: vec![0; p],
            mask: vec![false; p],
        };
        w.rtg.extend(&self.rtg);
        w.states.extend(self.states.iter().cloned());
        w.actions.extend(self.actions.iter().cloned());
        w.timesteps.extend(&self.timesteps);
        w.mask.extend(&self.mask);
        w
    }

    pub fn len(&self) -> usize {
        self.rtg.len()
    }
}

pub fn prompt_for(variant: &PromptVariant, c: &[f64], rng: &mut ChaCha8Rng, config: &ModelConfig) -> AssembledPrompt {
    match variant.tag {
        PromptTag::TaskLearned | PromptTag::Task => {
            AssembledPrompt { tag: variant.tag, c: Some(c.to_vec()), n: variant.n(), trajectory: None }
        }
        PromptTag::PureLearned => AssembledPrompt { tag: variant.tag, c: None, n: variant.n(), trajectory: None },
        PromptTag::Trajectory => {
            let h = variant.traj_seg_len * variant.traj_episodes;
            let w = random_window(config, h, 0, rng);
            AssembledPrompt {
                tag: variant.tag,
                c: None,
                n: 0,
                trajectory: Some(TrajectoryPrompt {
                    rtg: w.rtg,
                    states: w.states,
                    actions: w.actions,
                    timesteps: (0..h).map(|t| t % variant.traj_seg_len).collect(),
                }),
            }
        }
        PromptTag::None => AssembledPrompt::empty(),
    }
}

pub fn batch_of(windows: &[(Window, AssembledPrompt)]) -> Batch {
    let k = windows[0].0.len();
    let mut batch = Batch::new(k);
    for (w, p) in windows {
        batch.push(&w.rtg, &w.states, &w.actions, &w.timesteps, &w.mask, 1.0, p.clone()).expect("well-formed window");
    }
    batch
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const ALL_TAGS: [PromptTag; 5] =
    [PromptTag::TaskLearned, PromptTag::Task, PromptTag::PureLearned, PromptTag::Trajectory, PromptTag::None];

pub fn variant_of(tag: PromptTag) -> PromptVariant {
    let n = if tag.uses_z() { 3 } else { 0 };
    PromptVariant { traj_seg_len: 3, ..PromptVariant::new(tag, n) }
}

pub fn small_run_data(problem: mpdt::envs::Problem, n_train: usize, n_test: usize, trajectories: usize) -> mpdt::context::RunData {
    let cfg = mpdt::data::GenConfig {
        trajectories,
        prompt_trajectories: 2,
        baseline_episodes: 20,
        ..mpdt::data::GenConfig::new(problem, n_train, n_test)
    };
    let data = mpdt::data::generate_problem(&cfg).expect("generation succeeds");
    mpdt::context::RunData::new(vec![data], None).expect("valid run data")
}

/// Model sized for a problem, small enough for quick tests.
pub fn model_for(problem: mpdt::envs::Problem, k: usize) -> ModelConfig {
    ModelConfig {
        state_dim: problem.state_dim(),
        action_dim: problem.action_dim(),
        param_dim: problem.param_dim(),
        max_timestep: 64,
        dropout: 0.0,
        ..small_config(k)
    }
}

pub fn train_config(problem: mpdt::envs::Problem, variant: PromptVariant, seed: u64) -> mpdt::train::TrainConfig {
    mpdt::train::TrainConfig {
        variant,
        model: model_for(problem, 5),
        batch_per_task: 4,
        grad_steps_per_iter: 2,
        max_iters: 3,
        eval_every: 2,
        seed,
        optimizer: mpdt_tensor::AdamConfig { base_lr: 1e-3, warmup_steps: 2, ..mpdt_tensor::AdamConfig::default() },
        rtg_scale: None,
        sparse_reward: false,
    }
}
