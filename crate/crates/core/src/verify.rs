//! End-to-end gradient check of a tiny prompted model in double precision.

use mpdt_tensor::{finite_difference_check, select_probes, GradCheckReport, ParamStore, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelConfig, PromptOrder};
use crate::prompts::{AssembledPrompt, PromptTag, PromptVariant};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub probes: usize,
    pub step: f64,
    pub seed: u64,
    pub n_layers: usize,
    pub embed_dim: usize,
    pub context_len: usize,
    pub learned_len: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { probes: 200, step: 1e-5, seed: 0, n_layers: 2, embed_dim: 16, context_len: 4, learned_len: 3 }
    }
}

pub fn tiny_config(opts: &GradCheckOptions) -> ModelConfig {
    ModelConfig {
        context_len: opts.context_len,
        n_layers: opts.n_layers,
        n_heads: 2,
        embed_dim: opts.embed_dim,
        dropout: 0.0,
        state_dim: 3,
        action_dim: 2,
        param_dim: 2,
        max_timestep: 16,
        prompt_order: PromptOrder::Interleaved,
        prompt_pos_embedding: true,
        traj_prompt_timesteps: true,
    }
}

/// Random batch of three windows, the first one left padded.
pub fn random_batch<R: Rng + ?Sized>(config: &ModelConfig, variant: &PromptVariant, rng: &mut R) -> Result<Batch> {
    let k = config.context_len;
    let mut batch = Batch::new(k);
    for row in 0..3 {
        let pad = if row == 0 { k / 2 } else { 0 };
        let mask: Vec<bool> = (0..k).map(|t| t >= pad).collect();
        let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let rtg = uniform(k);
        let states: Vec<Vec<f64>> = (0..k).map(|_| uniform(config.state_dim)).collect();
        let actions: Vec<Vec<f64>> = (0..k).map(|_| uniform(config.action_dim)).collect();
        let c = uniform(config.param_dim);
        let timesteps: Vec<usize> = (0..k).map(|t| if t >= pad { t - pad + row } else { 0 }).collect();
        let prompt = AssembledPrompt {
            tag: variant.tag,
            c: variant.tag.uses_c().then_some(c),
            n: variant.n(),
            trajectory: None,
        };
        batch.push(&rtg, &states, &actions, &timesteps, &mask, 1.0, prompt)?;
    }
    Ok(batch)
}

/// Builds a Task-Learned model in `f64` and compares tape gradients with
/// central differences on `opts.probes` entries spread over every tensor.
pub fn grad_check(opts: &GradCheckOptions) -> Result<(GradCheckReport, ParamStore<f64>)> {
    if opts.probes == 0 {
        return Err(Error::Config("--probes must be at least 1".into()));
    }
    let config = tiny_config(opts);
    let variant = PromptVariant::new(PromptTag::TaskLearned, opts.learned_len);
    let mut store: ParamStore<f64> = model::init_params(&config, &variant, opts.seed)?;
    // move away from the symmetric initial point so every path carries signal
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xfeed);
    for (_, t) in store.iter_mut() {
        for v in t.values_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let batch = random_batch(&config, &variant, &mut rng)?;
    let probes = select_probes(&store, opts.probes, &mut rng);
    let report = finite_difference_check(
        &mut store,
        |tape: &mut Tape<f64>, s: &ParamStore<f64>| -> Result<Var> {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            model::batch_loss(tape, s, &config, &batch, false, &mut r)
        },
        &probes,
        opts.step,
    )?;
    Ok((report, store))
}
