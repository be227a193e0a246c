//! Pre-norm causal transformer over `(R̂, s, a)` triples with a prompt prefix.

use mpdt_tensor::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::prompts::{self, AssembledPrompt, PromptTag, PromptVariant};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrder {
    /// `[z1, c, z2, c, z3, c]`
    #[default]
    Interleaved,
    /// `[c, c, c, z1, z2, z3]`
    Grouped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub context_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub dropout: f64,
    pub state_dim: usize,
    pub action_dim: usize,
    pub param_dim: usize,
    pub max_timestep: usize,
    #[serde(default)]
    pub prompt_order: PromptOrder,
    /// Learned position embeddings on c/z prompt tokens.
    #[serde(default = "yes")]
    pub prompt_pos_embedding: bool,
    /// Timestep embeddings (0..H) on trajectory-prompt tokens.
    #[serde(default = "yes")]
    pub traj_prompt_timesteps: bool,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("context_len", self.context_len),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("embed_dim", self.embed_dim),
            ("state_dim", self.state_dim),
            ("action_dim", self.action_dim),
            ("param_dim", self.param_dim),
            ("max_timestep", self.max_timestep),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    PromptZ,
    PromptC,
    PromptRtg,
    PromptState,
    PromptAction,
    Rtg,
    State,
    Action,
}

/// A batch of K-step windows, one prompt per row. Flat arrays are
/// row-major `[B, K, ..]`; returns-to-go are already scaled.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rows: usize,
    pub k: usize,
    pub rtg: Vec<f64>,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub mask: Vec<bool>,
    pub prompts: Vec<AssembledPrompt>,
}

impl Batch {
    pub fn new(k: usize) -> Self {
        Batch {
            rows: 0,
            k,
            rtg: Vec::new(),
            states: Vec::new(),
            actions: Vec::new(),
            timesteps: Vec::new(),
            mask: Vec::new(),
            prompts: Vec::new(),
        }
    }

    /// Appends one window. All slices hold exactly `k` steps.
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        rtg: &[f64],
        states: &[Vec<f64>],
        actions: &[Vec<f64>],
        timesteps: &[usize],
        mask: &[bool],
        rtg_scale: f64,
        prompt: AssembledPrompt,
    ) -> Result<()> {
        let k = self.k;
        if [rtg.len(), states.len(), actions.len(), timesteps.len(), mask.len()].iter().any(|&n| n != k) {
            return Err(Error::Contract(format!("window does not have exactly K = {k} steps")));
        }
        self.rtg.extend(rtg.iter().map(|r| r / rtg_scale));
        self.states.extend(states.iter().flatten());
        self.actions.extend(actions.iter().flatten());
        self.timesteps.extend_from_slice(timesteps);
        self.mask.extend_from_slice(mask);
        self.prompts.push(prompt);
        self.rows += 1;
        Ok(())
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Embedded sequence `[B, L, h]` with its attention validity and roles.
#[derive(Debug)]
pub struct TokenSequence {
    pub embeddings: Var,
    pub rows: usize,
    /// `[B, L]`, true = real token.
    pub attention_mask: Vec<bool>,
    /// Timestep of each trajectory token, `[B, 3K]`.
    pub step_index: Vec<usize>,
    pub token_role: Vec<TokenRole>,
    pub prompt_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_role.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_role.is_empty()
    }
}

/// Lower-triangular allow pattern of a `len_prompt + 3K` sequence, flat
/// row-major: entry `i * L + j` is true iff `j <= i`.
pub fn causal_mask(len_prompt: usize, k: usize) -> Vec<bool> {
    let l = len_prompt + 3 * k;
    (0..l * l).map(|p| p % l <= p / l).collect()
}

/// Restricts `mask` so that invalid tokens attend nowhere and are attended
/// by nothing.
pub fn apply_padding(mask: &mut [bool], valid: &[bool]) {
    let l = valid.len();
    for i in 0..l {
        for j in 0..l {
            if !valid[i] || !valid[j] {
                mask[i * l + j] = false;
            }
        }
    }
}

fn normal_tensor<T: Scalar>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let normal = Normal::new(0.0, 0.02).expect("valid normal");
    let n = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Ok(Tensor::from_f64(shape, &values)?)
}

fn add_linear<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    store.insert(format!("{name}.weight"), normal_tensor(vec![d_in, d_out], rng)?)?;
    store.insert(format!("{name}.bias"), Tensor::zeros(vec![d_out])?)?;
    Ok(())
}

fn add_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, h: usize) -> Result<()> {
    store.insert(format!("{name}.gain"), Tensor::from_f64(vec![h], &vec![1.0; h])?)?;
    store.insert(format!("{name}.bias"), Tensor::zeros(vec![h])?)?;
    Ok(())
}

fn uses_prompt_pos(config: &ModelConfig, variant: &PromptVariant) -> bool {
    config.prompt_pos_embedding
        && matches!(variant.tag, PromptTag::TaskLearned | PromptTag::Task | PromptTag::PureLearned)
        && variant.prompt_len() > 0
}

/// Seed of the learned-prompt stream, independent of the weight stream.
pub fn prompt_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_0f_2a_b1ac_u64
}

/// Creates all parameters of a variant. Weights come from one stream
/// seeded by `seed`; the learned prompt blocks come last from their own
/// stream, so a zero-length prompt leaves every other tensor unchanged.
pub fn init_params<T: Scalar>(config: &ModelConfig, variant: &PromptVariant, seed: u64) -> Result<ParamStore<T>> {
    config.validate()?;
    variant.validate()?;
    let h = config.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    add_linear(&mut store, "embed_rtg", 1, h, &mut rng)?;
    add_linear(&mut store, "embed_state", config.state_dim, h, &mut rng)?;
    add_linear(&mut store, "embed_action", config.action_dim, h, &mut rng)?;
    store.insert("embed_timestep", normal_tensor(vec![config.max_timestep, h], &mut rng)?)?;
    if variant.tag.uses_c() {
        add_linear(&mut store, "embed_param", config.param_dim, h, &mut rng)?;
    }
    if uses_prompt_pos(config, variant) {
        store.insert("embed_prompt_pos", normal_tensor(vec![variant.prompt_len(), h], &mut rng)?)?;
    }
    for i in 0..config.n_layers {
        let p = format!("layers.{i}");
        add_norm(&mut store, &format!("{p}.ln1"), h)?;
        for proj in ["query", "key", "value", "out"] {
            let name = format!("{p}.attn.{proj}");
            if proj == "key" {
                // a key bias shifts every score of a query equally and softmax cancels it
                store.insert(format!("{name}.weight"), normal_tensor(vec![h, h], &mut rng)?)?;
            } else {
                add_linear(&mut store, &name, h, h, &mut rng)?;
            }
        }
        add_norm(&mut store, &format!("{p}.ln2"), h)?;
        add_linear(&mut store, &format!("{p}.mlp.fc1"), h, 4 * h, &mut rng)?;
        add_linear(&mut store, &format!("{p}.mlp.fc2"), 4 * h, h, &mut rng)?;
    }
    add_norm(&mut store, "ln_f", h)?;
    add_linear(&mut store, "action_head", h, config.action_dim, &mut rng)?;
    prompts::init_learned_prompt(&mut store, variant.n(), h, prompt_seed(seed))?;
    Ok(store)
}

fn constant<T: Scalar>(tape: &mut Tape<T>, shape: Vec<usize>, values: &[f64]) -> Result<Var> {
    Ok(tape.constant_from(shape, values.iter().map(|&v| T::from_f64(v)).collect())?)
}

fn linear<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.weight"))?;
    let y = tape.matmul(x, w)?;
    let bias = format!("{name}.bias");
    if !store.contains(&bias) {
        return Ok(y);
    }
    let b = tape.param(store, &bias)?;
    Ok(tape.add(y, b)?)
}

fn layer_norm<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{name}.gain"))?;
    let b = tape.param(store, &format!("{name}.bias"))?;
    Ok(tape.layer_norm(x, g, b, 1e-5)?)
}

/// Embeds `steps` interleaved `(R̂, s, a)` triples per row into `[B, 3·steps, h]`.
#[allow(clippy::too_many_arguments)]
fn embed_triples<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    config: &ModelConfig,
    rows: usize,
    steps: usize,
    rtg: &[f64],
    states: &[f64],
    actions: &[f64],
    timesteps: Option<&[usize]>,
) -> Result<Var> {
    let h = config.embed_dim;
    let r = constant(tape, vec![rows, steps, 1], rtg)?;
    let s = constant(tape, vec![rows, steps, config.state_dim], states)?;
    let a = constant(tape, vec![rows, steps, config.action_dim], actions)?;
    let mut r = linear(tape, store, "embed_rtg", r)?;
    let mut s = linear(tape, store, "embed_state", s)?;
    let mut a = linear(tape, store, "embed_action", a)?;
    if let Some(ts) = timesteps {
        if let Some(&bad) = ts.iter().find(|&&t| t >= config.max_timestep) {
            return Err(Error::Contract(format!("timestep {bad} exceeds max_timestep {}", config.max_timestep)));
        }
        let table = tape.param(store, "embed_timestep")?;
        let te = tape.embedding_lookup(table, ts, &[rows, steps])?;
        r = tape.add(r, te)?;
        s = tape.add(s, te)?;
        a = tape.add(a, te)?;
    }
    let joined = tape.concat(&[r, s, a], 2)?;
    Ok(tape.reshape(joined, vec![rows, 3 * steps, h])?)
}

/// Builds the prompt prefix `[B, P, h]` and its roles, or `None` when the
/// prompt is empty.
fn embed_prompt<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    config: &ModelConfig,
    prompts_: &[AssembledPrompt],
) -> Result<Option<(Var, Vec<TokenRole>)>> {
    let first = &prompts_[0];
    let rows = prompts_.len();
    let same_shape = prompts_.iter().all(|p| {
        p.tag == first.tag
            && p.n == first.n
            && p.c.as_ref().map(Vec::len) == first.c.as_ref().map(Vec::len)
            && p.trajectory.as_ref().map(|t| t.steps()) == first.trajectory.as_ref().map(|t| t.steps())
    });
    if !same_shape {
        return Err(Error::Contract("prompts in one batch must share their layout".into()));
    }
    let p_len = first.len();
    if p_len == 0 {
        return Ok(None);
    }
    if let Some(traj) = &first.trajectory {
        let steps = traj.steps();
        let mut rtg = Vec::new();
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut ts = Vec::new();
        for p in prompts_ {
            let t = p.trajectory.as_ref().expect("checked above");
            if t.states.iter().any(|s| s.len() != config.state_dim)
                || t.actions.iter().any(|a| a.len() != config.action_dim)
            {
                return Err(Error::Dimension("trajectory prompt does not match model dimensions".into()));
            }
            rtg.extend_from_slice(&t.rtg);
            states.extend(t.states.iter().flatten());
            actions.extend(t.actions.iter().flatten());
            ts.extend_from_slice(&t.timesteps);
        }
        let ts = config.traj_prompt_timesteps.then_some(ts.as_slice());
        let tokens = embed_triples(tape, store, config, rows, steps, &rtg, &states, &actions, ts)?;
        let roles = (0..steps)
            .flat_map(|_| [TokenRole::PromptRtg, TokenRole::PromptState, TokenRole::PromptAction])
            .collect();
        return Ok(Some((tokens, roles)));
    }

    let c_tok = match &first.c {
        Some(_) => {
            let cs: Vec<&[f64]> = prompts_.iter().map(|p| p.c.as_deref().expect("checked above")).collect();
            Some(prompts::make_task_prompt(tape, store, &cs)?)
        }
        None => None,
    };
    let z = if first.n > 0 { Some(prompts::z_blocks(tape, store, first.n, rows)?) } else { None };
    if let Some(zb) = &z {
        let zh = tape.shape(zb[0])?[2];
        if zh != config.embed_dim {
            return Err(Error::Dimension(format!("prompt width {zh} differs from embed_dim {}", config.embed_dim)));
        }
    }
    let mut parts = Vec::new();
    let mut roles = Vec::new();
    let zrole = vec![TokenRole::PromptZ; first.n];
    match config.prompt_order {
        PromptOrder::Interleaved => {
            for i in 0..3 {
                if let Some(zb) = &z {
                    parts.push(zb[i]);
                    roles.extend_from_slice(&zrole);
                }
                if let Some(c) = c_tok {
                    parts.push(c);
                    roles.push(TokenRole::PromptC);
                }
            }
        }
        PromptOrder::Grouped => {
            if let Some(c) = c_tok {
                parts.extend([c, c, c]);
                roles.extend([TokenRole::PromptC; 3]);
            }
            if let Some(zb) = &z {
                for block in zb {
                    parts.push(*block);
                    roles.extend_from_slice(&zrole);
                }
            }
        }
    }
    let mut tokens = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 1)? };
    if store.contains("embed_prompt_pos") {
        let table = tape.param(store, "embed_prompt_pos")?;
        let rows_in_table = tape.shape(table)?[0];
        if rows_in_table != p_len {
            return Err(Error::Dimension(format!(
                "prompt has {p_len} tokens but the position table has {rows_in_table}"
            )));
        }
        let idx: Vec<usize> = (0..rows).flat_map(|_| 0..p_len).collect();
        let pos = tape.embedding_lookup(table, &idx, &[rows, p_len])?;
        tokens = tape.add(tokens, pos)?;
    }
    Ok(Some((tokens, roles)))
}

/// Embeds prompt and trajectory windows into one token sequence per row.
pub fn embed_segment<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    config: &ModelConfig,
    batch: &Batch,
) -> Result<TokenSequence> {
    let (b, k) = (batch.rows, batch.k);
    if b == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if k > config.context_len {
        return Err(Error::Contract(format!("segment of {k} steps exceeds context length {}", config.context_len)));
    }
    if batch.states.len() != b * k * config.state_dim || batch.actions.len() != b * k * config.action_dim {
        return Err(Error::Dimension(format!(
            "batch does not match state_dim {} / action_dim {}",
            config.state_dim, config.action_dim
        )));
    }
    let traj = embed_triples(
        tape,
        store,
        config,
        b,
        k,
        &batch.rtg,
        &batch.states,
        &batch.actions,
        Some(&batch.timesteps),
    )?;
    let prompt = embed_prompt(tape, store, config, &batch.prompts)?;
    let (embeddings, mut roles) = match prompt {
        Some((p, roles)) => (tape.concat(&[p, traj], 1)?, roles),
        None => (traj, Vec::new()),
    };
    let prompt_len = roles.len();
    roles.extend((0..k).flat_map(|_| [TokenRole::Rtg, TokenRole::State, TokenRole::Action]));
    let l = roles.len();
    let mut attention_mask = Vec::with_capacity(b * l);
    let mut step_index = Vec::with_capacity(b * 3 * k);
    for row in 0..b {
        attention_mask.extend(std::iter::repeat_n(true, prompt_len));
        for t in 0..k {
            let valid = batch.mask[row * k + t];
            attention_mask.extend([valid; 3]);
            step_index.extend([batch.timesteps[row * k + t]; 3]);
        }
    }
    Ok(TokenSequence { embeddings, rows: b, attention_mask, step_index, token_role: roles, prompt_len })
}

fn check_finite<T: Scalar>(tape: &Tape<T>, v: Var, what: &str) -> Result<()> {
    if tape.value(v)?.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite activations after {what}")))
    }
}

/// Runs the transformer and returns predicted actions `[B, K, d_a]`, read
/// at the state-token positions.
pub fn forward<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    config: &ModelConfig,
    tokens: &TokenSequence,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let (b, l, h) = (tokens.rows, tokens.len(), config.embed_dim);
    let k = (l - tokens.prompt_len) / 3;
    let dh = h / config.n_heads;
    let p = config.dropout;

    // blocked[(row, i, j)] is true when i may not attend to j
    let causal = causal_mask(tokens.prompt_len, k);
    let mut blocked = Vec::with_capacity(b * l * l);
    for row in 0..b {
        let valid = &tokens.attention_mask[row * l..(row + 1) * l];
        let mut allow = causal.clone();
        apply_padding(&mut allow, valid);
        blocked.extend(allow.iter().map(|a| !a));
    }

    let mut x = tape.dropout(tokens.embeddings, p, train, rng)?;
    let scale = 1.0 / (dh as f64).sqrt();
    for i in 0..config.n_layers {
        let name = format!("layers.{i}");
        let hn = layer_norm(tape, store, &format!("{name}.ln1"), x)?;
        let q = linear(tape, store, &format!("{name}.attn.query"), hn)?;
        let kk = linear(tape, store, &format!("{name}.attn.key"), hn)?;
        let v = linear(tape, store, &format!("{name}.attn.value"), hn)?;
        let mut heads = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let (qh, kh, vh) = if config.n_heads == 1 {
                (q, kk, v)
            } else {
                (
                    tape.slice(q, 2, head * dh, dh)?,
                    tape.slice(kk, 2, head * dh, dh)?,
                    tape.slice(v, 2, head * dh, dh)?,
                )
            };
            let kt = tape.transpose_last2(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.mul_scalar(scores, scale)?;
            let scores = tape.masked_fill(scores, &blocked, f64::NEG_INFINITY)?;
            let attn = tape.softmax_lastdim(scores)?;
            let attn = tape.dropout(attn, p, train, rng)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 2)? };
        let out = linear(tape, store, &format!("{name}.attn.out"), merged)?;
        let out = tape.dropout(out, p, train, rng)?;
        x = tape.add(x, out)?;

        let hn = layer_norm(tape, store, &format!("{name}.ln2"), x)?;
        let f = linear(tape, store, &format!("{name}.mlp.fc1"), hn)?;
        let f = tape.relu(f)?;
        let f = linear(tape, store, &format!("{name}.mlp.fc2"), f)?;
        let f = tape.dropout(f, p, train, rng)?;
        x = tape.add(x, f)?;
        check_finite(tape, x, &format!("layer {i}"))?;
    }
    let x = layer_norm(tape, store, "ln_f", x)?;
    let traj = if tokens.prompt_len > 0 { tape.slice(x, 1, tokens.prompt_len, 3 * k)? } else { x };
    let triples = tape.reshape(traj, vec![b, k, 3 * h])?;
    let state_hidden = tape.slice(triples, 2, h, h)?;
    let pred = linear(tape, store, "action_head", state_hidden)?;
    check_finite(tape, pred, "action_head")?;
    Ok(pred)
}

/// Mean over valid steps of the squared action error summed over action
/// dimensions. Padded steps contribute neither loss nor gradient.
pub fn bc_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
    let shape = tape.shape(pred)?.to_vec();
    let d_a = *shape.last().expect("prediction has dimensions");
    let total: usize = shape.iter().product();
    if target.len() != total || mask.len() * d_a != total {
        return Err(Error::Dimension(format!("target/mask do not match prediction shape {shape:?}")));
    }
    let n_valid = mask.iter().filter(|&&m| m).count();
    if n_valid == 0 {
        return Err(Error::Contract("loss mask selects no step".into()));
    }
    let padded: Vec<bool> = mask.iter().flat_map(|&m| std::iter::repeat_n(!m, d_a)).collect();
    let clean: Vec<f64> = target.iter().zip(&padded).map(|(&t, &p)| if p { 0.0 } else { t }).collect();
    let pred = tape.masked_fill(pred, &padded, 0.0)?;
    let target = constant(tape, shape.clone(), &clean)?;
    let mse = tape.mean_squared_error(pred, target)?;
    Ok(tape.mul_scalar(mse, total as f64 / n_valid as f64)?)
}

/// Embeds, runs the model and returns the loss of a batch.
pub fn batch_loss<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    config: &ModelConfig,
    batch: &Batch,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let tokens = embed_segment(tape, store, config, batch)?;
    let pred = forward(tape, store, config, &tokens, train, rng)?;
    bc_loss(tape, pred, &batch.actions, &batch.mask)
}

/// Predicted actions `[B, K, d_a]` as plain numbers, without recording
/// gradients into any store.
pub fn predict<T: Scalar>(store: &ParamStore<T>, config: &ModelConfig, batch: &Batch) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tokens = embed_segment(&mut tape, store, config, batch)?;
    let pred = forward(&mut tape, store, config, &tokens, false, &mut rng)?;
    let out = tape.value(pred)?.iter().map(|v| v.as_f64()).collect();
    tape.reset();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_examples() {
        assert_eq!(causal_mask(0, 1), vec![true, false, false, true, true, false, true, true, true]);
        let m = causal_mask(3, 2);
        let l = 9;
        assert_eq!((0..l).filter(|&j| m[3 * l + j]).count(), 4);
        let mut m = causal_mask(0, 2);
        apply_padding(&mut m, &[false, false, false, true, true, true]);
        for j in 0..6 {
            assert!(!m[j] && !m[j * 6] && !m[6 + j] && !m[j * 6 + 1]);
        }
    }

    #[test]
    fn bc_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant_from(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        let l = bc_loss(&mut tape, p, &[0.0, 0.0], &[true]).unwrap();
        assert_eq!(tape.value(l).unwrap(), &[1.0]);

        let p = tape.constant_from(vec![1, 3, 1], vec![1.0, 9.0, 3f64.sqrt()]).unwrap();
        let l = bc_loss(&mut tape, p, &[0.0, 0.0, 0.0], &[true, false, true]).unwrap();
        assert!((tape.value(l).unwrap()[0] - 2.0).abs() < 1e-12);

        let p = tape.constant_from(vec![1, 1, 1], vec![1.0]).unwrap();
        assert!(matches!(bc_loss(&mut tape, p, &[0.0], &[false]), Err(Error::Contract(_))));
    }
}
