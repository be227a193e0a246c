//! End-to-end runs: configuration, data, training with periodic
//! evaluation, run directories and the variant/prompt-length sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use mpdt_tensor::{load_checkpoint, save_checkpoint, AdamConfig, ParamStore};
use serde::{Deserialize, Serialize};

use crate::context::{RunData, TaskContext};
use crate::data::{to_json_exact, GenConfig, ProblemData, Quality, SplitKind, StateNorm};
use crate::envs::Problem;
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, EvalReport, EvalSplit, ModelPolicy};
use crate::model::{ModelConfig, PromptOrder};
use crate::prompts::{PromptTag, PromptVariant};
use crate::train::{self, read_metrics, write_metrics, MetricRow, TrainConfig};

/// A single problem or every problem at once.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ProblemSel {
    One(Problem),
    All,
}

impl ProblemSel {
    pub fn problems(self) -> Vec<Problem> {
        match self {
            ProblemSel::One(p) => vec![p],
            ProblemSel::All => Problem::ALL.to_vec(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(ProblemSel::All)
        } else {
            Ok(ProblemSel::One(s.parse()?))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub trajectories: usize,
    pub prompt_trajectories: usize,
    pub quality: Quality,
    pub sparse: bool,
    pub seed: u64,
    pub baseline_episodes: usize,
    /// Read datasets from here instead of generating them in memory.
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
}

/// Everything that determines a run. Written verbatim into the run
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSel,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Free-form notes on deviations from the reference scale.
    #[serde(default)]
    pub notes: Vec<String>,
}

/// Standard train/test task counts of a problem.
pub fn default_split(problem: Problem) -> (usize, usize) {
    match problem {
        Problem::GridMaze => (21, 5),
        _ => (12, 4),
    }
}

impl RunConfig {
    /// Reference desk-scale configuration.
    pub fn desk(problem: ProblemSel, variant: PromptVariant, seed: u64) -> Self {
        let (n_train, n_test) = match problem {
            ProblemSel::One(p) => default_split(p),
            ProblemSel::All => (12, 4),
        };
        let dims = match problem {
            ProblemSel::One(p) => crate::context::ModelDims::of(p),
            ProblemSel::All => crate::context::ModelDims::mixed(),
        };
        RunConfig {
            problem,
            data: DataConfig {
                n_train,
                n_test,
                trajectories: 50,
                prompt_trajectories: 5,
                quality: Quality::Expert,
                sparse: false,
                seed: 0,
                baseline_episodes: 100,
                dir: None,
            },
            train: TrainConfig {
                variant,
                model: ModelConfig {
                    context_len: 20,
                    n_layers: 3,
                    n_heads: 1,
                    embed_dim: 64,
                    dropout: 0.1,
                    state_dim: dims.state_dim,
                    action_dim: dims.action_dim,
                    param_dim: dims.param_dim,
                    max_timestep: 64,
                    prompt_order: PromptOrder::Interleaved,
                    prompt_pos_embedding: true,
                    traj_prompt_timesteps: true,
                },
                batch_per_task: 16,
                grad_steps_per_iter: 10,
                max_iters: 2000,
                eval_every: 500,
                seed,
                optimizer: AdamConfig { base_lr: 1e-4, warmup_steps: 1000, weight_decay: 1e-4, ..AdamConfig::default() },
                rtg_scale: None,
                sparse_reward: false,
            },
            eval: EvalConfig { episodes: 20, seed: 1000 },
            notes: vec!["warmup scaled from 10^4 to 1000 steps".into()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval.episodes == 0 {
            return Err(Error::Config("eval.episodes must be at least 1".into()));
        }
        if self.train.sparse_reward != self.data.sparse {
            return Err(Error::Config("train.sparse_reward and data.sparse disagree".into()));
        }
        let dims = match self.problem {
            ProblemSel::One(p) => crate::context::ModelDims::of(p),
            ProblemSel::All => crate::context::ModelDims::mixed(),
        };
        let m = &self.train.model;
        if (m.state_dim, m.action_dim, m.param_dim) != (dims.state_dim, dims.action_dim, dims.param_dim) {
            return Err(Error::Config(format!(
                "model dims (s {}, a {}, c {}) do not match the problem (s {}, a {}, c {})",
                m.state_dim, m.action_dim, m.param_dim, dims.state_dim, dims.action_dim, dims.param_dim
            )));
        }
        let horizon = self.problem.problems().iter().map(|p| p.horizon()).max().unwrap_or(0);
        if m.max_timestep < horizon {
            return Err(Error::Config(format!("max_timestep {} below horizon {horizon}", m.max_timestep)));
        }
        if self.train.variant.tag == PromptTag::Trajectory && self.data.prompt_trajectories == 0 {
            return Err(Error::Config("trajectory variant needs prompt_trajectories >= 1".into()));
        }
        Ok(())
    }

    pub fn with_variant(&self, variant: PromptVariant) -> Self {
        let mut c = self.clone();
        c.train.variant = variant;
        c
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c
    }

    pub fn gen_config(&self, problem: Problem) -> GenConfig {
        let (n_train, n_test) = match self.problem {
            ProblemSel::One(_) => (self.data.n_train, self.data.n_test),
            ProblemSel::All => {
                let (a, b) = default_split(problem);
                (self.data.n_train.min(a), self.data.n_test.min(b))
            }
        };
        GenConfig {
            problem,
            n_train,
            n_test,
            trajectories: self.data.trajectories,
            prompt_trajectories: self.data.prompt_trajectories,
            quality: self.data.quality,
            sparse: self.data.sparse,
            seed: self.data.seed,
            baseline_episodes: self.data.baseline_episodes,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), detail: e.to_string() })
    }
}

/// Loads or generates the data a config asks for.
pub fn load_data(cfg: &RunConfig) -> Result<Vec<ProblemData>> {
    let problems = cfg.problem.problems();
    problems
        .iter()
        .map(|&p| match &cfg.data.dir {
            Some(dir) => {
                let sub = if problems.len() > 1 { dir.join(p.name()) } else { dir.clone() };
                let pd = ProblemData::read(&sub)?;
                if pd.split.problem != p {
                    return Err(Error::Config(format!("{} holds {} data, expected {p}", sub.display(), pd.split.problem)));
                }
                if pd.split.sparse != cfg.data.sparse || pd.split.quality != cfg.data.quality {
                    return Err(Error::Config(format!("{} was generated with other quality/sparse flags", sub.display())));
                }
                Ok(pd)
            }
            None => crate::data::generate_problem(&cfg.gen_config(p)),
        })
        .collect()
}

impl TryFrom<String> for ProblemSel {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        ProblemSel::parse(&s)
    }
}

impl From<ProblemSel> for String {
    fn from(p: ProblemSel) -> String {
        match p {
            ProblemSel::One(p) => p.name().to_string(),
            ProblemSel::All => "all".to_string(),
        }
    }
}

/// State a finished run needs to be evaluated again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunState {
    pub norms: Vec<StateNorm>,
    pub rtg_scales: Vec<f64>,
}

pub struct RunOutcome {
    pub store: ParamStore<f32>,
    pub metrics: Vec<MetricRow>,
    pub report: EvalReport,
    pub state: RunState,
}

pub fn evaluate(cfg: &RunConfig, store: &ParamStore<f32>, tasks: &[TaskContext]) -> Result<EvalReport> {
    let mut policy = ModelPolicy { store, config: &cfg.train.model, variant: &cfg.train.variant };
    evaluate_split(&mut policy, tasks, cfg.eval.episodes, cfg.eval.seed)
}

/// Trains one model and evaluates it on both splits after every
/// `eval_every` iterations and at the end.
pub fn run(cfg: &RunConfig, problems: Vec<ProblemData>) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = RunData::new(problems, cfg.train.rtg_scale)?;
    let train_tasks = data.contexts(SplitKind::Train)?;
    let test_tasks = data.contexts(SplitKind::Test)?;
    let variant = cfg.train.variant.tag.cli_name().to_string();
    let mut last_report = EvalReport::default();
    let (store, metrics) = train::train_run(&cfg.train, &train_tasks, |iter, store| {
        let seen = evaluate(cfg, store, &train_tasks)?;
        let unseen = evaluate(cfg, store, &test_tasks)?;
        let report = seen.merge(unseen);
        let rows = report.metric_rows(iter, &variant);
        last_report = report;
        Ok(rows)
    })?;
    Ok(RunOutcome {
        store,
        metrics,
        report: last_report,
        state: RunState { norms: data.norms.clone(), rtg_scales: data.rtg_scales.clone() },
    })
}

pub const CONFIG_FILE: &str = "config.json";
pub const STATE_FILE: &str = "run_state.json";
pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "eval.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_exact(value)?).map_err(|e| Error::io(path, e))
}

pub fn write_run_dir(dir: &Path, cfg: &RunConfig, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    write_json(&dir.join(STATE_FILE), &outcome.state)?;
    save_checkpoint(&outcome.store, &dir.join(MANIFEST_FILE), &dir.join(BLOB_FILE))?;
    write_metrics(&dir.join(METRICS_FILE), &outcome.metrics)?;
    write_json(&dir.join(REPORT_FILE), &outcome.report)
}

pub struct LoadedRun {
    pub config: RunConfig,
    pub state: RunState,
    pub store: ParamStore<f32>,
    pub metrics: Vec<MetricRow>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let config = RunConfig::read(&dir.join(CONFIG_FILE))?;
    let state_path = dir.join(STATE_FILE);
    let state: RunState = serde_json::from_str(&fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?)
        .map_err(|e| Error::Parse { path: state_path.clone(), detail: e.to_string() })?;
    let store = load_checkpoint(&dir.join(MANIFEST_FILE), &dir.join(BLOB_FILE))?;
    let expected = crate::model::init_params::<f32>(&config.train.model, &config.train.variant, 0)?;
    let shapes = |s: &ParamStore<f32>| s.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect::<Vec<_>>();
    if shapes(&store) != shapes(&expected) {
        return Err(Error::Config(format!("checkpoint in {} does not match its config", dir.display())));
    }
    let metrics = read_metrics(&dir.join(METRICS_FILE))?;
    Ok(LoadedRun { config, state, store, metrics })
}

/// Re-evaluates a stored run on the requested splits.
pub fn evaluate_run(run: &LoadedRun, splits: &[EvalSplit], episodes: usize) -> Result<EvalReport> {
    let problems = load_data(&run.config)?;
    let mut data = RunData::new(problems, run.config.train.rtg_scale)?;
    data.norms = run.state.norms.clone();
    data.rtg_scales = run.state.rtg_scales.clone();
    let mut cfg = run.config.clone();
    cfg.eval.episodes = episodes;
    let mut report = EvalReport::default();
    for &split in splits {
        let kind = match split {
            EvalSplit::Seen => SplitKind::Train,
            EvalSplit::Unseen => SplitKind::Test,
        };
        report = report.merge(evaluate(&cfg, &run.store, &data.contexts(kind)?)?);
    }
    Ok(report)
}

/// One cell of a sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub label: String,
    pub seed: u64,
    pub unseen_score: f64,
    pub seen_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

pub const SWEEP_HEADER: [&str; 4] = ["variant", "unseen_mean", "unseen_std", "n_seeds"];

pub fn summarize(cells: &[SweepCell], labels: &[String]) -> Vec<SweepRow> {
    labels
        .iter()
        .map(|label| {
            let scores: Vec<f64> = cells.iter().filter(|c| &c.label == label).map(|c| c.unseen_score).collect();
            let (mean, std) = crate::eval::mean_std(&scores);
            SweepRow { label: label.clone(), mean, std, n_seeds: scores.len() }
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        w.write_record([r.label.clone(), format!("{:?}", r.mean), format!("{:?}", r.std), r.n_seeds.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The five variants compared in the main ablation.
pub fn five_variants(learned_len: usize) -> Vec<(String, PromptVariant)> {
    vec![
        ("task-learned".into(), PromptVariant::new(PromptTag::TaskLearned, learned_len)),
        ("task".into(), PromptVariant::new(PromptTag::Task, 0)),
        ("pure-learned".into(), PromptVariant::new(PromptTag::PureLearned, learned_len)),
        ("trajectory".into(), PromptVariant::new(PromptTag::Trajectory, 0)),
        ("none".into(), PromptVariant::new(PromptTag::None, 0)),
    ]
}

/// Task-Learned variants over a list of prompt lengths.
pub fn length_variants(lengths: &[usize]) -> Vec<(String, PromptVariant)> {
    lengths
        .iter()
        .map(|&n| (format!("task-learned-n{n}"), PromptVariant::new(PromptTag::TaskLearned, n)))
        .collect()
}

/// Trains every variant for every seed on shared data. `out`, when given,
/// receives one run directory per cell.
pub fn sweep(
    base: &RunConfig,
    variants: &[(String, PromptVariant)],
    seeds: &[u64],
    out: Option<&Path>,
    mut on_cell: impl FnMut(&SweepCell),
) -> Result<(Vec<SweepCell>, Vec<SweepRow>)> {
    let data = load_data(base)?;
    let mut cells = Vec::new();
    for (label, variant) in variants {
        for &seed in seeds {
            let cfg = base.with_variant(*variant).with_seed(seed);
            let outcome = run(&cfg, data.clone())?;
            if let Some(dir) = out {
                write_run_dir(&dir.join(format!("{label}_seed{seed}")), &cfg, &outcome)?;
            }
            let cell = SweepCell {
                label: label.clone(),
                seed,
                unseen_score: outcome.report.mean(EvalSplit::Unseen).unwrap_or(f64::NAN),
                seen_score: outcome.report.mean(EvalSplit::Seen).unwrap_or(f64::NAN),
            };
            on_cell(&cell);
            cells.push(cell);
        }
    }
    let labels: Vec<String> = variants.iter().map(|(l, _)| l.clone()).collect();
    let rows = summarize(&cells, &labels);
    Ok((cells, rows))
}
