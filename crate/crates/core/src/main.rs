use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use mpdt::data::{GenConfig, Quality};
use mpdt::eval::{EvalReport, EvalSplit};
use mpdt::pipeline::{self, ProblemSel, RunConfig, SweepCell};
use mpdt::prompts::{PromptTag, PromptVariant};
use mpdt::verify::{self, GradCheckOptions};

/// Set to `quiet` to suppress progress lines, `debug` for per-iteration losses.
const VERBOSITY_VAR: &str = "MPDT_LOG";

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Verbosity {
    Quiet,
    Info,
    Debug,
}

fn verbosity() -> Verbosity {
    match std::env::var(VERBOSITY_VAR).as_deref() {
        Ok("quiet") => Verbosity::Quiet,
        Ok("debug") => Verbosity::Debug,
        _ => Verbosity::Info,
    }
}

macro_rules! info {
    ($($arg:tt)*) => {
        if verbosity() >= Verbosity::Info {
            eprintln!($($arg)*);
        }
    };
}

#[derive(Parser)]
#[command(name = "mpdt", version, about = "Prompted decision transformers on contextual control problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate per-task datasets and the split file.
    GenData(GenDataArgs),
    /// Train one model and write a run directory.
    Train(TrainArgs),
    /// Re-evaluate a run directory.
    Eval(EvalArgs),
    /// Train every prompt variant (or prompt length) for several seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of a tiny double-precision model.
    GradCheck(GradCheckArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    /// Problem name, or `all` for one sub-directory per problem.
    #[arg(long)]
    problem: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    trajectories: usize,
    #[arg(long, default_value_t = 5)]
    prompt_trajectories: usize,
    #[arg(long, default_value = "expert")]
    quality: Quality,
    /// Defaults to the problem's standard split.
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    sparse: bool,
    #[arg(long, default_value_t = 100)]
    baseline_episodes: usize,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Full run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Used when no config is given.
    #[arg(long, default_value = "point_reach")]
    problem: String,
    #[arg(long)]
    variant: Option<PromptTag>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory written by gen-data; generated in memory if absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    quality: Option<Quality>,
    #[arg(long)]
    sparse: bool,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Seen,
    Unseen,
    Both,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Both)]
    split: SplitArg,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    /// Where to write the JSON report; defaults to `eval_<split>.json` in the run directory.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(clap::Args)]
struct AblateArgs {
    #[arg(long, default_value = "point_reach")]
    problem: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,6,8")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Sweep Task-Learned prompt lengths instead of the five variants.
    #[arg(long, value_delimiter = ',')]
    prompt_lengths: Option<Vec<usize>>,
    /// Learned prompt length of the Task-Learned and Pure-Learned variants.
    #[arg(long, default_value_t = 15)]
    prompt_len: usize,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    quality: Option<Quality>,
    #[arg(long)]
    sparse: bool,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    force: bool,
}

#[derive(clap::Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 200)]
    probes: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

const GRAD_TOLERANCE: f64 = 1e-4;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| c.downcast_ref::<mpdt::Error>().is_some_and(mpdt::Error::is_validation));
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    mpdt::Error::Config(msg.into()).into()
}

fn dispatch(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::GenData(a) => gen_data(a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => train(a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => eval(a).map(|_| ExitCode::SUCCESS),
        Command::Ablate(a) => ablate(a).map(|_| ExitCode::SUCCESS),
        Command::GradCheck(a) => grad_check(a),
    }
}

/// Refuses to write into a non-empty directory unless forced.
fn prepare_out(dir: &Path, force: bool) -> anyhow::Result<()> {
    let occupied = dir.exists() && (dir.is_file() || fs::read_dir(dir)?.next().is_some());
    if occupied && !force {
        return Err(usage(format!("{} already exists and is not empty; pass --force to overwrite", dir.display())));
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let sel = ProblemSel::parse(&a.problem)?;
    prepare_out(&a.out, a.force)?;
    let problems = sel.problems();
    for &problem in &problems {
        let (n_train, n_test) = pipeline::default_split(problem);
        let mut cfg = GenConfig::new(problem, a.n_train.unwrap_or(n_train), a.n_test.unwrap_or(n_test));
        cfg.trajectories = a.trajectories;
        cfg.prompt_trajectories = a.prompt_trajectories;
        cfg.quality = a.quality;
        cfg.sparse = a.sparse;
        cfg.seed = a.seed;
        cfg.baseline_episodes = a.baseline_episodes;
        let dir = if problems.len() > 1 { a.out.join(problem.name()) } else { a.out.clone() };
        let data = mpdt::data::generate_problem(&cfg)?;
        data.write(&dir)?;
        info!("{problem}: {} train + {} test tasks written to {}", data.train.len(), data.test.len(), dir.display());
    }
    Ok(())
}

struct Overrides<'a> {
    data: &'a Option<PathBuf>,
    quality: Option<Quality>,
    sparse: bool,
    max_iters: Option<usize>,
}

fn base_config(config: &Option<PathBuf>, problem: &str, o: &Overrides) -> anyhow::Result<RunConfig> {
    let mut cfg = match config {
        Some(path) => RunConfig::read(path)?,
        None => RunConfig::desk(ProblemSel::parse(problem)?, PromptVariant::new(PromptTag::TaskLearned, 15), 1),
    };
    if let Some(dir) = o.data {
        cfg.data.dir = Some(dir.clone());
    }
    if let Some(q) = o.quality {
        cfg.data.quality = q;
    }
    if o.sparse {
        cfg.data.sparse = true;
        cfg.train.sparse_reward = true;
    }
    if let Some(n) = o.max_iters {
        cfg.train.max_iters = n;
        cfg.train.eval_every = cfg.train.eval_every.min(n.max(1));
    }
    Ok(cfg)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let o = Overrides { data: &a.data, quality: a.quality, sparse: a.sparse, max_iters: a.max_iters };
    let mut cfg = base_config(&a.config, &a.problem, &o)?;
    let tag = a.variant.unwrap_or(cfg.train.variant.tag);
    let n = match a.prompt_len {
        Some(n) => n,
        None if !tag.uses_z() => 0,
        None if cfg.train.variant.tag.uses_z() => cfg.train.variant.learned_len,
        None => 15,
    };
    cfg.train.variant = PromptVariant { tag, learned_len: n, ..cfg.train.variant };
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let data = pipeline::load_data(&cfg)?;
    prepare_out(&a.out, a.force)?;
    info!("training {} (n = {}) seed {} for {} iterations", tag, n, cfg.train.seed, cfg.train.max_iters);
    let outcome = pipeline::run(&cfg, data)?;
    pipeline::write_run_dir(&a.out, &cfg, &outcome)?;
    if verbosity() >= Verbosity::Debug {
        for m in outcome.metrics.iter().filter(|m| m.value_kind == "loss") {
            eprintln!("iter {:5} loss {:.6}", m.iteration, m.value);
        }
    }
    print_report(&outcome.report);
    info!("run written to {}", a.out.display());
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!("{:<16} {:>8} {:>7} {:>12} {:>8}", "problem", "task", "split", "return", "score");
    for r in &report.per_task {
        println!(
            "{:<16} {:>8} {:>7} {:>12.3} {:>8.1}",
            r.problem,
            r.task_id,
            r.split.name(),
            r.mean_return,
            r.normalized_score
        );
    }
    for agg in &report.aggregate {
        println!("{} mean {:.1} ± {:.1} over {} tasks", agg.split.name(), agg.mean, agg.std, agg.n_tasks);
    }
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    if a.episodes == 0 {
        return Err(usage("--episodes must be at least 1"));
    }
    let run = pipeline::load_run(&a.run).with_context(|| format!("loading run {}", a.run.display()))?;
    let (splits, name) = match a.split {
        SplitArg::Seen => (vec![EvalSplit::Seen], "seen"),
        SplitArg::Unseen => (vec![EvalSplit::Unseen], "unseen"),
        SplitArg::Both => (vec![EvalSplit::Seen, EvalSplit::Unseen], "both"),
    };
    let report = pipeline::evaluate_run(&run, &splits, a.episodes)?;
    print_report(&report);
    let path = a.report.unwrap_or_else(|| a.run.join(format!("eval_{name}.json")));
    fs::write(&path, mpdt::data::to_json_exact(&report)?).with_context(|| format!("writing {}", path.display()))?;
    info!("report written to {}", path.display());
    Ok(())
}

fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    if a.seeds.is_empty() {
        return Err(usage("--seeds needs at least one seed"));
    }
    let o = Overrides { data: &a.data, quality: a.quality, sparse: a.sparse, max_iters: a.max_iters };
    let base = base_config(&a.config, &a.problem, &o)?;
    let variants = match &a.prompt_lengths {
        Some(lengths) if lengths.is_empty() => return Err(usage("--prompt-lengths needs at least one length")),
        Some(lengths) => pipeline::length_variants(lengths),
        None => pipeline::five_variants(a.prompt_len),
    };
    for (_, v) in &variants {
        base.with_variant(*v).validate()?;
    }
    prepare_out(&a.out, a.force)?;
    let (cells, rows) = pipeline::sweep(&base, &variants, &a.seeds, Some(&a.out), |c: &SweepCell| {
        info!("{} seed {}: unseen {:.1}, seen {:.1}", c.label, c.seed, c.unseen_score, c.seen_score);
    })?;
    let table = a.out.join("ablation.csv");
    pipeline::write_sweep_csv(&table, &rows)?;
    fs::write(a.out.join("cells.json"), mpdt::data::to_json_exact(&cells)?)?;
    println!("{:<24} {:>8} {:>8} {:>6}", "variant", "mean", "std", "seeds");
    for r in &rows {
        println!("{:<24} {:>8.1} {:>8.1} {:>6}", r.label, r.mean, r.std, r.n_seeds);
    }
    info!("table written to {}", table.display());
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> anyhow::Result<ExitCode> {
    if !(a.step > 0.0 && a.step.is_finite()) {
        return Err(usage(format!("--step must be a positive number, got {}", a.step)));
    }
    let opts = GradCheckOptions { probes: a.probes, step: a.step, seed: a.seed, ..GradCheckOptions::default() };
    let (report, _) = verify::grad_check(&opts)?;
    let z_probes = report.probed_params().filter(|p| p.starts_with("prompt_z")).count();
    let worst = report
        .results
        .iter()
        .max_by(|x, y| x.relative_error.total_cmp(&y.relative_error))
        .context("no probes evaluated")?;
    println!("probes: {} ({} in learned prompt blocks)", report.results.len(), z_probes);
    println!("worst: {}[{}] analytic {:.6e} numeric {:.6e}", worst.probe.param, worst.probe.index, worst.analytic, worst.numeric);
    println!("max relative error: {:.3e}", report.max_relative_error);
    if report.max_relative_error < GRAD_TOLERANCE {
        println!("PASS (< {GRAD_TOLERANCE:e})");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL (>= {GRAD_TOLERANCE:e})");
        Ok(ExitCode::from(2))
    }
}
