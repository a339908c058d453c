use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use irk::checkpoint;
use irk::imageio;
use irk::run::{self, QueryInput};
use irk::RunConfig;
use irk_core::eval::CrossMode;
use irk_core::gradcheck::{run_suite, SUITE_TOLERANCE};
use irk_core::instruct::TaskKind;

#[derive(Parser)]
#[command(name = "irk", version, about = "Instruction-conditioned person retrieval at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint.irk and metrics.json to --out.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Compare analytic gradients of every loss and layer with finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset directory.
    Synth(SynthArgs),
    /// Rank gallery records for one query.
    Retrieve(RetrieveArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base settings when no config file is given.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded, bitwise-reproducible run.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Trad,
    Cc,
    Ctcc,
    Vi,
    T2i,
    Li,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Vis2ir,
    Ir2vis,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory from `irk synth`; defaults to generating in memory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Enabled tasks, repeatable; `all` enables all six (round-robin).
    #[arg(long, value_enum)]
    task: Vec<TaskArg>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TaskArg::All)]
    task: TaskArg,
    /// VI direction; both are reported when omitted.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Search Trad queries against themselves.
    #[arg(long)]
    self_gallery: bool,
    /// Average bank tasks over every phrase.
    #[arg(long)]
    sweep: bool,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt one backward rule to show that the suite catches it.
    #[arg(long, hide = true)]
    inject_fault: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Regenerate images from their seeds on load instead of storing them.
    #[arg(long)]
    inline: bool,
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Query image in the raw image format (not used by t2i).
    #[arg(long)]
    query: Option<PathBuf>,
    /// Instruction sentence, repeatable.
    #[arg(long, conflicts_with = "template")]
    instruction: Vec<String>,
    /// Clothes template image (ctcc).
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    top_n: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn task_kind(t: TaskArg) -> Option<TaskKind> {
    Some(match t {
        TaskArg::Trad => TaskKind::Trad,
        TaskArg::Cc => TaskKind::Cc,
        TaskArg::Ctcc => TaskKind::Ctcc,
        TaskArg::Vi => TaskKind::Vi,
        TaskArg::T2i => TaskKind::T2i,
        TaskArg::Li => TaskKind::Li,
        TaskArg::All => return None,
    })
}

fn tasks(args: &[TaskArg]) -> Vec<TaskKind> {
    if args.contains(&TaskArg::All) {
        return TaskKind::ALL.to_vec();
    }
    args.iter().filter_map(|&t| task_kind(t)).collect()
}

fn cross_mode(m: Option<ModeArg>) -> Option<CrossMode> {
    m.map(|m| match m {
        ModeArg::Vis2ir => CrossMode::Vis2ir,
        ModeArg::Ir2vis => CrossMode::Ir2vis,
    })
}

fn base_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => match c.preset {
            Preset::Desk => RunConfig::desk(),
            Preset::Full => RunConfig::full(),
        },
    };
    if c.deterministic {
        cfg.deterministic = true;
    }
    Ok(cfg)
}

fn emit<T: serde::Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(p) => run::write_json(p, value)?,
        None => stdout(&(serde_json::to_string_pretty(value)? + "\n"))?,
    }
    Ok(())
}

fn stdout(text: &str) -> Result<()> {
    // A closed pipe (`irk eval | head`) is not a failure.
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if a.data.is_some() {
        cfg.data = a.data;
    }
    if !a.task.is_empty() {
        cfg.train.tasks = tasks(&a.task);
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(n) = a.checkpoint_every {
        cfg.checkpoint_every = n;
    }
    if a.out.is_some() {
        cfg.out = a.out;
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    let trainer = run::build_trainer(&cfg)?;
    let outcome = run::train(trainer, &cfg, Some(&out))?;
    run::write_json(&out.join("config.json"), &cfg)?;
    emit(None, &outcome.log.evals)
}

fn eval_config(c: &Common, data: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = base_config(c)?;
    if data.is_some() {
        cfg.data = data;
    }
    if let Some(s) = c.seed {
        cfg.synth.seed = s;
    }
    Ok(cfg)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = eval_config(&a.common, a.data)?;
    let ck = checkpoint::load(&a.checkpoint)?;
    let (ds, images) = run::dataset_for(&cfg)?;
    let reports = if a.self_gallery {
        vec![run::evaluate_self_gallery(&ck.model, &ck.store, &ds, &images, cfg.feature)?]
    } else {
        let t = tasks(&[a.task]);
        run::evaluate_tasks(&ck.model, &ck.store, &ds, &images, cfg.feature, &t, cross_mode(a.mode), a.sweep)?
    };
    emit(a.out.as_deref().or(cfg.out.as_deref()), &reports)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let entries = run_suite(a.seed, a.inject_fault)?;
    let width = entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(4);
    let mut table = format!("{:<width$}  {:>12}  {:>7}  result\n", "case", "max_rel_err", "checked");
    for e in &entries {
        let verdict = if e.passed { "pass" } else { "FAIL" };
        table += &format!("{:<width$}  {:>12.3e}  {:>7}  {verdict}\n", e.name, e.max_rel_err, e.checked);
    }
    stdout(&table)?;
    if let Some(p) = &a.out {
        run::write_json(p, &entries)?;
    }
    let failed = entries.iter().filter(|e| !e.passed).count();
    if failed > 0 {
        bail!("gradcheck: {failed} of {} entries exceed {SUITE_TOLERANCE:e}", entries.len());
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    if let Some(s) = a.common.seed {
        cfg.synth.seed = s;
    }
    let info = run::synth(&cfg, &a.out, a.inline)?;
    emit(None, &info)
}

fn cmd_retrieve(a: RetrieveArgs) -> Result<()> {
    let task = task_kind(a.task).context("retrieve needs a single task, not `all`")?;
    let cfg = eval_config(&a.common, a.data)?;
    let ck = checkpoint::load(&a.checkpoint)?;
    let (ds, images) = run::dataset_for(&cfg)?;
    let image = a.query.as_deref().map(imageio::read).transpose()?;
    let instruction = match (&a.template, a.instruction.is_empty()) {
        (Some(p), _) => QueryInput::Template(imageio::read(p)?),
        (None, false) => QueryInput::Text(a.instruction),
        (None, true) => bail!("retrieve needs --instruction or --template"),
    };
    let hits = run::retrieve(
        &ck.model,
        &ck.store,
        &ds,
        &images,
        cfg.feature,
        task,
        cross_mode(a.mode),
        image.as_ref(),
        &instruction,
        a.top_n,
    )?;
    emit(a.out.as_deref(), &hits)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("error: invalid arguments");
            eprintln!("{line}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Retrieve(a) => cmd_retrieve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
