use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use relab_cli::checks::{report, run_suite, Suite};
use relab_cli::config::{apply_overrides, read_table, resolve_output, set_path, ConfigError, ExperimentConfig};
use relab_cli::runner::{execute, RunStatus, RunSummary};
use relab_cli::sweep::{expand, read_grid_file, run_cells, Axis, SUMMARY};
use relab_cli::{exit_code, BANDIT_DEMO, EXIT_ABORT, EXIT_OK, EXIT_OTHER, OUTPUT_ROOT_ENV};
use toml::{Table, Value};

#[derive(Parser)]
#[command(
    name = "relab",
    version,
    about = "Group-relative policy-gradient lab on exactly solvable tasks"
)]
struct Cli {
    /// Size of the worker pool (defaults to the number of CPUs).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,

    #[command(flatten)]
    common: Overrides,
}

#[derive(Args)]
struct Overrides {
    /// Override a config value, `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,

    /// Override `optimizer.seed`.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train with one config and write a run directory.
    Run(RunArgs),
    /// Run invariant batteries against the brute-force oracles.
    Check {
        /// gradients, masks, identities, scheduler, oracle-consistency or all.
        suite: Suite,
        /// Also write a tab-separated report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the Cartesian product of a grid over a base config.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Grid axis, `key=v1,v2,...` or `key1,key2=[[a1,b1],[a2,b2]]`. Repeatable.
        #[arg(long)]
        grid: Vec<String>,
        /// TOML file with a `[grid]` table of axes.
        #[arg(long)]
        grid_file: Option<PathBuf>,
    },
    /// Offline REINFORCE on the three-armed pitfall bandit.
    BanditDemo {
        #[command(flatten)]
        common: Overrides,
    },
}

fn output_root() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

fn load(base: Table, o: &Overrides) -> anyhow::Result<Table> {
    let mut table = base;
    apply_overrides(&mut table, &o.set)?;
    if let Some(seed) = o.seed {
        set_path(&mut table, "optimizer.seed", Value::Integer(seed as i64))?;
    }
    if let Some(out) = &o.out {
        set_path(&mut table, "output.dir", Value::String(out.display().to_string()))?;
    }
    Ok(table)
}

fn report_run(s: &RunSummary) -> u8 {
    match &s.status {
        RunStatus::Completed => {
            if let Some(m) = &s.last {
                println!(
                    "completed {} steps: mean_reward {:.6}, kl_to_init {:.6}",
                    m.step + 1,
                    m.mean_reward,
                    m.kl_to_init
                );
            } else {
                println!("completed 0 steps");
            }
            println!("run directory: {}", s.dir.display());
            EXIT_OK
        }
        RunStatus::Aborted { step, reason } => {
            eprintln!("numerical abort at step {step}: {reason}");
            eprintln!("diagnostics written to {}", s.dir.display());
            EXIT_ABORT
        }
    }
}

fn cmd_run(args: &RunArgs) -> anyhow::Result<u8> {
    let table = load(read_table(&args.config)?, &args.common)?;
    let cfg = ExperimentConfig::from_table(&table)?;
    let dir = resolve_output(&cfg.output_dir, output_root().as_deref());
    Ok(report_run(&execute(&cfg, &dir)?))
}

fn cmd_check(suite: Suite, out: Option<&Path>) -> anyhow::Result<u8> {
    let results = run_suite(suite)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{}: {} passed, {failed} failed", suite.name(), results.len() - failed);
    if let Some(path) = out {
        std::fs::write(path, report(&results)).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(if failed == 0 { EXIT_OK } else { EXIT_OTHER })
}

fn cmd_sweep(args: &RunArgs, grid: &[String], grid_file: Option<&Path>) -> anyhow::Result<u8> {
    let table = load(read_table(&args.config)?, &args.common)?;
    let base = ExperimentConfig::from_table(&table)?;
    let mut axes = match grid_file {
        Some(p) => read_grid_file(p)?,
        None => Vec::new(),
    };
    let mut errors = Vec::new();
    for g in grid {
        match Axis::parse(g) {
            Ok(a) => axes.push(a),
            Err(ConfigError(e)) => errors.extend(e),
        }
    }
    if !errors.is_empty() {
        return Err(ConfigError(errors).into());
    }
    let cells = expand(&table, &axes)?;
    let out = resolve_output(&base.output_dir, output_root().as_deref());
    println!("sweep: {} cells into {}", cells.len(), out.display());
    let summaries = run_cells(&cells, &out)?;
    let aborted = summaries
        .iter()
        .filter(|s| matches!(s.status, RunStatus::Aborted { .. }))
        .count();
    print!("{}", std::fs::read_to_string(out.join(SUMMARY))?);
    if aborted > 0 {
        eprintln!("{aborted} of {} cells aborted", cells.len());
        return Ok(EXIT_ABORT);
    }
    Ok(EXIT_OK)
}

fn cmd_bandit_demo(o: &Overrides) -> anyhow::Result<u8> {
    let table = load(BANDIT_DEMO.parse().expect("preset is valid TOML"), o)?;
    let cfg = ExperimentConfig::from_table(&table)?;
    let dir = resolve_output(&cfg.output_dir, output_root().as_deref());
    let s = execute(&cfg, &dir)?;
    let metrics = relab_core::trainer::read_metrics(&dir.join(relab_cli::runner::METRICS))?;
    let every = (metrics.len() / 10).max(1);
    println!("{:>6}  {:>12}  {:>12}", "step", "mean_reward", "kl_to_init");
    for m in metrics
        .iter()
        .filter(|m| (m.step as usize).is_multiple_of(every) || m.step as usize + 1 == metrics.len())
    {
        println!("{:>6}  {:>12.6}  {:>12.6}", m.step, m.mean_reward, m.kl_to_init);
    }
    if let Some(p) = &s.final_root_probs {
        let shown: Vec<String> = p.iter().map(|x| format!("{x:.6}")).collect();
        println!("final π = [{}]", shown.join(", "));
    }
    Ok(report_run(&s))
}

fn dispatch(cli: &Cli) -> anyhow::Result<u8> {
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Check { suite, out } => cmd_check(*suite, out.as_deref()),
        Command::Sweep { run, grid, grid_file } => cmd_sweep(run, grid, grid_file.as_deref()),
        Command::BanditDemo { common } => cmd_bandit_demo(common),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(relab_cli::EXIT_CONFIG);
        }
        pool = pool.num_threads(w);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(EXIT_OTHER);
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
