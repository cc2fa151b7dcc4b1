use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use funmatch::harness::{
    self, config, MetricsRow, PatienceFile, RunConfig, SweepFile, METRICS_HEADER,
};
use funmatch::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "funmatch",
    version,
    about = "Function-matching knowledge distillation at desk scale"
)]
struct Cli {
    /// Run, sweep or patience config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; runs go to <out>/<run_id>/.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Worker threads for matrix kernels and preconditioner roots.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network from labels.
    TrainTeacher,
    /// Distill the configured teacher(s) into the student.
    Distill,
    /// Evaluate a checkpoint on the config's held-out splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run a temperature/lr/wd grid and pick the best per epoch budget.
    Sweep,
    /// Distill at several epoch budgets and tabulate final test accuracy.
    Patience,
    /// Collect the final rows of every run under --out into summary.csv.
    ReportCsv,
}

fn need_config(cli: &Cli) -> Result<&Path> {
    cli.config
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --config <path>".into()))
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(need_config(cli)?)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_rows(rows: &[MetricsRow]) {
    println!("{METRICS_HEADER}");
    for r in rows {
        println!(
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.epoch,
            r.split,
            r.loss,
            r.top1,
            r.agreement.map(|a| a.to_string()).unwrap_or_default(),
            r.lr,
            r.wall_s
        );
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads {n}: {e}")))?;
    }
    match &cli.command {
        Command::TrainTeacher | Command::Distill => {
            let cfg = run_config(cli)?;
            let outcome = if matches!(cli.command, Command::TrainTeacher) {
                harness::train_teacher(&cfg, &cli.out)?
            } else {
                harness::distill(&cfg, &cli.out)?
            };
            print_rows(&funmatch::harness::metrics::final_rows(&outcome.rows));
            eprintln!("checkpoint: {}", outcome.checkpoint_path.display());
        }
        Command::Eval { checkpoint } => {
            let cfg = run_config(cli)?;
            print_rows(&harness::evaluate_checkpoint(&cfg, checkpoint)?);
        }
        Command::Sweep => {
            let mut file: SweepFile = config::load_json(need_config(cli)?)?;
            if let Some(s) = cli.seed {
                file.base.seed = s;
            }
            let report = harness::sweep(&file.sweep, &file.base, &cli.out)?;
            println!(
                "{}",
                std::fs::read_to_string(report.dir.join("best.csv"))
                    .map_err(|e| Error::io(report.dir.join("best.csv"), e))?
                    .trim_end()
            );
        }
        Command::Patience => {
            let mut file: PatienceFile = config::load_json(need_config(cli)?)?;
            if let Some(s) = cli.seed {
                file.base.seed = s;
            }
            let report = harness::patience(
                &file.patience_id,
                &file.epochs,
                &file.base,
                file.sweep.as_ref(),
                &cli.out,
            )?;
            let table = report.dir.join("patience.csv");
            println!(
                "{}",
                std::fs::read_to_string(&table)
                    .map_err(|e| Error::io(&table, e))?
                    .trim_end()
            );
        }
        Command::ReportCsv => {
            let path = harness::report_csv(&cli.out)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
