use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iadd::config::Config;
use iadd::distill::Mode;
use iadd::eval::EvalReport;
use iadd::pipeline::{cmd_analyze, cmd_distill, cmd_eval, cmd_teach, distilled_lead};
use iadd::Error;

/// Dataset distillation by importance-aware trajectory matching.
#[derive(Parser)]
#[command(name = "iadd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or reuse) the teacher trajectories.
    Teach(Common),
    /// Distill a small synthetic set from the teacher trajectories.
    Distill(Common),
    /// Train fresh students on the latest checkpoint and compare with baselines.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Exit with status 3 when the distilled set does not beat the random
        /// baseline by `eval.assert_margin` points on the distillation architecture.
        #[arg(long = "assert")]
        assert_margin: bool,
    },
    /// Relate the learned weights to the student/teacher differences.
    Analyze(Common),
}

#[derive(Args)]
struct Common {
    /// Configuration file; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `distill.mode`.
    #[arg(long)]
    mode: Option<Mode>,
}

enum Failure {
    Config(String),
    Runtime(String),
    Threshold(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load(common: &Common) -> Result<Config, Failure> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
        cfg.distill.seed = cfg.seed_for("distill");
    }
    if let Some(mode) = common.mode {
        cfg.distill.mode = mode;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_reports(reports: &[EvalReport]) {
    for r in reports {
        println!("{r}");
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Teach(common) => {
            let cfg = load(&common)?;
            let s = cmd_teach(&cfg, &common.out)?;
            println!("reused {} trajectories, trained {}", s.reused, s.trained);
        }
        Command::Distill(common) => {
            let cfg = load(&common)?;
            let s = cmd_distill(&cfg, &common.out)?;
            println!(
                "{} iterations ({} aborted), final loss {:.6}, alpha {:.6}",
                s.iterations,
                s.aborted,
                s.losses.last().copied().unwrap_or(f64::NAN),
                s.alpha
            );
            println!("report: {}", s.report.display());
            if let Some(last) = s.checkpoints.last() {
                println!("checkpoint: {}", last.display());
            }
        }
        Command::Eval { common, assert_margin } => {
            let cfg = load(&common)?;
            let reports = cmd_eval(&cfg, &common.out)?;
            print_reports(&reports);
            if assert_margin {
                let arch = cfg.arch()?.label();
                match distilled_lead(&reports, &arch) {
                    Some(lead) if lead >= cfg.eval.assert_margin => {
                        println!("distilled leads random by {lead:.2} points on {arch}");
                    }
                    Some(lead) => {
                        return Err(Failure::Threshold(format!(
                            "distilled leads random by {lead:.2} points on {arch}, {} required",
                            cfg.eval.assert_margin
                        )))
                    }
                    None => {
                        return Err(Failure::Config(format!(
                            "--assert needs distilled and random results on {arch}; enable eval.random_baseline and list it in eval.archs"
                        )))
                    }
                }
            }
        }
        Command::Analyze(common) => {
            let cfg = load(&common)?;
            let a = cmd_analyze(&cfg, &common.out)?;
            println!("{} dimensions written to {}", a.rows.len(), Path::new(&common.out).join("analysis").display());
            println!("decile  mean|diff|     mean w");
            for d in &a.deciles {
                println!("{:>6}  {:>11.4e}  {:>9.6}", d.decile, d.mean_difference, d.mean_weight);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            log::error!("configuration error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            log::error!("{m}");
            ExitCode::from(2)
        }
        Err(Failure::Threshold(m)) => {
            log::error!("{m}");
            ExitCode::from(3)
        }
    }
}
