use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gmt_cli::commands::{evaluate_files, format_report, simulate, track, train_model};
use gmt_cli::selftest::{run_selftest, SelftestOptions};
use gmt_cli::{CliError, Result, RunConfig};
use gmt_core::metrics::EvalConfig;

#[derive(Parser)]
#[command(name = "gmt", version, about = "Multi-camera multi-target tracking with a learned association model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate ground truth and detections from a scenario.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the association model on simulated scenes.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Weights file; defaults to `paths.weights` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Track a detection file.
    Track {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Evaluate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Run the built-in oracle checks.
    Selftest {
        #[arg(long, hide = true)]
        inject_gradient_fault: bool,
    },
}

fn or_config(arg: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    arg.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("no {what} path: pass --{what} or set paths.{what} in the config")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Simulate { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let o = simulate(&cfg, &out)?;
            println!("wrote {} and {}", o.gt.display(), o.detections.display());
        }
        Cmd::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let out = or_config(out, &cfg.paths.weights, "weights")?;
            let s = train_model(&cfg, &out)?;
            println!(
                "trained {} iterations, loss {:.6} -> {:.6}, wrote {}",
                s.iterations,
                s.first_loss.unwrap_or(f64::NAN),
                s.last_loss.unwrap_or(f64::NAN),
                out.display()
            );
        }
        Cmd::Track {
            config,
            weights,
            detections,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let weights = or_config(weights, &cfg.paths.weights, "weights")?;
            let out = or_config(out, &cfg.paths.output, "output")?;
            let s = track(&cfg, &weights, &detections, &out)?;
            println!("{} detections, {} trajectories, wrote {}", s.detections, s.trajectories, out.display());
        }
        Cmd::Evaluate { gt, pred, iou } => {
            let s = evaluate_files(&gt, &pred, &EvalConfig { iou_threshold: iou })?;
            print!("{}", format_report(&s));
        }
        Cmd::Selftest { inject_gradient_fault } => {
            let results = run_selftest(SelftestOptions { inject_gradient_fault });
            for r in &results {
                let tag = if r.passed { "PASS" } else { "FAIL" };
                println!("{tag} {:<10} {:>7.2}s  {}", r.name, r.seconds, r.detail);
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
            if !failed.is_empty() {
                return Err(CliError::Selftest(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
