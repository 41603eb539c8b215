use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use vca::commands::{self, Outcome};
use vca::config::{load_config, RunConfig};
use vca::VcaError;

/// Visual-contrast attention toolkit: train the toy backbone, run the
/// complexity bench, or check gradients.
#[derive(Parser, Debug)]
#[command(name = "vca", version)]
struct Args {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Run seed; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

/// Worker cap from `VCA_THREADS`. Every command runs on one worker, so the
/// value is only validated.
fn worker_cap() -> Result<usize, VcaError> {
    match std::env::var("VCA_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(VcaError::Usage(format!(
                "VCA_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

fn report(cfg: &RunConfig, outcome: &Outcome) {
    match outcome {
        Outcome::Train(s) => {
            println!("trained {} steps", s.steps);
            if let Some(loss) = s.final_loss {
                println!("final loss {loss:.6}");
            }
            println!("train accuracy {:.4}", s.train_accuracy);
            if let Some(acc) = s.held_out_accuracy {
                println!("held-out accuracy {acc:.4}");
            }
            println!("wrote {} and {}", s.loss_log.display(), s.checkpoint.display());
        }
        Outcome::Bench(reports) => {
            println!("{} sweep points, all counts match the cost model", reports.len());
            for (kind, metric, slope) in commands::bench_slopes(reports) {
                println!("{kind} {metric:?} log-log slope {slope:.4}");
            }
            println!("wrote {}", cfg.output_dir.join(commands::BENCH_CSV).display());
        }
        Outcome::Gradcheck(reports) => {
            for (target, r) in reports {
                let verdict = if r.passed(cfg.gradcheck.tolerance) {
                    "PASS"
                } else {
                    "FAIL"
                };
                println!(
                    "{verdict} {target}: {} elements, max rel err {:.3e}",
                    r.elements(),
                    r.max_rel_err()
                );
            }
            println!("wrote {}", cfg.output_dir.join(commands::GRADCHECK_REPORT).display());
        }
    }
}

fn run(args: Args) -> Result<bool, VcaError> {
    worker_cap()?;
    let mut cfg = load_config(&args.config)?;
    if let Some(dir) = args.output {
        cfg.output_dir = dir;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let outcome = commands::run(&cfg)?;
    report(&cfg, &outcome);
    Ok(outcome.success(&cfg))
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: some checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
