use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtgm_lab::experiment::{
    cmd_diag, cmd_eval_shift, cmd_repro_fig3, cmd_sweep, cmd_train, cmd_verify, exit_code, Fig3Plan, PiPrime,
    SweepSpec,
};
use mtgm_lab::trainer::TrainConfig;

#[derive(Parser)]
#[command(name = "mtgm-lab", version, about = "Train and probe attention denoisers on multi-token Gaussian mixtures")]
struct Cli {
    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; every command writes into a fresh subdirectory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model; writes trace.jsonl, trace.csv and checkpoint.json.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a one-axis sweep (K, pi_min, tset_mode or P).
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint under shifted pattern proportions.
    EvalShift {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `uniform`, `random`, or comma-separated proportions.
        #[arg(long, default_value = "uniform")]
        pi_prime: String,
        /// Tokens per evaluation datum.
        #[arg(long, default_value_t = 256)]
        tokens: usize,
    },
    /// Dump per-token attention probes of a checkpoint as CSV.
    Diag {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
    /// Regenerate the panel CSVs of the convergence/attention figure.
    ReproFig3 {
        /// Base config (default: the bundled desk config).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Step budget of the sweep panels.
        #[arg(long)]
        sweep_steps: Option<usize>,
    },
    /// Check a sweep's aggregate.csv against its per-cell traces.
    Verify {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn load(path: &Path, seed: Option<u64>) -> mtgm_lab::Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> mtgm_lab::Result<ExitCode> {
    let out = &cli.out;
    match cli.cmd {
        Cmd::Train { config } => {
            let (dir, run) = cmd_train(&load(&config, cli.seed)?, out)?;
            if let Some(last) = run.trace.last() {
                let rep = &last.eval.report;
                println!(
                    "step {}: eval loss {:.5} ± {:.5}, oracle {:.5}, excess {:.5}",
                    last.step,
                    rep.eval_loss.mean,
                    rep.eval_loss.se,
                    rep.r_oracle_closed,
                    rep.excess()
                );
            }
            println!("{}", dir.display());
        }
        Cmd::Sweep { config } => {
            let mut sweep = SweepSpec::load(&config)?;
            if let Some(s) = cli.seed {
                sweep.base.master_seed = s;
            }
            let stem = config.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep");
            let outcome = cmd_sweep(&sweep, out, stem)?;
            let failed = outcome.cells.iter().filter(|c| c.status != "ok").count();
            if failed > 0 {
                eprintln!("{failed} cell(s) failed; see aggregate.csv");
            }
            println!("{}", outcome.dir.display());
        }
        Cmd::EvalShift {
            config,
            checkpoint,
            pi_prime,
            tokens,
        } => {
            let cfg = load(&config, cli.seed)?;
            let (dir, report) = cmd_eval_shift(&checkpoint, &cfg, &PiPrime::parse(&pi_prime)?, tokens, out)?;
            println!(
                "excess: in-distribution {:.5}, shifted {:.5}; score error: {:.5} vs {:.5}",
                report.in_dist.report.excess(),
                report.shifted.report.excess(),
                report.in_dist.report.score_err.mean,
                report.shifted.report.score_err.mean
            );
            println!("{}", dir.display());
        }
        Cmd::Diag {
            config,
            checkpoint,
            samples,
        } => {
            let dir = cmd_diag(&checkpoint, &load(&config, cli.seed)?, samples, out)?;
            println!("{}", dir.display());
        }
        Cmd::ReproFig3 { config, sweep_steps } => {
            let mut base = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::desk(),
            };
            if let Some(s) = cli.seed {
                base.master_seed = s;
            }
            let mut plan = Fig3Plan::desk(base);
            if let Some(s) = sweep_steps {
                plan.sweep_steps = s;
            }
            println!("{}", cmd_repro_fig3(&plan, out)?.display());
        }
        Cmd::Verify { dir } => {
            let bad = cmd_verify(&dir)?;
            if bad > 0 {
                eprintln!("{bad} aggregate row(s) do not match their cell traces");
                return Ok(ExitCode::from(1));
            }
            println!("aggregate matches cell traces");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
