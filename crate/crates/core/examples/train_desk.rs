//! Train the desk-scale denoiser and print the trace as it goes.
//!
//! ```text
//! cargo run --release --example train_desk -- [config.json] [steps]
//! ```

use std::path::PathBuf;

use mtgm_lab::trainer::{train_observed, TrainConfig};

fn main() -> mtgm_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/desk.json"));
    let mut cfg = TrainConfig::load(&path)?;
    if let Some(steps) = args.next() {
        cfg.steps = steps.parse().expect("steps must be an integer");
    }
    let started = std::time::Instant::now();
    let run = train_observed(&cfg, |r| {
        let rep = &r.eval.report;
        println!(
            "step {:5}  loss {:.4} ± {:.4}  /oracle {:.3}  score {:.4}  same-mass {:.3}  unif {:.3}  qk {:.1}  vt-gap {:.4}  [{:.0?}]",
            r.step,
            rep.eval_loss.mean,
            rep.eval_loss.se,
            rep.eval_loss.mean / rep.r_oracle_closed,
            rep.score_err.mean,
            r.eval.diag.same_mass.median,
            r.eval.diag.uniformity_dev.median,
            r.eval.diag.qk_ratio().unwrap_or(f64::NAN),
            r.eval.diag.vt_gap,
            started.elapsed(),
        );
    })?;
    let refs = &run.eval_set.refs;
    println!(
        "references: oracle closed {:.4}, oracle MC {:.4}, Bayes MC {:.4}",
        refs.r_oracle_closed, refs.r_oracle_mc.mean, refs.r_bayes_mc.mean
    );
    Ok(())
}
