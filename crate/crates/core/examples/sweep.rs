//! A small K sweep written to a temporary directory, then re-verified from
//! its per-cell traces.

use mtgm_lab::experiment::{cmd_sweep, cmd_verify, median_steps, AxisValue, Sweep, SweepAxis};
use mtgm_lab::trainer::TrainConfig;

fn main() -> mtgm_lab::Result<()> {
    let mut base = TrainConfig::desk();
    base.steps = std::env::args().nth(1).map_or(300, |s| s.parse().expect("steps"));
    base.eval_every = 20;
    base.eval_size = 128;
    let sweep = Sweep {
        base,
        axis: SweepAxis::K,
        values: vec![AxisValue::Count(1), AxisValue::Count(3)],
        seeds: 2,
        threshold_frac: 0.1,
    };
    let out = std::env::temp_dir().join("mtgm-lab-example");
    let outcome = cmd_sweep(&sweep, &out, "sweep_k")?;
    for c in &outcome.cells {
        println!(
            "K={} seed {}: steps-to-threshold {:?}, final excess {:.5}",
            c.value,
            c.seed,
            c.steps_to_threshold,
            c.final_excess.unwrap_or(f64::NAN)
        );
    }
    for v in ["1", "3"] {
        println!("median steps K={v}: {:?}", median_steps(&outcome.cells, v));
    }
    println!("verify mismatches: {}", cmd_verify(&outcome.dir)?);
    println!("outputs in {}", outcome.dir.display());
    Ok(())
}
