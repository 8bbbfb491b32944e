//! Train on imbalanced pattern proportions, then evaluate under uniform ones.

use mtgm_lab::experiment::eval_shift;
use mtgm_lab::patterns::prior_with_min;
use mtgm_lab::trainer::{train, TrainConfig};

fn main() -> mtgm_lab::Result<()> {
    let steps = std::env::args().nth(1).map_or(2000, |s| s.parse().expect("steps"));
    let mut cfg = TrainConfig::desk();
    cfg.data = cfg.data.with_pi(prior_with_min(4, 0.01)?)?;
    cfg.steps = steps;
    cfg.eval_every = 500;
    let run = train(&cfg)?;
    for tokens in [64, 256] {
        let r = eval_shift(&run.params, &cfg, &[0.25; 4], tokens)?;
        println!(
            "P={tokens}: excess in-dist {:.5}, shifted {:.5} (x{:.2}); score error {:.5} vs {:.5} (x{:.2})",
            r.in_dist.report.excess(),
            r.shifted.report.excess(),
            r.excess_ratio(),
            r.in_dist.report.score_err.mean,
            r.shifted.report.score_err.mean,
            r.score_ratio()
        );
    }
    Ok(())
}
