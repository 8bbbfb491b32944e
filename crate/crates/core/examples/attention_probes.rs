//! Train briefly, then look at what attention does: same-pattern mass,
//! uniformity within a pattern, query-key separation, mean estimation, v_t.

use mtgm_lab::diagnostics::{attention_diag, mean_estimation_error, qk_separation, vt_gap};
use mtgm_lab::patterns::sample_pair;
use mtgm_lab::rng::{stream, Purpose};
use mtgm_lab::schedule::forward_noise;
use mtgm_lab::stats::Spread;
use mtgm_lab::trainer::{train, TrainConfig};

fn main() -> mtgm_lab::Result<()> {
    let steps = std::env::args().nth(1).map_or(400, |s| s.parse().expect("steps"));
    let cfg = TrainConfig {
        steps,
        eval_every: steps.max(1),
        ..TrainConfig::desk()
    };
    let run = train(&cfg)?;
    let (s, e) = sample_pair(&cfg.data, cfg.tokens, &mut stream(42, Purpose::Misc));
    for t in [1, 5, 10] {
        let diag = attention_diag(&run.params, &s, &e, t, &cfg.sched)?;
        let xt = forward_noise(&s.x0, t, &e, &cfg.sched)?;
        let qk = qk_separation(&run.params.w, &xt, &s.y)?;
        let mass = Spread::of(&diag.same_mass);
        let unif = Spread::of(&diag.uniformity_dev);
        println!(
            "t={t:2}: same-mass median {:.3} [p10 {:.3}], uniformity median {:.3}, qk same {:.3} / cross {:.3}, mean-est err {:.5}",
            mass.median,
            mass.p10,
            unif.median,
            qk.same_mean,
            qk.cross_mean_abs,
            mean_estimation_error(&run.params, &cfg.data, &s, &e, t, &cfg.sched)?
        );
    }
    println!("vt gap after {steps} steps: {:.4}", vt_gap(&run.params, cfg.data.rho, &cfg.sched)?);
    Ok(())
}
