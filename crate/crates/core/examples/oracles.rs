//! Oracle and Bayes denoisers: closed-form and Monte-Carlo risks, the exact
//! label posterior, and the score.

use mtgm_lab::oracle::{
    bayes_posterior, bayes_risk_mc, oracle_risk_closed, oracle_risk_mc, score_function, McPlan,
};
use mtgm_lab::patterns::{sample_pair, MtgmParams};
use mtgm_lab::rng::{stream, Purpose};
use mtgm_lab::schedule::{forward_noise, linear_schedule, TimeSet};

fn main() -> mtgm_lab::Result<()> {
    let data = MtgmParams::uniform(32, 4, 2, 0.3, 7)?;
    let sched = linear_schedule(10, 0.98, 0.95)?;
    let tset = TimeSet::full(10);

    let plan = McPlan::new(64, 2000, 1);
    let closed = oracle_risk_closed(data.rho, &sched, &tset);
    let oracle = oracle_risk_mc(&data, &sched, &tset, plan)?;
    let bayes = bayes_risk_mc(&data, &sched, &tset, plan)?;
    println!("oracle risk: closed {closed:.5}, MC {:.5} ± {:.5}", oracle.mean, oracle.se);
    println!("Bayes risk:  MC {:.5} ± {:.5}", bayes.mean, bayes.se);

    let (s, e) = sample_pair(&data, 8, &mut stream(4, Purpose::Misc));
    let xt = forward_noise(&s.x0, 10, &e, &sched)?;
    let post = bayes_posterior(&xt, &data, 10, &sched)?;
    println!("true labels {:?}", s.y);
    println!("label posteriors at t=10:\n{:.3}", post.gamma);
    let best = post
        .log_z_post
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(j, _)| &post.subsets[j]);
    println!("most likely active set {best:?} (true {:?})", s.z);

    let score = score_function(&xt, &data, 10, &sched)?;
    println!("score norm / sqrt(dP) = {:.4}", (score.iter().map(|x| x * x).sum::<f64>() / score.len() as f64).sqrt());
    Ok(())
}
