//! The linear noise schedule, SNR, time sets, and forward noising.

use mtgm_lab::patterns::{sample_pair, MtgmParams};
use mtgm_lab::rng::{stream, Purpose};
use mtgm_lab::schedule::{forward_noise, linear_schedule, time_averaged_snr, TimeSet};

fn main() -> mtgm_lab::Result<()> {
    let sched = linear_schedule(10, 0.98, 0.95)?;
    println!(" t  alpha   alpha_bar  snr");
    for t in 1..=sched.steps() {
        println!("{t:2}  {:.4}  {:.5}    {:.3}", sched.alpha(t), sched.alpha_bar(t), sched.snr(t));
    }
    for (name, set) in [
        ("full", TimeSet::full(10)),
        ("first40", TimeSet::first_fraction(10, 0.4)),
        ("last40", TimeSet::last_fraction(10, 0.4)),
    ] {
        println!("{name:8} {:?}  time-averaged SNR {:.3}", set.indices(), time_averaged_snr(&sched, &set));
    }

    let data = MtgmParams::uniform(32, 4, 2, 0.3, 7)?;
    let (s, e) = sample_pair(&data, 64, &mut stream(3, Purpose::Misc));
    for t in [1, 5, 10] {
        let xt = forward_noise(&s.x0, t, &e, &sched)?;
        let norm = xt.iter().map(|x| x * x).sum::<f64>() / xt.len() as f64;
        println!("t={t:2}: mean squared entry of X^t = {norm:.4}");
    }
    Ok(())
}
