//! Build a pattern set, draw multi-token data and compare label frequencies
//! with the exact pattern ratios.

use mtgm_lab::patterns::{enumerate_nu, imbalance_delta, prior_with_min, sample_data, MtgmParams};
use mtgm_lab::rng::{stream, Purpose};

fn main() -> mtgm_lab::Result<()> {
    let params = MtgmParams::uniform(32, 4, 2, 0.3, 7)?.with_pi(prior_with_min(4, 0.05)?)?;
    println!("pi_tilde = {:?}, delta = {:.4}", params.pi_tilde, imbalance_delta(&params.pi_tilde));

    let nu = enumerate_nu(&params)?;
    let mut rng = stream(1, Purpose::Misc);
    let mut counts = vec![0usize; params.count()];
    let (draws, tokens) = (2000, 64);
    for _ in 0..draws {
        let s = sample_data(&params, tokens, &mut rng);
        for &u in &s.y {
            counts[u] += 1;
        }
    }
    println!("pattern  nu (exact)  frequency");
    for (u, c) in counts.iter().enumerate() {
        println!("{u:7}  {:10.5}  {:9.5}", nu[u], *c as f64 / (draws * tokens) as f64);
    }

    let s = sample_data(&params, 8, &mut rng);
    println!("one datum: labels {:?}, active patterns {:?}", s.y, s.z);
    println!("Gram of means / d:\n{:.3}", params.patterns.means().t().dot(params.patterns.means()) / 32.0);
    Ok(())
}
