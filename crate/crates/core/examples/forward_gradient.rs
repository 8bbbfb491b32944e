//! Evaluate the attention denoiser, its DDPM loss and analytic gradient, and
//! spot-check one gradient entry by central differences.

use mtgm_lab::model::{attention_matrix, forward, loss_and_gradients, sample_loss, Checkpoint};
use mtgm_lab::patterns::{sample_pair, MtgmParams};
use mtgm_lab::rng::{stream, Purpose};
use mtgm_lab::schedule::{linear_schedule, TimeSet};
use mtgm_lab::trainer::init_params;

fn main() -> mtgm_lab::Result<()> {
    let data = MtgmParams::uniform(16, 4, 2, 0.3, 7)?;
    let sched = linear_schedule(5, 0.98, 0.95)?;
    let tset = TimeSet::full(5);
    let mut params = init_params(16, 5, 1);
    let m = data.patterns.means();
    params.w = m.dot(&m.t()) * (2.0 / 16.0);

    let (s, e) = sample_pair(&data, 12, &mut stream(2, Purpose::Misc));
    let a = attention_matrix(&params.w, &s.x0)?;
    println!("column sums of A: {:.6}", a.sum_axis(ndarray::Axis(0)));
    println!("f(X, 1)[0, ..4] = {:.4}", forward(&params, &s.x0, 1)?.row(0).slice(ndarray::s![..4]));

    let (loss, g) = loss_and_gradients(&params, &s.x0, &e, &sched, &tset)?;
    println!("loss {loss:.6}, |dW|_F {:.6}, dv {:.5}", g.dw.iter().map(|x| x * x).sum::<f64>().sqrt(), g.dv);

    let h = 1e-5;
    let mut p = params.clone();
    p.w[[3, 5]] += h;
    let up = sample_loss(&p, &s.x0, &e, &sched, &tset)?;
    p.w[[3, 5]] -= 2.0 * h;
    let down = sample_loss(&p, &s.x0, &e, &sched, &tset)?;
    println!("dW[3,5]: analytic {:.9}, central difference {:.9}", g.dw[[3, 5]], (up - down) / (2.0 * h));

    let ck = Checkpoint::from_params(&params, 0);
    assert_eq!(ck.to_params()?, params);
    println!("checkpoint round trip ok ({} bytes of payload)", ck.data.len());
    Ok(())
}
