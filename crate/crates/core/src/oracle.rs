//! Exact reference estimators for the noise `E` given `X^t`.
//!
//! Conditioned on a token's label `u`, a noisy token is Gaussian:
//! `x^t ~ N(sqrt(abar) mu_u, s2 I)` with `s2 = abar rho^2 + 1 - abar`, and the
//! noise posterior mean is linear:
//!
//! ```text
//! E[eps | x^t, u] = c_t (x^t - sqrt(abar) mu_u),   c_t = sqrt(1 - abar) / s2
//! ```
//!
//! The oracle estimator plugs in the true labels. The Bayes estimator averages
//! over the label posterior, which we compute exactly by enumerating the
//! latent subsets `Z` (tokens are conditionally independent given `Z`).

use ndarray::{Array2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};
use crate::patterns::{mixture_proportions, sample_pair, subsets, MtgmParams, Sample};
use crate::rng::{Purpose, StreamKey};
use crate::schedule::{forward_noise, time_averaged_snr, NoiseSchedule, TimeSet};
use crate::stats::Estimate;

/// Per-token noise variance of `x^t` given its label.
pub fn token_variance(alpha_bar: f64, rho: f64) -> f64 {
    alpha_bar * rho * rho + 1.0 - alpha_bar
}

/// `sqrt(1 - abar) / (1 - abar + rho^2 abar)`, also the target value of `v_t`.
pub fn oracle_coefficient(alpha_bar: f64, rho: f64) -> f64 {
    (1.0 - alpha_bar).sqrt() / token_variance(alpha_bar, rho)
}

/// Posterior mean of the noise when the mean matrix `M_Y` is known.
pub fn oracle_mmse(
    xt: &Array2<f64>,
    mean_matrix: &Array2<f64>,
    t: usize,
    rho: f64,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    sched.check_t(t)?;
    if xt.dim() != mean_matrix.dim() {
        return Err(Error::Shape {
            context: "oracle_mmse",
            expected: xt.dim(),
            got: mean_matrix.dim(),
        });
    }
    let ab = sched.alpha_bar(t);
    let (c, s) = (oracle_coefficient(ab, rho), ab.sqrt());
    let mut out = xt.clone();
    Zip::from(&mut out).and(mean_matrix).for_each(|x, &m| *x = c * (*x - s * m));
    Ok(out)
}

/// Per-dimension risk of the oracle estimator averaged over `tset`:
/// `rho^2 abar / (rho^2 abar + 1 - abar)` per step.
pub fn oracle_risk_closed(rho: f64, sched: &NoiseSchedule, tset: &TimeSet) -> f64 {
    let r2 = rho * rho;
    tset.iter()
        .map(|t| {
            let ab = sched.alpha_bar(t);
            r2 * ab / (r2 * ab + 1.0 - ab)
        })
        .sum::<f64>()
        / tset.len() as f64
}

/// Exact label and subset posteriors for one noisy datum.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    /// `P x M`; row `p` is the posterior of token `p`'s label.
    pub gamma: Array2<f64>,
    /// Normalized log posterior of each subset in `subsets`.
    pub log_z_post: Vec<f64>,
    pub subsets: Vec<Vec<bool>>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Label posteriors `P(Y_p = u | X^t)` and subset posteriors `P(Z | X^t)`.
pub fn bayes_posterior(
    xt: &Array2<f64>,
    params: &MtgmParams,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<PosteriorSummary> {
    sched.check_t(t)?;
    let means = params.patterns.means();
    let (d, p_count) = xt.dim();
    if d != means.nrows() {
        return Err(Error::Shape {
            context: "bayes_posterior",
            expected: (means.nrows(), p_count),
            got: xt.dim(),
        });
    }
    let m = params.count();
    let ab = sched.alpha_bar(t);
    let var = token_variance(ab, params.rho);
    let s = ab.sqrt();

    // Log-likelihood up to a per-token constant:
    // -(||x||^2 - 2 s mu.x + abar ||mu||^2) / (2 var), dropping ||x||^2.
    let cross = means.t().dot(xt); // M x P
    let mu_sq: Vec<f64> = means.columns().into_iter().map(|c| c.dot(&c)).collect();
    let mut ll = Array2::<f64>::zeros((p_count, m));
    for p in 0..p_count {
        for u in 0..m {
            ll[[p, u]] = (2.0 * s * cross[[u, p]] - ab * mu_sq[u]) / (2.0 * var);
        }
    }
    // Rescaled likelihoods exp(ll - max_u ll) in [0, 1].
    let row_max: Vec<f64> = ll
        .rows()
        .into_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut scaled = ll.clone();
    for (mut row, &mx) in scaled.rows_mut().into_iter().zip(&row_max) {
        row.mapv_inplace(|l| (l - mx).exp());
    }

    let zs = subsets(m, params.k)?;
    struct Component {
        members: Vec<(usize, f64)>,
    }
    let comps: Vec<Component> = zs
        .iter()
        .map(|z| {
            let pi = mixture_proportions(&params.pi_tilde, z).expect("K >= 1");
            Component {
                members: (0..m).filter(|&u| z[u]).map(|u| (u, pi[u])).collect(),
            }
        })
        .collect();

    // token_lse[j][p] = log sum_{u in Z_j} pi_u(Z_j) lik(p, u), together with
    // the rescaled sum it came from (0 when it underflowed).
    let token_lse: Vec<Vec<(f64, f64)>> = comps
        .iter()
        .map(|c| {
            (0..p_count)
                .map(|p| {
                    let acc: f64 = c.members.iter().map(|&(u, w)| w * scaled[[p, u]]).sum();
                    if acc > 0.0 {
                        (row_max[p] + acc.ln(), acc)
                    } else {
                        (log_sum_exp(c.members.iter().map(|&(u, w)| w.ln() + ll[[p, u]])), 0.0)
                    }
                })
                .collect()
        })
        .collect();

    let log_joint: Vec<f64> = token_lse.iter().map(|v| v.iter().map(|e| e.0).sum()).collect();
    let norm = log_sum_exp(log_joint.iter().copied());
    if !norm.is_finite() {
        return Err(Error::NonFinite("subset posterior normalizer"));
    }
    let log_z_post: Vec<f64> = log_joint.iter().map(|l| l - norm).collect();

    let mut gamma = Array2::<f64>::zeros((p_count, m));
    for (j, c) in comps.iter().enumerate() {
        let wz = log_z_post[j].exp();
        if wz == 0.0 {
            continue;
        }
        for p in 0..p_count {
            let (lse, acc) = token_lse[j][p];
            if acc > 0.0 {
                let k = wz / acc;
                for &(u, w) in &c.members {
                    gamma[[p, u]] += k * w * scaled[[p, u]];
                }
            } else {
                for &(u, w) in &c.members {
                    gamma[[p, u]] += wz * (w.ln() + ll[[p, u]] - lse).exp();
                }
            }
        }
    }
    Ok(PosteriorSummary {
        gamma,
        log_z_post,
        subsets: zs,
    })
}

/// Noise estimate from label posteriors: column `p` is
/// `sum_u gamma[p, u] c_t (x_p - sqrt(abar) mu_u)`.
pub fn mmse_from_gamma(
    xt: &Array2<f64>,
    gamma: &Array2<f64>,
    params: &MtgmParams,
    alpha_bar: f64,
) -> Array2<f64> {
    let c = oracle_coefficient(alpha_bar, params.rho);
    // sum_u gamma_pu mu_u = means * gamma^T
    let expected_mean = params.patterns.means().dot(&gamma.t());
    let s = alpha_bar.sqrt();
    let mut out = xt.clone();
    Zip::from(&mut out)
        .and(&expected_mean)
        .for_each(|x, &m| *x = c * (*x - s * m));
    out
}

/// `E[E | X^t]`, the Bayes-optimal noise prediction.
pub fn bayes_mmse(
    xt: &Array2<f64>,
    params: &MtgmParams,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    let post = bayes_posterior(xt, params, t, sched)?;
    Ok(mmse_from_gamma(xt, &post.gamma, params, sched.alpha_bar(t)))
}

/// `grad log p_t(X^t) = -E[E | X^t] / sqrt(1 - abar_t)`.
pub fn score_function(
    xt: &Array2<f64>,
    params: &MtgmParams,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    let k = -1.0 / (1.0 - sched.alpha_bar(t)).sqrt();
    Ok(bayes_mmse(xt, params, t, sched)?.mapv(|e| k * e))
}

/// Score estimate built from a trained denoiser: `-f(X^t, t) / sqrt(1 - abar_t)`.
pub fn score_network(
    model: &ModelParams,
    xt: &Array2<f64>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    sched.check_t(t)?;
    let k = -1.0 / (1.0 - sched.alpha_bar(t)).sqrt();
    Ok(forward(model, xt, t)?.mapv(|e| k * e))
}

/// Anything that predicts the injected noise from `X^t`.
///
/// The clean sample is passed along so oracle predictors can read the labels;
/// honest predictors ignore it.
pub trait Denoiser: Sync {
    fn predict(&self, xt: &Array2<f64>, t: usize, sched: &NoiseSchedule, sample: &Sample) -> Result<Array2<f64>>;
}

impl Denoiser for ModelParams {
    fn predict(&self, xt: &Array2<f64>, t: usize, _: &NoiseSchedule, _: &Sample) -> Result<Array2<f64>> {
        forward(self, xt, t)
    }
}

/// The oracle estimator: knows each token's pattern.
pub struct OracleDenoiser<'a>(pub &'a MtgmParams);

impl Denoiser for OracleDenoiser<'_> {
    fn predict(&self, xt: &Array2<f64>, t: usize, sched: &NoiseSchedule, sample: &Sample) -> Result<Array2<f64>> {
        oracle_mmse(xt, &self.0.patterns.mean_matrix(&sample.y), t, self.0.rho, sched)
    }
}

/// The Bayes estimator for a given data distribution.
pub struct BayesDenoiser<'a>(pub &'a MtgmParams);

impl Denoiser for BayesDenoiser<'_> {
    fn predict(&self, xt: &Array2<f64>, t: usize, sched: &NoiseSchedule, _: &Sample) -> Result<Array2<f64>> {
        bayes_mmse(xt, self.0, t, sched)
    }
}

fn sq_dist(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y))
}

/// Where Monte-Carlo draws come from: `size` samples of `tokens` columns,
/// sample `i` drawn from stream `(seed, purpose, 0, i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McPlan {
    pub tokens: usize,
    pub size: usize,
    pub seed: u64,
    pub purpose: Purpose,
}

impl McPlan {
    pub fn new(tokens: usize, size: usize, seed: u64) -> Self {
        Self {
            tokens,
            size,
            seed,
            purpose: Purpose::Oracle,
        }
    }

    pub fn key(&self, i: usize) -> StreamKey {
        StreamKey::new(self.seed, self.purpose, 0, i as u64)
    }
}

/// Monte-Carlo per-dimension risk of `denoiser`, averaged over `tset`.
pub fn risk_mc<D: Denoiser>(
    denoiser: &D,
    params: &MtgmParams,
    sched: &NoiseSchedule,
    tset: &TimeSet,
    plan: McPlan,
) -> Result<Estimate> {
    let per: Vec<f64> = (0..plan.size)
        .into_par_iter()
        .map(|i| {
            let (sample, e) = sample_pair(params, plan.tokens, &mut plan.key(i).rng());
            let dp = e.len() as f64;
            let mut acc = 0.0;
            for t in tset.iter() {
                let xt = forward_noise(&sample.x0, t, &e, sched)?;
                acc += sq_dist(&denoiser.predict(&xt, t, sched, &sample)?, &e) / dp;
            }
            Ok(acc / tset.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&per))
}

/// Monte-Carlo risk of the oracle estimator.
pub fn oracle_risk_mc(params: &MtgmParams, sched: &NoiseSchedule, tset: &TimeSet, plan: McPlan) -> Result<Estimate> {
    risk_mc(&OracleDenoiser(params), params, sched, tset, plan)
}

/// Monte-Carlo Bayes risk `E ||E - E[E | X^t]||^2 / (dP)`.
pub fn bayes_risk_mc(params: &MtgmParams, sched: &NoiseSchedule, tset: &TimeSet, plan: McPlan) -> Result<Estimate> {
    risk_mc(&BayesDenoiser(params), params, sched, tset, plan)
}

/// Per-dimension score-matching error of the score built from `denoiser`.
pub fn score_matching_error<D: Denoiser>(
    denoiser: &D,
    params: &MtgmParams,
    sched: &NoiseSchedule,
    tset: &TimeSet,
    plan: McPlan,
) -> Result<Estimate> {
    let per: Vec<f64> = (0..plan.size)
        .into_par_iter()
        .map(|i| {
            let (sample, e) = sample_pair(params, plan.tokens, &mut plan.key(i).rng());
            let dp = e.len() as f64;
            let mut acc = 0.0;
            for t in tset.iter() {
                let xt = forward_noise(&sample.x0, t, &e, sched)?;
                // Both scores share the factor -1/sqrt(1 - abar).
                let pred = denoiser.predict(&xt, t, sched, &sample)?;
                let exact = bayes_mmse(&xt, params, t, sched)?;
                acc += sq_dist(&pred, &exact) / (dp * (1.0 - sched.alpha_bar(t)));
            }
            Ok(acc / tset.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&per))
}

/// One evaluation's worth of risks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub eval_loss: Estimate,
    pub r_oracle_closed: f64,
    pub r_oracle_mc: Estimate,
    pub r_bayes_mc: Estimate,
    pub score_err: Estimate,
    pub snr: f64,
}

impl RiskReport {
    /// Evaluated loss minus the oracle risk.
    pub fn excess(&self) -> f64 {
        self.eval_loss.mean - self.r_oracle_closed
    }
}

/// Reference values that do not depend on the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct References {
    pub r_oracle_closed: f64,
    pub r_oracle_mc: Estimate,
    pub r_bayes_mc: Estimate,
    pub snr: f64,
}

impl References {
    pub fn compute(params: &MtgmParams, sched: &NoiseSchedule, tset: &TimeSet, plan: McPlan) -> Result<Self> {
        Ok(Self {
            r_oracle_closed: oracle_risk_closed(params.rho, sched, tset),
            r_oracle_mc: oracle_risk_mc(params, sched, tset, plan)?,
            r_bayes_mc: bayes_risk_mc(params, sched, tset, plan)?,
            snr: time_averaged_snr(sched, tset),
        })
    }
}
