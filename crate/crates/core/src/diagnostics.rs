//! Probes of what a trained denoiser does: how much attention each query puts
//! on tokens of its own pattern, how even that attention is, how well `X A`
//! recovers the scaled pattern means, and how close `v_t` is to the oracle
//! coefficient.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{attention_matrix, ModelParams};
use crate::oracle::oracle_coefficient;
use crate::patterns::{MtgmParams, Sample};
use crate::schedule::{forward_noise, NoiseSchedule, TimeSet};
use crate::stats::Spread;

fn check_labels(a: &Array2<f64>, y: &[usize]) -> Result<()> {
    if a.nrows() != y.len() || a.ncols() != y.len() {
        return Err(Error::Shape {
            context: "attention vs labels",
            expected: (y.len(), y.len()),
            got: a.dim(),
        });
    }
    Ok(())
}

/// Per query `p`: total weight on keys with the same label as `p`.
pub fn same_pattern_mass(a: &Array2<f64>, y: &[usize]) -> Result<Vec<f64>> {
    check_labels(a, y)?;
    Ok((0..y.len())
        .map(|p| {
            a.column(p)
                .iter()
                .zip(y)
                .filter(|(_, &yk)| yk == y[p])
                .map(|(w, _)| w)
                .sum()
        })
        .collect())
}

/// Per query `p`: `max / min - 1` over the weights on same-label keys, which
/// equals the largest `|A[i,p] / A[j,p] - 1|` over that class. A class of one
/// token gives 0.
pub fn uniformity_deviation(a: &Array2<f64>, y: &[usize]) -> Result<Vec<f64>> {
    check_labels(a, y)?;
    (0..y.len())
        .map(|p| {
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for (w, &yk) in a.column(p).iter().zip(y) {
                if yk == y[p] {
                    lo = lo.min(*w);
                    hi = hi.max(*w);
                }
            }
            if lo <= 0.0 {
                return Err(Error::ZeroWeight { query: p });
            }
            Ok(hi / lo - 1.0)
        })
        .collect()
}

/// Query-key products `x_j^T W x_i / d` split by label agreement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QkSeparation {
    /// Mean over same-label pairs.
    pub same_mean: f64,
    /// Mean absolute value over cross-label pairs.
    pub cross_mean_abs: f64,
}

impl QkSeparation {
    /// `same_mean / cross_mean_abs`; infinite when the cross group is exactly 0.
    pub fn ratio(&self) -> f64 {
        self.same_mean / self.cross_mean_abs
    }
}

/// Group statistics of `x_j^T W x_i / d` over all pairs `i != j`. `W` need not
/// be symmetric, so both orientations of each pair are counted.
pub fn qk_separation(w: &Array2<f64>, xt: &Array2<f64>, y: &[usize]) -> Result<QkSeparation> {
    if xt.ncols() != y.len() {
        return Err(Error::Shape {
            context: "qk_separation labels",
            expected: (xt.nrows(), y.len()),
            got: xt.dim(),
        });
    }
    let d = xt.nrows() as f64;
    let g = xt.t().dot(&w.dot(xt));
    let (mut same, mut n_same, mut cross, mut n_cross) = (0.0, 0usize, 0.0, 0usize);
    for ((j, i), v) in g.indexed_iter() {
        if i == j {
            continue;
        }
        if y[i] == y[j] {
            same += v / d;
            n_same += 1;
        } else {
            cross += (v / d).abs();
            n_cross += 1;
        }
    }
    if n_same == 0 {
        return Err(Error::EmptyGroup("same-pattern pairs"));
    }
    if n_cross == 0 {
        return Err(Error::EmptyGroup("cross-pattern pairs"));
    }
    Ok(QkSeparation {
        same_mean: same / n_same as f64,
        cross_mean_abs: cross / n_cross as f64,
    })
}

/// `||sqrt(abar_t) M_Y - X^t A||_F^2 / (dP)`: how well attention averaging
/// recovers the scaled pattern means.
pub fn mean_estimation_error(
    params: &ModelParams,
    data: &MtgmParams,
    sample: &Sample,
    noise: &Array2<f64>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let xt = forward_noise(&sample.x0, t, noise, sched)?;
    let a = attention_matrix(&params.w, &xt)?;
    let est = xt.dot(&a);
    let scale = sched.alpha_bar(t).sqrt();
    let means = data.patterns.mean_matrix(&sample.y);
    let sq = Zip::from(&est)
        .and(&means)
        .fold(0.0, |acc, &e, &m| acc + (scale * m - e) * (scale * m - e));
    Ok(sq / est.len() as f64)
}

/// `max_t |v_t - oracle coefficient at t|` over all steps.
pub fn vt_gap(params: &ModelParams, rho: f64, sched: &NoiseSchedule) -> Result<f64> {
    vt_gap_on(params, rho, sched, &TimeSet::full(sched.steps()))
}

/// [`vt_gap`] restricted to the steps in `tset`; scales of steps that are
/// never trained keep their random initial values.
pub fn vt_gap_on(params: &ModelParams, rho: f64, sched: &NoiseSchedule, tset: &TimeSet) -> Result<f64> {
    if params.steps() != sched.steps() {
        return Err(Error::Shape {
            context: "v vs schedule",
            expected: (sched.steps(), 1),
            got: (params.steps(), 1),
        });
    }
    Ok(tset
        .iter()
        .map(|t| (params.v_at(t) - oracle_coefficient(sched.alpha_bar(t), rho)).abs())
        .fold(0.0, f64::max))
}

/// Attention probes for one noisy datum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDiag {
    pub same_mass: Vec<f64>,
    pub uniformity_dev: Vec<f64>,
    /// `None` when the datum has no same- or no cross-pattern pair (e.g. K = 1).
    pub qk: Option<QkSeparation>,
}

pub fn attention_diag(
    params: &ModelParams,
    sample: &Sample,
    noise: &Array2<f64>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<AttentionDiag> {
    let xt = forward_noise(&sample.x0, t, noise, sched)?;
    let a = attention_matrix(&params.w, &xt)?;
    let qk = match qk_separation(&params.w, &xt, &sample.y) {
        Ok(q) => Some(q),
        Err(Error::EmptyGroup(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(AttentionDiag {
        same_mass: same_pattern_mass(&a, &sample.y)?,
        uniformity_dev: uniformity_deviation(&a, &sample.y)?,
        qk,
    })
}

/// Pooled probes over many (datum, step) pairs, as stored in traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagSummary {
    pub same_mass: Spread,
    pub uniformity_dev: Spread,
    /// Averages over the data that have both pair groups; `None` if none do.
    pub qk_same_mean: Option<f64>,
    pub qk_cross_mean_abs: Option<f64>,
    pub mean_est_err: Spread,
    pub vt_gap: f64,
}

impl DiagSummary {
    pub fn qk_ratio(&self) -> Option<f64> {
        Some(self.qk_same_mean? / self.qk_cross_mean_abs?)
    }
}

/// Accumulates [`AttentionDiag`]s in a fixed order.
#[derive(Debug, Default, Clone)]
pub struct DiagPool {
    same_mass: Vec<f64>,
    uniformity: Vec<f64>,
    mean_err: Vec<f64>,
    qk_same: Vec<f64>,
    qk_cross: Vec<f64>,
}

impl DiagPool {
    pub fn push(&mut self, diag: &AttentionDiag, mean_err: f64) {
        self.same_mass.extend_from_slice(&diag.same_mass);
        self.uniformity.extend_from_slice(&diag.uniformity_dev);
        if let Some(qk) = diag.qk {
            self.qk_same.push(qk.same_mean);
            self.qk_cross.push(qk.cross_mean_abs);
        }
        self.mean_err.push(mean_err);
    }

    pub fn summarize(&self, vt_gap: f64) -> DiagSummary {
        let avg = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        DiagSummary {
            same_mass: Spread::of(&self.same_mass),
            uniformity_dev: Spread::of(&self.uniformity),
            qk_same_mean: avg(&self.qk_same),
            qk_cross_mean_abs: avg(&self.qk_cross),
            mean_est_err: Spread::of(&self.mean_err),
            vt_gap,
        }
    }
}
