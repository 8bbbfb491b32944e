//! Independent reference implementations shared by integration tests.
//! Nothing here calls into the posterior code it is used to check.
#![allow(dead_code)]

use mtgm_lab::model::{loss_and_gradients, sample_loss, ModelParams};
use mtgm_lab::patterns::{sample_data, MtgmParams};
use mtgm_lab::rng::{stream, Purpose};
use mtgm_lab::schedule::{linear_schedule, NoiseSchedule, TimeSet};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

pub struct Mixture<'a> {
    /// `d x M` means.
    pub means: &'a Array2<f64>,
    pub pi: &'a [f64],
    pub k: usize,
    pub rho: f64,
    pub alpha_bar: f64,
}

fn subsets_by_bitmask(m: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..(1 << m))
        .filter(|mask| mask.count_ones() as usize == k)
        .map(|mask| (0..m).filter(|u| mask & (1 << u) != 0).collect())
        .collect()
}

fn log_normal(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var)
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `(gamma P x M, subset posterior keyed by sorted member list, E[E | X])`.
pub type Joint = (Array2<f64>, Vec<(Vec<usize>, f64)>, Array2<f64>);

impl Mixture<'_> {
    fn var(&self) -> f64 {
        self.alpha_bar * self.rho * self.rho + 1.0 - self.alpha_bar
    }

    fn scaled_mean(&self, u: usize) -> Vec<f64> {
        self.means.column(u).iter().map(|m| m * self.alpha_bar.sqrt()).collect()
    }

    fn props(&self, z: &[usize]) -> Vec<f64> {
        let norm: f64 = z.iter().map(|&u| self.pi[u]).sum();
        let mut out = vec![0.0; self.pi.len()];
        for &u in z {
            out[u] = self.pi[u] / norm;
        }
        out
    }

    /// Explicit `log p_t(X)` including all normalizing constants.
    pub fn log_density(&self, x: &Array2<f64>) -> f64 {
        let m = self.pi.len();
        let zs = subsets_by_bitmask(m, self.k);
        let per_z: Vec<f64> = zs
            .iter()
            .map(|z| {
                let pz = self.props(z);
                let mut acc = -(zs.len() as f64).ln();
                for col in x.columns() {
                    let xs: Vec<f64> = col.to_vec();
                    let terms: Vec<f64> = z
                        .iter()
                        .map(|&u| pz[u].ln() + log_normal(&xs, &self.scaled_mean(u), self.var()))
                        .collect();
                    acc += lse(&terms);
                }
                acc
            })
            .collect();
        lse(&per_z)
    }

    /// Brute force over every (Z, Y) pair: returns (gamma P x M, subset
    /// posterior keyed by sorted member list, E[E | X]).
    pub fn joint_enumeration(&self, x: &Array2<f64>) -> Joint {
        let (d, p) = x.dim();
        let m = self.pi.len();
        let zs = subsets_by_bitmask(m, self.k);
        let mut logs = Vec::new();
        let mut assignments = Vec::new();
        for (zi, z) in zs.iter().enumerate() {
            let pz = self.props(z);
            let total = z.len().pow(p as u32);
            for code in 0..total {
                let mut c = code;
                let y: Vec<usize> = (0..p)
                    .map(|_| {
                        let u = z[c % z.len()];
                        c /= z.len();
                        u
                    })
                    .collect();
                let mut lw = -(zs.len() as f64).ln();
                for (q, &u) in y.iter().enumerate() {
                    let xs: Vec<f64> = x.column(q).to_vec();
                    lw += pz[u].ln() + log_normal(&xs, &self.scaled_mean(u), self.var());
                }
                logs.push(lw);
                assignments.push((zi, y));
            }
        }
        let norm = lse(&logs);
        let c = (1.0 - self.alpha_bar).sqrt() / self.var();
        let mut gamma = Array2::zeros((p, m));
        let mut zpost = vec![0.0; zs.len()];
        let mut est = Array2::zeros((d, p));
        for (lw, (zi, y)) in logs.iter().zip(&assignments) {
            let w = (lw - norm).exp();
            zpost[*zi] += w;
            for (q, &u) in y.iter().enumerate() {
                gamma[[q, u]] += w;
                let mu = self.scaled_mean(u);
                for i in 0..d {
                    est[[i, q]] += w * c * (x[[i, q]] - mu[i]);
                }
            }
        }
        (gamma, zs.into_iter().zip(zpost).collect(), est)
    }

    /// Central-difference gradient of [`Self::log_density`].
    pub fn numerical_score(&self, x: &Array2<f64>, h: f64) -> Array2<f64> {
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[i, j]] += h;
            let up = self.log_density(&xp);
            xp[[i, j]] -= 2.0 * h;
            let down = self.log_density(&xp);
            g[[i, j]] = (up - down) / (2.0 * h);
        }
        g
    }
}

// Finite-difference gradient checks on d=8, P=6, M=3, K=2, T=4 instances.

const H: f64 = 1e-5;

/// |a - n| / max(|a|, |n|, floor). Central differences of an O(1) loss carry
/// roundoff near eps/h ~ 1e-11, so entries below `floor` (1e-5 of the largest
/// gradient entry) are compared against the floor instead of themselves.
fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub struct Instance {
    pub params: ModelParams,
    pub x0: Array2<f64>,
    pub e: Array2<f64>,
    pub sched: NoiseSchedule,
    pub tset: TimeSet,
}

pub fn instance(seed: u64) -> Instance {
    let data = MtgmParams::uniform(8, 3, 2, 0.3, seed).unwrap();
    let mut rng = stream(seed, Purpose::Misc);
    let s = sample_data(&data, 6, &mut rng);
    let e = Array2::from_shape_simple_fn((8, 6), || rng.sample::<f64, _>(StandardNormal));
    let w = Array2::from_shape_simple_fn((8, 8), || 0.5 * rng.sample::<f64, _>(StandardNormal));
    let v = Array1::from_shape_simple_fn(4, || rng.sample::<f64, _>(StandardNormal));
    Instance {
        params: ModelParams { w, v },
        x0: s.x0,
        e,
        sched: linear_schedule(4, 0.98, 0.95).unwrap(),
        tset: TimeSet::full(4),
    }
}

pub fn max_rel_error(inst: &Instance) -> f64 {
    let (_, g) = loss_and_gradients(&inst.params, &inst.x0, &inst.e, &inst.sched, &inst.tset).unwrap();
    let loss = |p: &ModelParams| sample_loss(p, &inst.x0, &inst.e, &inst.sched, &inst.tset).unwrap();
    let scale = g.dw.iter().chain(g.dv.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = 1e-5 * scale;
    let mut worst = 0.0f64;
    for i in 0..8 {
        for j in 0..8 {
            let mut p = inst.params.clone();
            p.w[[i, j]] += H;
            let up = loss(&p);
            p.w[[i, j]] -= 2.0 * H;
            let down = loss(&p);
            worst = worst.max(rel_err(g.dw[[i, j]], (up - down) / (2.0 * H), floor));
        }
    }
    for t in 0..4 {
        let mut p = inst.params.clone();
        p.v[t] += H;
        let up = loss(&p);
        p.v[t] -= 2.0 * H;
        let down = loss(&p);
        worst = worst.max(rel_err(g.dv[t], (up - down) / (2.0 * H), floor));
    }
    worst
}

// Exactness corpora for the Bayes posterior and the score.

use mtgm_lab::oracle::{bayes_mmse, bayes_posterior, score_function};
use mtgm_lab::patterns::{sample_pair, PatternSet};
use mtgm_lab::schedule::forward_noise;
use ndarray::array;

/// Small instances (M <= 3, K <= 2, P <= 3, d <= 4), orthogonal and not,
/// uniform and skewed proportions.
pub fn small_corpus() -> Vec<MtgmParams> {
    let mut out = Vec::new();
    for &(d, m, k) in &[(4, 3, 2), (4, 3, 1), (3, 3, 2), (2, 2, 1), (4, 2, 2), (3, 2, 1)] {
        for seed in 0..3u64 {
            let base = MtgmParams::uniform(d, m, k, 0.3 + 0.4 * seed as f64, seed).unwrap();
            out.push(base.clone());
            let pi: Vec<f64> = match m {
                2 => vec![0.2, 0.8],
                _ => vec![0.1, 0.3, 0.6],
            };
            out.push(base.with_pi(pi).unwrap());
        }
    }
    // non-orthogonal means, including M > d
    let general = PatternSet::general(array![[1.0, -0.5, 0.2], [0.3, 0.8, -1.1]]).unwrap();
    out.push(MtgmParams::new(general, vec![0.2, 0.3, 0.5], 2, 0.6).unwrap());
    out
}

/// Largest deviation between the library posterior (gamma, subset
/// posterior, MMSE) and the joint (Z, Y) enumeration, over the corpus and
/// P in 1..=3, t in {1, 3, 6}. Returns (instances checked, max error).
pub fn bayes_vs_enumeration() -> (usize, f64) {
    let sched = linear_schedule(6, 0.95, 0.7).unwrap();
    let mut checked = 0;
    let mut worst = 0.0f64;
    for (ci, params) in small_corpus().iter().enumerate() {
        for tokens in 1..=3 {
            for &t in &[1, 3, 6] {
                let mut rng = stream(ci as u64 * 31 + tokens as u64, Purpose::Misc);
                let (s, e) = sample_pair(params, tokens, &mut rng);
                let xt = forward_noise(&s.x0, t, &e, &sched).unwrap();
                let reference = Mixture {
                    means: params.patterns.means(),
                    pi: &params.pi_tilde,
                    k: params.k,
                    rho: params.rho,
                    alpha_bar: sched.alpha_bar(t),
                };
                let (gamma, zpost, est) = reference.joint_enumeration(&xt);
                let post = bayes_posterior(&xt, params, t, &sched).unwrap();
                for (a, b) in post.gamma.iter().zip(gamma.iter()) {
                    worst = worst.max((a - b).abs());
                }
                for (members, prob) in &zpost {
                    let j = post
                        .subsets
                        .iter()
                        .position(|z| {
                            let on: Vec<usize> = (0..z.len()).filter(|&u| z[u]).collect();
                            &on == members
                        })
                        .expect("same subsets");
                    worst = worst.max((post.log_z_post[j].exp() - prob).abs());
                }
                let mmse = bayes_mmse(&xt, params, t, &sched).unwrap();
                for (a, b) in mmse.iter().zip(est.iter()) {
                    worst = worst.max((a - b).abs());
                }
                checked += 1;
            }
        }
    }
    (checked, worst)
}

fn score_case(params: &MtgmParams, points: &[Array2<f64>], t: usize) -> f64 {
    let sched = linear_schedule(4, 0.9, 0.8).unwrap();
    let reference = Mixture {
        means: params.patterns.means(),
        pi: &params.pi_tilde,
        k: params.k,
        rho: params.rho,
        alpha_bar: sched.alpha_bar(t),
    };
    let mut worst = 0.0f64;
    for x in points {
        let exact = score_function(x, params, t, &sched).unwrap();
        let numeric = reference.numerical_score(x, 1e-5);
        for (a, b) in exact.iter().zip(numeric.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

fn grid_1d(tokens: usize) -> Vec<Array2<f64>> {
    let ticks: Vec<f64> = (-8..=8).map(|i| 0.5 * i as f64).collect();
    let mut out = Vec::new();
    for &a in &ticks {
        for &b in ticks.iter().step_by(3) {
            let row: Vec<f64> = [a, b, -a + 0.3].iter().take(tokens).copied().collect();
            out.push(Array2::from_shape_vec((1, tokens), row).unwrap());
        }
    }
    out
}

/// Max |score - numerical gradient of log density| on 1-D grids.
pub fn score_error_1d() -> f64 {
    let two = PatternSet::general(array![[1.5, -1.5]]).unwrap();
    let k1 = MtgmParams::new(two.clone(), vec![0.5, 0.5], 1, 0.5).unwrap();
    let skew = MtgmParams::new(two, vec![0.3, 0.7], 2, 0.5).unwrap();
    let three = PatternSet::general(array![[2.0, 0.0, -1.0]]).unwrap();
    let k2 = MtgmParams::new(three, vec![0.2, 0.5, 0.3], 2, 0.8).unwrap();
    let mut worst = 0.0f64;
    for (params, tokens) in [(&k1, 1), (&k1, 2), (&skew, 2), (&k2, 3)] {
        for t in [1, 4] {
            worst = worst.max(score_case(params, &grid_1d(tokens), t));
        }
    }
    worst
}

/// Max |score - numerical gradient of log density| on a 2-D grid.
pub fn score_error_2d() -> f64 {
    let ortho = MtgmParams::uniform(2, 2, 1, 0.4, 9).unwrap();
    let general = PatternSet::general(array![[1.0, -0.5, 0.2], [0.3, 0.8, -1.1]]).unwrap();
    let mixed = MtgmParams::new(general, vec![0.2, 0.3, 0.5], 2, 0.6).unwrap();
    let mut points = Vec::new();
    for i in -3..=3 {
        for j in -3..=3 {
            let (a, b) = (0.7 * i as f64, 0.7 * j as f64);
            points.push(array![[a, b * 0.5], [b, a - 0.2]]);
        }
    }
    let mut worst = 0.0f64;
    for params in [&ortho, &mixed] {
        for t in [1, 4] {
            worst = worst.max(score_case(params, &points, t));
        }
    }
    worst
}
