//! Orthogonal pattern sets and the multi-token Gaussian mixture.
//!
//! A datum is a `d x P` matrix whose columns (tokens) are drawn as follows:
//! pick a uniformly random subset `Z` of `K` out of `M` patterns, renormalize
//! the pattern prior `pi_tilde` onto `Z`, then draw each token's label from
//! that renormalized prior and add isotropic Gaussian noise of scale `rho`
//! around the labelled pattern.

use itertools::Itertools;
use ndarray::{Array2, ArrayView1};
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Purpose};

/// Largest subset count we are willing to enumerate.
pub const MAX_SUBSETS: u128 = 1_000_000;

const ORTHO_TOL: f64 = 1e-9;

/// `M` mean vectors stored as the columns of a `d x M` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternSet {
    means: Array2<f64>,
    norm_sq: f64,
    orthogonal: bool,
}

impl PatternSet {
    /// Wraps explicit orthogonal means (columns), checking the Gram matrix.
    pub fn from_means(means: Array2<f64>) -> Result<Self> {
        let (d, m) = means.dim();
        if m > d {
            return Err(Error::InsufficientDimension { dim: d, patterns: m });
        }
        if m == 0 {
            return Err(invalid("means", "need at least one pattern"));
        }
        let gram = means.t().dot(&means);
        let c = gram[[0, 0]];
        if c <= 0.0 || !c.is_finite() {
            return Err(invalid("means", "patterns must have positive finite norm"));
        }
        for ((i, j), &g) in gram.indexed_iter() {
            let target = if i == j { c } else { 0.0 };
            if (g - target).abs() > ORTHO_TOL * c {
                return Err(invalid(
                    "means",
                    format!("Gram entry ({i},{j}) = {g} is not {target} (norm_sq {c})"),
                ));
            }
        }
        Ok(Self {
            means,
            norm_sq: c,
            orthogonal: true,
        })
    }

    /// Arbitrary (possibly non-orthogonal, possibly `M > d`) means.
    ///
    /// Only the posterior and score oracles accept these; they are handy for
    /// low-dimensional hand-checkable instances such as `{+mu, -mu}` in 1-D.
    pub fn general(means: Array2<f64>) -> Result<Self> {
        let (_, m) = means.dim();
        if m == 0 {
            return Err(invalid("means", "need at least one pattern"));
        }
        if means.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("pattern means"));
        }
        let norm_sq = means.iter().map(|x| x * x).sum::<f64>() / m as f64;
        Ok(Self {
            means,
            norm_sq,
            orthogonal: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.means.nrows()
    }

    pub fn count(&self) -> usize {
        self.means.ncols()
    }

    /// Common squared norm (average squared norm for general sets).
    pub fn norm_sq(&self) -> f64 {
        self.norm_sq
    }

    pub fn is_orthogonal(&self) -> bool {
        self.orthogonal
    }

    /// `d x M`, column `u` is pattern `u`.
    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn mean(&self, u: usize) -> ArrayView1<'_, f64> {
        self.means.column(u)
    }

    /// The `d x P` matrix whose column `p` is the pattern of label `labels[p]`.
    pub fn mean_matrix(&self, labels: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((self.dim(), labels.len()));
        for (p, &u) in labels.iter().enumerate() {
            out.column_mut(p).assign(&self.means.column(u));
        }
        out
    }
}

/// Builds `m` orthogonal patterns of squared norm `norm_sq` in `R^d`.
///
/// With `seed = Some(s)` the patterns are the orthonormalized columns of a
/// seeded Gaussian `d x m` matrix (a random rotation of the scaled basis).
/// With `seed = None` they are the first `m` scaled standard basis vectors.
pub fn build_pattern_set(d: usize, m: usize, norm_sq: f64, seed: Option<u64>) -> Result<PatternSet> {
    if m > d {
        return Err(Error::InsufficientDimension { dim: d, patterns: m });
    }
    if m < 2 {
        return Err(invalid("M", format!("need at least 2 patterns, got {m}")));
    }
    if !(norm_sq > 0.0 && norm_sq.is_finite()) {
        return Err(invalid("norm_sq", format!("must be positive, got {norm_sq}")));
    }
    let scale = norm_sq.sqrt();
    let mut q = Array2::<f64>::zeros((d, m));
    match seed {
        None => {
            for u in 0..m {
                q[[u, u]] = 1.0;
            }
        }
        Some(s) => {
            let mut rng = stream(s, Purpose::Patterns);
            for x in q.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
            orthonormalize_columns(&mut q)?;
        }
    }
    q.mapv_inplace(|x| x * scale);
    // Re-assert exactness of the construction.
    let mut set = PatternSet::from_means(q)?;
    set.norm_sq = norm_sq;
    Ok(set)
}

/// Modified Gram-Schmidt with one re-orthogonalization pass.
fn orthonormalize_columns(q: &mut Array2<f64>) -> Result<()> {
    let m = q.ncols();
    for j in 0..m {
        for _pass in 0..2 {
            for i in 0..j {
                let proj = q.column(i).dot(&q.column(j));
                let qi = q.column(i).to_owned();
                q.column_mut(j).scaled_add(-proj, &qi);
            }
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        if norm < 1e-12 {
            return Err(invalid("pattern_seed", "degenerate Gaussian draw"));
        }
        q.column_mut(j).mapv_inplace(|x| x / norm);
    }
    Ok(())
}

/// Full data-distribution parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MtgmParams {
    pub patterns: PatternSet,
    pub pi_tilde: Vec<f64>,
    pub k: usize,
    pub rho: f64,
    /// Seed the pattern set was built from; `None` means axis-aligned.
    pub pattern_seed: Option<u64>,
}

impl MtgmParams {
    pub fn new(patterns: PatternSet, pi_tilde: Vec<f64>, k: usize, rho: f64) -> Result<Self> {
        let m = patterns.count();
        validate_pi(&pi_tilde, m)?;
        if k == 0 || k > m {
            return Err(invalid("K", format!("need 1 <= K <= M = {m}, got {k}")));
        }
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(invalid("rho", format!("must be finite and >= 0, got {rho}")));
        }
        Ok(Self {
            patterns,
            pi_tilde,
            k,
            rho,
            pattern_seed: None,
        })
    }

    /// Seeded orthogonal patterns with `norm_sq = d` and uniform prior.
    pub fn uniform(d: usize, m: usize, k: usize, rho: f64, pattern_seed: u64) -> Result<Self> {
        let patterns = build_pattern_set(d, m, d as f64, Some(pattern_seed))?;
        let mut p = Self::new(patterns, vec![1.0 / m as f64; m], k, rho)?;
        p.pattern_seed = Some(pattern_seed);
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.patterns.dim()
    }

    pub fn count(&self) -> usize {
        self.patterns.count()
    }

    /// Same patterns, `K` and `rho`; different pattern prior.
    pub fn with_pi(&self, pi_tilde: Vec<f64>) -> Result<Self> {
        validate_pi(&pi_tilde, self.count())?;
        Ok(Self {
            pi_tilde,
            ..self.clone()
        })
    }

    pub fn with_k(&self, k: usize) -> Result<Self> {
        let mut p = Self::new(self.patterns.clone(), self.pi_tilde.clone(), k, self.rho)?;
        p.pattern_seed = self.pattern_seed;
        Ok(p)
    }

    pub fn to_config(&self) -> MtgmConfig {
        MtgmConfig {
            d: self.dim(),
            m: self.count(),
            k: self.k,
            rho: self.rho,
            pi_tilde: self.pi_tilde.clone(),
            norm_sq: Some(self.patterns.norm_sq()),
            pattern_seed: self.pattern_seed,
        }
    }
}

fn validate_pi(pi: &[f64], m: usize) -> Result<()> {
    if pi.len() != m {
        return Err(invalid("pi_tilde", format!("length {} != M = {m}", pi.len())));
    }
    if pi.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(invalid("pi_tilde", "entries must be positive and finite"));
    }
    let s: f64 = pi.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(invalid("pi_tilde", format!("entries sum to {s}, not 1")));
    }
    Ok(())
}

/// JSON form of [`MtgmParams`]; patterns are rebuilt from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtgmConfig {
    pub d: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub rho: f64,
    pub pi_tilde: Vec<f64>,
    /// Defaults to `d`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_sq: Option<f64>,
    #[serde(default)]
    pub pattern_seed: Option<u64>,
}

impl MtgmConfig {
    pub fn build(&self) -> Result<MtgmParams> {
        let norm_sq = self.norm_sq.unwrap_or(self.d as f64);
        let patterns = build_pattern_set(self.d, self.m, norm_sq, self.pattern_seed)?;
        let mut p = MtgmParams::new(patterns, self.pi_tilde.clone(), self.k, self.rho)?;
        p.pattern_seed = self.pattern_seed;
        Ok(p)
    }
}

impl TryFrom<MtgmConfig> for MtgmParams {
    type Error = Error;
    fn try_from(c: MtgmConfig) -> Result<Self> {
        c.build()
    }
}

impl Serialize for MtgmParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_config().serialize(s)
    }
}

impl<'de> Deserialize<'de> for MtgmParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        MtgmConfig::deserialize(d)?
            .build()
            .map_err(serde::de::Error::custom)
    }
}

/// A clean datum with its latent structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `d x P` clean tokens.
    pub x0: Array2<f64>,
    /// Token labels in `0..M`.
    pub y: Vec<usize>,
    /// Subset indicator of length `M`.
    pub z: Vec<bool>,
}

impl Sample {
    pub fn tokens(&self) -> usize {
        self.y.len()
    }
}

/// `pi_u(Z) = z_u pi_tilde_u / sum_j z_j pi_tilde_j`.
pub fn mixture_proportions(pi_tilde: &[f64], z: &[bool]) -> Result<Vec<f64>> {
    if pi_tilde.len() != z.len() {
        return Err(invalid("z", "length differs from pi_tilde"));
    }
    let norm: f64 = pi_tilde.iter().zip(z).filter(|(_, &on)| on).map(|(p, _)| p).sum();
    if !z.iter().any(|&on| on) {
        return Err(invalid("z", "subset is empty"));
    }
    Ok(pi_tilde
        .iter()
        .zip(z)
        .map(|(&p, &on)| if on { p / norm } else { 0.0 })
        .collect())
}

/// Draws one datum of `tokens` columns.
pub fn sample_data<R: Rng + ?Sized>(params: &MtgmParams, tokens: usize, rng: &mut R) -> Sample {
    let m = params.count();
    let d = params.dim();
    let mut z = vec![false; m];
    if params.k == m {
        z.fill(true);
    } else {
        for u in rand::seq::index::sample(rng, m, params.k) {
            z[u] = true;
        }
    }
    let pi = mixture_proportions(&params.pi_tilde, &z).expect("K >= 1");
    let support: Vec<usize> = (0..m).filter(|&u| z[u]).collect();
    let weights: Vec<f64> = support.iter().map(|&u| pi[u]).collect();
    let pick = WeightedIndex::new(&weights).expect("positive weights");
    let y: Vec<usize> = (0..tokens).map(|_| support[pick.sample(rng)]).collect();

    let mut x0 = Array2::<f64>::zeros((d, tokens));
    for (p, &u) in y.iter().enumerate() {
        let mu = params.patterns.mean(u);
        let mut col = x0.column_mut(p);
        for (x, &c) in col.iter_mut().zip(mu.iter()) {
            let g: f64 = rng.sample(StandardNormal);
            *x = c + params.rho * g;
        }
    }
    Sample { x0, y, z }
}

/// A datum followed by its standard-Gaussian forward noise `E`, both from `rng`.
pub fn sample_pair<R: Rng + ?Sized>(params: &MtgmParams, tokens: usize, rng: &mut R) -> (Sample, Array2<f64>) {
    let sample = sample_data(params, tokens, rng);
    let noise = Array2::from_shape_simple_fn((params.dim(), tokens), || rng.sample(StandardNormal));
    (sample, noise)
}

/// `C(m, k)` without overflow for the sizes we care about.
pub fn binomial(m: usize, k: usize) -> u128 {
    if k > m {
        return 0;
    }
    let k = k.min(m - k);
    (0..k).fold(1u128, |acc, i| acc * (m - i) as u128 / (i + 1) as u128)
}

/// All `K`-subsets of `0..M` as indicator vectors, in lexicographic order.
///
/// When `K == M` this is the single all-ones subset.
pub fn subsets(m: usize, k: usize) -> Result<Vec<Vec<bool>>> {
    let count = binomial(m, k);
    if count > MAX_SUBSETS {
        return Err(Error::Enumeration {
            m,
            k,
            count,
            limit: MAX_SUBSETS,
        });
    }
    Ok((0..m)
        .combinations(k)
        .map(|c| {
            let mut z = vec![false; m];
            for u in c {
                z[u] = true;
            }
            z
        })
        .collect())
}

/// Expected fraction of tokens carrying each pattern, by exact subset
/// enumeration. The minimum entry is the minimal average pattern ratio.
pub fn enumerate_nu(params: &MtgmParams) -> Result<Vec<f64>> {
    let m = params.count();
    let zs = subsets(m, params.k)?;
    let w = 1.0 / zs.len() as f64;
    let mut nu = vec![0.0; m];
    for z in &zs {
        let pi = mixture_proportions(&params.pi_tilde, z)?;
        for (n, p) in nu.iter_mut().zip(pi) {
            *n += w * p;
        }
    }
    Ok(nu)
}

/// `min pi_tilde / max pi_tilde`.
pub fn imbalance_delta(pi_tilde: &[f64]) -> f64 {
    let min = pi_tilde.iter().copied().fold(f64::INFINITY, f64::min);
    let max = pi_tilde.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    min / max
}

/// A prior with one entry equal to `pi_min` and the rest sharing the
/// remaining mass equally.
pub fn prior_with_min(m: usize, pi_min: f64) -> Result<Vec<f64>> {
    if !(pi_min > 0.0 && pi_min * m as f64 <= 1.0 + 1e-12) {
        return Err(invalid("pi_min", format!("need 0 < pi_min <= 1/M, got {pi_min}")));
    }
    let rest = (1.0 - pi_min) / (m - 1) as f64;
    let mut pi = vec![rest; m];
    pi[0] = pi_min;
    // Push the rounding residue into the last entry so the sum is exact.
    let s: f64 = pi[..m - 1].iter().sum();
    pi[m - 1] = 1.0 - s;
    Ok(pi)
}
