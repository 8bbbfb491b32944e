//! Noise schedules, the forward noising map and SNR summaries.
//!
//! Time steps are 1-based throughout: `t` ranges over `1..=T`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Per-step `alpha_t` and cumulative `alpha_bar_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    alpha_first: f64,
    alpha_last: f64,
}

/// `alpha_t` interpolated linearly from `alpha1` down to `alpha_last`,
/// `alpha_bar_t` the running product.
pub fn linear_schedule(steps: usize, alpha1: f64, alpha_last: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid("T", "need at least one step"));
    }
    if !(0.0 < alpha_last && alpha_last <= alpha1 && alpha1 < 1.0) {
        return Err(invalid(
            "alpha",
            format!("need 0 < alphaT <= alpha1 < 1, got alpha1={alpha1}, alphaT={alpha_last}"),
        ));
    }
    let alpha: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                alpha1
            } else {
                alpha1 - (alpha1 - alpha_last) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, &a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        alpha,
        alpha_bar,
        alpha_first: alpha1,
        alpha_last,
    })
}

impl NoiseSchedule {
    /// The experimental schedule: `T = 50`, `alpha` from 0.98 to 0.95.
    pub fn standard() -> Self {
        linear_schedule(50, 0.98, 0.95).expect("valid constants")
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimeIndex { t, steps: self.steps() });
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        ab / (1.0 - ab)
    }

    pub fn to_config(&self) -> ScheduleConfig {
        ScheduleConfig {
            steps: self.steps(),
            alpha1: self.alpha_first,
            alpha_last: self.alpha_last,
            kind: ScheduleKind::Linear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// JSON form: `{"T": 50, "alpha1": 0.98, "alphaT": 0.95, "kind": "linear"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub alpha1: f64,
    #[serde(rename = "alphaT")]
    pub alpha_last: f64,
    #[serde(default = "linear_kind")]
    pub kind: ScheduleKind,
}

fn linear_kind() -> ScheduleKind {
    ScheduleKind::Linear
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear => linear_schedule(self.steps, self.alpha1, self.alpha_last),
        }
    }
}

impl Serialize for NoiseSchedule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_config().serialize(s)
    }
}

impl<'de> Deserialize<'de> for NoiseSchedule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        ScheduleConfig::deserialize(d)?
            .build()
            .map_err(serde::de::Error::custom)
    }
}

/// The set of time steps a loss or risk is averaged over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeSet {
    indices: Vec<usize>,
}

impl TimeSet {
    pub fn new(indices: Vec<usize>, steps: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(invalid("tset", "empty time set"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("tset", "indices must be strictly increasing"));
        }
        if indices[0] == 0 || *indices.last().unwrap() > steps {
            return Err(invalid("tset", format!("indices must lie in 1..={steps}")));
        }
        Ok(Self { indices })
    }

    pub fn full(steps: usize) -> Self {
        Self {
            indices: (1..=steps).collect(),
        }
    }

    /// The first `round(frac * T)` steps (at least one).
    pub fn first_fraction(steps: usize, frac: f64) -> Self {
        let n = fraction_len(steps, frac);
        Self {
            indices: (1..=n).collect(),
        }
    }

    /// The last `round(frac * T)` steps (at least one).
    pub fn last_fraction(steps: usize, frac: f64) -> Self {
        let n = fraction_len(steps, frac);
        Self {
            indices: (steps - n + 1..=steps).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }
}

fn fraction_len(steps: usize, frac: f64) -> usize {
    ((steps as f64 * frac).round() as usize).clamp(1, steps)
}

/// JSON form of a [`TimeSet`]: `"full"`, `"first40"`, `"last40"` or an
/// explicit list of 1-based steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeSetSpec {
    Named(TimeSetMode),
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeSetMode {
    Full,
    First40,
    Last40,
}

impl Default for TimeSetSpec {
    fn default() -> Self {
        TimeSetSpec::Named(TimeSetMode::Full)
    }
}

impl TimeSetSpec {
    pub fn build(&self, steps: usize) -> Result<TimeSet> {
        match self {
            TimeSetSpec::Named(TimeSetMode::Full) => Ok(TimeSet::full(steps)),
            TimeSetSpec::Named(TimeSetMode::First40) => Ok(TimeSet::first_fraction(steps, 0.4)),
            TimeSetSpec::Named(TimeSetMode::Last40) => Ok(TimeSet::last_fraction(steps, 0.4)),
            TimeSetSpec::Explicit(v) => TimeSet::new(v.clone(), steps),
        }
    }
}

/// `X^t = sqrt(abar_t) X^0 + sqrt(1 - abar_t) E`.
pub fn forward_noise(
    x0: &Array2<f64>,
    t: usize,
    noise: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    sched.check_t(t)?;
    if x0.dim() != noise.dim() {
        return Err(Error::Shape {
            context: "forward_noise",
            expected: x0.dim(),
            got: noise.dim(),
        });
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = x0.clone();
    out.zip_mut_with(noise, |x, &e| *x = a * *x + b * e);
    Ok(out)
}

/// Mean of `abar_t / (1 - abar_t)` over `tset`.
pub fn time_averaged_snr(sched: &NoiseSchedule, tset: &TimeSet) -> f64 {
    tset.iter().map(|t| sched.snr(t)).sum::<f64>() / tset.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn standard_schedule_endpoints() {
        let s = NoiseSchedule::standard();
        assert_eq!(s.steps(), 50);
        assert_eq!(s.alpha_bar(1), 0.98);
        assert!((s.alpha(50) - 0.95).abs() < 1e-15);
        // alpha_2 = 0.98 - 0.03/49, independent product
        let a2 = 0.98 - 0.03 / 49.0;
        assert!((s.alpha_bar(2) - 0.98 * a2).abs() < 1e-15);
    }

    #[test]
    fn single_step() {
        let s = linear_schedule(1, 0.98, 0.98).unwrap();
        assert_eq!(s.alpha_bars(), &[0.98]);
    }

    #[test]
    fn rejects_bad_alphas() {
        assert!(linear_schedule(10, 0.95, 0.98).is_err());
        assert!(linear_schedule(10, 1.0, 0.9).is_err());
        assert!(linear_schedule(10, 0.9, 0.0).is_err());
        assert!(linear_schedule(0, 0.9, 0.9).is_err());
    }

    #[test]
    fn schedule_invariants() {
        for &(t, a1, at) in &[(50, 0.98, 0.95), (10, 0.98, 0.95), (7, 0.9, 0.5), (3, 0.5, 0.5)] {
            let s = linear_schedule(t, a1, at).unwrap();
            assert_eq!(s.alpha_bar(1), s.alpha(1));
            for i in 2..=t {
                assert!(s.alpha_bar(i) < s.alpha_bar(i - 1));
                assert!((s.alpha_bar(i) - s.alpha_bar(i - 1) * s.alpha(i)).abs() < 1e-12);
                assert!(s.alpha_bar(i) > 0.0 && s.alpha_bar(i) < 1.0);
            }
        }
    }

    #[test]
    fn forward_noise_cases() {
        let s = linear_schedule(3, 0.9, 0.8).unwrap();
        let x0 = array![[1.0, -2.0], [0.5, 3.0]];
        let zero = Array2::zeros((2, 2));
        let ab = s.alpha_bar(2);
        assert_eq!(forward_noise(&x0, 2, &zero, &s).unwrap(), x0.mapv(|x| ab.sqrt() * x));
        assert_eq!(forward_noise(&zero, 2, &x0, &s).unwrap(), x0.mapv(|x| (1.0 - ab).sqrt() * x));
        assert!(forward_noise(&x0, 4, &zero, &s).is_err());
        assert!(forward_noise(&x0, 0, &zero, &s).is_err());
        assert!(forward_noise(&x0, 1, &Array2::zeros((2, 3)), &s).is_err());
    }

    #[test]
    fn forward_noise_scalar() {
        // abar = 0.5: sqrt(.5)*2 + sqrt(.5)*1
        let s = linear_schedule(1, 0.5, 0.5).unwrap();
        let out = forward_noise(&array![[2.0]], 1, &array![[1.0]], &s).unwrap();
        assert!((out[[0, 0]] - 2.121_320_343_559_642).abs() < 1e-12);
    }

    #[test]
    fn snr_examples() {
        let s = linear_schedule(1, 0.98, 0.98).unwrap();
        assert!((time_averaged_snr(&s, &TimeSet::full(1)) - 49.0).abs() < 1e-12);

        let p = NoiseSchedule::standard();
        let first = time_averaged_snr(&p, &TimeSet::first_fraction(50, 0.4));
        let last = time_averaged_snr(&p, &TimeSet::last_fraction(50, 0.4));
        assert!(first > last);

        let mut acc = 0.0;
        let mut ab = 1.0;
        for i in 0..50 {
            ab *= 0.98 - 0.03 * i as f64 / 49.0;
            acc += ab / (1.0 - ab);
        }
        assert!((time_averaged_snr(&p, &TimeSet::full(50)) - acc / 50.0).abs() < 1e-10);
    }

    #[test]
    fn time_sets() {
        assert_eq!(TimeSet::first_fraction(10, 0.4).indices(), &[1, 2, 3, 4]);
        assert_eq!(TimeSet::last_fraction(10, 0.4).indices(), &[7, 8, 9, 10]);
        assert_eq!(TimeSet::first_fraction(50, 0.4).len(), 20);
        assert_eq!(TimeSet::first_fraction(1, 0.4).indices(), &[1]);
        assert!(TimeSet::new(vec![], 5).is_err());
        assert!(TimeSet::new(vec![2, 2], 5).is_err());
        assert!(TimeSet::new(vec![0, 2], 5).is_err());
        assert!(TimeSet::new(vec![3, 6], 5).is_err());
        let spec: TimeSetSpec = serde_json::from_str("\"first40\"").unwrap();
        assert_eq!(spec.build(10).unwrap(), TimeSet::first_fraction(10, 0.4));
        let spec: TimeSetSpec = serde_json::from_str("[1, 3]").unwrap();
        assert_eq!(spec.build(10).unwrap().indices(), &[1, 3]);
    }

    #[test]
    fn schedule_json() {
        let s: NoiseSchedule =
            serde_json::from_str(r#"{"T":50,"alpha1":0.98,"alphaT":0.95,"kind":"linear"}"#).unwrap();
        assert_eq!(s, NoiseSchedule::standard());
        let v = serde_json::to_value(&s).unwrap();
        assert_eq!(v["kind"], "linear");
        assert_eq!(v["T"], 50);
    }

    proptest! {
        #[test]
        fn forward_noise_is_linear(
            a in proptest::collection::vec(-3.0f64..3.0, 6),
            b in proptest::collection::vec(-3.0f64..3.0, 6),
            c in proptest::collection::vec(-3.0f64..3.0, 6),
            e in proptest::collection::vec(-3.0f64..3.0, 6),
            t in 1usize..=5,
        ) {
            let s = linear_schedule(5, 0.97, 0.9).unwrap();
            let m = |v: &Vec<f64>| Array2::from_shape_vec((2, 3), v.clone()).unwrap();
            let (a, b, c, e) = (m(&a), m(&b), m(&c), m(&e));
            let lhs = forward_noise(&(&a + &b), t, &(&c + &e), &s).unwrap();
            let rhs = forward_noise(&a, t, &c, &s).unwrap() + forward_noise(&b, t, &e, &s).unwrap();
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
        }

        #[test]
        fn snr_monotone_under_earlier_steps(t in 2usize..=50, pick in 0usize..50) {
            let s = NoiseSchedule::standard();
            let base: Vec<usize> = vec![t];
            let earlier = vec![1 + pick % (t - 1)];
            let hi = time_averaged_snr(&s, &TimeSet::new(earlier, 50).unwrap());
            let lo = time_averaged_snr(&s, &TimeSet::new(base, 50).unwrap());
            prop_assert!(hi > lo);
        }
    }
}
