//! Runs, sweeps and figure bundles: everything the `mtgm-lab` binary does,
//! as library calls that write into deterministic, never-reused directories.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{attention_diag, mean_estimation_error};
use crate::error::{invalid, Error, Result};
use crate::model::{Checkpoint, ModelParams};
use crate::oracle::McPlan;
use crate::patterns::{prior_with_min, sample_pair};
use crate::rng::{stream, Purpose};
use crate::schedule::{TimeSetMode, TimeSetSpec};
use crate::stats::median;
use crate::trainer::{train, EvalSet, Evaluation, TrainConfig, TrainRun, TrainTrace};

/// Process exit code for a given error: 2 for bad input, 3 for divergence.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidParam { .. }
        | Error::InsufficientDimension { .. }
        | Error::Json(_)
        | Error::Shape { .. }
        | Error::TimeIndex { .. }
        | Error::Enumeration { .. }
        | Error::Checkpoint(_) => 2,
        Error::Diverged { .. } => 3,
        Error::Panel { source, .. } => exit_code(source),
        _ => 1,
    }
}

/// `base/stem`, or `base/stem-2`, `base/stem-3`, ... if taken. Existing
/// outputs are never overwritten.
pub fn fresh_dir(base: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(base)?;
    let mut n = 1;
    loop {
        let name = if n == 1 { stem.to_string() } else { format!("{stem}-{n}") };
        let dir = base.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(e.into()),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Write the four artifacts of a run into `dir`.
pub fn write_run(dir: &Path, cfg: &TrainConfig, run: &TrainRun) -> Result<()> {
    write_json(&dir.join("config.json"), cfg)?;
    run.trace.write_jsonl(fs::File::create(dir.join("trace.jsonl"))?)?;
    run.trace.write_csv(fs::File::create(dir.join("trace.csv"))?)?;
    let last = run.trace.last().map_or(0, |r| r.step);
    Checkpoint::from_params(&run.params, last).save(&dir.join("checkpoint.json"))
}

/// Train `cfg` and write `config.json`, `trace.jsonl`, `trace.csv` and
/// `checkpoint.json` into a fresh `train-seed<seed>` directory under `out`.
pub fn cmd_train(cfg: &TrainConfig, out: &Path) -> Result<(PathBuf, TrainRun)> {
    cfg.validate()?;
    let run = train(cfg)?;
    let dir = fresh_dir(out, &format!("train-seed{}", cfg.master_seed))?;
    write_run(&dir, cfg, &run)?;
    Ok((dir, run))
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    K,
    #[serde(rename = "pi_min")]
    PiMin,
    #[serde(rename = "tset_mode")]
    TsetMode,
    P,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K => "K",
            SweepAxis::PiMin => "pi_min",
            SweepAxis::TsetMode => "tset_mode",
            SweepAxis::P => "P",
        }
    }
}

/// One point along a sweep axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Count(usize),
    Real(f64),
    Mode(TimeSetMode),
}

impl AxisValue {
    pub fn label(&self) -> String {
        match self {
            AxisValue::Count(n) => n.to_string(),
            AxisValue::Real(x) => x.to_string(),
            AxisValue::Mode(m) => serde_json::to_value(m)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default(),
        }
    }

    fn sort_key(&self) -> (f64, u8) {
        match self {
            AxisValue::Count(n) => (*n as f64, 0),
            AxisValue::Real(x) => (*x, 0),
            AxisValue::Mode(m) => (0.0, *m as u8),
        }
    }
}

/// Where a sweep's base configuration comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BaseConfig {
    /// Path relative to the sweep file.
    Path(PathBuf),
    Inline(Box<TrainConfig>),
}

fn default_seeds() -> usize {
    3
}
fn default_threshold() -> f64 {
    0.1
}

/// A one-axis grid of training runs, `seeds` per value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: BaseConfig,
    pub axis: SweepAxis,
    pub values: Vec<AxisValue>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    /// Steps-to-threshold counts the first eval with
    /// `excess <= threshold_frac * r_oracle_closed`.
    #[serde(default = "default_threshold")]
    pub threshold_frac: f64,
    /// Optional overrides of the base budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_size: Option<usize>,
}

/// A sweep with its base configuration resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub base: TrainConfig,
    pub axis: SweepAxis,
    pub values: Vec<AxisValue>,
    pub seeds: usize,
    pub threshold_frac: f64,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Sweep> {
        let spec: SweepSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
        spec.resolve(path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve(&self, dir: &Path) -> Result<Sweep> {
        let mut base = match &self.base {
            BaseConfig::Path(p) => TrainConfig::load(&dir.join(p))?,
            BaseConfig::Inline(cfg) => (**cfg).clone(),
        };
        if let Some(s) = self.steps {
            base.steps = s;
        }
        if let Some(e) = self.eval_every {
            base.eval_every = e;
        }
        if let Some(n) = self.eval_size {
            base.eval_size = n;
            base.diag_size = base.diag_size.min(n);
        }
        let sweep = Sweep {
            base,
            axis: self.axis,
            values: self.values.clone(),
            seeds: self.seeds,
            threshold_frac: self.threshold_frac,
        };
        sweep.validate()?;
        Ok(sweep)
    }
}

impl Sweep {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(invalid("seeds", "must be >= 1"));
        }
        if self.values.is_empty() {
            return Err(invalid("values", "sweep needs at least one value"));
        }
        if self.threshold_frac.is_nan() || self.threshold_frac <= 0.0 {
            return Err(invalid("threshold_frac", "must be > 0"));
        }
        self.base.validate()?;
        for v in &self.values {
            self.cell_config(v, 0)?.validate()?;
        }
        Ok(())
    }

    /// The training config of one cell.
    pub fn cell_config(&self, value: &AxisValue, seed_index: usize) -> Result<TrainConfig> {
        let mut cfg = self.base.clone();
        cfg.master_seed = self.base.master_seed + seed_index as u64;
        let wrong = || invalid("values", format!("{value:?} is not a valid {} value", self.axis.name()));
        match (self.axis, value) {
            (SweepAxis::K, AxisValue::Count(k)) => cfg.data = cfg.data.with_k(*k)?,
            (SweepAxis::P, AxisValue::Count(p)) => cfg.tokens = *p,
            (SweepAxis::PiMin, AxisValue::Real(x)) => {
                cfg.data = cfg.data.with_pi(prior_with_min(cfg.data.count(), *x)?)?
            }
            (SweepAxis::PiMin, AxisValue::Count(n)) => {
                cfg.data = cfg.data.with_pi(prior_with_min(cfg.data.count(), *n as f64)?)?
            }
            (SweepAxis::TsetMode, AxisValue::Mode(m)) => cfg.tset = TimeSetSpec::Named(*m),
            _ => return Err(wrong()),
        }
        Ok(cfg)
    }

    /// Cells in output order: by axis value, then seed.
    pub fn cells(&self) -> Vec<(AxisValue, usize)> {
        let mut values = self.values.clone();
        values.sort_by(|a, b| a.sort_key().partial_cmp(&b.sort_key()).unwrap_or(std::cmp::Ordering::Equal));
        values
            .iter()
            .flat_map(|v| (0..self.seeds).map(move |s| (*v, s)))
            .collect()
    }

    fn cell_dir(&self, root: &Path, value: &AxisValue, seed_index: usize) -> PathBuf {
        root.join("cells")
            .join(format!("{}={}", self.axis.name(), value.label()))
            .join(format!("seed{seed_index}"))
    }
}

/// One line of a sweep's aggregate CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    /// Empty if the threshold was never reached.
    pub steps_to_threshold: Option<usize>,
    pub final_step: Option<usize>,
    pub final_eval_loss: Option<f64>,
    pub r_oracle_closed: Option<f64>,
    pub final_excess: Option<f64>,
    pub threshold: Option<f64>,
    pub status: String,
}

impl CellSummary {
    /// Summary of a finished cell, from its trace alone.
    pub fn from_trace(axis: &str, value: &str, seed: u64, trace: &TrainTrace, threshold_frac: f64) -> Self {
        let last = trace.last();
        let r_oracle = last.map(|r| r.eval.report.r_oracle_closed);
        let threshold = r_oracle.map(|r| threshold_frac * r);
        Self {
            axis: axis.into(),
            value: value.into(),
            seed,
            steps_to_threshold: threshold.and_then(|th| trace.steps_to_threshold(th)),
            final_step: last.map(|r| r.step),
            final_eval_loss: last.map(|r| r.eval.report.eval_loss.mean),
            r_oracle_closed: r_oracle,
            final_excess: last.map(|r| r.excess()),
            threshold,
            status: "ok".into(),
        }
    }

    fn failed(axis: &str, value: &str, seed: u64, err: &Error) -> Self {
        Self {
            axis: axis.into(),
            value: value.into(),
            seed,
            steps_to_threshold: None,
            final_step: None,
            final_eval_loss: None,
            r_oracle_closed: None,
            final_excess: None,
            threshold: None,
            status: format!("error: {err}"),
        }
    }
}

pub fn write_aggregate(path: &Path, cells: &[CellSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in cells {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_aggregate(path: &Path) -> Result<Vec<CellSummary>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Median over seeds of steps-to-threshold, with "never reached" counted as
/// larger than any step. `None` if the median itself never reached.
pub fn median_steps(cells: &[CellSummary], value: &str) -> Option<f64> {
    let xs: Vec<f64> = cells
        .iter()
        .filter(|c| c.value == value)
        .map(|c| c.steps_to_threshold.map_or(f64::INFINITY, |s| s as f64))
        .collect();
    let m = median(&xs);
    m.is_finite().then_some(m)
}

/// Result of a sweep: the aggregate rows and, for successful cells, their traces.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub dir: PathBuf,
    pub cells: Vec<CellSummary>,
}

/// Run every cell (in parallel), write per-cell traces and `aggregate.csv`.
/// A failing cell is recorded and does not stop the others.
pub fn cmd_sweep(sweep: &Sweep, out: &Path, name: &str) -> Result<SweepOutcome> {
    sweep.validate()?;
    let dir = fresh_dir(out, name)?;
    write_json(&dir.join("base.json"), &sweep.base)?;
    let cells = sweep.cells();
    let summaries: Vec<CellSummary> = cells
        .par_iter()
        .map(|(value, s)| {
            let label = value.label();
            let seed = sweep.base.master_seed + *s as u64;
            let outcome = sweep.cell_config(value, *s).and_then(|cfg| {
                let run = train(&cfg)?;
                let cell_dir = sweep.cell_dir(&dir, value, *s);
                fs::create_dir_all(&cell_dir)?;
                write_run(&cell_dir, &cfg, &run)?;
                Ok(run)
            });
            match outcome {
                Ok(run) => {
                    CellSummary::from_trace(sweep.axis.name(), &label, seed, &run.trace, sweep.threshold_frac)
                }
                Err(e) => CellSummary::failed(sweep.axis.name(), &label, seed, &e),
            }
        })
        .collect();
    write_aggregate(&dir.join("aggregate.csv"), &summaries)?;
    write_json(
        &dir.join("sweep.json"),
        &SweepSpec {
            base: BaseConfig::Path("base.json".into()),
            axis: sweep.axis,
            values: sweep.values.clone(),
            seeds: sweep.seeds,
            threshold_frac: sweep.threshold_frac,
            steps: None,
            eval_every: None,
            eval_size: None,
        },
    )?;
    Ok(SweepOutcome { dir, cells: summaries })
}

/// Rebuild a sweep's aggregate from its per-cell traces and compare it with
/// the stored `aggregate.csv`. Returns the number of mismatching rows.
pub fn cmd_verify(sweep_dir: &Path) -> Result<usize> {
    let sweep = SweepSpec::load(&sweep_dir.join("sweep.json"))?;
    let stored = read_aggregate(&sweep_dir.join("aggregate.csv"))?;
    let cells = sweep.cells();
    if stored.len() != cells.len() {
        return Ok(stored.len().abs_diff(cells.len()).max(1));
    }
    let mut bad = 0;
    for ((value, s), row) in cells.iter().zip(&stored) {
        let trace_path = sweep.cell_dir(sweep_dir, value, *s).join("trace.jsonl");
        let seed = sweep.base.master_seed + *s as u64;
        let rebuilt = match fs::read_to_string(&trace_path) {
            Ok(text) => CellSummary::from_trace(
                sweep.axis.name(),
                &value.label(),
                seed,
                &TrainTrace::read_jsonl(&text)?,
                sweep.threshold_frac,
            ),
            // A failed cell has no trace; its row must say so.
            Err(_) if row.status != "ok" => row.clone(),
            Err(e) => return Err(e.into()),
        };
        if &rebuilt != row {
            bad += 1;
        }
    }
    Ok(bad)
}

// ---------------------------------------------------------------------------
// Distribution shift
// ---------------------------------------------------------------------------

/// The pattern proportions to evaluate under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PiPrime {
    Named(PiPrimeKind),
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PiPrimeKind {
    /// All patterns equally likely.
    Uniform,
    /// One draw from the flat Dirichlet, seeded by the run seed.
    Random,
}

impl PiPrime {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "uniform" => Ok(PiPrime::Named(PiPrimeKind::Uniform)),
            "random" => Ok(PiPrime::Named(PiPrimeKind::Random)),
            list => list
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(PiPrime::Explicit)
                .map_err(|_| invalid("pi_prime", "expected `uniform`, `random` or a comma-separated list")),
        }
    }

    pub fn resolve(&self, m: usize, seed: u64) -> Result<Vec<f64>> {
        match self {
            PiPrime::Named(PiPrimeKind::Uniform) => Ok(vec![1.0 / m as f64; m]),
            PiPrime::Named(PiPrimeKind::Random) => {
                // Normalized iid Exp(1) draws are flat-Dirichlet distributed.
                let mut rng = stream(seed, Purpose::Misc);
                let mut pi: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(Exp1)).collect();
                let s: f64 = pi.iter().sum();
                pi.iter_mut().for_each(|x| *x /= s);
                Ok(pi)
            }
            PiPrime::Explicit(v) => Ok(v.clone()),
        }
    }
}

/// In-distribution and shifted evaluation of one model at the same token count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftReport {
    pub pi_train: Vec<f64>,
    pub pi_prime: Vec<f64>,
    pub tokens: usize,
    pub in_dist: Evaluation,
    pub shifted: Evaluation,
}

impl ShiftReport {
    pub fn excess_ratio(&self) -> f64 {
        self.shifted.report.excess() / self.in_dist.report.excess()
    }

    pub fn score_ratio(&self) -> f64 {
        self.shifted.report.score_err.mean / self.in_dist.report.score_err.mean
    }
}

/// Evaluate `params` under the training proportions and under `pi_prime`,
/// both with `tokens` tokens per datum and the same evaluation seed.
pub fn eval_shift(params: &ModelParams, cfg: &TrainConfig, pi_prime: &[f64], tokens: usize) -> Result<ShiftReport> {
    params.validate()?;
    if params.dim() != cfg.data.dim() || params.steps() != cfg.sched.steps() {
        return Err(Error::Shape {
            context: "checkpoint vs config",
            expected: (cfg.data.dim(), cfg.sched.steps()),
            got: (params.dim(), params.steps()),
        });
    }
    let tset = cfg.tset()?;
    let plan = McPlan {
        tokens,
        ..cfg.eval_plan()
    };
    let shifted_data = cfg.data.with_pi(pi_prime.to_vec())?;
    let home = EvalSet::new(cfg.data.clone(), &cfg.sched, &tset, plan)?;
    let away = EvalSet::new(shifted_data, &cfg.sched, &tset, plan)?;
    Ok(ShiftReport {
        pi_train: cfg.data.pi_tilde.clone(),
        pi_prime: pi_prime.to_vec(),
        tokens,
        in_dist: home.evaluate(params, &cfg.sched, &tset, cfg.diag_size)?,
        shifted: away.evaluate(params, &cfg.sched, &tset, cfg.diag_size)?,
    })
}

/// [`eval_shift`] from files; writes `shift.json` and `shift.csv`.
pub fn cmd_eval_shift(
    checkpoint: &Path,
    cfg: &TrainConfig,
    pi_prime: &PiPrime,
    tokens: usize,
    out: &Path,
) -> Result<(PathBuf, ShiftReport)> {
    let params = Checkpoint::load(checkpoint)?.to_params()?;
    let pi = pi_prime.resolve(cfg.data.count(), cfg.master_seed)?;
    let report = eval_shift(&params, cfg, &pi, tokens)?;
    let dir = fresh_dir(out, &format!("shift-P{tokens}-seed{}", cfg.master_seed))?;
    write_json(&dir.join("shift.json"), &report)?;
    let mut w = csv::Writer::from_path(dir.join("shift.csv"))?;
    w.write_record(["split", "eval_loss", "eval_loss_se", "r_oracle", "r_bayes_mc", "excess", "score_err", "score_err_se"])?;
    for (name, ev) in [("in_dist", &report.in_dist), ("shifted", &report.shifted)] {
        let r = &ev.report;
        w.write_record([
            name.to_string(),
            r.eval_loss.mean.to_string(),
            r.eval_loss.se.to_string(),
            r.r_oracle_closed.to_string(),
            r.r_bayes_mc.mean.to_string(),
            r.excess().to_string(),
            r.score_err.mean.to_string(),
            r.score_err.se.to_string(),
        ])?;
    }
    w.flush()?;
    Ok((dir, report))
}

// ---------------------------------------------------------------------------
// Per-token diagnostics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDiagRow {
    pub sample: usize,
    pub t: usize,
    pub token: usize,
    pub label: usize,
    pub same_mass: f64,
    pub uniformity_dev: f64,
    pub qk_same_mean: Option<f64>,
    pub qk_cross_mean_abs: Option<f64>,
    pub mean_est_err: f64,
}

/// Full per-token probe vectors for the first `samples` evaluation draws at
/// every step of the config's time set.
pub fn token_diagnostics(params: &ModelParams, cfg: &TrainConfig, samples: usize) -> Result<Vec<TokenDiagRow>> {
    let tset = cfg.tset()?;
    let plan = cfg.eval_plan();
    let per: Vec<Vec<TokenDiagRow>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let (sample, e) = sample_pair(&cfg.data, plan.tokens, &mut plan.key(i).rng());
            let mut rows = Vec::new();
            for t in tset.iter() {
                let diag = attention_diag(params, &sample, &e, t, &cfg.sched)?;
                let err = mean_estimation_error(params, &cfg.data, &sample, &e, t, &cfg.sched)?;
                for p in 0..plan.tokens {
                    rows.push(TokenDiagRow {
                        sample: i,
                        t,
                        token: p,
                        label: sample.y[p],
                        same_mass: diag.same_mass[p],
                        uniformity_dev: diag.uniformity_dev[p],
                        qk_same_mean: diag.qk.map(|q| q.same_mean),
                        qk_cross_mean_abs: diag.qk.map(|q| q.cross_mean_abs),
                        mean_est_err: err,
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// [`token_diagnostics`] for a checkpoint, written to `diag.csv`.
pub fn cmd_diag(checkpoint: &Path, cfg: &TrainConfig, samples: usize, out: &Path) -> Result<PathBuf> {
    let params = Checkpoint::load(checkpoint)?.to_params()?;
    let rows = token_diagnostics(&params, cfg, samples)?;
    let dir = fresh_dir(out, &format!("diag-seed{}", cfg.master_seed))?;
    let mut w = csv::Writer::from_path(dir.join("diag.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(dir)
}

// ---------------------------------------------------------------------------
// Figure 3 bundle
// ---------------------------------------------------------------------------

/// What `repro-fig3` runs. [`Fig3Plan::desk`] is the canned default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig3Plan {
    /// Panels A and E come from one full run of this config.
    pub base: TrainConfig,
    pub seeds: usize,
    pub k_values: Vec<usize>,
    pub pi_min_values: Vec<f64>,
    /// Budget and cadence of the sweep panels.
    pub sweep_steps: usize,
    pub sweep_eval_every: usize,
    pub threshold_frac: f64,
}

impl Fig3Plan {
    pub fn desk(base: TrainConfig) -> Self {
        let m = base.data.count();
        Self {
            base,
            seeds: 3,
            k_values: vec![1, 2, m - 1],
            pi_min_values: vec![0.01, 0.05, 0.1, 1.0 / m as f64],
            sweep_steps: 800,
            sweep_eval_every: 20,
            threshold_frac: 0.1,
        }
    }

    fn sweep(&self, axis: SweepAxis, values: Vec<AxisValue>) -> Sweep {
        let mut base = self.base.clone();
        base.steps = self.sweep_steps;
        base.eval_every = self.sweep_eval_every;
        Sweep {
            base,
            axis,
            values,
            seeds: self.seeds,
            threshold_frac: self.threshold_frac,
        }
    }
}

/// Run the plan and write `panel_{a..e}.csv` plus the underlying runs.
pub fn cmd_repro_fig3(plan: &Fig3Plan, out: &Path) -> Result<PathBuf> {
    let dir = fresh_dir(out, &format!("fig3-seed{}", plan.base.master_seed))?;
    write_json(&dir.join("plan.json"), plan)?;
    let panel_err = |panel: &str, e: Error| Error::Panel {
        panel: panel.to_string(),
        source: Box::new(e),
    };

    let run_dir = dir.join("run");
    fs::create_dir_all(&run_dir)?;
    let run = train(&plan.base).map_err(|e| panel_err("A/E", e))?;
    write_run(&run_dir, &plan.base, &run)?;

    let mut a = csv::Writer::from_path(dir.join("panel_a.csv"))?;
    a.write_record(["step", "eval_loss", "eval_loss_se", "score_err", "score_err_se", "r_oracle", "r_bayes_mc"])?;
    let mut e = csv::Writer::from_path(dir.join("panel_e.csv"))?;
    e.write_record(["step", "same_mass_median", "same_mass_p10", "same_mass_p90", "uniformity_median", "qk_ratio"])?;
    for r in &run.trace.records {
        let rep = &r.eval.report;
        a.write_record([
            r.step.to_string(),
            rep.eval_loss.mean.to_string(),
            rep.eval_loss.se.to_string(),
            rep.score_err.mean.to_string(),
            rep.score_err.se.to_string(),
            rep.r_oracle_closed.to_string(),
            rep.r_bayes_mc.mean.to_string(),
        ])?;
        let d = &r.eval.diag;
        e.write_record([
            r.step.to_string(),
            d.same_mass.median.to_string(),
            d.same_mass.p10.to_string(),
            d.same_mass.p90.to_string(),
            d.uniformity_dev.median.to_string(),
            d.qk_ratio().map_or(String::new(), |r| r.to_string()),
        ])?;
    }
    a.flush()?;
    e.flush()?;

    let sweeps = [
        ("b", plan.sweep(SweepAxis::K, plan.k_values.iter().map(|&k| AxisValue::Count(k)).collect())),
        ("c", plan.sweep(SweepAxis::PiMin, plan.pi_min_values.iter().map(|&x| AxisValue::Real(x)).collect())),
        (
            "d",
            plan.sweep(
                SweepAxis::TsetMode,
                vec![AxisValue::Mode(TimeSetMode::First40), AxisValue::Mode(TimeSetMode::Last40)],
            ),
        ),
    ];
    for (panel, sweep) in &sweeps {
        let outcome = cmd_sweep(sweep, &dir, &format!("sweep_{panel}")).map_err(|e| panel_err(panel, e))?;
        fs::copy(outcome.dir.join("aggregate.csv"), dir.join(format!("panel_{panel}.csv")))?;
    }
    Ok(dir)
}
