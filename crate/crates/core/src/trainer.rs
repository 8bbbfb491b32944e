//! Plain gradient descent on the DDPM loss with fresh Monte-Carlo batches,
//! periodic evaluation against the oracles, and replayable traces.
//!
//! Randomness is addressed, not consumed: batch sample `i` of step `s` always
//! comes from stream `(master_seed, Train, s, i)`, and evaluation sample `i`
//! from `(master_seed, Eval, 0, i)`. Per-sample work runs on the rayon pool
//! and is reduced in index order, so traces do not depend on thread count.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{attention_diag, mean_estimation_error, vt_gap_on, DiagPool, DiagSummary};
use crate::error::{invalid, Error, Result};
use crate::model::{forward, loss_and_gradients, Gradients, ModelParams};
use crate::oracle::{bayes_mmse, McPlan, References, RiskReport};
use crate::patterns::{sample_pair, MtgmParams};
use crate::rng::{stream, Purpose, StreamKey};
use crate::schedule::{forward_noise, NoiseSchedule, TimeSet, TimeSetSpec};
use crate::stats::Estimate;

fn default_batch() -> usize {
    128
}
fn default_eval_every() -> usize {
    100
}
fn default_eval_size() -> usize {
    512
}
fn default_diag_size() -> usize {
    32
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub data: MtgmParams,
    /// Tokens per datum.
    #[serde(rename = "P")]
    pub tokens: usize,
    #[serde(rename = "schedule")]
    pub sched: NoiseSchedule,
    /// Steps the loss is averaged over, in training and in evaluation.
    #[serde(default)]
    pub tset: TimeSetSpec,
    pub eta: f64,
    /// Separate step size for the output scales; defaults to `eta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_v: Option<f64>,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    /// How many evaluation samples also feed the attention probes.
    #[serde(default = "default_diag_size")]
    pub diag_size: usize,
    #[serde(default)]
    pub master_seed: u64,
}

/// The desk-scale configuration shipped in `configs/desk.json`.
pub const DESK_CONFIG: &str = include_str!("../configs/desk.json");

impl TrainConfig {
    /// d=32, M=4, K=2, P=64, T=10, rho=0.3, B=128, eta=0.5, 2000 steps.
    pub fn desk() -> Self {
        Self::from_json(DESK_CONFIG).expect("bundled desk config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(invalid("eta", "must be finite and > 0"));
        }
        if let Some(e) = self.eta_v {
            if !(e > 0.0 && e.is_finite()) {
                return Err(invalid("eta_v", "must be finite and > 0"));
            }
        }
        if self.tokens < 2 {
            return Err(invalid("P", "need at least 2 tokens"));
        }
        if self.batch == 0 {
            return Err(invalid("batch", "must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every", "must be >= 1"));
        }
        if self.eval_size < 2 {
            return Err(invalid("eval_size", "need at least 2 samples for a standard error"));
        }
        if self.diag_size > self.eval_size {
            return Err(invalid("diag_size", "cannot exceed eval_size"));
        }
        self.tset()?;
        Ok(())
    }

    pub fn tset(&self) -> Result<TimeSet> {
        self.tset.build(self.sched.steps())
    }

    pub fn eta_v(&self) -> f64 {
        self.eta_v.unwrap_or(self.eta)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// In-distribution evaluation plan.
    pub fn eval_plan(&self) -> McPlan {
        McPlan {
            tokens: self.tokens,
            size: self.eval_size,
            seed: self.master_seed,
            purpose: Purpose::Eval,
        }
    }
}

/// `W = 0`, `v_t ~ N(0, 1/d)` iid.
pub fn init_params(d: usize, steps: usize, seed: u64) -> ModelParams {
    let mut rng = stream(seed, Purpose::Init);
    let sd = (1.0 / d as f64).sqrt();
    ModelParams {
        w: Array2::zeros((d, d)),
        v: Array1::from_shape_simple_fn(steps, || sd * rng.sample::<f64, _>(StandardNormal)),
    }
}

/// Mean loss and gradient over the batch of step `step`.
pub fn batch_gradient(
    params: &ModelParams,
    cfg: &TrainConfig,
    tset: &TimeSet,
    step: usize,
) -> Result<(f64, Gradients)> {
    let key = StreamKey::new(cfg.master_seed, Purpose::Train, step as u64, 0);
    let parts: Vec<(f64, Gradients)> = (0..cfg.batch)
        .into_par_iter()
        .map(|i| {
            let (sample, e) = sample_pair(&cfg.data, cfg.tokens, &mut key.at(i as u64).rng());
            loss_and_gradients(params, &sample.x0, &e, &cfg.sched, tset)
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grads = Gradients::zeros(params.dim(), params.steps());
    for (l, g) in &parts {
        loss += l;
        grads.add_assign(g);
    }
    let inv = 1.0 / cfg.batch as f64;
    grads.scale(inv);
    Ok((loss * inv, grads))
}

/// One gradient-descent update. Returns the batch loss before the update.
pub fn train_step(params: &mut ModelParams, cfg: &TrainConfig, tset: &TimeSet, step: usize) -> Result<f64> {
    let (loss, grads) = batch_gradient(params, cfg, tset, step)?;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Diverged {
            step,
            what: format!("non-finite loss or gradient (batch loss {loss})"),
        });
    }
    params.step(&grads, cfg.eta, cfg.eta_v());
    if !params.is_finite() {
        return Err(Error::Diverged {
            step,
            what: "parameters left the finite range".into(),
        });
    }
    Ok(loss)
}

/// A fixed Monte-Carlo evaluation set with its model-free reference risks.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub data: MtgmParams,
    pub plan: McPlan,
    pub refs: References,
}

/// What one evaluation measures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: RiskReport,
    pub diag: DiagSummary,
}

struct PerSample {
    loss: f64,
    score: f64,
    probes: Vec<(crate::diagnostics::AttentionDiag, f64)>,
}

impl EvalSet {
    pub fn new(data: MtgmParams, sched: &NoiseSchedule, tset: &TimeSet, plan: McPlan) -> Result<Self> {
        let refs = References::compute(&data, sched, tset, plan)?;
        Ok(Self { data, plan, refs })
    }

    /// Eval loss, score-matching error and attention probes of `params`.
    /// The first `diag_size` samples feed the probes at every step of `tset`.
    pub fn evaluate(
        &self,
        params: &ModelParams,
        sched: &NoiseSchedule,
        tset: &TimeSet,
        diag_size: usize,
    ) -> Result<Evaluation> {
        let per: Vec<PerSample> = (0..self.plan.size)
            .into_par_iter()
            .map(|i| {
                let (sample, e) = sample_pair(&self.data, self.plan.tokens, &mut self.plan.key(i).rng());
                let dp = e.len() as f64;
                let mut out = PerSample {
                    loss: 0.0,
                    score: 0.0,
                    probes: Vec::new(),
                };
                for t in tset.iter() {
                    let xt = forward_noise(&sample.x0, t, &e, sched)?;
                    let pred = forward(params, &xt, t)?;
                    let exact = bayes_mmse(&xt, &self.data, t, sched)?;
                    let (mut l, mut s) = (0.0, 0.0);
                    Zip::from(&pred).and(&e).and(&exact).for_each(|&p, &n, &b| {
                        l += (p - n) * (p - n);
                        s += (p - b) * (p - b);
                    });
                    out.loss += l / dp;
                    out.score += s / (dp * (1.0 - sched.alpha_bar(t)));
                    if i < diag_size {
                        let diag = attention_diag(params, &sample, &e, t, sched)?;
                        let err = mean_estimation_error(params, &self.data, &sample, &e, t, sched)?;
                        out.probes.push((diag, err));
                    }
                }
                out.loss /= tset.len() as f64;
                out.score /= tset.len() as f64;
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let losses: Vec<f64> = per.iter().map(|p| p.loss).collect();
        let scores: Vec<f64> = per.iter().map(|p| p.score).collect();
        let mut pool = DiagPool::default();
        for (diag, err) in per.iter().flat_map(|p| &p.probes) {
            pool.push(diag, *err);
        }
        let eval_loss = Estimate::from_samples(&losses);
        if !eval_loss.mean.is_finite() {
            return Err(Error::NonFinite("eval loss"));
        }
        Ok(Evaluation {
            report: RiskReport {
                eval_loss,
                r_oracle_closed: self.refs.r_oracle_closed,
                r_oracle_mc: self.refs.r_oracle_mc,
                r_bayes_mc: self.refs.r_bayes_mc,
                score_err: Estimate::from_samples(&scores),
                snr: self.refs.snr,
            },
            diag: pool.summarize(vt_gap_on(params, self.data.rho, sched, tset)?),
        })
    }
}

/// One evaluation point of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Number of updates applied so far.
    pub step: usize,
    /// Loss of the most recent training batch; absent at step 0.
    pub train_loss: Option<f64>,
    pub eta: f64,
    pub eta_v: f64,
    #[serde(flatten)]
    pub eval: Evaluation,
}

impl TraceRecord {
    pub fn excess(&self) -> f64 {
        self.eval.report.excess()
    }
}

pub const CSV_HEADER: [&str; 8] = [
    "step",
    "eval_loss",
    "eval_loss_se",
    "r_oracle",
    "r_bayes_mc",
    "score_err",
    "attn_same_mass_median",
    "vt_gap_max",
];

/// Evaluation records in step order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn first(&self) -> Option<&TraceRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// First evaluated step whose excess risk is at most `threshold`.
    pub fn steps_to_threshold(&self, threshold: f64) -> Option<usize> {
        self.records.iter().find(|r| r.excess() <= threshold).map(|r| r.step)
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.records {
            let rep = &r.eval.report;
            w.write_record([
                r.step.to_string(),
                rep.eval_loss.mean.to_string(),
                rep.eval_loss.se.to_string(),
                rep.r_oracle_closed.to_string(),
                rep.r_bayes_mc.mean.to_string(),
                rep.score_err.mean.to_string(),
                r.eval.diag.same_mass.median.to_string(),
                r.eval.diag.vt_gap.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Final parameters and the trace that led to them.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: ModelParams,
    pub trace: TrainTrace,
    pub eval_set: EvalSet,
}

/// Train from `init_params` for `cfg.steps` updates.
pub fn train(cfg: &TrainConfig) -> Result<TrainRun> {
    train_observed(cfg, |_| {})
}

/// [`train`], calling `observe` after every evaluation.
pub fn train_observed(cfg: &TrainConfig, mut observe: impl FnMut(&TraceRecord)) -> Result<TrainRun> {
    cfg.validate()?;
    let tset = cfg.tset()?;
    let eval_set = EvalSet::new(cfg.data.clone(), &cfg.sched, &tset, cfg.eval_plan())?;
    let mut params = init_params(cfg.data.dim(), cfg.sched.steps(), cfg.master_seed);
    let mut trace = TrainTrace::default();
    let mut last_loss = None;
    for step in 0..=cfg.steps {
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let record = TraceRecord {
                step,
                train_loss: last_loss,
                eta: cfg.eta,
                eta_v: cfg.eta_v(),
                eval: eval_set.evaluate(&params, &cfg.sched, &tset, cfg.diag_size)?,
            };
            observe(&record);
            trace.records.push(record);
        }
        if step < cfg.steps {
            last_loss = Some(train_step(&mut params, cfg, &tset, step)?);
        }
    }
    Ok(TrainRun {
        params,
        trace,
        eval_set,
    })
}
