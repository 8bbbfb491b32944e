//! One-layer, single-head softmax-attention denoiser.
//!
//! For a noisy input `X` (`d x P`, tokens as columns) at step `t`:
//!
//! ```text
//! A[:, p] = softmax_k( x_k^T W x_p / d )        (column-stochastic, P x P)
//! f(X, t) = v_t * (X - X A)
//! ```
//!
//! The loss of one clean datum `X0` with noise `E` averages the per-dimension
//! squared error `||f(X^t, t) - E||_F^2 / (dP)` over a [`TimeSet`], reusing the
//! same `E` at every step.

use base64::Engine;
use ndarray::{Array1, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{forward_noise, NoiseSchedule, TimeSet};

/// Attention matrix `W` and one output scale `v_t` per diffusion step.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w: Array2<f64>,
    /// `v[t - 1]` is the scale for step `t`.
    pub v: Array1<f64>,
}

impl ModelParams {
    pub fn zeros(d: usize, steps: usize) -> Self {
        Self {
            w: Array2::zeros((d, d)),
            v: Array1::zeros(steps),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn steps(&self) -> usize {
        self.v.len()
    }

    pub fn v_at(&self, t: usize) -> f64 {
        self.v[t - 1]
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.nrows() != self.w.ncols() {
            return Err(Error::Shape {
                context: "ModelParams.w",
                expected: (self.w.nrows(), self.w.nrows()),
                got: self.w.dim(),
            });
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(())
    }

    /// `self - eta * g`, with an optional separate rate for `v`.
    pub fn step(&mut self, g: &Gradients, eta_w: f64, eta_v: f64) {
        self.w.scaled_add(-eta_w, &g.dw);
        self.v.scaled_add(-eta_v, &g.dv);
    }
}

/// Gradient of a loss with respect to [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub dw: Array2<f64>,
    pub dv: Array1<f64>,
}

impl Gradients {
    pub fn zeros(d: usize, steps: usize) -> Self {
        Self {
            dw: Array2::zeros((d, d)),
            dv: Array1::zeros(steps),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.dw += &other.dw;
        self.dv += &other.dv;
    }

    pub fn scale(&mut self, s: f64) {
        self.dw *= s;
        self.dv *= s;
    }

    pub fn is_finite(&self) -> bool {
        self.dw.iter().chain(self.dv.iter()).all(|x| x.is_finite())
    }
}

fn check_input(w: &Array2<f64>, x: &Array2<f64>) -> Result<()> {
    let d = w.nrows();
    if w.ncols() != d || x.nrows() != d {
        return Err(Error::Shape {
            context: "attention input",
            expected: (d, x.ncols()),
            got: x.dim(),
        });
    }
    if w.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attention input"));
    }
    Ok(())
}

/// Transposed attention: row `p` holds the softmax weights of query `p`
/// over all keys. Rows are contiguous, which keeps the softmax cheap.
fn attention_rows(w: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
    let d = x.nrows() as f64;
    let wx = w.dot(x);
    let mut st = wx.t().dot(x);
    for mut row in st.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) / d;
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s / d - max).exp();
            sum += *s;
        }
        row.mapv_inplace(|s| s / sum);
    }
    st
}

/// Column-wise softmax of `X^T W X / d`; `A[k, p]` is the weight query `p`
/// puts on key `k`, so every column sums to one.
pub fn attention_matrix(w: &Array2<f64>, x: &Array2<f64>) -> Result<Array2<f64>> {
    check_input(w, x)?;
    Ok(attention_rows(w, x).reversed_axes())
}

/// `X - X A` without the output scale.
fn residual_from_rows(x: &Array2<f64>, rows: &Array2<f64>) -> Array2<f64> {
    let mut h = x.clone();
    ndarray::linalg::general_mat_mul(-1.0, x, &rows.t(), 1.0, &mut h);
    h
}

/// `v_t (X - X A)`.
pub fn forward(params: &ModelParams, x: &Array2<f64>, t: usize) -> Result<Array2<f64>> {
    if t == 0 || t > params.steps() {
        return Err(Error::TimeIndex { t, steps: params.steps() });
    }
    check_input(&params.w, x)?;
    let rows = attention_rows(&params.w, x);
    let mut h = residual_from_rows(x, &rows);
    let v = params.v_at(t);
    h.mapv_inplace(|e| v * e);
    Ok(h)
}

fn check_pair(params: &ModelParams, x0: &Array2<f64>, noise: &Array2<f64>, sched: &NoiseSchedule) -> Result<()> {
    if x0.dim() != noise.dim() {
        return Err(Error::Shape {
            context: "clean/noise pair",
            expected: x0.dim(),
            got: noise.dim(),
        });
    }
    if params.steps() != sched.steps() {
        return Err(Error::Shape {
            context: "v length vs schedule",
            expected: (sched.steps(), 1),
            got: (params.steps(), 1),
        });
    }
    check_input(&params.w, x0)?;
    if noise.iter().any(|v| !v.is_finite()) || params.v.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss input"));
    }
    Ok(())
}

fn sq_norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Per-dimension DDPM loss of one datum averaged over `tset`.
pub fn sample_loss(
    params: &ModelParams,
    x0: &Array2<f64>,
    noise: &Array2<f64>,
    sched: &NoiseSchedule,
    tset: &TimeSet,
) -> Result<f64> {
    check_pair(params, x0, noise, sched)?;
    let (d, p) = x0.dim();
    let mut total = 0.0;
    for t in tset.iter() {
        let xt = forward_noise(x0, t, noise, sched)?;
        let rows = attention_rows(&params.w, &xt);
        let h = residual_from_rows(&xt, &rows);
        let v = params.v_at(t);
        let mut r = noise.clone();
        Zip::from(&mut r).and(&h).for_each(|r, &h| *r = v * h - *r);
        total += sq_norm(&r) / (d * p) as f64;
    }
    Ok(total / tset.len() as f64)
}

/// Exact gradient of [`sample_loss`].
pub fn sample_gradients(
    params: &ModelParams,
    x0: &Array2<f64>,
    noise: &Array2<f64>,
    sched: &NoiseSchedule,
    tset: &TimeSet,
) -> Result<Gradients> {
    Ok(loss_and_gradients(params, x0, noise, sched, tset)?.1)
}

/// [`sample_loss`] together with its gradient.
///
/// Per step, with `H = X - X A`, `R = v H - E` and `c = 2 / (dP |tset|)`:
///
/// ```text
/// dL/dv_t   = c <R, H>
/// dL/dA     = -X^T (c v R)
/// dL/dS     = A o (dL/dA - 1 (1^T (A o dL/dA)))      (column-wise softmax)
/// dL/dW    += X (dL/dS) X^T / d
/// ```
///
/// Since `X^t = a X0 + b E`, both the logits and the `dW` sandwich split into
/// four fixed products of `X0` and `E`; they are formed once per datum rather
/// than once per step.
pub fn loss_and_gradients(
    params: &ModelParams,
    x0: &Array2<f64>,
    noise: &Array2<f64>,
    sched: &NoiseSchedule,
    tset: &TimeSet,
) -> Result<(f64, Gradients)> {
    check_pair(params, x0, noise, sched)?;
    let (d, p) = x0.dim();
    let dp = (d * p) as f64;
    let c = 2.0 / (dp * tset.len() as f64);
    let mut grads = Gradients::zeros(d, params.steps());
    let mut loss = 0.0;

    // Row-major logits: S^T[p, k] = x_k^T W x_p = (W x_p)^T x_k.
    let wx0 = params.w.dot(x0);
    let we = params.w.dot(noise);
    let q00 = wx0.t().dot(x0);
    let qee = we.t().dot(noise);
    let mut qmix = wx0.t().dot(noise);
    ndarray::linalg::general_mat_mul(1.0, &we.t(), x0, 1.0, &mut qmix);

    // Accumulated dS^T, weighted by a^2, ab and b^2.
    let mut d00 = Array2::<f64>::zeros((p, p));
    let mut dmix = Array2::<f64>::zeros((p, p));
    let mut dee = Array2::<f64>::zeros((p, p));
    let mut rows = Array2::<f64>::zeros((p, p));
    let inv_d = 1.0 / d as f64;

    for t in tset.iter() {
        let ab = sched.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let xt = forward_noise(x0, t, noise, sched)?;
        let (caa, cab, cbb) = (a * a * inv_d, a * b * inv_d, b * b * inv_d);
        Zip::from(&mut rows)
            .and(&q00)
            .and(&qmix)
            .and(&qee)
            .for_each(|s, &u, &m, &e| *s = caa * u + cab * m + cbb * e);
        for mut row in rows.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let inv = 1.0 / sum;
            row.mapv_inplace(|s| s * inv);
        }
        let h = residual_from_rows(&xt, &rows);
        let v = params.v_at(t);
        let mut r = noise.clone();
        Zip::from(&mut r).and(&h).for_each(|r, &h| *r = v * h - *r);
        loss += sq_norm(&r) / dp;
        grads.dv[t - 1] += c * Zip::from(&r).and(&h).fold(0.0, |acc, &r, &h| acc + r * h);

        if v == 0.0 {
            continue;
        }
        // dA^T[p, k] = -(c v) r_p . x_k, then the softmax backward per query row.
        let mut dst = r.t().dot(&xt);
        let scale = -c * v;
        Zip::from(dst.rows_mut()).and(rows.rows()).for_each(|mut g, a| {
            let mut inner = 0.0;
            for (gi, ai) in g.iter_mut().zip(a.iter()) {
                *gi *= scale;
                inner += *gi * ai;
            }
            for (gi, ai) in g.iter_mut().zip(a.iter()) {
                *gi = ai * (*gi - inner);
            }
        });
        d00.scaled_add(a * a, &dst);
        dmix.scaled_add(a * b, &dst);
        dee.scaled_add(b * b, &dst);
    }

    // dW = sum_t X_t dS_t X_t^T / d with X_t = a X0 + b E, dS = dst^T:
    //    = (X0 D00 + E Dmix) X0^T / d + (X0 Dmix + E Dee) E^T / d.
    let mut left = x0.dot(&d00.t());
    ndarray::linalg::general_mat_mul(1.0, noise, &dmix.t(), 1.0, &mut left);
    let mut right = x0.dot(&dmix.t());
    ndarray::linalg::general_mat_mul(1.0, noise, &dee.t(), 1.0, &mut right);
    ndarray::linalg::general_mat_mul(inv_d, &left, &x0.t(), 0.0, &mut grads.dw);
    ndarray::linalg::general_mat_mul(inv_d, &right, &noise.t(), 1.0, &mut grads.dw);
    Ok((loss / tset.len() as f64, grads))
}

/// Column means of `X` broadcast back to every column.
pub fn token_mean(x: &Array2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(1)).expect("at least one token")
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const ENCODING: &str = "f64le-base64";

/// On-disk checkpoint: a JSON header and a base64 blob holding `W`
/// row-major followed by `v`, as little-endian `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub d: usize,
    #[serde(rename = "T")]
    pub steps: usize,
    pub step: usize,
    pub encoding: String,
    pub data: String,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams, step: usize) -> Self {
        let mut bytes = Vec::with_capacity(8 * (params.w.len() + params.v.len()));
        for x in params.w.iter().chain(params.v.iter()) {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        Self {
            d: params.dim(),
            steps: params.steps(),
            step,
            encoding: ENCODING.to_string(),
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }

    pub fn to_params(&self) -> Result<ModelParams> {
        if self.encoding != ENCODING {
            return Err(Error::Checkpoint(format!("unknown encoding {:?}", self.encoding)));
        }
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n = self.d * self.d + self.steps;
        if bytes.len() != 8 * n {
            return Err(Error::Checkpoint(format!(
                "expected {} bytes for d={}, T={}, found {}",
                8 * n,
                self.d,
                self.steps,
                bytes.len()
            )));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (w, v) = vals.split_at(self.d * self.d);
        let params = ModelParams {
            w: Array2::from_shape_vec((self.d, self.d), w.to_vec()).expect("sized"),
            v: Array1::from(v.to_vec()),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
