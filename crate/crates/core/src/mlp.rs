//! Single-hidden-layer perceptron regression trained with damped
//! Gauss–Newton (Levenberg–Marquardt) steps.
//!
//! The network computes `y = W2 · tanh(W1 · x + b1) + b2` on standardized
//! inputs, with the target mapped linearly from its training range onto
//! [-1, 1]. Parameters are packed as `[W1 (row-major), b1, W2, b2]`; the
//! Jacobian columns follow the same order.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Per-feature standardization fitted on training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputScaler {
    pub fn identity(n: usize) -> Self {
        InputScaler {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    pub fn fit(f: &DMatrix<f64>) -> Self {
        let n = f.nrows() as f64;
        let mut mean = Vec::with_capacity(f.ncols());
        let mut std = Vec::with_capacity(f.ncols());
        for col in f.column_iter() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            let s = var.sqrt();
            mean.push(m);
            // a constant feature carries no information; leave it unscaled
            std.push(if s >= 1e-12 { s } else { 1.0 });
        }
        InputScaler { mean, std }
    }

    fn scale_into(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = (x[i] - self.mean[i]) / self.std[i];
        }
    }
}

/// Linear map of the training target range onto [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub min: f64,
    pub max: f64,
}

impl TargetScaler {
    pub fn identity() -> Self {
        TargetScaler {
            min: -1.0,
            max: 1.0,
        }
    }

    pub fn fit(y: &[f64]) -> Self {
        let min = y.iter().copied().fold(f64::INFINITY, f64::min);
        let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        TargetScaler { min, max }
    }

    fn half_range(&self) -> f64 {
        let h = 0.5 * (self.max - self.min);
        if h > 1e-12 {
            h
        } else {
            1.0
        }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    pub fn scale(&self, y: f64) -> f64 {
        (y - self.midpoint()) / self.half_range()
    }

    pub fn unscale(&self, s: f64) -> f64 {
        self.midpoint() + s * self.half_range()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub n_in: usize,
    pub n_hidden: usize,
    /// n_hidden x n_in, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub input_scaler: InputScaler,
    pub target_scaler: TargetScaler,
}

impl MlpModel {
    pub fn n_params(&self) -> usize {
        self.n_hidden * self.n_in + 2 * self.n_hidden + 1
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        p.extend_from_slice(&self.w1);
        p.extend_from_slice(&self.b1);
        p.extend_from_slice(&self.w2);
        p.push(self.b2);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter vector length");
        let (h, d) = (self.n_hidden, self.n_in);
        self.w1.copy_from_slice(&p[..h * d]);
        self.b1.copy_from_slice(&p[h * d..h * d + h]);
        self.w2.copy_from_slice(&p[h * d + h..h * d + 2 * h]);
        self.b2 = p[h * d + 2 * h];
    }

    fn check_dim(&self, actual: usize) -> Result<()> {
        if actual != self.n_in {
            return Err(Error::DimensionMismatch {
                what: "MLP input dimension",
                expected: self.n_in,
                actual,
            });
        }
        Ok(())
    }

    /// Network output in scaled target units for an already scaled input;
    /// fills `hidden` with the tanh activations.
    fn forward_scaled(&self, xs: &[f64], hidden: &mut [f64]) -> f64 {
        let d = self.n_in;
        let mut out = self.b2;
        for j in 0..self.n_hidden {
            let row = &self.w1[j * d..(j + 1) * d];
            let z = self.b1[j] + row.iter().zip(xs).map(|(w, x)| w * x).sum::<f64>();
            let a = z.tanh();
            hidden[j] = a;
            out += self.w2[j] * a;
        }
        out
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        let mut xs = vec![0.0; self.n_in];
        let mut hidden = vec![0.0; self.n_hidden];
        self.input_scaler.scale_into(x, &mut xs);
        Ok(self
            .target_scaler
            .unscale(self.forward_scaled(&xs, &mut hidden)))
    }

    pub fn predict(&self, f: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check_dim(f.ncols())?;
        let mut x = vec![0.0; self.n_in];
        let mut xs = vec![0.0; self.n_in];
        let mut hidden = vec![0.0; self.n_hidden];
        Ok((0..f.nrows())
            .map(|i| {
                for (j, v) in x.iter_mut().enumerate() {
                    *v = f[(i, j)];
                }
                self.input_scaler.scale_into(&x, &mut xs);
                self.target_scaler
                    .unscale(self.forward_scaled(&xs, &mut hidden))
            })
            .collect())
    }
}

pub fn forward(model: &MlpModel, x: &[f64]) -> Result<f64> {
    model.forward(x)
}

/// Weights uniform on `±1/sqrt(fan_in)` per layer, zero biases, identity
/// scalers. Equivalent to [`init_mlp_stream`] with stream and restart 0.
pub fn init_mlp(n_in: usize, n_hidden: usize, seed: u64) -> Result<MlpModel> {
    init_mlp_stream(n_in, n_hidden, seed, 0, 0)
}

/// Initialization addressed by `(seed, stream, restart)`; ensemble members
/// use their index as the stream.
pub fn init_mlp_stream(
    n_in: usize,
    n_hidden: usize,
    seed: u64,
    stream: u32,
    restart: u32,
) -> Result<MlpModel> {
    if n_in < 1 || n_hidden < 1 {
        return Err(Error::invalid(
            "MLP needs at least one input and one hidden unit",
        ));
    }
    let mut r = rng::stream(seed, Domain::MlpInit, stream, restart);
    let l1 = 1.0 / (n_in as f64).sqrt();
    let l2 = 1.0 / (n_hidden as f64).sqrt();
    let w1 = (0..n_in * n_hidden)
        .map(|_| r.random_range(-l1..=l1))
        .collect();
    let w2 = (0..n_hidden).map(|_| r.random_range(-l2..=l2)).collect();
    Ok(MlpModel {
        n_in,
        n_hidden,
        w1,
        b1: vec![0.0; n_hidden],
        w2,
        b2: 0.0,
        input_scaler: InputScaler::identity(n_in),
        target_scaler: TargetScaler::identity(),
    })
}

/// Row `s` holds the derivatives of the scaled network output for sample
/// `s` with respect to every packed parameter.
pub fn jacobian(model: &MlpModel, f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    model.check_dim(f.ncols())?;
    let xs = scale_inputs(model, f);
    let mut j = DMatrix::zeros(f.nrows(), model.n_params());
    let mut hidden = vec![0.0; model.n_hidden];
    fill_jacobian(model, &xs, &mut j, &mut hidden);
    Ok(j)
}

/// Scaled inputs, one row per sample, stored row-major.
fn scale_inputs(model: &MlpModel, f: &DMatrix<f64>) -> Vec<f64> {
    let d = model.n_in;
    let mut out = vec![0.0; f.nrows() * d];
    let mut x = vec![0.0; d];
    for i in 0..f.nrows() {
        for (k, v) in x.iter_mut().enumerate() {
            *v = f[(i, k)];
        }
        model
            .input_scaler
            .scale_into(&x, &mut out[i * d..(i + 1) * d]);
    }
    out
}

fn fill_jacobian(model: &MlpModel, xs: &[f64], j: &mut DMatrix<f64>, hidden: &mut [f64]) {
    let (h, d) = (model.n_hidden, model.n_in);
    let n = j.nrows();
    for s in 0..n {
        let x = &xs[s * d..(s + 1) * d];
        model.forward_scaled(x, hidden);
        for u in 0..h {
            let a = hidden[u];
            let g = model.w2[u] * (1.0 - a * a);
            for k in 0..d {
                j[(s, u * d + k)] = g * x[k];
            }
            j[(s, h * d + u)] = g;
            j[(s, h * d + h + u)] = a;
        }
        j[(s, h * d + 2 * h)] = 1.0;
    }
}

fn scaled_sse(
    model: &MlpModel,
    xs: &[f64],
    ys: &[f64],
    resid: &mut [f64],
    hidden: &mut [f64],
) -> f64 {
    let d = model.n_in;
    let mut sse = 0.0;
    for (s, (r, y)) in resid.iter_mut().zip(ys).enumerate() {
        *r = y - model.forward_scaled(&xs[s * d..(s + 1) * d], hidden);
        sse += *r * *r;
    }
    sse
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub n_restarts: usize,
    pub lm_lambda0: f64,
    pub lm_factor: f64,
    pub seed: u64,
    /// Stream index mixed into initialization seeds (ensemble member index).
    pub stream: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 20,
            n_restarts: 10,
            lm_lambda0: 1e-2,
            lm_factor: 10.0,
            seed: 0,
            stream: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs < 1 {
            return Err(Error::config("mlp.max_epochs", "must be at least 1"));
        }
        if self.n_restarts < 1 {
            return Err(Error::config("mlp.restarts", "must be at least 1"));
        }
        if !(self.lm_lambda0 > 0.0) {
            return Err(Error::config("mlp.lambda0", "must be positive"));
        }
        if !(self.lm_factor > 1.0) {
            return Err(Error::config("mlp.lm_factor", "must exceed 1"));
        }
        Ok(())
    }
}

pub const LM_MAX_RETRIES: usize = 10;
pub const LM_MAX_LAMBDA: f64 = 1e10;

/// Levenberg–Marquardt training from the weights of `model`.
///
/// Scalers are refitted on `(f, y)`. Each epoch solves
/// `(J'J + λI) δ = J'r` and accepts the step only if the training SSE drops
/// (then λ shrinks by `lm_factor`); otherwise λ grows and the step is
/// retried, at most [`LM_MAX_RETRIES`] times per epoch. Training ends after
/// `max_epochs` epochs or once λ exceeds [`LM_MAX_LAMBDA`].
///
/// Returns the trained model and the training RMSE (target units) before
/// the first epoch and after each completed epoch.
pub fn train_lm(
    model: &MlpModel,
    f: &DMatrix<f64>,
    y: &[f64],
    cfg: &TrainConfig,
) -> Result<(MlpModel, Vec<f64>)> {
    cfg.validate()?;
    model.check_dim(f.ncols())?;
    let n = f.nrows();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            what: "target count",
            expected: n,
            actual: y.len(),
        });
    }
    if n < 2 {
        return Err(Error::invalid("MLP training needs at least 2 samples"));
    }
    if f.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite training data"));
    }
    let mut m = model.clone();
    m.input_scaler = InputScaler::fit(f);
    m.target_scaler = TargetScaler::fit(y);
    let xs = scale_inputs(&m, f);
    let ys: Vec<f64> = y.iter().map(|&v| m.target_scaler.scale(v)).collect();
    let to_rmse = {
        let h = m.target_scaler.half_range();
        move |sse: f64| (sse / n as f64).sqrt() * h
    };

    let np = m.n_params();
    let mut hidden = vec![0.0; m.n_hidden];
    let mut resid = vec![0.0; n];
    let mut trial_resid = vec![0.0; n];
    let mut jac = DMatrix::zeros(n, np);
    let mut params = m.params();
    let mut trial = m.clone();

    let mut sse = scaled_sse(&m, &xs, &ys, &mut resid, &mut hidden);
    if !sse.is_finite() {
        return Err(Error::Numerical("non-finite initial training error".into()));
    }
    let mut trace = vec![to_rmse(sse)];
    let mut lambda = cfg.lm_lambda0;
    let mut ever_solved = false;

    'epochs: for _ in 0..cfg.max_epochs {
        fill_jacobian(&m, &xs, &mut jac, &mut hidden);
        let jtj = jac.tr_mul(&jac);
        let jtr = jac.tr_mul(&DVector::from_column_slice(&resid));
        for _ in 0..LM_MAX_RETRIES {
            let mut a = jtj.clone();
            for i in 0..np {
                a[(i, i)] += lambda;
            }
            let step = match a.cholesky() {
                Some(c) => c.solve(&jtr),
                None => {
                    lambda *= cfg.lm_factor;
                    if lambda > LM_MAX_LAMBDA {
                        break 'epochs;
                    }
                    continue;
                }
            };
            ever_solved = true;
            let candidate: Vec<f64> = params.iter().zip(step.iter()).map(|(p, d)| p + d).collect();
            trial.set_params(&candidate);
            let trial_sse = scaled_sse(&trial, &xs, &ys, &mut trial_resid, &mut hidden);
            if trial_sse < sse {
                params = candidate;
                std::mem::swap(&mut m, &mut trial);
                std::mem::swap(&mut resid, &mut trial_resid);
                sse = trial_sse;
                lambda /= cfg.lm_factor;
                break;
            }
            lambda *= cfg.lm_factor;
            if lambda > LM_MAX_LAMBDA {
                trace.push(to_rmse(sse));
                break 'epochs;
            }
        }
        trace.push(to_rmse(sse));
    }
    if !ever_solved {
        return Err(Error::Numerical(
            "LM normal matrix singular even at maximum damping".into(),
        ));
    }
    Ok((m, trace))
}

/// Training RMSE of `model` on `(f, y)` in target units.
pub fn training_rmse(model: &MlpModel, f: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    let pred = model.predict(f)?;
    Ok((pred
        .iter()
        .zip(y)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / y.len() as f64)
        .sqrt())
}

/// Best of `cfg.n_restarts` LM runs started from initializations
/// `(cfg.seed, cfg.stream, restart)`; ties keep the earliest restart.
pub fn train_restarts(
    f: &DMatrix<f64>,
    y: &[f64],
    n_hidden: usize,
    cfg: &TrainConfig,
) -> Result<MlpModel> {
    cfg.validate()?;
    let mut best: Option<(f64, MlpModel)> = None;
    let mut last_err = None;
    for r in 0..cfg.n_restarts {
        let init = init_mlp_stream(f.ncols(), n_hidden, cfg.seed, cfg.stream, r as u32)?;
        match train_lm(&init, f, y, cfg) {
            Ok((model, trace)) => {
                let rmse = *trace.last().unwrap();
                if best.as_ref().is_none_or(|(b, _)| rmse < *b) {
                    best = Some((rmse, model));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some((_, m)) => Ok(m),
        None => Err(last_err.unwrap_or_else(|| Error::Numerical("no restart succeeded".into()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_model(w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: f64) -> MlpModel {
        let n_hidden = b1.len();
        let n_in = w1.len() / n_hidden;
        MlpModel {
            n_in,
            n_hidden,
            w1,
            b1,
            w2,
            b2,
            input_scaler: InputScaler::identity(n_in),
            target_scaler: TargetScaler::identity(),
        }
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let a = init_mlp(6, 10, 3).unwrap();
        assert_eq!(a, init_mlp(6, 10, 3).unwrap());
        assert_ne!(a, init_mlp(6, 10, 4).unwrap());
        assert_eq!(a.n_params(), 81);
        assert_eq!(a.params().len(), 81);
        assert!(a.b1.iter().all(|b| *b == 0.0) && a.b2 == 0.0);
        assert!(init_mlp(0, 3, 1).is_err());
    }

    #[test]
    fn init_distribution_bounds() {
        // 10^4 draws of first-layer weights with fan-in 6
        let mut w = Vec::new();
        let mut seed = 0;
        while w.len() < 10_000 {
            w.extend(init_mlp(6, 10, seed).unwrap().w1);
            seed += 1;
        }
        let bound = 1.0 / 6f64.sqrt();
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!((bound - 0.4083).abs() < 1e-4);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.02);
    }

    #[test]
    fn zero_weights_give_midpoint() {
        let mut m = identity_model(vec![0.0; 6], vec![0.0; 3], vec![0.0; 3], 0.0);
        m.target_scaler = TargetScaler { min: 2.0, max: 6.0 };
        assert_eq!(m.forward(&[1.0, -3.0]).unwrap(), 4.0);
    }

    #[test]
    fn single_unit_at_origin() {
        let m = identity_model(vec![1.0], vec![0.0], vec![1.0], 0.0);
        assert_eq!(forward(&m, &[0.0]).unwrap(), 0.0);
        assert!(m.forward(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn forward_matches_hand_computation() {
        let w1 = vec![0.2, -0.4, 0.7, 0.1];
        let b1 = vec![0.05, -0.3];
        let w2 = vec![1.5, -0.8];
        let mut m = identity_model(w1, b1, w2, 0.25);
        m.input_scaler = InputScaler {
            mean: vec![1.0, 2.0],
            std: vec![2.0, 4.0],
        };
        m.target_scaler = TargetScaler { min: 0.0, max: 3.0 };
        // raw x chosen so that both scaled inputs equal 0.5
        let x = [2.0, 4.0];
        let h0 = (0.2 * 0.5 + -0.4 * 0.5 + 0.05f64).tanh();
        let h1 = (0.7 * 0.5 + 0.1 * 0.5 - 0.3f64).tanh();
        let out_scaled = 1.5 * h0 - 0.8 * h1 + 0.25;
        let expected = 1.5 + out_scaled * 1.5;
        assert!((m.forward(&x).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn target_scaler_round_trip() {
        let s = TargetScaler::fit(&[0.3, 2.9, 1.0]);
        for y in [0.3, 1.234, 2.9] {
            assert!((s.unscale(s.scale(y)) - y).abs() < 1e-12);
        }
        assert!((s.scale(0.3) + 1.0).abs() < 1e-15);
        assert!((s.scale(2.9) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn jacobian_zero_input_columns() {
        let m = init_mlp(3, 4, 1).unwrap();
        let f = DMatrix::zeros(2, 3);
        let j = jacobian(&m, &f).unwrap();
        for c in 0..12 {
            assert_eq!(j.column(c).amax(), 0.0);
        }
        let dup = DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
        let j = jacobian(&m, &dup).unwrap();
        assert_eq!(j.row(0), j.row(1));
    }

    #[test]
    fn lm_contract() {
        let f = DMatrix::from_fn(12, 2, |i, j| (i as f64 * 0.37 + j as f64).sin());
        let y: Vec<f64> = (0..12).map(|i| (i as f64 * 0.2).cos()).collect();
        let m = init_mlp(2, 3, 5).unwrap();
        let mut cfg = TrainConfig {
            max_epochs: 0,
            ..Default::default()
        };
        assert!(train_lm(&m, &f, &y, &cfg).is_err());
        cfg.max_epochs = 1;
        let (_, trace) = train_lm(&m, &f, &y, &cfg).unwrap();
        assert!(trace.len() <= 2);
        cfg.max_epochs = 20;
        let (trained, trace) = train_lm(&m, &f, &y, &cfg).unwrap();
        assert!(trace.len() <= 21);
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        // the input model is untouched and the trace ends at the model's RMSE
        assert_eq!(m, init_mlp(2, 3, 5).unwrap());
        assert!((training_rmse(&trained, &f, &y).unwrap() - trace.last().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn single_restart_equals_single_run() {
        let f = DMatrix::from_fn(15, 2, |i, j| ((i * 3 + j) as f64 * 0.29).sin());
        let y: Vec<f64> = (0..15).map(|i| (i as f64 * 0.4).sin()).collect();
        let cfg = TrainConfig {
            n_restarts: 1,
            seed: 9,
            ..Default::default()
        };
        let best = train_restarts(&f, &y, 4, &cfg).unwrap();
        let (single, _) = train_lm(&init_mlp(2, 4, 9).unwrap(), &f, &y, &cfg).unwrap();
        assert_eq!(best, single);
    }

    #[test]
    fn best_of_restarts_is_minimum() {
        let f = DMatrix::from_fn(20, 3, |i, j| ((i * 7 + j * 3) as f64 * 0.13).cos());
        let y: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).sin() * 2.0).collect();
        let cfg = TrainConfig {
            n_restarts: 5,
            seed: 2,
            stream: 3,
            ..Default::default()
        };
        let best = training_rmse(&train_restarts(&f, &y, 4, &cfg).unwrap(), &f, &y).unwrap();
        for r in 0..5 {
            let init = init_mlp_stream(3, 4, 2, 3, r).unwrap();
            let (m, _) = train_lm(&init, &f, &y, &cfg).unwrap();
            assert!(best <= training_rmse(&m, &f, &y).unwrap() + 1e-12);
        }
    }
}
