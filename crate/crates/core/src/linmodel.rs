//! Linear learners: ridge-guarded least squares on feature vectors, and
//! PLS1 regression on whole spectra with cross-validated factor selection
//! (the linear reference method).

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Tikhonov term added to the feature block of the normal equations.
pub const OLS_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Euclidean norm of the training residual vector.
    pub training_residual_norm: f64,
}

impl LinearModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn predict_one(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

fn check_finite(m: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if m.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite values in regression inputs"));
    }
    Ok(())
}

pub fn fit_ols(f: &DMatrix<f64>, y: &[f64]) -> Result<LinearModel> {
    let (n, d) = f.shape();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            what: "target count",
            expected: n,
            actual: y.len(),
        });
    }
    if n == 0 {
        return Err(Error::invalid("regression needs at least one sample"));
    }
    check_finite(f, y)?;
    let means = f.row_mean();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let mut fc = f.clone();
    for mut row in fc.row_iter_mut() {
        row -= &means;
    }
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let mut normal = fc.tr_mul(&fc);
    for i in 0..d {
        normal[(i, i)] += OLS_RIDGE;
    }
    let rhs = fc.tr_mul(&yc);
    let w = normal
        .cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Numerical("normal equations not positive definite".into()))?;
    let intercept = y_mean - means.iter().zip(w.iter()).map(|(m, w)| m * w).sum::<f64>();
    let weights: Vec<f64> = w.iter().copied().collect();
    let mut model = LinearModel {
        weights,
        intercept,
        training_residual_norm: 0.0,
    };
    let pred = predict_linear(&model, f)?;
    model.training_residual_norm = pred
        .iter()
        .zip(y)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(model)
}

pub fn predict_linear(model: &LinearModel, f: &DMatrix<f64>) -> Result<Vec<f64>> {
    if f.ncols() != model.dim() {
        return Err(Error::DimensionMismatch {
            what: "feature dimension",
            expected: model.dim(),
            actual: f.ncols(),
        });
    }
    Ok(f.row_iter()
        .map(|row| {
            model.intercept
                + row
                    .iter()
                    .zip(&model.weights)
                    .map(|(v, w)| v * w)
                    .sum::<f64>()
        })
        .collect())
}

/// PLS1 regression model mapping a spectrum to one concentration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlsRegModel {
    pub n_factors: usize,
    pub x_center: DVector<f64>,
    pub y_center: f64,
    /// X weights, one unit column per factor.
    pub weights: DMatrix<f64>,
    /// X loadings, one column per factor.
    pub loadings: DMatrix<f64>,
    /// y loadings per factor.
    pub y_loadings: Vec<f64>,
    /// `W (P'W)^-1 q`, applied to centered spectra.
    pub coefficients: DVector<f64>,
    /// Cross-validated RMSE for 1..=max_factors (empty unless CV selected
    /// the factor count). Infeasible factor counts are `inf`, stored as
    /// `null` in JSON.
    #[serde(with = "non_finite_as_null")]
    pub cv_curve: Vec<f64>,
}

mod non_finite_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|x| x.is_finite().then_some(*x))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v = Vec::<Option<f64>>::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

impl PlsRegModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.x_center.len() {
            return Err(Error::DimensionMismatch {
                what: "grid length for PLS prediction",
                expected: self.x_center.len(),
                actual: x.ncols(),
            });
        }
        let offset = self.y_center - self.x_center.dot(&self.coefficients);
        Ok((x * &self.coefficients)
            .iter()
            .map(|v| v + offset)
            .collect())
    }
}

/// Raw NIPALS factors; `scores` is kept for diagnostics.
struct PlsFactors {
    x_center: DVector<f64>,
    y_center: f64,
    weights: DMatrix<f64>,
    loadings: DMatrix<f64>,
    y_loadings: Vec<f64>,
    scores: DMatrix<f64>,
}

const DEFLATION_TOL: f64 = 1e-12;

/// Extracts up to `a` factors; stops early (returning fewer) only when
/// `allow_short` is set, otherwise a degenerate factor is an error.
fn nipals_pls1(x: &DMatrix<f64>, y: &[f64], a: usize, allow_short: bool) -> Result<PlsFactors> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            what: "target count",
            expected: n,
            actual: y.len(),
        });
    }
    check_finite(x, y)?;
    if n < 2 {
        return Err(Error::invalid("PLS needs at least 2 samples"));
    }
    let max_a = (n - 1).min(p);
    if a < 1 || a > max_a {
        return Err(Error::invalid(format!(
            "factor count {a} outside 1..={max_a}"
        )));
    }
    let x_center = x.row_mean().transpose();
    let y_center = y.iter().sum::<f64>() / n as f64;
    let mut xr = x.clone();
    for mut row in xr.row_iter_mut() {
        row -= x_center.transpose();
    }
    let mut yr = DVector::from_iterator(n, y.iter().map(|v| v - y_center));
    let y_scale = yr.norm();
    if y_scale <= 1e-12 * y_center.abs().max(1.0) {
        return Err(Error::Numerical("target has zero variance".into()));
    }
    let mut weights = DMatrix::zeros(p, a);
    let mut loadings = DMatrix::zeros(p, a);
    let mut scores = DMatrix::zeros(n, a);
    let mut y_loadings = Vec::with_capacity(a);
    for f in 0..a {
        let w = xr.tr_mul(&yr);
        let wn = w.norm();
        let degenerate = |what: &str| {
            Error::Numerical(format!(
                "degenerate PLS deflation at factor {}: {what}",
                f + 1
            ))
        };
        if !(wn > 0.0) {
            if allow_short && f > 0 {
                break;
            }
            return Err(degenerate("X'y vanished"));
        }
        let w = w / wn;
        let t = &xr * &w;
        let tt = t.norm_squared();
        if tt < DEFLATION_TOL {
            if allow_short && f > 0 {
                break;
            }
            return Err(degenerate("t't below tolerance"));
        }
        let pl = xr.tr_mul(&t) / tt;
        let q = yr.dot(&t) / tt;
        xr -= &t * pl.transpose();
        yr -= &t * q;
        weights.set_column(f, &w);
        loadings.set_column(f, &pl);
        scores.set_column(f, &t);
        y_loadings.push(q);
    }
    let got = y_loadings.len();
    Ok(PlsFactors {
        x_center,
        y_center,
        weights: weights.columns(0, got).into_owned(),
        loadings: loadings.columns(0, got).into_owned(),
        y_loadings,
        scores: scores.columns(0, got).into_owned(),
    })
}

impl PlsFactors {
    fn coefficients(&self, a: usize) -> Result<DVector<f64>> {
        let w = self.weights.columns(0, a);
        let pw = self.loadings.columns(0, a).tr_mul(&w);
        let q = DVector::from_column_slice(&self.y_loadings[..a]);
        // P'W is unit upper triangular for NIPALS factors
        let z = pw
            .solve_upper_triangular(&q)
            .ok_or_else(|| Error::Numerical("singular P'W in PLS".into()))?;
        Ok(w * z)
    }

    fn into_model(self, a: usize, cv_curve: Vec<f64>) -> Result<PlsRegModel> {
        let coefficients = self.coefficients(a)?;
        Ok(PlsRegModel {
            n_factors: a,
            x_center: self.x_center,
            y_center: self.y_center,
            weights: self.weights.columns(0, a).into_owned(),
            loadings: self.loadings.columns(0, a).into_owned(),
            y_loadings: self.y_loadings[..a].to_vec(),
            coefficients,
            cv_curve,
        })
    }
}

pub fn fit_pls1(x: &DMatrix<f64>, y: &[f64], a: usize) -> Result<PlsRegModel> {
    nipals_pls1(x, y, a, false)?.into_model(a, Vec::new())
}

/// Training-set score vectors of a PLS1 fit (one column per factor).
pub fn pls1_scores(x: &DMatrix<f64>, y: &[f64], a: usize) -> Result<DMatrix<f64>> {
    Ok(nipals_pls1(x, y, a, false)?.scores)
}

/// Two CV RMSE values closer than this (relative to the target spread) count
/// as a tie.
const CV_TIE_TOL: f64 = 1e-9;

/// Selects the factor count by `folds`-fold cross-validation over
/// `1..=max_factors` and refits on all rows.
///
/// Folds are contiguous blocks of a seeded permutation of the rows. Factor
/// counts a fold cannot support get an infinite score. Near-ties go to the
/// smaller count.
pub fn fit_pls_cv(
    x: &DMatrix<f64>,
    y: &[f64],
    max_factors: usize,
    folds: usize,
    seed: u64,
) -> Result<PlsRegModel> {
    let n = x.nrows();
    if folds < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 CV folds, got {folds}"
        )));
    }
    if max_factors < 1 {
        return Err(Error::invalid("max_factors must be at least 1"));
    }
    if folds > n {
        return Err(Error::invalid(format!("{folds} folds exceed {n} samples")));
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            what: "target count",
            expected: n,
            actual: y.len(),
        });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, Domain::PlsFolds, 0, 0));

    let mut sse = vec![0.0; max_factors];
    let mut feasible = vec![true; max_factors];
    for f in 0..folds {
        let lo = f * n / folds;
        let hi = (f + 1) * n / folds;
        let held = &perm[lo..hi];
        let kept: Vec<usize> = perm[..lo].iter().chain(&perm[hi..]).copied().collect();
        let xt = x.select_rows(&kept);
        let yt: Vec<f64> = kept.iter().map(|&i| y[i]).collect();
        let xv = x.select_rows(held);
        let cap = max_factors.min(kept.len() - 1).min(x.ncols());
        let factors = match nipals_pls1(&xt, &yt, cap.max(1), true) {
            Ok(fs) => fs,
            Err(Error::Numerical(_)) => {
                feasible.iter_mut().for_each(|v| *v = false);
                continue;
            }
            Err(e) => return Err(e),
        };
        let got = factors.y_loadings.len();
        for a in 1..=max_factors {
            if a > got {
                feasible[a - 1] = false;
                continue;
            }
            let b = factors.coefficients(a)?;
            let offset = factors.y_center - factors.x_center.dot(&b);
            let pred = &xv * &b;
            sse[a - 1] += held
                .iter()
                .zip(pred.iter())
                .map(|(&i, p)| (p + offset - y[i]).powi(2))
                .sum::<f64>();
        }
    }
    let curve: Vec<f64> = sse
        .iter()
        .zip(&feasible)
        .map(|(s, ok)| {
            if *ok {
                (s / n as f64).sqrt()
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let best = curve.iter().copied().fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::Numerical(
            "no factor count is feasible in every CV fold".into(),
        ));
    }
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let spread = (y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let tol = CV_TIE_TOL * spread.max(best);
    let chosen = curve.iter().position(|&c| c <= best + tol).unwrap() + 1;
    nipals_pls1(x, y, chosen, false)?.into_model(chosen, curve)
}
