//! Resampling ensembles of calibration models.
//!
//! Members are trained on bootstrap resamples or on cross-validation
//! training subsets of one training set and combined by plain averaging.
//! The spread of the member predictions (the ambiguity) gives both the
//! ensemble's accuracy gain over its average member,
//!
//! ```text
//! (ȳ - y)² = mean_i (y_i - y)² - mean_i (y_i - ȳ)²
//! ```
//!
//! and a confidence interval `ȳ ± α·σ` with `σ² = mean_i (y_i - ȳ)²`.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSpec, ProjectionKind};
use crate::linmodel::{fit_ols, predict_linear, LinearModel};
use crate::mlp::{train_restarts, MlpModel, TrainConfig};
use crate::rng::{self, Domain};
use crate::spectra::SampleSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleKind {
    Bootstrap,
    CrossValidation,
    /// A single member trained on the full training set.
    None,
}

impl std::str::FromStr for ResampleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bootstrap" | "boot" => Ok(ResampleKind::Bootstrap),
            "cv" | "cross_validation" => Ok(ResampleKind::CrossValidation),
            "none" | "single" => Ok(ResampleKind::None),
            other => Err(Error::config(
                "ensemble.kind",
                format!("unknown kind `{other}`"),
            )),
        }
    }
}

impl std::fmt::Display for ResampleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ResampleKind::Bootstrap => "bootstrap",
            ResampleKind::CrossValidation => "cv",
            ResampleKind::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResamplePlan {
    pub kind: ResampleKind,
    pub n_train: usize,
    pub n_models: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
    /// Training-row indices of every member (a multiset for bootstrap).
    pub members: Vec<Vec<usize>>,
    /// Held-out rows of every member (cross-validation only).
    pub holdouts: Vec<Vec<usize>>,
}

impl ResamplePlan {
    /// Number of CV folds per partition (0 for other kinds).
    pub fn folds(&self) -> usize {
        match self.kind {
            ResampleKind::CrossValidation => folds_for(self.holdout_fraction),
            _ => 0,
        }
    }
}

fn folds_for(fraction: f64) -> usize {
    (1.0 / fraction).round() as usize
}

fn draw_bootstrap(n_train: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n_train).map(|_| rng.random_range(0..n_train)).collect()
}

/// `n_train` uniform draws with replacement from `0..n_train`.
pub fn bootstrap_indices(n_train: usize, seed: u64) -> Result<Vec<usize>> {
    if n_train < 1 {
        return Err(Error::invalid(
            "bootstrap needs at least one training sample",
        ));
    }
    Ok(draw_bootstrap(
        n_train,
        &mut rng::stream(seed, Domain::Bootstrap, 0, 0),
    ))
}

pub fn bootstrap_plan(n_train: usize, n_models: usize, seed: u64) -> Result<ResamplePlan> {
    if n_train < 1 || n_models < 1 {
        return Err(Error::invalid(
            "bootstrap plan needs n_train >= 1 and n_models >= 1",
        ));
    }
    let members = (0..n_models)
        .map(|j| {
            draw_bootstrap(
                n_train,
                &mut rng::stream(seed, Domain::Bootstrap, j as u32, 0),
            )
        })
        .collect();
    Ok(ResamplePlan {
        kind: ResampleKind::Bootstrap,
        n_train,
        n_models,
        holdout_fraction: 0.0,
        seed,
        members,
        holdouts: Vec::new(),
    })
}

/// Cross-validation ensemble plan built from repeated disjoint partitions.
///
/// With `m = round(fraction · n_train)` and `folds = round(1 / fraction)`,
/// each partition shuffles the rows and cuts them into `folds` contiguous
/// blocks of `m` rows, the last block taking whatever remains. Member `j`
/// leaves out block `j mod folds` of partition `j / folds`.
pub fn cv_plan(
    n_train: usize,
    holdout_fraction: f64,
    n_models: usize,
    seed: u64,
) -> Result<ResamplePlan> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::config(
            "ensemble.holdout",
            format!("fraction {holdout_fraction} must lie strictly between 0 and 1"),
        ));
    }
    if n_models < 1 {
        return Err(Error::config("ensemble.n_models", "must be at least 1"));
    }
    let m = (holdout_fraction * n_train as f64).round() as usize;
    if m == 0 {
        return Err(Error::invalid(format!(
            "holdout fraction {holdout_fraction} of {n_train} samples rounds to zero"
        )));
    }
    let folds = folds_for(holdout_fraction);
    if folds < 2 || (folds - 1) * m >= n_train {
        return Err(Error::invalid(format!(
            "{n_train} samples cannot form {folds} folds of {m}"
        )));
    }
    let partitions = n_models.div_ceil(folds);
    let mut members = Vec::with_capacity(n_models);
    let mut holdouts = Vec::with_capacity(n_models);
    'outer: for q in 0..partitions {
        let mut perm: Vec<usize> = (0..n_train).collect();
        perm.shuffle(&mut rng::stream(seed, Domain::CvPartition, q as u32, 0));
        for fold in 0..folds {
            if members.len() == n_models {
                break 'outer;
            }
            let lo = fold * m;
            let hi = if fold + 1 == folds { n_train } else { lo + m };
            let mut held: Vec<usize> = perm[lo..hi].to_vec();
            held.sort_unstable();
            let mut keep: Vec<usize> = perm[..lo].iter().chain(&perm[hi..]).copied().collect();
            keep.sort_unstable();
            members.push(keep);
            holdouts.push(held);
        }
    }
    Ok(ResamplePlan {
        kind: ResampleKind::CrossValidation,
        n_train,
        n_models,
        holdout_fraction,
        seed,
        members,
        holdouts,
    })
}

/// One member trained on every training row.
pub fn single_plan(n_train: usize) -> Result<ResamplePlan> {
    if n_train < 1 {
        return Err(Error::invalid("plan needs at least one training sample"));
    }
    Ok(ResamplePlan {
        kind: ResampleKind::None,
        n_train,
        n_models: 1,
        holdout_fraction: 0.0,
        seed: 0,
        members: vec![(0..n_train).collect()],
        holdouts: Vec::new(),
    })
}

pub fn make_plan(
    kind: ResampleKind,
    n_train: usize,
    n_models: usize,
    holdout_fraction: f64,
    seed: u64,
) -> Result<ResamplePlan> {
    match kind {
        ResampleKind::Bootstrap => bootstrap_plan(n_train, n_models, seed),
        ResampleKind::CrossValidation => cv_plan(n_train, holdout_fraction, n_models, seed),
        ResampleKind::None => single_plan(n_train),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    Mlp,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BaseModel {
    Mlp(MlpModel),
    Linear(LinearModel),
}

impl BaseModel {
    pub fn predict(&self, f: &DMatrix<f64>) -> Result<Vec<f64>> {
        match self {
            BaseModel::Mlp(m) => m.predict(f),
            BaseModel::Linear(m) => predict_linear(m, f),
        }
    }
}

/// Settings shared by every member of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub base: BaseKind,
    pub projection: ProjectionKind,
    pub k: usize,
    pub include_temperature: bool,
    /// Fit a separate projection on each member's resampled rows.
    pub refit_per_member: bool,
    pub n_hidden: usize,
    pub train: TrainConfig,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            base: BaseKind::Mlp,
            projection: ProjectionKind::PlsX,
            k: 5,
            include_temperature: true,
            refit_per_member: false,
            n_hidden: 10,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub component_name: String,
    pub plan: ResamplePlan,
    pub features: FeatureSpec,
    /// Per-member projections; empty when all members share `features`.
    pub member_features: Vec<FeatureSpec>,
    pub members: Vec<BaseModel>,
}

/// Fits one model per plan member on the (already preprocessed) training
/// set. Members train independently and in parallel; member `j` draws its
/// initializations from stream `j` of `cfg.train.seed`.
pub fn fit_ensemble(
    train: &SampleSet,
    component: &str,
    plan: &ResamplePlan,
    cfg: &EnsembleConfig,
) -> Result<Ensemble> {
    if plan.n_train != train.n_samples() {
        return Err(Error::DimensionMismatch {
            what: "plan training size",
            expected: train.n_samples(),
            actual: plan.n_train,
        });
    }
    if plan.members.is_empty() {
        return Err(Error::invalid("plan has no members"));
    }
    let c = train.component_index(component)?;
    let y = train.target(c);
    let x = train.absorbance();
    let temps = train.temperatures();
    let features = FeatureSpec::fit(cfg.projection, x, temps, cfg.k, cfg.include_temperature)?;
    let shared = if cfg.refit_per_member {
        None
    } else {
        Some(features.project(x, temps)?)
    };

    let fitted: Vec<(Option<FeatureSpec>, BaseModel)> = plan
        .members
        .par_iter()
        .enumerate()
        .map(|(j, rows)| {
            fit_member(j, rows, x, temps, &y, shared.as_ref(), cfg).map_err(|e| Error::Member {
                member: j,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let mut member_features = Vec::new();
    let mut members = Vec::with_capacity(fitted.len());
    for (spec, model) in fitted {
        if let Some(s) = spec {
            member_features.push(s);
        }
        members.push(model);
    }
    Ok(Ensemble {
        component_name: component.to_string(),
        plan: plan.clone(),
        features,
        member_features,
        members,
    })
}

fn fit_member(
    j: usize,
    rows: &[usize],
    x: &DMatrix<f64>,
    temps: &[f64],
    y: &[f64],
    shared: Option<&DMatrix<f64>>,
    cfg: &EnsembleConfig,
) -> Result<(Option<FeatureSpec>, BaseModel)> {
    let yj: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
    let (spec, fj) = match shared {
        Some(f) => (None, f.select_rows(rows)),
        None => {
            let xj = x.select_rows(rows);
            let tj: Vec<f64> = rows.iter().map(|&i| temps[i]).collect();
            let spec = FeatureSpec::fit(cfg.projection, &xj, &tj, cfg.k, cfg.include_temperature)?;
            let fj = spec.project(&xj, &tj)?;
            (Some(spec), fj)
        }
    };
    let model = match cfg.base {
        BaseKind::Linear => BaseModel::Linear(fit_ols(&fj, &yj)?),
        BaseKind::Mlp => {
            let tc = TrainConfig {
                stream: j as u32,
                ..cfg.train.clone()
            };
            BaseModel::Mlp(train_restarts(&fj, &yj, cfg.n_hidden, &tc)?)
        }
    };
    Ok((spec, model))
}

impl Ensemble {
    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    pub fn grid_len(&self) -> usize {
        self.features.projection.n_points()
    }

    /// Member predictions, one row per sample and one column per member.
    pub fn predict_members(&self, x: &DMatrix<f64>, temps: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(x.nrows(), self.members.len());
        let shared = if self.member_features.is_empty() {
            Some(self.features.project(x, temps)?)
        } else {
            None
        };
        for (j, m) in self.members.iter().enumerate() {
            let preds = match &shared {
                Some(f) => m.predict(f)?,
                None => m.predict(&self.member_features[j].project(x, temps)?)?,
            };
            out.set_column(j, &nalgebra::DVector::from_vec(preds));
        }
        Ok(out)
    }

    pub fn predict_mean(&self, x: &DMatrix<f64>, temps: &[f64]) -> Result<Vec<f64>> {
        let p = self.predict_members(x, temps)?;
        Ok(p.row_iter().map(|r| mean(r.iter().copied())).collect())
    }

    pub fn predict_intervals(
        &self,
        x: &DMatrix<f64>,
        temps: &[f64],
        alpha: f64,
    ) -> Result<Vec<PredictionInterval>> {
        let p = self.predict_members(x, temps)?;
        p.row_iter()
            .map(|r| {
                let preds: Vec<f64> = r.iter().copied().collect();
                let m = mean(preds.iter().copied());
                confidence_interval(m, ensemble_sigma(&preds, m)?, alpha)
            })
            .collect()
    }
}

pub fn predict_members(e: &Ensemble, x: &DMatrix<f64>, temps: &[f64]) -> Result<DMatrix<f64>> {
    e.predict_members(x, temps)
}

pub fn predict_mean(e: &Ensemble, x: &DMatrix<f64>, temps: &[f64]) -> Result<Vec<f64>> {
    e.predict_mean(x, temps)
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len() as f64;
    values.sum::<f64>() / n
}

/// Arithmetic mean of member predictions.
pub fn ensemble_mean(predictions: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::invalid("no member predictions"));
    }
    Ok(mean(predictions.iter().copied()))
}

/// Population variance of the member predictions around `mean`.
pub fn ambiguity(predictions: &[f64], mean_value: f64) -> Result<f64> {
    let m = ensemble_mean(predictions)?;
    if (m - mean_value).abs() > 1e-9 * m.abs().max(1.0) {
        return Err(Error::invalid(format!(
            "supplied mean {mean_value} differs from the prediction mean {m}"
        )));
    }
    Ok(predictions
        .iter()
        .map(|y| (y - mean_value).powi(2))
        .sum::<f64>()
        / predictions.len() as f64)
}

pub fn ensemble_sigma(predictions: &[f64], mean_value: f64) -> Result<f64> {
    Ok(ambiguity(predictions, mean_value)?.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    /// `(ȳ - y)²`
    pub ensemble_sq_err: f64,
    /// `mean_i (y_i - y)²`
    pub mean_individual_sq_err: f64,
    /// `mean_i (y_i - ȳ)²`
    pub ambiguity: f64,
    /// `ensemble_sq_err - (mean_individual_sq_err - ambiguity)`; zero up to
    /// rounding.
    pub residual: f64,
}

pub fn decomposition_check(predictions: &[f64], true_y: f64) -> Result<Decomposition> {
    let m = ensemble_mean(predictions)?;
    let n = predictions.len() as f64;
    let ensemble_sq_err = (m - true_y).powi(2);
    let mean_individual_sq_err = predictions
        .iter()
        .map(|y| (y - true_y).powi(2))
        .sum::<f64>()
        / n;
    let a2 = ambiguity(predictions, m)?;
    Ok(Decomposition {
        ensemble_sq_err,
        mean_individual_sq_err,
        ambiguity: a2,
        residual: ensemble_sq_err - (mean_individual_sq_err - a2),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub mean: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub lower: f64,
    pub upper: f64,
}

impl PredictionInterval {
    pub fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

pub fn confidence_interval(mean: f64, sigma: f64, alpha: f64) -> Result<PredictionInterval> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!(
            "sigma {sigma} must be non-negative"
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha {alpha} must be positive")));
    }
    let half = alpha * sigma;
    Ok(PredictionInterval {
        mean,
        sigma,
        alpha,
        lower: mean - half,
        upper: mean + half,
    })
}
