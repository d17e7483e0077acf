//! Error metrics and the learning-curve experiment.
//!
//! The experiment starts from a random training subset and repeatedly moves
//! a fixed number of random test samples into it. At every size each method
//! is fitted on exactly the same preprocessed training rows and scored on
//! the same remaining test rows.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::{
    fit_ensemble, make_plan, BaseKind, EnsembleConfig, PredictionInterval, ResampleKind,
};
use crate::error::{Error, Result};
use crate::features::ProjectionKind;
use crate::linmodel::fit_pls_cv;
use crate::mlp::TrainConfig;
use crate::pipeline::{PreprocessConfig, Preprocessor};
use crate::rng::{name_hash, splitmix64};
use crate::spectra::{grow_train, split_indices, write_atomic, SampleSet};

/// Root mean squared difference between `actual` and `predicted`.
pub fn rmse(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    if actual.len() != predicted.len() {
        return Err(Error::DimensionMismatch {
            what: "rmse input length",
            expected: actual.len(),
            actual: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(Error::invalid("rmse of empty input"));
    }
    if actual.iter().chain(predicted).any(|v| !v.is_finite()) {
        return Err(Error::invalid("rmse of non-finite values"));
    }
    let sse: f64 = actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p).powi(2))
        .sum();
    Ok((sse / actual.len() as f64).sqrt())
}

/// Fraction of `actual` values inside their interval (bounds inclusive).
pub fn coverage(intervals: &[PredictionInterval], actual: &[f64]) -> Result<f64> {
    if intervals.len() != actual.len() {
        return Err(Error::DimensionMismatch {
            what: "coverage input length",
            expected: intervals.len(),
            actual: actual.len(),
        });
    }
    if actual.is_empty() {
        return Err(Error::invalid("coverage of empty input"));
    }
    let inside = intervals
        .iter()
        .zip(actual)
        .filter(|(i, y)| i.contains(**y))
        .count();
    Ok(inside as f64 / actual.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodBase {
    Mlp,
    Linear,
    /// Full-spectrum PLS1 with the factor count chosen by cross-validation.
    PlsBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub base: MethodBase,
    pub kind: ResampleKind,
    pub n_models: usize,
    pub holdout: f64,
    pub projection: ProjectionKind,
    pub k: usize,
}

impl MethodSpec {
    pub fn nn(name: &str, kind: ResampleKind, n_models: usize, projection: ProjectionKind) -> Self {
        MethodSpec {
            name: name.to_string(),
            base: MethodBase::Mlp,
            kind,
            n_models: if kind == ResampleKind::None {
                1
            } else {
                n_models
            },
            holdout: 0.2,
            projection,
            k: 5,
        }
    }

    pub fn pls_baseline(name: &str) -> Self {
        MethodSpec {
            name: name.to_string(),
            base: MethodBase::PlsBaseline,
            kind: ResampleKind::None,
            n_models: 1,
            holdout: 0.0,
            projection: ProjectionKind::PlsX,
            k: 0,
        }
    }
}

/// Bootstrap PLS-X, cross-validation PLS-X and bootstrap PCA ensembles,
/// the PLS baseline and a single network.
pub fn default_methods(n_models: usize) -> Vec<MethodSpec> {
    vec![
        MethodSpec::nn(
            "boot_plsx",
            ResampleKind::Bootstrap,
            n_models,
            ProjectionKind::PlsX,
        ),
        MethodSpec::nn(
            "cv_plsx",
            ResampleKind::CrossValidation,
            n_models,
            ProjectionKind::PlsX,
        ),
        MethodSpec::nn(
            "boot_pca",
            ResampleKind::Bootstrap,
            n_models,
            ProjectionKind::Pca,
        ),
        MethodSpec::pls_baseline("pls_cv"),
        MethodSpec::nn("single_plsx", ResampleKind::None, 1, ProjectionKind::PlsX),
    ]
}

/// Method names accepted by [`method_by_name`].
pub const METHOD_NAMES: &[&str] = &[
    "boot_plsx",
    "cv_plsx",
    "boot_pca",
    "cv_pca",
    "pls_cv",
    "single_plsx",
    "single_pca",
    "boot_linear_pca",
];

pub fn method_by_name(name: &str, n_models: usize) -> Option<MethodSpec> {
    use ProjectionKind::{Pca, PlsX};
    use ResampleKind::{Bootstrap, CrossValidation, None as Single};
    Some(match name {
        "boot_plsx" => MethodSpec::nn(name, Bootstrap, n_models, PlsX),
        "cv_plsx" => MethodSpec::nn(name, CrossValidation, n_models, PlsX),
        "boot_pca" => MethodSpec::nn(name, Bootstrap, n_models, Pca),
        "cv_pca" => MethodSpec::nn(name, CrossValidation, n_models, Pca),
        "pls_cv" => MethodSpec::pls_baseline(name),
        "single_plsx" => MethodSpec::nn(name, Single, 1, PlsX),
        "single_pca" => MethodSpec::nn(name, Single, 1, Pca),
        "boot_linear_pca" => MethodSpec {
            base: MethodBase::Linear,
            ..MethodSpec::nn(name, Bootstrap, n_models, Pca)
        },
        _ => return None,
    })
}

/// Settings shared by all methods of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSettings {
    pub preprocess: PreprocessConfig,
    pub n_hidden: usize,
    pub train: TrainConfig,
    pub include_temperature: bool,
    pub refit_per_member: bool,
    pub pls_max_factors: usize,
    pub pls_folds: usize,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            preprocess: PreprocessConfig::default(),
            n_hidden: 10,
            train: TrainConfig::default(),
            include_temperature: true,
            refit_per_member: false,
            pls_max_factors: 15,
            pls_folds: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub start: usize,
    pub step: usize,
    pub stop: usize,
}

impl Schedule {
    pub fn sizes(&self) -> Vec<usize> {
        (0..)
            .map(|i| self.start + i * self.step)
            .take_while(|s| *s <= self.stop)
            .collect()
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            start: 27,
            step: 30,
            stop: 267,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub seed: u64,
    pub schedule: Schedule,
    /// Evaluated training sizes (all schedule sizes unless restricted).
    pub sizes: Vec<usize>,
    pub methods: Vec<String>,
    pub components: Vec<String>,
    /// Test RMSE indexed `[component][size][method]`; `None` marks a failed
    /// cell.
    pub rmse: Vec<Vec<Vec<Option<f64>>>>,
}

impl LearningCurve {
    pub fn cell(&self, component: &str, size: usize, method: &str) -> Option<f64> {
        let c = self.components.iter().position(|v| v == component)?;
        let s = self.sizes.iter().position(|v| *v == size)?;
        let m = self.methods.iter().position(|v| v == method)?;
        self.rmse[c][s][m]
    }
}

/// Seed for one (method, size, component) cell.
pub fn cell_seed(seed: u64, method: &str, size: usize, component: usize) -> u64 {
    splitmix64(splitmix64(seed ^ name_hash(method)) ^ ((size as u64) << 16 | component as u64))
}

/// Training index sets for every schedule size, each a superset of the
/// previous one.
pub fn training_sets(
    n: usize,
    schedule: &Schedule,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if schedule.start < 1 || schedule.step < 1 {
        return Err(Error::invalid("schedule needs start >= 1 and step >= 1"));
    }
    if schedule.stop + 1 > n {
        return Err(Error::invalid(format!(
            "schedule stop {} leaves no test samples out of {n}",
            schedule.stop
        )));
    }
    let sizes = schedule.sizes();
    if sizes.is_empty() {
        return Err(Error::invalid("schedule is empty"));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut cur = split_indices(n, schedule.start, seed)?;
    out.push(cur.clone());
    for _ in 1..sizes.len() {
        cur = grow_train(&cur.0, &cur.1, schedule.step, seed)?;
        out.push(cur.clone());
    }
    Ok(out)
}

fn check_methods(methods: &[MethodSpec]) -> Result<()> {
    if methods.is_empty() {
        return Err(Error::invalid("no methods given"));
    }
    for (i, m) in methods.iter().enumerate() {
        if methods[..i].iter().any(|o| o.name == m.name) {
            return Err(Error::invalid(format!(
                "duplicate method name `{}`",
                m.name
            )));
        }
    }
    Ok(())
}

fn fit_and_score(
    method: &MethodSpec,
    train: &SampleSet,
    test: &SampleSet,
    component: &str,
    seed: u64,
    settings: &ExperimentSettings,
) -> Result<f64> {
    let c = train.component_index(component)?;
    let actual = test.target(c);
    let predicted = match method.base {
        MethodBase::PlsBaseline => {
            let model = fit_pls_cv(
                train.absorbance(),
                &train.target(c),
                settings
                    .pls_max_factors
                    .min(train.n_samples().saturating_sub(2))
                    .max(1),
                settings.pls_folds.min(train.n_samples()),
                seed,
            )?;
            model.predict(test.absorbance())?
        }
        MethodBase::Mlp | MethodBase::Linear => {
            let plan = make_plan(
                method.kind,
                train.n_samples(),
                method.n_models,
                method.holdout,
                seed,
            )?;
            let cfg = EnsembleConfig {
                base: if method.base == MethodBase::Mlp {
                    BaseKind::Mlp
                } else {
                    BaseKind::Linear
                },
                projection: method.projection,
                k: method.k,
                include_temperature: settings.include_temperature,
                refit_per_member: settings.refit_per_member,
                n_hidden: settings.n_hidden,
                train: TrainConfig {
                    seed,
                    ..settings.train.clone()
                },
            };
            let e = fit_ensemble(train, component, &plan, &cfg)?;
            e.predict_mean(test.absorbance(), test.temperatures())?
        }
    };
    rmse(&actual, &predicted)
}

/// Runs the learning-curve experiment. `only_sizes` restricts evaluation to
/// a subset of the schedule; the growth path is the same either way.
pub fn run_learning_curve(
    data: &SampleSet,
    methods: &[MethodSpec],
    schedule: &Schedule,
    components: &[String],
    seed: u64,
    settings: &ExperimentSettings,
    only_sizes: Option<&[usize]>,
) -> Result<LearningCurve> {
    check_methods(methods)?;
    if components.is_empty() {
        return Err(Error::invalid("no components given"));
    }
    let comp_idx: Vec<usize> = components
        .iter()
        .map(|c| data.component_index(c))
        .collect::<Result<_>>()?;
    let sets = training_sets(data.n_samples(), schedule, seed)?;
    let mut sizes = Vec::new();
    let mut cells: Vec<Vec<Vec<Option<f64>>>> = vec![Vec::new(); components.len()];
    let mut any_ok = false;
    for (size, (train_idx, test_idx)) in schedule.sizes().into_iter().zip(&sets) {
        if only_sizes.is_some_and(|s| !s.contains(&size)) {
            continue;
        }
        sizes.push(size);
        let prepared = Preprocessor::fit(&settings.preprocess, &data.subset(train_idx))
            .and_then(|(pre, train)| Ok((pre.apply(&data.subset(test_idx))?, train)));
        for (ci, comp) in components.iter().enumerate() {
            let row: Vec<Option<f64>> = methods
                .iter()
                .map(|m| {
                    let (test, train) = prepared.as_ref().ok()?;
                    let s = cell_seed(seed, &m.name, size, comp_idx[ci]);
                    fit_and_score(m, train, test, comp, s, settings).ok()
                })
                .collect();
            any_ok |= row.iter().any(Option::is_some);
            cells[ci].push(row);
        }
    }
    if sizes.is_empty() {
        return Err(Error::invalid("no schedule size selected for evaluation"));
    }
    if !any_ok {
        return Err(Error::Numerical("every learning-curve cell failed".into()));
    }
    Ok(LearningCurve {
        seed,
        schedule: schedule.clone(),
        sizes,
        methods: methods.iter().map(|m| m.name.clone()).collect(),
        components: components.to_vec(),
        rmse: cells,
    })
}

/// CSV table for one component: `size,<methods>` with 5-decimal cells and
/// `NA` for failures.
pub fn format_curve_csv(curve: &LearningCurve, component: usize) -> String {
    let mut out = String::from("size");
    for m in &curve.methods {
        out.push(',');
        out.push_str(m);
    }
    out.push('\n');
    for (s, size) in curve.sizes.iter().enumerate() {
        out.push_str(&size.to_string());
        for v in &curve.rmse[component][s] {
            match v {
                Some(x) => out.push_str(&format!(",{x:.5}")),
                None => out.push_str(",NA"),
            }
        }
        out.push('\n');
    }
    out
}

/// Writes `<dir>/<stem>_<component>.csv` for every component.
pub fn export_curve(curve: &LearningCurve, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    if curve.methods.is_empty() || curve.sizes.is_empty() {
        return Err(Error::invalid("cannot export an empty learning curve"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    curve
        .components
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let path = dir.join(format!("{stem}_{name}.csv"));
            write_atomic(&path, format_curve_csv(curve, c).as_bytes())?;
            Ok(path)
        })
        .collect()
}

/// Cell-wise mean over repeated runs of the same experiment layout,
/// ignoring failed cells.
pub fn mean_curve(curves: &[LearningCurve]) -> Result<LearningCurve> {
    let first = curves
        .first()
        .ok_or_else(|| Error::invalid("no curves to average"))?;
    for c in curves {
        if c.sizes != first.sizes || c.methods != first.methods || c.components != first.components
        {
            return Err(Error::invalid("curves have different layouts"));
        }
    }
    let mut out = first.clone();
    for (ci, comp) in out.rmse.iter_mut().enumerate() {
        for (si, row) in comp.iter_mut().enumerate() {
            for (mi, cell) in row.iter_mut().enumerate() {
                let vals: Vec<f64> = curves.iter().filter_map(|c| c.rmse[ci][si][mi]).collect();
                *cell = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::confidence_interval;
    use crate::synthgen::{generate, GenConfig};

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(rmse(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn coverage_examples() {
        let iv: Vec<_> = (0..60)
            .map(|i| confidence_interval(i as f64, 1.0, 2.0).unwrap())
            .collect();
        let at_mean: Vec<f64> = (0..60).map(|i| i as f64).collect();
        assert_eq!(coverage(&iv, &at_mean).unwrap(), 1.0);
        let mixed: Vec<f64> = (0..60)
            .map(|i| i as f64 + if i < 12 { 5.0 } else { 0.5 })
            .collect();
        assert_eq!(coverage(&iv, &mixed).unwrap(), 0.8);
        let zero: Vec<_> = (0..5)
            .map(|_| confidence_interval(1.0, 0.0, 2.0).unwrap())
            .collect();
        assert_eq!(coverage(&zero, &[2.0; 5]).unwrap(), 0.0);
        assert_eq!(coverage(&zero, &[1.0; 5]).unwrap(), 1.0);
        assert!(coverage(&zero, &[1.0; 4]).is_err());
    }

    #[test]
    fn table_schedule() {
        assert_eq!(
            Schedule::default().sizes(),
            vec![27, 57, 87, 117, 147, 177, 207, 237, 267]
        );
        let sets = training_sets(493, &Schedule::default(), 3).unwrap();
        for w in sets.windows(2) {
            assert!(w[0].0.iter().all(|i| w[1].0.contains(i)));
        }
        assert!(sets.iter().all(|(tr, te)| tr.len() + te.len() == 493));
        assert!(training_sets(
            100,
            &Schedule {
                start: 10,
                step: 10,
                stop: 100
            },
            0
        )
        .is_err());
    }

    fn small_run(seed: u64) -> LearningCurve {
        let data = generate(&GenConfig {
            n_samples: 60,
            ..GenConfig::default()
        })
        .unwrap();
        let methods = vec![
            MethodSpec {
                n_models: 3,
                ..MethodSpec::nn("boot", ResampleKind::Bootstrap, 3, ProjectionKind::PlsX)
            },
            MethodSpec::pls_baseline("pls"),
        ];
        let settings = ExperimentSettings {
            train: TrainConfig {
                n_restarts: 2,
                max_epochs: 5,
                ..TrainConfig::default()
            },
            ..ExperimentSettings::default()
        };
        run_learning_curve(
            &data,
            &methods,
            &Schedule {
                start: 20,
                step: 10,
                stop: 30,
            },
            &["c1".to_string()],
            seed,
            &settings,
            None,
        )
        .unwrap()
    }

    #[test]
    fn curve_is_deterministic_and_exports() {
        let a = small_run(4);
        let b = small_run(4);
        assert_eq!(a, b);
        assert_eq!(a.sizes, vec![20, 30]);
        assert!(a.rmse[0].iter().flatten().all(Option::is_some));
        let dir = tempfile::tempdir().unwrap();
        let p1 = export_curve(&a, dir.path(), "rmse").unwrap();
        let first = std::fs::read(&p1[0]).unwrap();
        export_curve(&b, dir.path(), "rmse").unwrap();
        assert_eq!(first, std::fs::read(&p1[0]).unwrap());
        let text = String::from_utf8(first).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "size,boot,pls");
        assert_eq!(lines.len(), 3);
        assert!(
            lines[1]
                .split(',')
                .nth(1)
                .unwrap()
                .split('.')
                .nth(1)
                .unwrap()
                .len()
                == 5
        );
    }

    #[test]
    fn failed_cells_are_na() {
        let mut c = small_run(1);
        c.rmse[0][0][1] = None;
        let csv = format_curve_csv(&c, 0);
        assert!(csv.lines().nth(1).unwrap().ends_with(",NA"));
        let m = mean_curve(&[c.clone(), c.clone()]).unwrap();
        assert_eq!(m.rmse[0][0][1], None);
        assert_eq!(m.rmse[0][1][1], c.rmse[0][1][1]);
    }

    #[test]
    fn empty_methods_rejected() {
        let data = generate(&GenConfig {
            n_samples: 30,
            ..GenConfig::default()
        })
        .unwrap();
        let r = run_learning_curve(
            &data,
            &[],
            &Schedule {
                start: 10,
                step: 5,
                stop: 20,
            },
            &["c1".to_string()],
            0,
            &ExperimentSettings::default(),
            None,
        );
        assert!(r.is_err());
    }
}
